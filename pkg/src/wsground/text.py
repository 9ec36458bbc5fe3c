"""Rule-based phrase chunking, vocabulary, and the recurrent phrase/caption encoder."""

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn.utils.rnn import pack_sequence, pad_packed_sequence

UNK = "<unk>"
COORDINATORS = frozenset({"and", ","})
PREPOSITIONS = frozenset({"in", "on", "from", "with"})
MULTIWORD_PREPOSITIONS = (("next", "to"),)


@dataclass(frozen=True)
class PhraseRecord:
    tokens: tuple
    k: int
    start: int = 0

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("phrase must contain at least one token")


def _connective_length(tokens, i):
    if tokens[i] in COORDINATORS or tokens[i] in PREPOSITIONS:
        return 1
    for multi in MULTIWORD_PREPOSITIONS:
        if tuple(tokens[i:i + len(multi)]) == multi:
            return len(multi)
    return 0


def chunk_caption(tokens):
    """Split a caption into ordered phrases at coordinators and prepositions.

    Connective tokens are dropped; everything between them forms a phrase, so
    verb/object groups such as ``cat drinking water`` stay together. A caption
    consisting only of connectives becomes a single phrase.
    """
    tokens = list(tokens)
    if not tokens:
        raise ValueError("cannot chunk an empty caption")
    phrases = []
    current, start = [], 0
    i = 0
    while i < len(tokens):
        n = _connective_length(tokens, i)
        if n:
            if current:
                phrases.append(PhraseRecord(tuple(current), len(phrases), start))
            current = []
            i += n
            start = i
        else:
            current.append(tokens[i])
            i += 1
    if current:
        phrases.append(PhraseRecord(tuple(current), len(phrases), start))
    if not phrases:
        phrases.append(PhraseRecord(tuple(tokens), 0, 0))
    return phrases


class Vocabulary:
    """Sorted token list; id 0 is reserved for unknown tokens."""

    def __init__(self, tokens):
        self.tokens = sorted(set(tokens) - {UNK})
        self._ids = {tok: i + 1 for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens) + 1

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token):
        return self._ids.get(token, 0)

    def encode(self, tokens):
        return [self.id(t) for t in tokens]

    def save(self, path):
        # Line number equals token id; line 0 holds the UNK placeholder.
        with open(path, "w") as f:
            f.write("\n".join([UNK] + self.tokens) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            lines = [line.rstrip("\n") for line in f if line.strip()]
        if lines and lines[0] == UNK:
            lines = lines[1:]
        vocab = cls(lines)
        if vocab.tokens != lines:
            raise ValueError(f"vocabulary file {path} is not sorted and deduplicated")
        return vocab


class TextEncoder(nn.Module):
    """Word embeddings trained from scratch feeding a stacked bidirectional GRU.

    The sequence embedding is the concatenation of the top layer's final
    forward and backward states, so ``out_dim == 2 * hidden``. Sequences are
    packed, never padded, so each one is processed exactly.
    """

    def __init__(self, vocab_size, embed_dim=32, hidden=32, num_layers=2):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, embed_dim)
        self.gru = nn.GRU(embed_dim, hidden, num_layers=num_layers, bidirectional=True, batch_first=True)
        self.hidden = hidden
        self.out_dim = 2 * hidden

    def _pack(self, id_seqs):
        if not id_seqs:
            raise ValueError("no sequences to encode")
        device = self.embed.weight.device
        embedded = []
        for seq in id_seqs:
            if len(seq) == 0:
                raise ValueError("cannot encode an empty token sequence")
            embedded.append(self.embed(torch.as_tensor(seq, dtype=torch.long, device=device)))
        return pack_sequence(embedded, enforce_sorted=False)

    def forward(self, id_seqs):
        """Encode a list of id sequences into an ``(N, 2*hidden)`` tensor."""
        _, h_n = self.gru(self._pack(id_seqs))
        return torch.cat([h_n[-2], h_n[-1]], dim=-1)

    def contextual(self, id_seqs):
        """Per-token top-layer outputs: list of ``(L_i, 2*hidden)`` tensors."""
        out, lengths = pad_packed_sequence(self.gru(self._pack(id_seqs))[0], batch_first=True)
        return [out[i, : int(n)] for i, n in enumerate(lengths)]


def encode_phrase(phrase, encoder, vocab):
    return encoder([vocab.encode(phrase.tokens)])[0]


def encode_caption(tokens, encoder, vocab):
    if not tokens:
        raise ValueError("cannot encode an empty caption")
    return encoder([vocab.encode(tokens)])[0]
