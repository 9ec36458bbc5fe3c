"""Scene records, the synthetic shape world, and the on-disk manifest format."""

import dataclasses
import hashlib
import json
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from wsground.blobs import BlobError, decode_blob, encode_blob

MANIFEST_FORMAT = "wsground-manifest/1"
FEATURES_FILE = "features.bin"
MIN_SIDE = 8.0


class DatasetError(ValueError):
    """Invalid world config or inconsistent manifest/blob pair.

    ``field`` names the offending manifest or config field.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DatasetError(f"degenerate box {self.as_list()}", field="box")

    def as_list(self):
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def center(self):
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def within(self, width, height):
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width and self.y2 <= height


@dataclass(eq=False)
class RegionFeature:
    box: BoundingBox
    feature: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, RegionFeature):
            return NotImplemented
        return self.box == other.box and np.array_equal(self.feature, other.feature)


@dataclass(frozen=True)
class GoldAlignment:
    caption_index: int
    phrase_index: int
    region_index: int
    box: BoundingBox


@dataclass
class SceneRecord:
    scene_id: str
    regions: list
    captions: list
    gold_alignments: list = field(default_factory=list)

    @property
    def num_regions(self):
        return len(self.regions)

    def features(self):
        return np.stack([r.feature for r in self.regions])

    def boxes(self):
        return [r.box for r in self.regions]


@dataclass
class DatasetManifest:
    split: str
    d_v: int
    canvas: tuple
    vocabulary: list
    features_file: str
    offsets: list
    generator_seed: int = None
    config_digest: str = None


@dataclass
class WorldConfig:
    """Synthetic shape-world parameters.

    Object regions carry concatenated one-hot blocks ``[color | shape | size]``
    plus Gaussian noise of scale ``sigma``; every other region up to ``R`` is a
    distractor with a random unit-norm feature.
    """

    canvas: tuple = (128, 128)
    objects_min: int = 1
    objects_max: int = 3
    distractors: int = 3
    colors: tuple = ("blue", "green", "orange", "purple", "red", "yellow")
    shapes: tuple = ("circle", "cross", "square", "star", "triangle", "heart")
    sizes: tuple = ("small", "medium", "large")
    sigma: float = 0.1
    R: int = 6
    num_scenes: int = 100
    captions_per_scene: int = 2
    joiners: tuple = (",", "and", "next to", "with")
    noise_phrase_prob: float = 0.0
    noise_words: tuple = ("picture", "room", "scene")
    max_overlap: float = 0.3

    @property
    def d_v(self):
        return len(self.colors) + len(self.shapes) + len(self.sizes)

    def validate(self):
        if not self.colors or not self.shapes or not self.sizes:
            raise DatasetError("empty attribute vocabulary", field="vocabulary")
        if self.objects_min < 1 or self.objects_max < self.objects_min:
            raise DatasetError("objects_min/objects_max must satisfy 1 <= min <= max", field="objects")
        if self.objects_max > len(self.colors) * len(self.shapes):
            raise DatasetError("more objects than distinct color/shape pairs", field="objects_max")
        if self.R < self.objects_max + self.distractors:
            raise DatasetError(
                f"R={self.R} smaller than objects_max + distractors = {self.objects_max + self.distractors}",
                field="R",
            )
        if self.sigma < 0:
            raise DatasetError("sigma must be non-negative", field="sigma")
        if self.captions_per_scene < 1:
            raise DatasetError("captions_per_scene must be >= 1", field="captions_per_scene")
        if self.noise_phrase_prob > 0 and not self.noise_words:
            raise DatasetError("noise phrases requested without noise_words", field="noise_words")
        w, h = self.canvas
        if min(w, h) < 2 * MIN_SIDE:
            raise DatasetError("canvas too small", field="canvas")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise DatasetError(f"unknown world config keys: {sorted(unknown)}", field=sorted(unknown)[0])
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def vocabulary(self):
        tokens = {"a", "in"}
        for joiner in self.joiners:
            tokens.update(joiner.split())
        tokens.update(self.colors)
        tokens.update(self.shapes)
        tokens.update(self.sizes)
        tokens.update(self.noise_words)
        return sorted(tokens)


def _box_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _sample_box(rng, side_range, canvas):
    w, h = canvas
    lo, hi = side_range
    bw = float(rng.integers(int(lo), int(hi) + 1))
    bh = float(rng.integers(int(lo), int(hi) + 1))
    x1 = float(rng.integers(0, int(w - bw) + 1))
    y1 = float(rng.integers(0, int(h - bh) + 1))
    return (x1, y1, x1 + bw, y1 + bh)


def _size_ranges(config):
    top = min(config.canvas) / 2
    edges = np.linspace(MIN_SIDE, top, len(config.sizes) + 1)
    return [(float(np.floor(edges[i])), float(np.floor(edges[i + 1]))) for i in range(len(config.sizes))]


def _place_boxes(rng, ranges, config):
    placed = []
    for side_range in ranges:
        for _ in range(2000):
            cand = _sample_box(rng, side_range, config.canvas)
            if all(_box_iou(cand, other) < config.max_overlap for other in placed):
                placed.append(cand)
                break
        else:
            raise DatasetError("could not place non-overlapping boxes; enlarge canvas or raise max_overlap",
                               field="max_overlap")
    return placed


def _scene_rng(seed, split, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(split.encode()), int(index)]))


def object_feature(config, color, shape, size):
    """Noiseless attribute encoding of one object."""
    vec = np.zeros(config.d_v)
    vec[config.colors.index(color)] = 1.0
    vec[len(config.colors) + config.shapes.index(shape)] = 1.0
    vec[len(config.colors) + len(config.shapes) + config.sizes.index(size)] = 1.0
    return vec


def _generate_scene(config, seed, split, index):
    rng = _scene_rng(seed, split, index)
    n_obj = int(rng.integers(config.objects_min, config.objects_max + 1))
    pairs = [(c, s) for c in config.colors for s in config.shapes]
    chosen = rng.choice(len(pairs), size=n_obj, replace=False)
    objects = []
    for pi in chosen:
        color, shape = pairs[pi]
        size = config.sizes[int(rng.integers(len(config.sizes)))]
        objects.append((color, shape, size))

    R = config.R
    order = rng.permutation(R)  # order[slot] -> region index
    obj_region = [int(order[i]) for i in range(n_obj)]
    size_ranges = _size_ranges(config)
    ranges = [None] * R
    for i, (_, _, size) in enumerate(objects):
        ranges[obj_region[i]] = size_ranges[config.sizes.index(size)]
    for j in range(R):
        if ranges[j] is None:
            ranges[j] = (MIN_SIDE, size_ranges[-1][1])
    boxes = _place_boxes(rng, ranges, config)

    feats = np.empty((R, config.d_v))
    obj_of_region = {r: i for i, r in enumerate(obj_region)}
    for j in range(R):
        if j in obj_of_region:
            color, shape, size = objects[obj_of_region[j]]
            noise = rng.standard_normal(config.d_v) * config.sigma
            feats[j] = object_feature(config, color, shape, size) + noise
        else:
            v = rng.standard_normal(config.d_v)
            feats[j] = v / np.linalg.norm(v)
    feats = feats.astype(np.float32)
    regions = [RegionFeature(BoundingBox(*boxes[j]), feats[j]) for j in range(R)]

    captions, gold = [], []
    for ci in range(config.captions_per_scene):
        obj_order = rng.permutation(n_obj)
        tokens = []
        for pos, oi in enumerate(obj_order):
            color, shape, size = objects[oi]
            if pos > 0:
                tokens.extend(config.joiners[int(rng.integers(len(config.joiners)))].split())
            phrase = ["a", size, color, shape] if rng.random() < 0.5 else ["a", color, shape]
            tokens.extend(phrase)
            j = obj_region[oi]
            gold.append(GoldAlignment(ci, pos, j, regions[j].box))
        if config.noise_phrase_prob > 0 and rng.random() < config.noise_phrase_prob:
            tokens.extend(["in", "a", config.noise_words[int(rng.integers(len(config.noise_words)))]])
        captions.append(tokens)
    return SceneRecord(f"{split}-{seed}-{index:06d}", regions, captions, gold)


def generate_world(config, seed, split="train"):
    """Generate ``config.num_scenes`` scenes; deterministic in ``(config, seed, split)``.

    Each scene draws from its own seed derived from ``(seed, split, index)`` so
    scenes can be produced independently.
    """
    config.validate()
    return [_generate_scene(config, seed, split, i) for i in range(config.num_scenes)]


def _box_from_list(values, where):
    try:
        return BoundingBox(*[float(v) for v in values])
    except (TypeError, DatasetError) as exc:
        raise DatasetError(f"bad box at {where}: {values!r}", field="boxes") from exc


def save_dataset(scenes, path, *, split="train", d_v=None, canvas=(128, 128), vocabulary=None,
                 seed=None, config_digest=None):
    """Write ``manifest.json`` and ``features.bin`` into directory ``path``.

    Gold alignments are dropped for ``split == "train"``.
    """
    os.makedirs(path, exist_ok=True)
    if d_v is None:
        d_v = int(scenes[0].regions[0].feature.shape[0]) if scenes else 0
    if vocabulary is None:
        vocabulary = sorted({tok for s in scenes for cap in s.captions for tok in cap})
    else:
        vocabulary = sorted(set(vocabulary))

    entries = []
    chunks = []
    offset = 0
    for scene in scenes:
        feats = scene.features() if scene.regions else np.zeros((0, d_v), dtype=np.float32)
        if feats.shape[1] != d_v:
            raise DatasetError(f"feature width mismatch in scene {scene.scene_id}: {feats.shape[1]} != {d_v}",
                               field="d_v")
        blob = encode_blob(feats)
        entry = {
            "scene_id": scene.scene_id,
            "offset": offset,
            "boxes": [r.box.as_list() for r in scene.regions],
            "captions": [list(c) for c in scene.captions],
        }
        if split != "train":
            entry["gold_alignments"] = [
                [g.caption_index, g.phrase_index, g.region_index, g.box.as_list()] for g in scene.gold_alignments
            ]
        entries.append(entry)
        chunks.append(blob)
        offset += len(blob)

    manifest = {
        "format": MANIFEST_FORMAT,
        "split": split,
        "d_v": int(d_v),
        "canvas": [int(canvas[0]), int(canvas[1])],
        "vocabulary": vocabulary,
        "features_file": FEATURES_FILE,
        "generator_seed": seed,
        "config_digest": config_digest,
        "scenes": entries,
    }
    with open(os.path.join(path, FEATURES_FILE), "wb") as f:
        f.write(b"".join(chunks))
    manifest_path = os.path.join(path, "manifest.json")
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    return manifest_path


def _resolve_manifest(path):
    return os.path.join(path, "manifest.json") if os.path.isdir(path) else path


def read_manifest(path):
    """Parse the manifest JSON only; returns ``(DatasetManifest, raw_dict)``."""
    manifest_path = _resolve_manifest(path)
    if not os.path.exists(manifest_path):
        raise DatasetError(f"manifest not found: {manifest_path}", field="path")
    with open(manifest_path) as f:
        raw = json.load(f)
    if raw.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"unknown manifest format {raw.get('format')!r}", field="format")
    for key in ("split", "d_v", "canvas", "vocabulary", "features_file", "scenes"):
        if key not in raw:
            raise DatasetError(f"manifest missing field {key!r}", field=key)
    info = DatasetManifest(
        split=raw["split"],
        d_v=int(raw["d_v"]),
        canvas=tuple(raw["canvas"]),
        vocabulary=list(raw["vocabulary"]),
        features_file=raw["features_file"],
        offsets=[int(e["offset"]) for e in raw["scenes"]],
        generator_seed=raw.get("generator_seed"),
        config_digest=raw.get("config_digest"),
    )
    return info, raw


def load_dataset(path):
    """Load every scene described by a manifest (file path or its directory)."""
    manifest_path = _resolve_manifest(path)
    info, raw = read_manifest(manifest_path)
    blob_path = os.path.join(os.path.dirname(manifest_path), info.features_file)
    if not os.path.exists(blob_path):
        raise DatasetError(f"feature blob not found: {blob_path}", field="features_file")
    with open(blob_path, "rb") as f:
        buf = f.read()

    scenes = []
    for idx, entry in enumerate(raw["scenes"]):
        try:
            feats, _ = decode_blob(buf, int(entry["offset"]))
        except BlobError as exc:
            raise DatasetError(f"scene {idx} ({entry.get('scene_id')}): {exc}", field=exc.field) from exc
        boxes = entry["boxes"]
        if feats.ndim != 2 or feats.shape[0] != len(boxes):
            raise DatasetError(
                f"region count mismatch in scene {entry['scene_id']}: blob has shape {feats.shape}, "
                f"manifest lists {len(boxes)} boxes",
                field="boxes",
            )
        if feats.shape[1] != info.d_v:
            raise DatasetError(
                f"feature width mismatch in scene {entry['scene_id']}: manifest d_v={info.d_v}, "
                f"blob row stride implies {feats.shape[1]}",
                field="d_v",
            )
        regions = [
            RegionFeature(_box_from_list(b, f"{entry['scene_id']}[{j}]"), feats[j].copy())
            for j, b in enumerate(boxes)
        ]
        gold = []
        for cap_i, k, j, box in entry.get("gold_alignments", []):
            if not 0 <= j < len(regions):
                raise DatasetError(f"gold region index {j} out of range in {entry['scene_id']}",
                                   field="gold_alignments")
            gold.append(GoldAlignment(int(cap_i), int(k), int(j), _box_from_list(box, entry["scene_id"])))
        scenes.append(SceneRecord(entry["scene_id"], regions, [list(c) for c in entry["captions"]], gold))
    return scenes


def scenes_from_arrays(scene_ids, boxes, features, captions):
    """Build scenes from precomputed region arrays (adapter for real detector output).

    ``boxes[i]`` is an ``(R_i, 4)`` array of ``x1, y1, x2, y2``; ``features[i]`` is
    ``(R_i, d_v)``; ``captions[i]`` is a list of token lists. Pass the result to
    :func:`save_dataset` to obtain a manifest in the format the CLI consumes.
    """
    scenes = []
    for sid, b, x, caps in zip(scene_ids, boxes, features, captions):
        x = np.asarray(x, dtype=np.float32)
        regions = [RegionFeature(BoundingBox(*map(float, bb)), x[j]) for j, bb in enumerate(np.asarray(b))]
        scenes.append(SceneRecord(str(sid), regions, [list(c) for c in caps]))
    return scenes


def dataset_digest(path):
    """SHA-256 over the manifest and blob bytes."""
    manifest_path = _resolve_manifest(path)
    info, _ = read_manifest(manifest_path)
    h = hashlib.sha256()
    with open(manifest_path, "rb") as f:
        h.update(f.read())
    with open(os.path.join(os.path.dirname(manifest_path), info.features_file), "rb") as f:
        h.update(f.read())
    return h.hexdigest()
