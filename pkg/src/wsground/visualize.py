"""Box overlays: every region in grey, the predicted region per phrase in colour, gold boxes in red."""

from PIL import Image, ImageDraw

PALETTE = [(0, 170, 255), (255, 140, 0), (0, 190, 90), (200, 0, 200), (120, 80, 40), (0, 120, 120)]


def render_overlay(scene, phrases, predicted, gold=None, canvas=(128, 128), scale=4):
    """Draw one caption's grounding. ``predicted[k]`` is the region index for phrase ``k``."""
    w, h = canvas
    img = Image.new("RGB", (w * scale, h * scale + 14 * (len(phrases) + 1)), "white")
    draw = ImageDraw.Draw(img)

    def rect(box, color, width):
        draw.rectangle([box.x1 * scale, box.y1 * scale, box.x2 * scale, box.y2 * scale], outline=color, width=width)

    for region in scene.regions:
        rect(region.box, (190, 190, 190), 1)
    for g in gold or []:
        rect(g.box, (230, 0, 0), 3)
    for k, j in enumerate(predicted):
        color = PALETTE[k % len(PALETTE)]
        box = scene.regions[j].box
        rect(box, color, 2)
        draw.text((box.x1 * scale + 3, box.y1 * scale + 2), str(k), fill=color)
        draw.text((4, h * scale + 4 + 14 * k), f"{k}: {' '.join(phrases[k].tokens)}", fill=color)
    if gold:
        draw.text((4, h * scale + 4 + 14 * len(phrases)), "red: gold", fill=(230, 0, 0))
    return img
