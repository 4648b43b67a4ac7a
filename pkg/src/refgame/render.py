"""Deterministic rasterizer: draws a synthetic object as a cartoon airplane
so human listeners can play the reference game on real pixels.

Slot mapping: background fills the canvas, body_color fills the fuselage
(and its nose/tail extensions), size scales the fuselage, nose picks a
triangle or semicircle front, engines draws that many circles under the
body, tail picks a low or tall fin. Geometry is pure integer arithmetic in
canvas units, so the same object always produces identical bytes.
"""

from __future__ import annotations

from PIL import Image, ImageDraw

from .errors import ParseError, UnknownSlotValue
from .synthworld import SynthObject

BACKGROUND_COLORS = {
    "sky": (135, 206, 235),
    "grass": (110, 190, 90),
    "concrete": (168, 168, 168),
}

BODY_COLORS = {
    "red": (214, 55, 46),
    "blue": (52, 88, 214),
    "green": (46, 158, 72),
    "white": (244, 244, 244),
    "black": (34, 34, 34),
}

SIZE_SCALE = {"small": 0.42, "medium": 0.58, "large": 0.74}

ENGINE_COUNT = {"one": 1, "two": 2, "three": 3}

ENGINE_COLOR = (90, 90, 100)
OUTLINE_COLOR = (20, 20, 20)


def _pick(table: dict, slot: str, value: str):
    try:
        return table[value]
    except KeyError:
        raise UnknownSlotValue(f"slot {slot!r} has no rendering for value {value!r}") from None


def render_image(obj: SynthObject, size_px: int = 128) -> Image.Image:
    if size_px < 64:
        raise ParseError(f"size_px must be >= 64, got {size_px}")
    a = obj.assignment
    background = _pick(BACKGROUND_COLORS, "background", a["background"])
    body = _pick(BODY_COLORS, "body_color", a["body_color"])
    scale = _pick(SIZE_SCALE, "size", a["size"])
    engines = _pick(ENGINE_COUNT, "engines", a["engines"])
    if a["nose"] not in ("pointy", "round"):
        raise UnknownSlotValue(f"slot 'nose' has no rendering for value {a['nose']!r}")
    if a["tail"] not in ("flat", "tall"):
        raise UnknownSlotValue(f"slot 'tail' has no rendering for value {a['tail']!r}")

    img = Image.new("RGB", (size_px, size_px), background)
    draw = ImageDraw.Draw(img)

    cx, cy = size_px // 2, size_px // 2
    half_len = int(size_px * scale / 2)
    half_h = max(3, int(half_len * 0.28))
    left, right = cx - half_len, cx + half_len
    top, bottom = cy - half_h, cy + half_h

    # fuselage
    draw.ellipse([left, top, right, bottom], fill=body, outline=OUTLINE_COLOR)

    # nose anchored at the right end of the fuselage
    nose_w = max(4, half_len // 3)
    if a["nose"] == "pointy":
        draw.polygon(
            [(right - 2, top), (right - 2 + nose_w, cy), (right - 2, bottom)],
            fill=body,
            outline=OUTLINE_COLOR,
        )
    else:
        draw.pieslice(
            [right - nose_w, top, right + nose_w, bottom], -90, 90,
            fill=body, outline=OUTLINE_COLOR,
        )

    # tail fin at the left end
    fin_w = max(3, half_len // 4)
    if a["tail"] == "tall":
        draw.polygon(
            [(left, cy), (left, top - 2 * half_h), (left + 2 * fin_w, top), (left + 2 * fin_w, cy)],
            fill=body,
            outline=OUTLINE_COLOR,
        )
    else:
        draw.rectangle(
            [left - fin_w, cy - half_h // 2, left + fin_w, cy + half_h // 2],
            fill=body,
            outline=OUTLINE_COLOR,
        )

    # engines as circles under the body
    radius = max(2, half_h // 2)
    span = right - left - 2 * radius
    for i in range(engines):
        frac = (i + 1) / (engines + 1)
        ex = left + radius + int(span * frac)
        ey = bottom + radius + 1
        draw.ellipse(
            [ex - radius, ey - radius, ex + radius, ey + radius],
            fill=ENGINE_COLOR,
            outline=OUTLINE_COLOR,
        )
    return img
