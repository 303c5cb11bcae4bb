"""Golden fixtures shared with the browser client.

The client rasterizes brush strokes locally and sends only a MaskRLE on the
wire. These tests replay the shared stroke fixture with an independent
loop-based rasterizer (Bresenham segments stamped with the same disc brush
used by mask synthesis) and pin the resulting encoding, so the client and
server sides can never drift apart silently.
"""

import json
from pathlib import Path

import numpy as np

from maskedit.masks import BinaryMask, brush_offsets, rle_decode, rle_encode, MaskRLE

FIXTURES = Path(__file__).parent / "fixtures"


def bresenham(x0, y0, x1, y1):
    pts = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while True:
        pts.append((x, y))
        if x == x1 and y == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy
    return pts


def rasterize_strokes(strokes, width, height):
    data = np.zeros((height, width), dtype=np.uint8)
    for s in strokes:
        offs = brush_offsets(s["brush_radius"])
        val = 0 if s["erase"] else 1
        pts = s["points"]
        pixels = [tuple(pts[0])]
        for i in range(1, len(pts)):
            pixels.extend(bresenham(*pts[i - 1], *pts[i]))
        for x, y in pixels:
            for dx, dy in offs:
                px, py = x + dx, y + dy
                if 0 <= px < width and 0 <= py < height:
                    data[py, px] = val
    return BinaryMask(width, height, data)


def load_fixture():
    with open(FIXTURES / "stroke_golden.json") as f:
        return json.load(f)


def test_stroke_replay_matches_golden_rle():
    fix = load_fixture()
    mask = rasterize_strokes(fix["strokes"], fix["width"], fix["height"])
    assert rle_encode(mask).to_json_obj() == fix["golden"]


def test_golden_rle_round_trips_through_server_codec():
    fix = load_fixture()
    rle = MaskRLE.from_json_obj(fix["golden"])
    assert rle_encode(rle_decode(rle)).to_json_obj() == fix["golden"]


def test_zero_length_stroke_is_single_disc():
    mask = rasterize_strokes(
        [{"points": [[8, 8]], "brush_radius": 1, "erase": False}], 16, 16)
    assert mask.popcount() == 5  # center plus 4-neighbourhood


def test_erase_inverts_identical_stroke():
    stroke = {"points": [[5, 5], [20, 9], [28, 25]], "brush_radius": 2,
              "erase": False}
    erased = dict(stroke, erase=True)
    mask = rasterize_strokes([stroke, erased], 32, 32)
    assert mask.popcount() == 0


def test_golden_response_fixture_is_consistent():
    import base64
    import hashlib
    import io

    from PIL import Image

    with open(FIXTURES / "golden_response.json") as f:
        fix = json.load(f)
    img = np.asarray(Image.open(io.BytesIO(
        base64.b64decode(fix["response"]["edited_png"]))).convert("RGB"))
    assert img.shape == (64, 64, 3)
    s = fix["scale"]
    up = np.repeat(np.repeat(img, s, axis=0), s, axis=1)
    rgba = np.concatenate(
        [up, np.full(up.shape[:2] + (1,), 255, np.uint8)], axis=2)
    assert hashlib.sha256(rgba.tobytes()).hexdigest() == fix["rendered_sha256"]
    MaskRLE.from_json_obj(fix["response"]["predicted_full_mask"])
