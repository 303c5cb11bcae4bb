"""Procedural training/eval corpus: colored primitives on textured backgrounds.

Every sample is a pure function of (seed, config). Seeds are stretched into
independent PCG64 streams via SeedSequence so samples never share draws.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from .errors import NoFreePlot
from .masks import (
    BinaryMask,
    RandomWalkParams,
    _points_in_polygon,
    random_walk_mask,
    rle_encode,
    MaskRLE,
)

RESOLUTION = 64

COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.80, 0.15),
    "blue": (0.15, 0.20, 0.90),
    "yellow": (0.90, 0.85, 0.10),
    "magenta": (0.85, 0.15, 0.80),
    "cyan": (0.10, 0.80, 0.85),
}
SHAPES = ("square", "circle", "triangle")

REPLACE_MULTI_TEMPLATES = (
    "replace the masked object with the subject",
    "swap the marked object for the subject",
    "put the subject where the mask is",
    "substitute the masked thing with the subject",
    "change the object under the mask into the subject",
    "use the subject to replace the masked object",
    "remove the masked object and insert the subject",
    "the mask marks an object , replace it with the subject",
    "replace whatever the mask covers with the subject",
    "turn the masked object into the subject",
)
REPLACE_SINGLE_TEMPLATES = (
    "replace the masked object with a {label}",
    "swap the marked object for a {label}",
    "put a {label} where the mask is",
    "change the object under the mask into a {label}",
    "remove the masked object and insert a {label}",
    "the mask marks an object , replace it with a {label}",
    "replace whatever the mask covers with a {label}",
    "turn the masked object into a {label}",
    "make the masked object a {label}",
    "substitute the masked thing with a {label}",
)
ADD_MULTI_TEMPLATES = (
    "add the subject at the masked spot",
    "place the subject inside the masked area",
    "insert the subject where the mask is",
    "draw the subject at the mask location",
    "the mask marks an empty spot , add the subject there",
    "put the subject in the marked region",
    "add the subject to the scene at the mask",
    "insert the subject into the masked region",
    "create the subject at the masked position",
    "render the subject where the mask points",
)
ADD_SINGLE_TEMPLATES = (
    "add a {label} at the masked spot",
    "place a {label} inside the masked area",
    "insert a {label} where the mask is",
    "draw a {label} at the mask location",
    "the mask marks an empty spot , add a {label} there",
    "put a {label} in the marked region",
    "add a {label} to the scene at the mask",
    "insert a {label} into the masked region",
    "create a {label} at the masked position",
    "render a {label} where the mask points",
)
MASK_PREDICT_INSTRUCTION = "what does the mask indicate? restore the full mask"
RESPONSE_TEMPLATE = "The mask means '{label}'."


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    def __len__(self):
        return len(self.ids)


def _template_corpus() -> list[str]:
    labels = [f"{c} {s}" for c in COLORS for s in SHAPES]
    corpus = list(REPLACE_MULTI_TEMPLATES + ADD_MULTI_TEMPLATES)
    corpus.append(MASK_PREDICT_INSTRUCTION)
    for tpl in REPLACE_SINGLE_TEMPLATES + ADD_SINGLE_TEMPLATES:
        corpus.extend(tpl.format(label=lab) for lab in labels)
    corpus.extend(RESPONSE_TEMPLATE.format(label=lab) for lab in labels)
    return corpus


class Tokenizer:
    """Whitespace word-level vocabulary over the closed template grammar.

    Layout: [<pad>, <bos>, <eos>, <unk>, words..., image tokens]. The N image
    tokens form a contiguous block at the top of the vocabulary.
    """

    def __init__(self, n_image_tokens: int = 8):
        words = sorted({w for line in _template_corpus() for w in line.split()})
        self.specials = [PAD, BOS, EOS, UNK]
        self.n_image_tokens = n_image_tokens
        image_tokens = [f"<img{i}>" for i in range(n_image_tokens)]
        self.vocab = self.specials + words + image_tokens
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.unk_id = self.index[UNK]
        self.image_token_ids = tuple(self.index[t] for t in image_tokens)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def tokenize(self, text: str) -> TokenSequence:
        return TokenSequence(
            tuple(self.index.get(w, self.unk_id) for w in text.split())
        )

    def detokenize(self, seq: TokenSequence) -> str:
        return " ".join(self.vocab[i] for i in seq.ids)

    def response_sequence(self, text: str) -> TokenSequence:
        """Ground-truth response: text answer, EOS, then the N image tokens."""
        return TokenSequence(
            self.tokenize(text).ids + (self.eos_id,) + self.image_token_ids
        )


# ---------------------------------------------------------------------------
# Scene rendering
# ---------------------------------------------------------------------------


def _raster_disc(cx: float, cy: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (((xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2) <= r * r).astype(np.uint8)


def _raster_square(cx: float, cy: float, r: float, size: int) -> np.ndarray:
    # Axis-aligned square inscribed in the circumradius-r disc.
    h = r / np.sqrt(2.0)
    yy, xx = np.mgrid[0:size, 0:size]
    return ((np.abs(xx + 0.5 - cx) <= h) & (np.abs(yy + 0.5 - cy) <= h)).astype(np.uint8)


def _raster_triangle(cx: float, cy: float, r: float, size: int) -> np.ndarray:
    # Equilateral, apex up, circumradius r.
    angles = [-np.pi / 2 + 2 * np.pi * k / 3 for k in range(3)]
    verts = np.array([(cx + r * np.cos(a), cy + r * np.sin(a)) for a in angles])
    yy, xx = np.mgrid[0:size, 0:size]
    return _points_in_polygon(xx + 0.5, yy + 0.5, verts).astype(np.uint8)


_RASTER = {"square": _raster_square, "circle": _raster_disc, "triangle": _raster_triangle}


def raster_shape(shape: str, cx: float, cy: float, r: float, size: int) -> BinaryMask:
    return BinaryMask.from_array(_RASTER[shape](cx, cy, r, size))


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cx: float
    cy: float
    radius: float
    region: BinaryMask

    @property
    def label(self) -> str:
        return f"{self.color} {self.shape}"


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = 0.72 + 0.06 * float(rng.random())
    coarse = rng.uniform(-0.04, 0.04, size=(size // 8, size // 8))
    texture = np.kron(coarse, np.ones((8, 8)))
    img = np.clip(base + texture, 0.0, 1.0).astype(np.float32)
    return np.repeat(img[:, :, None], 3, axis=2)


def _paint(img: np.ndarray, region: BinaryMask, color: tuple) -> None:
    img[region.data.astype(bool)] = np.asarray(color, dtype=np.float32)


def render_scene(seed: int, size: int = RESOLUTION):
    """Render 2-4 non-overlapping colored primitives on a textured background.

    Returns (image, background, objects); `background` is the object-free
    plate, kept so compositing can reveal what sits "behind" an object.
    """
    rng = _rng(seed, 0)
    bg = _background(rng, size)
    img = bg.copy()
    n_objects = int(rng.integers(2, 5))
    combos = [(c, s) for c in COLORS for s in SHAPES]
    picks = rng.choice(len(combos), size=n_objects, replace=False)
    objects: list[SceneObject] = []
    occupied = np.zeros((size, size), dtype=bool)
    for k in range(n_objects):
        color, shape = combos[int(picks[k])]
        placed = False
        for _ in range(64):
            r = float(rng.uniform(7.0, 12.0))
            cx = float(rng.uniform(r + 2, size - r - 2))
            cy = float(rng.uniform(r + 2, size - r - 2))
            region = raster_shape(shape, cx, cy, r, size)
            grown = _RASTER["circle"](cx, cy, r + 3, size).astype(bool)
            if not (grown & occupied).any():
                occupied |= grown
                objects.append(SceneObject(shape, color, cx, cy, r, region))
                _paint(img, region, COLORS[color])
                placed = True
                break
        if not placed and len(objects) >= 2:
            break
    return img, bg, objects


def render_subject(shape: str, color: str, size: int = RESOLUTION) -> np.ndarray:
    """Subject reference image: the shape alone, centered on a plain plate."""
    img = np.full((size, size, 3), 0.88, dtype=np.float32)
    region = raster_shape(shape, size / 2, size / 2, size * 0.3, size)
    _paint(img, region, COLORS[color])
    return img


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------


@dataclass
class SceneSample:
    x1: np.ndarray
    x2: Optional[np.ndarray]
    m: BinaryMask
    instruction: str
    y: np.ndarray
    m_o: BinaryMask
    fg_label: str
    response: TokenSequence
    mode: str
    multi: bool
    seed: int


_WALK = RandomWalkParams()


def _free_shape(m_o: BinaryMask, rng: np.random.Generator) -> BinaryMask:
    params = RandomWalkParams(
        num_walkers=_WALK.num_walkers,
        steps_per_walker=_WALK.steps_per_walker,
        brush_radius=_WALK.brush_radius,
        start_policy=_WALK.start_policy,
        seed=int(rng.integers(2**63)),
    )
    return random_walk_mask(m_o, params)


def _inscribed_subject(m_o: BinaryMask, shape: str) -> BinaryMask:
    """Largest shape of the given kind that fits inside m_o (via EDT disc)."""
    from scipy import ndimage

    d = ndimage.distance_transform_edt(m_o.data)
    cy, cx = np.unravel_index(int(np.argmax(d)), d.shape)
    rad = float(d[cy, cx]) * 0.95
    sub = raster_shape(shape, cx + 0.5, cy + 0.5, max(rad, 2.0), m_o.width)
    sub = BinaryMask.from_array(sub.data & m_o.data)
    return sub


def build_editing_sample(
    seed: int, mode: str, multi: bool, tokenizer: Optional[Tokenizer] = None
) -> SceneSample:
    """One add/replace editing tuple; everything derived from `seed`."""
    assert mode in ("add", "replace")
    tokenizer = tokenizer or get_tokenizer()
    rng = _rng(seed, 1)
    x1, bg, objects = render_scene(seed)
    size = x1.shape[0]
    combos = [(c, s) for c in COLORS for s in SHAPES]

    if mode == "replace":
        target_obj = objects[int(rng.integers(len(objects)))]
        m_o = target_obj.region
        choices = [c for c in combos if c != (target_obj.color, target_obj.shape)]
        color, shape = choices[int(rng.integers(len(choices)))]
        subject_region = _inscribed_subject(m_o, shape)
        y = x1.copy()
        inside = m_o.data.astype(bool)
        y[inside] = bg[inside]
        _paint(y, subject_region, COLORS[color])
    else:
        color, shape = combos[int(rng.integers(len(combos)))]
        occupied = np.zeros((size, size), dtype=bool)
        for obj in objects:
            occupied |= _raster_disc(obj.cx, obj.cy, obj.radius + 3, size).astype(bool)
        m_o = None
        for _ in range(32):
            r = float(rng.uniform(6.0, 9.0))
            cx = float(rng.uniform(r + 2, size - r - 2))
            cy = float(rng.uniform(r + 2, size - r - 2))
            grown = _raster_disc(cx, cy, r + 2, size).astype(bool)
            if not (grown & occupied).any():
                m_o = raster_shape(shape, cx, cy, r, size)
                break
        if m_o is None:
            raise NoFreePlot(f"no free plot found for seed {seed}")
        y = x1.copy()
        _paint(y, m_o, COLORS[color])

    m = _free_shape(m_o, rng)
    label = f"{color} {shape}"
    if multi:
        templates = REPLACE_MULTI_TEMPLATES if mode == "replace" else ADD_MULTI_TEMPLATES
        instruction = templates[int(rng.integers(len(templates)))]
        x2 = render_subject(shape, color)
    else:
        templates = REPLACE_SINGLE_TEMPLATES if mode == "replace" else ADD_SINGLE_TEMPLATES
        instruction = templates[int(rng.integers(len(templates)))].format(label=label)
        x2 = None
    response = tokenizer.response_sequence(RESPONSE_TEMPLATE.format(label=label))
    return SceneSample(
        x1=x1, x2=x2, m=m, instruction=instruction, y=y, m_o=m_o,
        fg_label=label, response=response, mode=mode, multi=multi, seed=seed,
    )


def build_mask_prediction_sample(
    seed: int, tokenizer: Optional[Tokenizer] = None
) -> SceneSample:
    """Full-mask restoration task: target is m_o rendered white on black."""
    tokenizer = tokenizer or get_tokenizer()
    rng = _rng(seed, 2)
    x1, _, objects = render_scene(seed)
    obj = objects[int(rng.integers(len(objects)))]
    m_o = obj.region
    m = _free_shape(m_o, rng)
    y = np.repeat(m_o.data[:, :, None].astype(np.float32), 3, axis=2)
    response = tokenizer.response_sequence(RESPONSE_TEMPLATE.format(label=obj.label))
    return SceneSample(
        x1=x1, x2=None, m=m, instruction=MASK_PREDICT_INSTRUCTION, y=y, m_o=m_o,
        fg_label=obj.label, response=response, mode="mask_predict", multi=False,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Mixing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixConfig:
    ratio_edit: float = 0.7
    ratio_mask_predict: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.ratio_edit < 0 or self.ratio_mask_predict < 0:
            raise ValueError("ratios must be non-negative")
        if abs(self.ratio_edit + self.ratio_mask_predict - 1.0) > 1e-9:
            raise ValueError("ratios must sum to 1")


def nth_sample(cfg: MixConfig, i: int, tokenizer: Optional[Tokenizer] = None) -> SceneSample:
    """Sample number i of the mixed stream; O(1) regardless of i."""
    rng = _rng(cfg.seed, 3, i)
    sample_seed = int(rng.integers(2**62))
    if float(rng.random()) < cfg.ratio_edit:
        mode = "replace" if rng.random() < 0.5 else "add"
        multi = bool(rng.random() < 0.5)
        try:
            return build_editing_sample(sample_seed, mode, multi, tokenizer)
        except NoFreePlot:
            # Crowded scene left no room to add; replace keeps the stream infinite.
            return build_editing_sample(sample_seed, "replace", multi, tokenizer)
    return build_mask_prediction_sample(sample_seed, tokenizer)


def mix_stream(
    cfg: MixConfig, tokenizer: Optional[Tokenizer] = None, start: int = 0
) -> Iterator[SceneSample]:
    """Deterministic infinite interleaving of editing and mask-prediction samples."""
    i = start
    while True:
        yield nth_sample(cfg, i, tokenizer)
        i += 1


_TOKENIZER_CACHE: dict[int, Tokenizer] = {}


def get_tokenizer(n_image_tokens: int = 8) -> Tokenizer:
    if n_image_tokens not in _TOKENIZER_CACHE:
        _TOKENIZER_CACHE[n_image_tokens] = Tokenizer(n_image_tokens)
    return _TOKENIZER_CACHE[n_image_tokens]


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------


def image_to_png(img: np.ndarray, path) -> None:
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def image_from_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def export_dataset(out_dir, count: int, cfg: MixConfig) -> Path:
    """Write `count` samples: PNGs, RLE mask JSON, per-sample meta, manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i in range(count):
        s = nth_sample(cfg, i)
        stem = f"{i:05d}"
        entry = {
            "index": i,
            "scene": f"{stem}_scene.png",
            "target": f"{stem}_target.png",
            "mask": f"{stem}_mask.json",
            "full_mask": f"{stem}_full_mask.json",
            "meta": f"{stem}_meta.json",
            "subject": f"{stem}_subject.png" if s.x2 is not None else None,
        }
        image_to_png(s.x1, out / entry["scene"])
        image_to_png(s.y, out / entry["target"])
        if s.x2 is not None:
            image_to_png(s.x2, out / entry["subject"])
        (out / entry["mask"]).write_text(rle_encode(s.m).to_json())
        (out / entry["full_mask"]).write_text(rle_encode(s.m_o).to_json())
        (out / entry["meta"]).write_text(
            json.dumps(
                {
                    "instruction": s.instruction,
                    "label": s.fg_label,
                    "mode": s.mode,
                    "seed": s.seed,
                    "multi": s.multi,
                }
            )
        )
        manifest.append(entry)
    with open(out / "manifest.jsonl", "w") as fh:
        for entry in manifest:
            fh.write(json.dumps(entry) + "\n")
    return out


@dataclass
class ExportedSample:
    index: int
    x1: np.ndarray
    x2: Optional[np.ndarray]
    m: BinaryMask
    m_o: BinaryMask
    y: np.ndarray
    instruction: str
    fg_label: str
    mode: str
    multi: bool


def load_dataset(in_dir) -> list[ExportedSample]:
    root = Path(in_dir)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.jsonl under {root}")
    out = []
    from .masks import rle_decode

    for line in manifest.read_text().splitlines():
        entry = json.loads(line)
        meta = json.loads((root / entry["meta"]).read_text())
        out.append(
            ExportedSample(
                index=entry["index"],
                x1=image_from_png(root / entry["scene"]),
                x2=image_from_png(root / entry["subject"]) if entry.get("subject") else None,
                m=rle_decode(MaskRLE.from_json((root / entry["mask"]).read_text())),
                m_o=rle_decode(MaskRLE.from_json((root / entry["full_mask"]).read_text())),
                y=image_from_png(root / entry["target"]),
                instruction=meta["instruction"],
                fg_label=meta["label"],
                mode=meta["mode"],
                multi=meta.get("multi", False),
            )
        )
    return out
