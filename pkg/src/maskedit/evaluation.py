"""Editing quality metrics and the benchmark evaluation protocol.

All image metrics take HxWx3 float arrays in [0, 1]. The protocol scores an
edit three ways: over the whole image, over the untouched background, and over
a crop around the edited foreground region; results are reported separately
for exact object masks and for degraded free-shape masks.
"""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from scipy import ndimage

from .data import build_editing_sample, get_tokenizer
from .encoder import EncoderConfig, TwoTowerEncoder
from .errors import EmptyBenchmark, ImageTooSmall
from .masks import BinaryMask

PSNR_CAP = 100.0


def _check_pair(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for identical images."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _grayscale(img: np.ndarray) -> np.ndarray:
    return img.mean(axis=2) if img.ndim == 3 else img


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8) -> float:
    """Mean structural similarity over non-overlapping windows (grayscale)."""
    a, b = _check_pair(a, b)
    ga, gb = _grayscale(a), _grayscale(b)
    h, w = ga.shape
    if h < window or w < window:
        raise ImageTooSmall(f"need at least {window}x{window}, got {h}x{w}")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(0, h - window + 1, window):
        for j in range(0, w - window + 1, window):
            pa = ga[i : i + window, j : j + window]
            pb = gb[i : i + window, j : j + window]
            mu_a, mu_b = pa.mean(), pb.mean()
            va, vb = pa.var(), pb.var()
            cov = ((pa - mu_a) * (pb - mu_b)).mean()
            num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
            den = (mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)
            vals.append(num / den)
    return float(np.mean(vals))


def lpips_surrogate(encoder: TwoTowerEncoder, a: np.ndarray, b: np.ndarray) -> float:
    """Perceptual distance: mean squared gap between normalized trunk features."""
    with torch.no_grad():
        fa = encoder.perceptual_features(torch.from_numpy(np.ascontiguousarray(a)).float())
        fb = encoder.perceptual_features(torch.from_numpy(np.ascontiguousarray(b)).float())
    return float(sum(((x - y) ** 2).mean().item() for x, y in zip(fa, fb)) / len(fa))


def image_similarity(encoder: TwoTowerEncoder, a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of pooled image embeddings (CLIP-I style)."""
    with torch.no_grad():
        ea = encoder.encode_image(torch.from_numpy(np.ascontiguousarray(a)).float())
        eb = encoder.encode_image(torch.from_numpy(np.ascontiguousarray(b)).float())
    return float((ea * eb).sum().item())


def text_similarity(encoder: TwoTowerEncoder, img: np.ndarray, text: str) -> float:
    """Cosine similarity between an image embedding and a caption embedding."""
    with torch.no_grad():
        ei = encoder.encode_image(torch.from_numpy(np.ascontiguousarray(img)).float())
        et = encoder.encode_text([text])[0]
    return float((ei * et).sum().item())


def foreground_region(x1: np.ndarray, y: np.ndarray, threshold: float = 0.05,
                      close_radius: int = 2, min_pixels: int = 10) -> BinaryMask:
    """Pixels the edit changed: threshold the per-pixel max-channel difference,
    close small gaps, and drop components below min_pixels."""
    diff = np.abs(np.asarray(y, dtype=np.float64)
                  - np.asarray(x1, dtype=np.float64)).max(axis=2)
    region = diff > threshold
    if close_radius > 0:
        yy, xx = np.mgrid[-close_radius : close_radius + 1,
                          -close_radius : close_radius + 1]
        disc = (yy ** 2 + xx ** 2) <= close_radius ** 2
        region = ndimage.binary_closing(region, structure=disc)
    labels, n = ndimage.label(region)
    for k in range(1, n + 1):
        if (labels == k).sum() < min_pixels:
            region[labels == k] = False
    return BinaryMask.from_array(region)


def crop_to_region(img: np.ndarray, region: BinaryMask,
                   fill: float = 0.5) -> np.ndarray:
    """Bounding-box crop of the region, magnified to fill the frame on a gray
    plate; pixels outside the region are neutral so only the edit is scored.

    The integer nearest-neighbour zoom mirrors what a CLIP-style scorer does
    when it resizes a crop to its canonical input size: small regions become
    legible to the similarity encoder instead of a handful of pixels."""
    img = np.asarray(img, dtype=np.float64)
    out = np.full_like(img, fill)
    ys, xs = np.nonzero(region.data)
    if len(ys) == 0:
        return out
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    sel = region.data[y0:y1, x0:x1].astype(bool)
    patch = np.full((y1 - y0, x1 - x0, img.shape[2]), fill)
    patch[sel] = img[y0:y1, x0:x1][sel]
    h, w = img.shape[0], img.shape[1]
    factor = max(1, min(h // patch.shape[0], w // patch.shape[1]))
    patch = np.repeat(np.repeat(patch, factor, axis=0), factor, axis=1)
    out[: patch.shape[0], : patch.shape[1]] = patch
    return out


@dataclass
class PairScores:
    psnr: float
    ssim: float
    lpips: float


def score_pair(encoder: Optional[TwoTowerEncoder], pred: np.ndarray,
               ref: np.ndarray) -> PairScores:
    return PairScores(
        psnr=psnr(pred, ref),
        ssim=ssim(pred, ref),
        lpips=lpips_surrogate(encoder, pred, ref) if encoder is not None else 0.0,
    )


# ---------------------------------------------------------------------------
# Edit success (semantic check used by the end-to-end gate)
# ---------------------------------------------------------------------------


def edit_success(encoder: TwoTowerEncoder, pred: np.ndarray, ref: np.ndarray,
                 x1: np.ndarray, m_o: BinaryMask, fg_label: str,
                 bg_tol: float = 0.1) -> bool:
    """An edit counts as successful when the background stays put and the
    edited region looks more like the target content than like the original."""
    outside = ~m_o.data.astype(bool)
    bg_err = np.abs(np.asarray(pred, np.float64)
                    - np.asarray(x1, np.float64))[outside].mean()
    if bg_err > bg_tol:
        return False
    crop_pred = crop_to_region(pred, m_o)
    sim_target = image_similarity(encoder, crop_pred, crop_to_region(ref, m_o))
    sim_before = image_similarity(encoder, crop_pred, crop_to_region(x1, m_o))
    return sim_target > sim_before


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkItem:
    sample: object  # SceneSample
    free_shape: bool


def build_benchmark(count: int, seed: int = 1234) -> list:
    """Paired benchmark: each scene appears once with its exact object mask
    and once with the degraded free-shape mask derived from it."""
    import copy

    tok = get_tokenizer()
    items: list[BenchmarkItem] = []
    for k in range(count):
        s_free = build_editing_sample(seed + k, "replace", False, tok)
        s_full = copy.copy(s_free)
        s_full.m = s_free.m_o
        items.append(BenchmarkItem(s_full, free_shape=False))
        items.append(BenchmarkItem(s_free, free_shape=True))
    if not items:
        raise EmptyBenchmark("no benchmark items could be generated")
    return items


def evaluate_benchmark(pipeline, items: list, encoder: Optional[TwoTowerEncoder] = None,
                       steps: int = 10, seed: int = 0) -> dict:
    """Score a pipeline over benchmark items; returns grouped means."""
    if not items:
        raise EmptyBenchmark("empty benchmark")
    if encoder is None:
        encoder = pipeline.embedder
    groups: dict[str, list] = {"full_mask": [], "free_shape": []}
    for item in items:
        s = item.sample
        pred, _ = pipeline.edit(s.x1, s.m, s.instruction, x2=s.x2,
                                steps=steps, seed=seed)
        bg = np.where(s.m_o.data.astype(bool)[..., None], 0.5, 1.0)
        row = {
            "full": score_pair(encoder, pred, s.y),
            "background": score_pair(encoder, pred * bg, s.y * bg),
            "foreground": score_pair(encoder, crop_to_region(pred, s.m_o),
                                     crop_to_region(s.y, s.m_o)),
            "success": edit_success(encoder, pred, s.y, s.x1, s.m_o, s.fg_label),
        }
        groups["free_shape" if item.free_shape else "full_mask"].append(row)
    report = {"n_items": len(items), "steps": steps, "seed": seed,
              "model_hash": pipeline_hash(pipeline), "groups": {}}
    for name, rows in groups.items():
        if not rows:
            continue
        agg = {}
        for scope in ("full", "background", "foreground"):
            for metric in ("psnr", "ssim", "lpips"):
                agg[f"{scope}_{metric}"] = float(
                    np.mean([getattr(r[scope], metric) for r in rows]))
        agg["success_rate"] = float(np.mean([r["success"] for r in rows]))
        report["groups"][name] = agg
    return report


def pipeline_hash(pipeline) -> str:
    """Stable content hash over all parameters (little-endian float32)."""
    h = hashlib.sha256()
    for name, p in sorted(pipeline.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()[:16]


def save_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2))


def compare_mask_robustness(report: dict) -> dict:
    """Relative drop of each foreground metric when masks degrade to free-shape."""
    full = report["groups"]["full_mask"]
    free = report["groups"]["free_shape"]
    out = {}
    for metric in ("foreground_psnr", "foreground_ssim"):
        if full[metric] != 0:
            out[metric + "_rel_drop"] = (full[metric] - free[metric]) / abs(full[metric])
    return out


# ---------------------------------------------------------------------------
# Two-tower encoder training (the metric backbone itself)
# ---------------------------------------------------------------------------


def train_two_tower(seed: int = 0, steps: int = 300, batch_size: int = 16,
                    lr: float = 3e-4, d_e: int = 128,
                    enc: Optional[TwoTowerEncoder] = None) -> TwoTowerEncoder:
    """Contrastive image-text training on rendered subjects; the result backs
    the perceptual and similarity metrics.

    Half of each batch uses crop-style views — the shape at scene scale,
    anchored near the origin on a neutral plate — matching what
    crop_to_region produces, so the similarity scores stay meaningful on
    region crops and not just on full subject renders.

    Pass `enc` to train an existing encoder in place (e.g. a pipeline's
    embedder before it is frozen) instead of building a fresh one."""
    from .data import COLORS, SHAPES, _paint, raster_shape, render_subject
    from .backbone import deterministic_init

    tok = get_tokenizer()
    if enc is None:
        enc = TwoTowerEncoder(EncoderConfig(d_e=d_e), tok)
        deterministic_init(enc, seed)
    else:
        d_e = enc.cfg.d_e
    labels_all = [f"{c} {s}" for c in COLORS for s in SHAPES]
    opt = torch.optim.Adam(enc.parameters(), lr=lr)
    rng = np.random.Generator(np.random.PCG64(seed))
    res = EncoderConfig(d_e=d_e).resolution
    for _ in range(steps):
        picks = rng.choice(len(labels_all), size=min(batch_size, len(labels_all)),
                           replace=False)
        labels = [labels_all[int(k)] for k in picks]
        imgs = []
        for lab in labels:
            color, shape = lab.split()
            if rng.random() < 0.5:
                img = render_subject(shape, color)
            else:
                r = rng.uniform(6.0, 16.0)
                img = np.full((res, res, 3), 0.5, dtype=np.float32)
                region = raster_shape(shape, r + rng.uniform(0.0, 2.0),
                                      r + rng.uniform(0.0, 2.0), r, res)
                _paint(img, region, COLORS[color])
            jitter = rng.normal(0.0, 0.02, size=img.shape)
            imgs.append(np.clip(img + jitter, 0.0, 1.0).astype(np.float32))
        batch = torch.from_numpy(np.stack(imgs))
        loss = enc.contrastive_loss(batch, labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return enc


def retrieval_at_1(enc: TwoTowerEncoder, seed: int = 99) -> float:
    """Held-out image->text retrieval accuracy over all label combinations."""
    from .data import COLORS, SHAPES, render_subject

    labels = [f"{c} {s}" for c in COLORS for s in SHAPES]
    rng = np.random.Generator(np.random.PCG64(seed))
    imgs = []
    for lab in labels:
        color, shape = lab.split()
        img = render_subject(shape, color)
        jitter = rng.normal(0.0, 0.02, size=img.shape)
        imgs.append(np.clip(img + jitter, 0.0, 1.0).astype(np.float32))
    with torch.no_grad():
        ei = enc.encode_image(torch.from_numpy(np.stack(imgs)))
        et = enc.encode_text(labels)
        pred = (ei @ et.T).argmax(dim=1)
    return float((pred == torch.arange(len(labels))).float().mean().item())
