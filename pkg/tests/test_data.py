import numpy as np
import pytest

from maskedit import data
from maskedit.data import (
    COLORS,
    MASK_PREDICT_INSTRUCTION,
    MixConfig,
    build_editing_sample,
    build_mask_prediction_sample,
    get_tokenizer,
    mix_stream,
    nth_sample,
    render_scene,
    render_subject,
    raster_shape,
    _template_corpus,
)
from maskedit.masks import dilate, overlap_ratio


def shape_pixel_oracle(shape, cx, cy, r, size):
    """Scalar per-pixel center-in-shape count."""
    count = 0
    for y in range(size):
        for x in range(size):
            px, py = x + 0.5, y + 0.5
            if shape == "circle":
                inside = (px - cx) ** 2 + (py - cy) ** 2 <= r * r
            elif shape == "square":
                h = r / np.sqrt(2.0)
                inside = abs(px - cx) <= h and abs(py - cy) <= h
            else:  # triangle, apex up
                angles = [-np.pi / 2 + 2 * np.pi * k / 3 for k in range(3)]
                vs = [(cx + r * np.cos(a), cy + r * np.sin(a)) for a in angles]
                inside = False
                j = len(vs) - 1
                for i in range(len(vs)):
                    xi, yi = vs[i]
                    xj, yj = vs[j]
                    if (yi > py) != (yj > py) and px < xi + (py - yi) * (xj - xi) / (yj - yi):
                        inside = not inside
                    j = i
            if inside:
                count += 1
    return count


class TestRenderScene:
    def test_deterministic(self):
        a, _, _ = render_scene(1)
        b, _, _ = render_scene(1)
        assert np.array_equal(a, b)

    def test_regions_pairwise_disjoint(self):
        for seed in range(10):
            _, _, objects = render_scene(seed)
            for i in range(len(objects)):
                for j in range(i + 1, len(objects)):
                    assert not (objects[i].region.data & objects[j].region.data).any()

    def test_region_matches_pixel_oracle(self):
        _, _, objects = render_scene(3)
        for obj in objects:
            oracle = shape_pixel_oracle(obj.shape, obj.cx, obj.cy, obj.radius, 64)
            assert obj.region.popcount() == oracle

    def test_region_area_within_5pct_of_analytic(self):
        _, _, objects = render_scene(3)
        for obj in objects:
            r = obj.radius
            if obj.shape == "circle":
                analytic = np.pi * r * r
            elif obj.shape == "square":
                analytic = 2 * r * r
            else:
                analytic = 3 * np.sqrt(3) / 4 * r * r
            assert abs(obj.region.popcount() - analytic) <= 0.05 * analytic + 4

    def test_object_count_in_range(self):
        for seed in range(20):
            _, _, objects = render_scene(seed)
            assert 2 <= len(objects) <= 4


class TestEditingSample:
    @pytest.mark.parametrize("mode,multi", [("add", True), ("add", False),
                                            ("replace", True), ("replace", False)])
    def test_mask_overlaps_full_mask(self, mode, multi):
        s = build_editing_sample(5, mode, multi)
        assert overlap_ratio(s.m, s.m_o) > 0

    @pytest.mark.parametrize("mode", ["add", "replace"])
    def test_unchanged_outside_dilated_region(self, mode):
        s = build_editing_sample(6, mode, True)
        outside = ~dilate(s.m_o, 1).data.astype(bool)
        assert np.array_equal(s.y[outside], s.x1[outside])

    def test_replace_composite_oracle(self):
        s = build_editing_sample(11, "replace", True)
        # Independent compositor: re-derive background and subject placement.
        x1, bg, objects = render_scene(11)
        inside = s.m_o.data.astype(bool)
        # Inside the edit region, each pixel is either background or a flat
        # color drawn from the palette of the subject.
        subject_color = np.asarray(COLORS[s.fg_label.split()[0]], dtype=np.float32)
        for yy, xx in zip(*np.nonzero(inside)):
            px = s.y[yy, xx]
            assert np.array_equal(px, bg[yy, xx]) or np.array_equal(px, subject_color)
        # The subject color actually appears inside the region.
        assert np.any(np.all(s.y[inside] == subject_color, axis=-1))

    def test_replace_region_is_an_object_region(self):
        s = build_editing_sample(8, "replace", False)
        _, _, objects = render_scene(8)
        assert any(obj.region == s.m_o for obj in objects)

    def test_add_region_disjoint_from_objects(self):
        s = build_editing_sample(9, "add", False)
        _, _, objects = render_scene(9)
        for obj in objects:
            assert not (obj.region.data & s.m_o.data).any()

    def test_single_image_mode_has_no_subject_and_mentions_label(self):
        s = build_editing_sample(4, "replace", False)
        assert s.x2 is None
        assert s.fg_label in s.instruction

    def test_multi_mode_subject_render(self):
        s = build_editing_sample(4, "replace", True)
        color, shape = s.fg_label.split()
        assert np.array_equal(s.x2, render_subject(shape, color))

    def test_determinism(self):
        a = build_editing_sample(13, "add", True)
        b = build_editing_sample(13, "add", True)
        assert np.array_equal(a.y, b.y) and a.m == b.m and a.instruction == b.instruction


class TestMaskPredictionSample:
    def test_target_is_binary_rgb(self):
        s = build_mask_prediction_sample(2)
        flat = s.y.reshape(-1, 3)
        assert np.all(np.logical_or(np.all(flat == 0.0, axis=1), np.all(flat == 1.0, axis=1)))

    def test_threshold_recovers_full_mask(self):
        s = build_mask_prediction_sample(7)
        recovered = (s.y.mean(axis=2) > 0.5).astype(np.uint8)
        assert np.array_equal(recovered, s.m_o.data)

    def test_response_label_matches_object(self):
        s = build_mask_prediction_sample(5)
        _, _, objects = render_scene(5)
        labels = {obj.label for obj in objects}
        assert s.fg_label in labels
        tok = get_tokenizer()
        text = tok.detokenize(data.TokenSequence(s.response.ids[: len(s.response.ids)]))
        assert f"'{s.fg_label}'." in text

    def test_instruction_fixed(self):
        assert build_mask_prediction_sample(1).instruction == MASK_PREDICT_INSTRUCTION


class TestTokenizer:
    def test_simple_roundtrip(self):
        tok = get_tokenizer()
        assert tok.detokenize(tok.tokenize("red square")) == "red square"

    def test_empty(self):
        tok = get_tokenizer()
        assert tok.tokenize("").ids == ()

    def test_unknown_maps_to_unk(self):
        tok = get_tokenizer()
        ids = tok.tokenize("zorp").ids
        assert ids == (tok.unk_id,)

    def test_full_corpus_roundtrips(self):
        tok = get_tokenizer()
        for line in _template_corpus():
            assert tok.detokenize(tok.tokenize(line)) == line

    def test_image_tokens_contiguous_at_top(self):
        tok = get_tokenizer()
        assert tok.image_token_ids == tuple(
            range(tok.vocab_size - tok.n_image_tokens, tok.vocab_size)
        )

    def test_response_ends_with_image_tokens(self):
        tok = get_tokenizer()
        seq = tok.response_sequence("The mask means 'red square'.")
        assert seq.ids[-tok.n_image_tokens:] == tok.image_token_ids


class TestMixStream:
    def test_all_edit(self):
        cfg = MixConfig(1.0, 0.0, seed=1)
        for i, s in zip(range(20), mix_stream(cfg)):
            assert s.mode in ("add", "replace")

    def test_all_mask_predict(self):
        cfg = MixConfig(0.0, 1.0, seed=1)
        for i, s in zip(range(20), mix_stream(cfg)):
            assert s.mode == "mask_predict"

    def test_ratio_counting_10k(self):
        cfg = MixConfig(0.7, 0.3, seed=5)
        # Count via the cheap route: nth_sample's mode decision replayed.
        n_edit = 0
        for i in range(10000):
            rng = data._rng(cfg.seed, 3, i)
            rng.integers(2**62)
            if float(rng.random()) < cfg.ratio_edit:
                n_edit += 1
        assert abs(n_edit - 7000) <= 200
        # Spot-check agreement with actual samples on a subset.
        for i in range(0, 200, 17):
            s = nth_sample(cfg, i)
            rng = data._rng(cfg.seed, 3, i)
            rng.integers(2**62)
            expected_edit = float(rng.random()) < cfg.ratio_edit
            assert (s.mode != "mask_predict") == expected_edit

    def test_stream_restart_matches(self):
        cfg = MixConfig(seed=9)
        full = [s for _, s in zip(range(6), mix_stream(cfg))]
        tail = [s for _, s in zip(range(3), mix_stream(cfg, start=3))]
        for a, b in zip(full[3:], tail):
            assert np.array_equal(a.y, b.y) and a.instruction == b.instruction

    def test_bad_config(self):
        with pytest.raises(ValueError):
            MixConfig(0.5, 0.4)


def test_sample_invariants_sweep():
    tok = get_tokenizer()
    cfg = MixConfig(seed=77)
    for i in range(300):
        s = nth_sample(cfg, i, tok)
        assert s.x1.shape == (64, 64, 3) and s.y.shape == (64, 64, 3)
        assert (s.m.width, s.m.height) == (64, 64)
        assert (s.m_o.width, s.m_o.height) == (64, 64)
        assert s.response.ids[-tok.n_image_tokens:] == tok.image_token_ids
        assert not s.m.is_empty() and not s.m_o.is_empty()
        assert max(s.response.ids) < tok.vocab_size


def test_export_import_roundtrip(tmp_path):
    from maskedit.data import export_dataset, load_dataset

    cfg = MixConfig(seed=3)
    export_dataset(tmp_path / "ds", 5, cfg)
    samples = load_dataset(tmp_path / "ds")
    assert len(samples) == 5
    for loaded, i in zip(samples, range(5)):
        orig = nth_sample(cfg, i)
        assert loaded.m == orig.m and loaded.m_o == orig.m_o
        assert loaded.instruction == orig.instruction
        assert np.max(np.abs(loaded.x1 - orig.x1)) < 1 / 255.0 + 1e-6
        assert (loaded.x2 is None) == (orig.x2 is None)
