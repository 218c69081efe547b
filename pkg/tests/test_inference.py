import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage as ndi
from skimage.feature import canny as sk_canny

from fewshot_textseg.afa import PromptFeatureBank
from fewshot_textseg.backend import ImageEncoding
from fewshot_textseg.errors import ArgumentError, ShapeError
from fewshot_textseg.inference import (
    InferenceConfig,
    MaskGenConfig,
    canny_edges,
    fuse,
    generate_mask,
    prompt_score_maps,
    segment,
    suppress,
)
from fewshot_textseg.maps import ScoreMap

unit_grids = arrays(np.float64, (5, 5), elements=st.floats(0, 1))


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def fake_bank(fg, bg):
    return PromptFeatureBank(fg, bg, ["learnable"] * len(fg), ["learnable"] * len(bg), [""] * len(fg),
                             [""] * len(bg), fg.mean(0), bg.mean(0), {}, "x")


def test_prompt_maps_match_brute_force():
    rng = np.random.default_rng(0)
    grid = unit_rows(rng, 12, 8).reshape(3, 4, 8)
    enc = ImageEncoding([grid], grid.mean(axis=(0, 1)))
    bank = fake_bank(unit_rows(rng, 5, 8), unit_rows(rng, 3, 8))
    tau = 0.07
    p_f, p_b = prompt_score_maps(enc, bank, tau)
    for i in range(3):
        for j in range(4):
            s_f = max(float(grid[i, j] @ f) for f in bank.fg_features)
            s_b = max(float(grid[i, j] @ b) for b in bank.bg_features)
            want = math.exp(s_f / tau) / (math.exp(s_f / tau) + math.exp(s_b / tau))
            assert p_f.grid[i, j] == pytest.approx(want, abs=1e-12)
    np.testing.assert_allclose(p_f.grid + p_b.grid, 1.0, atol=1e-12)


def test_prompt_maps_closed_forms():
    q = np.array([[[1.0, 0.0]]])
    enc = ImageEncoding([q], q[0, 0])
    same = fake_bank(np.array([[0.6, 0.8]]), np.array([[0.6, -0.8]]))
    assert prompt_score_maps(enc, same, 0.01)[0].grid[0, 0] == pytest.approx(0.5, abs=1e-15)
    apart = fake_bank(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    assert prompt_score_maps(enc, apart, 0.01)[0].grid[0, 0] == pytest.approx(1 / (1 + math.exp(-100)), abs=1e-15)
    with pytest.raises(ArgumentError):
        prompt_score_maps(enc, apart, 0.0)
    with pytest.raises(ShapeError):
        prompt_score_maps(enc, fake_bank(np.ones((1, 3)), np.ones((1, 3))), 0.1)


def test_suppress_examples():
    assert suppress(np.array([[0.8]]), np.array([[0.25]]))[0, 0] == pytest.approx(0.6)
    fg = np.random.default_rng(1).random((4, 4))
    assert not suppress(fg, np.ones((4, 4))).any()
    np.testing.assert_array_equal(suppress(fg, np.zeros((4, 4))), fg)
    out = suppress(ScoreMap(fg, "visual", "fg"), ScoreMap(fg, "visual", "bg"))
    assert isinstance(out, ScoreMap) and out.source == "visual"
    with pytest.raises(ShapeError):
        suppress(np.zeros((2, 2)), np.zeros((2, 3)))


def test_fuse_examples():
    assert fuse(np.array([[0.5]]), np.array([[0.5]]))[0, 0] == 0.25
    assert fuse(np.array([[0.0]]), np.array([[0.9]]))[0, 0] == 0.0
    assert fuse(np.array([[0.0]]), np.array([[0.0]]))[0, 0] == 0.0
    assert fuse(np.array([[1.0]]), np.array([[1.0]]))[0, 0] == 0.5
    assert fuse(np.array([[1.0]]), np.array([[1.0]]), factor2=True)[0, 0] == 1.0


@settings(max_examples=100, deadline=None)
@given(unit_grids, unit_grids, unit_grids)
def test_fusion_algebra(a, b, c):
    f = fuse(a, b)
    assert np.all(f <= np.minimum(a, b) + 1e-12)
    np.testing.assert_array_equal(f, fuse(b, a))
    # equality only when an input is zero; tiny subnormals are excluded from the strict check
    strict = (a > 1e-6) & (b > 1e-6)
    assert np.all(f[strict] < np.minimum(a, b)[strict])
    hi, lo = np.maximum(a, c), np.minimum(a, c)
    assert np.all(suppress(hi, b) >= suppress(lo, b) - 1e-12)
    assert np.all(suppress(b, hi) <= suppress(b, lo) + 1e-12)


def test_canny_constant_and_step():
    assert not canny_edges(np.full((32, 32), 0.4)).any()
    step = np.zeros((32, 40))
    step[:, 20:] = 1.0
    e = canny_edges(step)
    cols = np.flatnonzero(e.any(axis=0))
    assert len(cols) == 1 and cols[0] in (19, 20)
    assert e[2:-2, cols[0]].all()


def _reference_canny(img, sigma=1.0, low=0.1, high=0.3):
    smooth = ndi.gaussian_filter(img, sigma, mode="nearest", truncate=4.0)
    peak = np.hypot(ndi.sobel(smooth, 1), ndi.sobel(smooth, 0)).max()
    return sk_canny(img, sigma=sigma, low_threshold=low * peak, high_threshold=high * peak, mode="nearest")


def test_canny_matches_reference_on_antialiased_checker():
    checker = (np.add.outer(np.arange(96) // 16, np.arange(96) // 16) % 2).astype(float)
    img = ndi.gaussian_filter(checker, 0.7)
    agree = (canny_edges(img) == _reference_canny(img)).mean()
    assert agree >= 0.99


def test_canny_colour_uses_strongest_channel():
    img = np.zeros((32, 32, 3))
    img[:, 16:, 2] = 1.0  # edge only in the blue channel
    gray = canny_edges(img.mean(axis=-1))
    colour = canny_edges(img)
    np.testing.assert_array_equal(colour, gray)
    assert colour.any()


def test_mask_trivial_cases():
    cfg_off = MaskGenConfig(edge_filter=False, min_component_area=0)
    assert not generate_mask(np.zeros((16, 16)), None, MaskGenConfig()).any()
    assert generate_mask(np.ones((16, 16)), None, cfg_off).all()


def test_mask_edge_filter_construction():
    s = np.zeros((40, 40))
    s[5:15, 5:15] = 0.9
    s[25:35, 25:35] = 0.9
    edges = np.zeros((40, 40), bool)
    edges[10, 16] = True  # within dilation radius 2 of the first blob's boundary
    m = generate_mask(s, edges, MaskGenConfig(threshold=0.5))
    assert m[5:15, 5:15].all() and not m[25:35, 25:35].any()
    m_off = generate_mask(s, edges, MaskGenConfig(threshold=0.5, edge_filter=False))
    assert m_off[25:35, 25:35].all()


def test_mask_min_area():
    s = np.zeros((20, 20))
    s[1:4, 1:4] = 1.0  # 9 px
    s[10:15, 10:15] = 1.0  # 25 px
    m = generate_mask(s, None, MaskGenConfig(edge_filter=False, min_component_area=16))
    assert m.sum() == 25


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.9), st.floats(0.05, 0.9))
def test_mask_monotone_in_threshold(seed, t1, t2):
    rng = np.random.default_rng(seed)
    s = ndi.gaussian_filter(rng.random((40, 40)), 2)
    s = (s - s.min()) / (s.max() - s.min() + 1e-12)
    edges = rng.random((40, 40)) < 0.05
    lo, hi = sorted((t1, t2))
    a = generate_mask(s, edges, MaskGenConfig(threshold=lo, min_component_area=4))
    b = generate_mask(s, edges, MaskGenConfig(threshold=hi, min_component_area=4))
    assert np.all(b <= a)


def test_mask_config_validation():
    with pytest.raises(ArgumentError):
        MaskGenConfig(threshold=1.5)
    with pytest.raises(ArgumentError):
        MaskGenConfig(canny_low=0.5, canny_high=0.2)
    with pytest.raises(ArgumentError):
        InferenceConfig(branches="neither")


def test_segment_pipeline_deterministic(toy, small_supports, small_suite):
    from fewshot_textseg.afa import TrainConfig, train
    from fewshot_textseg.prompt_space import build_population, load_lexicon
    from fewshot_textseg.visual_bank import build_bank

    vb = build_bank(small_supports[:1], toy)
    lex = load_lexicon()
    pops = {r: build_population(r, 4, 1, lex, 0, toy) for r in ("fg", "bg")}
    pb = train(pops, vb, toy, TrainConfig(epochs=1))
    q = small_suite.query.load(small_suite.query.ids[0], 96)
    a = segment(q.image, vb, pb, toy)
    b = segment(q.image, vb, pb, toy)
    assert a.to_bytes() == b.to_bytes()
    assert set(a.maps()) == {"S", "V_f", "V_b", "P_f", "P_b", "V_f_suppressed", "P_f_suppressed"}
    np.testing.assert_allclose(a.S, fuse(a.V_f_suppressed, a.P_f_suppressed))
    vis = segment(q.image, vb, None, toy, InferenceConfig(branches="visual"))
    assert vis.P_f is None
    np.testing.assert_allclose(vis.S, vis.V_f_suppressed / 2)
