import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectok import probes
from spectok.probes import cosine_stats, ln_separation_demo, pca_project, pca_rgb, separation_similarity, top_magnitude_dims
from spectok.trace import ProbeTrace, TokenPartition


def make_trace(acts, registers=0, point="block_out"):
    tr = ProbeTrace(TokenPartition(acts[0].shape[0], registers))
    for b, a in enumerate(acts):
        tr.record(b, point, a)
    return tr


def brute_cos(a, b):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def brute_stats(act, registers=0):
    patches = list(range(1 + registers, act.shape[0]))
    cp = [brute_cos(act[0], act[i]) for i in patches]
    pp = [brute_cos(act[i], act[j]) for i, j in itertools.combinations(patches, 2)]
    pop = lambda v: (sum(v) / len(v), math.sqrt(sum((x - sum(v) / len(v)) ** 2 for x in v) / len(v)))
    return pop(cp) + pop(pp)


def test_cosine_stats_examples():
    tr = make_trace([np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])])
    s = cosine_stats(tr, "block_out")
    assert (s.cls_patch_mean, s.cls_patch_std) == (0.5, 0.5)
    same = make_trace([np.tile([2.0, -1.0, 3.0], (5, 1))])
    s = cosine_stats(same, "block_out")
    assert s.cls_patch_mean == pytest.approx(1) and s.patch_patch_mean == pytest.approx(1)
    assert s.cls_patch_std == pytest.approx(0, abs=1e-15) and s.patch_patch_std == pytest.approx(0, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 9), st.integers(1, 6), st.integers(0, 2), st.integers(0, 10_000))
def test_cosine_stats_matches_brute_force(n, d, registers, seed):
    act = np.random.default_rng(seed).normal(size=(n + registers, d))
    got = cosine_stats(make_trace([act], registers), "block_out")
    want = brute_stats(act, registers)
    np.testing.assert_allclose(
        [got.cls_patch_mean, got.cls_patch_std, got.patch_patch_mean, got.patch_patch_std], want, atol=1e-12
    )


def test_zero_vector_cosine_is_zero():
    assert probes.cosine(np.zeros(3), np.ones(3)) == 0.0


def test_cosine_stats_empty_selection_rejected():
    with pytest.raises(ValueError):
        cosine_stats(make_trace([np.ones((3, 2))]), "block_out", blocks=[])


def test_top_magnitude_dims_examples():
    act = np.zeros((4, 8))
    act[0, 2] = 10.0
    act[1:, 5] = 10.0
    top = top_magnitude_dims(make_trace([act]), 0, 1)
    assert top["cls"][0][0] == 2 and top["patch"][0][0] == 5
    zero = top_magnitude_dims(make_trace([np.zeros((4, 8))]), 0, 3)
    assert [d for d, _ in zero["patch"]] == [0, 1, 2] and all(v == 0 for _, v in zero["cls"])


def test_top_magnitude_dims_matches_sort_oracle():
    act = np.random.default_rng(9).normal(size=(6, 8))
    top = top_magnitude_dims(make_trace([act]), 0, 8)
    mags = np.abs(act[1:]).mean(0)
    want = sorted(range(8), key=lambda i: (-mags[i], i))
    assert [d for d, _ in top["patch"]] == want
    assert [d for d, _ in top["cls"]] == sorted(range(8), key=lambda i: (-abs(act[0, i]), i))


def eigh_projection(x, k=3):
    xc = x - x.mean(0)
    cov = xc.T @ xc / x.shape[0]
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    return xc @ vecs[:, order]


def test_pca_axis_example():
    pts = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]])
    rgb = pca_rgb(pts, (3, 1))
    ch = rgb[:, 0, 0]
    # the first axis is x, up to the sign convention
    assert sorted(ch.tolist()) == [0.0, 0.5, 1.0] and ch[2] == 0.5
    assert np.all(rgb[:, 0, 1:] == 0.5)


def test_pca_degenerate_is_grey():
    assert np.all(pca_rgb(np.ones((4, 3)), (2, 2)) == 0.5)


def test_pca_needs_three_patches():
    with pytest.raises(ValueError):
        pca_rgb(np.ones((2, 3)), (1, 2))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_pca_matches_eigendecomposition(seed):
    x = np.random.default_rng(seed).normal(size=(12, 5))
    got, _ = pca_project(x, 3)
    want = eigh_projection(x)
    for c in range(3):
        sgn = 1.0 if got[:, c] @ want[:, c] >= 0 else -1.0
        np.testing.assert_allclose(got[:, c], sgn * want[:, c], atol=1e-8)


def test_pca_sign_is_stable_under_input_sign_flip():
    x = np.random.default_rng(3).normal(size=(12, 5))
    np.testing.assert_allclose(pca_rgb(x, (3, 4)), pca_rgb(-x, (3, 4)), atol=1e-12)


def test_ppm_round_trip(tmp_path):
    rgb = np.random.default_rng(0).uniform(size=(3, 4, 3))
    probes.write_ppm(tmp_path / "a.ppm", rgb)
    back = probes.read_ppm(tmp_path / "a.ppm")
    np.testing.assert_allclose(back, np.rint(rgb * 255) / 255)


def test_separation_demo_example():
    pre, post = ln_separation_demo(16, 16, seed=0)
    assert pre > 0.9 and post < 0.3


def test_separation_identity_norm_leaves_similarity_unchanged():
    rng = np.random.default_rng(1)
    toks = rng.normal(size=(6, 10))
    toks = (toks - toks.mean(1, keepdims=True)) / toks.std(1, keepdims=True)
    pre, post = separation_similarity(toks[0], toks[1:], np.ones(10), np.zeros(10))
    assert pre == pytest.approx(post, abs=1e-9)


def test_separation_identical_tokens():
    cls = np.random.default_rng(2).normal(size=8)
    pre, post = separation_similarity(cls, np.tile(cls, (4, 1)), np.ones(8) * 0.3, np.zeros(8))
    assert pre == pytest.approx(1.0) and post == pytest.approx(1.0)


def test_stats_csv_layout(tmp_path):
    tr = ProbeTrace(TokenPartition(5))
    for b in range(2):
        for p in probes.PROBE_POINTS:
            tr.record(b, p, np.random.default_rng(b).normal(size=(5, 3)))
    rows = probes.similarity_rows([tr])
    probes.write_stats_csv(rows, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "block,point,population,mean,std"
    assert len(lines) == 1 + 2 * 11 * 2
