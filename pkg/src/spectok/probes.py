"""Token-similarity statistics, dominant feature dimensions and PCA feature maps."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import layer_norm
from .tensor import Tensor
from .trace import PROBE_POINTS, ProbeTrace

ALL_PAIRS_LIMIT = 1024
SAMPLED_PAIRS = 100_000


@dataclass(frozen=True)
class SimStats:
    cls_patch_mean: float
    cls_patch_std: float
    patch_patch_mean: float
    patch_patch_std: float


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 0 when either vector is zero."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    # zero rows stay zero, so their cosines come out as 0
    return x / safe


def _pair_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if n <= ALL_PAIRS_LIMIT:
        return np.triu_indices(n, k=1)
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, size=SAMPLED_PAIRS)
    j = rng.integers(0, n - 1, size=SAMPLED_PAIRS)
    j = j + (j >= i)
    return np.minimum(i, j), np.maximum(i, j)


def token_similarities(act: np.ndarray, patch_rows: Sequence[int], seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Raw CLS-patch and patch-patch cosines for one activation matrix."""
    unit = _unit_rows(np.asarray(act, dtype=np.float64))
    patches = unit[list(patch_rows)]
    cls_patch = patches @ unit[0]
    i, j = _pair_indices(len(patches), seed)
    patch_patch = np.einsum("ij,ij->i", patches[i], patches[j])
    return cls_patch, patch_patch


def cosine_stats(traces, point: str, blocks: Iterable[int] | None = None, seed: int = 0) -> SimStats:
    """Pool cosine similarities at ``point`` over the selected blocks of every trace.

    Registers are excluded from both populations.
    """
    if isinstance(traces, ProbeTrace):
        traces = [traces]
    cp, pp = [], []
    for tr in traces:
        chosen = tr.blocks if blocks is None else list(blocks)
        for b in chosen:
            a, c = token_similarities(tr.get(b, point), tr.partition.patch_indices, seed)
            cp.append(a)
            pp.append(c)
    if not cp:
        raise ValueError(f"no activations selected for point {point!r}")
    cp_all = np.concatenate(cp)
    pp_all = np.concatenate(pp) if any(x.size for x in pp) else np.zeros(1)
    return SimStats(
        float(cp_all.mean()), float(cp_all.std()), float(pp_all.mean()), float(pp_all.std())
    )


def similarity_rows(traces: Sequence[ProbeTrace], seed: int = 0) -> list[tuple[int, str, str, float, float]]:
    """One (block, point, population, mean, std) row per block, point and population."""
    rows = []
    for b in traces[0].blocks:
        for point in PROBE_POINTS:
            s = cosine_stats(traces, point, [b], seed)
            rows.append((b, point, "cls_patch", s.cls_patch_mean, s.cls_patch_std))
            rows.append((b, point, "patch_patch", s.patch_patch_mean, s.patch_patch_std))
    return rows


def write_stats_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block", "point", "population", "mean", "std"])
        for b, point, pop, mean, std in rows:
            w.writerow([b, point, pop, repr(float(mean)), repr(float(std))])


# ----------------------------------------------------------- dominant dims


def top_magnitude_dims(trace: ProbeTrace, block_index: int, k: int, point: str = "block_out") -> dict[str, list[tuple[int, float]]]:
    """Top-``k`` dimensions by mean |activation| for the CLS token and for patches.

    Ties go to the lower dimension index.
    """
    act = trace.get(block_index, point)
    d = act.shape[-1]
    if not 1 <= k <= d:
        raise ValueError(f"k={k} must be in [1, {d}]")
    groups = {
        "cls": act[[0]],
        "patch": act[list(trace.partition.patch_indices)],
    }
    out = {}
    for name, rows in groups.items():
        mags = np.abs(rows).mean(axis=0)
        order = np.lexsort((np.arange(d), -mags))[:k]
        out[name] = [(int(i), float(mags[i])) for i in order]
    return out


# --------------------------------------------------------------------- PCA


def _fix_sign(proj: np.ndarray, loading: np.ndarray) -> float:
    cubed = np.sum(proj**3)
    tol = 1e-12 * max(np.sum(np.abs(proj) ** 3), 1e-300)
    if cubed > tol:
        return 1.0
    if cubed < -tol:
        return -1.0
    # symmetric projection: make the largest loading positive
    return 1.0 if loading[np.argmax(np.abs(loading))] >= 0 else -1.0


def pca_project(x: np.ndarray, n_components: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Project centred rows on the leading principal axes.

    Returns ``(projections, variances)``. Each component's sign is chosen so
    its projection has non-negative skewness.
    """
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    k = min(n_components, vt.shape[0])
    proj = np.zeros((x.shape[0], n_components))
    var = np.zeros(n_components)
    scale0 = s[0] if s.size else 0.0
    for c in range(k):
        if s[c] <= 1e-12 * max(scale0, 1e-300) or s[c] == 0.0:
            continue
        p = xc @ vt[c]
        proj[:, c] = p * _fix_sign(p, vt[c])
        var[c] = s[c] ** 2 / x.shape[0]
    return proj, var


def pca_rgb(patch_out, grid: tuple[int, int]) -> np.ndarray:
    """Map patch features to an RGB image via their first three principal components.

    Channels are min-max scaled to [0, 1]; a channel with no variance is 0.5.
    """
    x = np.asarray(getattr(patch_out, "data", patch_out), dtype=np.float64)
    gh, gw = grid
    if x.shape[0] != gh * gw:
        raise ValueError(f"{x.shape[0]} patches do not fill a {gh}x{gw} grid")
    if x.shape[0] < 3:
        raise ValueError("need at least 3 patches for a PCA map")
    proj, var = pca_project(x, 3)
    rgb = np.full((x.shape[0], 3), 0.5)
    for c in range(3):
        lo, hi = proj[:, c].min(), proj[:, c].max()
        if var[c] > 0 and hi > lo:
            rgb[:, c] = (proj[:, c] - lo) / (hi - lo)
    return rgb.reshape(gh, gw, 3)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary PPM (P6, maxval 255)."""
    img = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(g) for g in m.groups())
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=m.end())
    return data.reshape(h, w, 3).astype(np.float64) / maxval


# ------------------------------------------------------- LN separation demo


def separation_similarity(cls_token, patches, gamma, beta) -> tuple[float, float]:
    """cos(CLS, mean patch) before and after a shared LayerNorm."""
    cls_token = np.asarray(cls_token, dtype=np.float64)
    patches = np.asarray(patches, dtype=np.float64)
    pre = cosine(cls_token, patches.mean(axis=0))
    tokens = np.vstack([cls_token[None], patches])
    normed = layer_norm(Tensor(tokens), np.asarray(gamma, float), np.asarray(beta, float)).data
    post = cosine(normed[0], normed[1:].mean(axis=0))
    return pre, post


def ln_separation_demo(
    d: int,
    n_patches: int,
    seed: int = 0,
    shared: float = 10.0,
    distinct: float = 1.0,
    gamma_shared: float = 0.01,
) -> tuple[float, float]:
    """Show a LayerNorm's per-dimension gain pulling CLS and patch tokens apart.

    The first half of the features carries a zero-mean common-mode pattern
    of magnitude ``shared``, present in every token. The CLS token also
    has ``distinct`` energy on the third quarter of the features, patches
    on the last quarter. The common mode makes the raw tokens nearly
    parallel; a LayerNorm whose gain is ``gamma_shared`` on the common
    dimensions leaves only the disjoint blocks.
    """
    if d < 4:
        raise ValueError("d must be >= 4")
    rng = np.random.default_rng(seed)
    half, quarter = d // 2, d // 4
    shared_dims = np.arange(half)
    cls_dims = np.arange(half, half + quarter)
    patch_dims = np.arange(half + quarter, d)

    pattern = np.where(shared_dims % 2 == 0, 1.0, -1.0)
    common = np.zeros(d)
    common[shared_dims] = shared * pattern

    cls_token = common.copy()
    cls_token[cls_dims] += distinct
    patches = np.tile(common, (n_patches, 1))
    patches[:, patch_dims] += distinct * rng.uniform(0.5, 1.5, size=(n_patches, len(patch_dims)))

    gamma = np.ones(d)
    gamma[shared_dims] = gamma_shared
    return separation_similarity(cls_token, patches, gamma, np.zeros(d))
