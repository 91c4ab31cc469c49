"""Closed-form parameter and multiply-add counts for specialised ViTs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .model import KINDS, ModelConfig

_EMBED_ENTRIES = ("embed", "pos_embed", "cls_token", "registers", "attn_bias")


def layer_params(kind: str, cfg: ModelConfig) -> int:
    """Parameters of one shared instance of ``kind``."""
    d = cfg.embed_dim
    if kind in ("pre_attn_ln", "pre_mlp_ln"):
        return 2 * d
    if kind in ("post_attn_ls", "post_mlp_ls"):
        return d
    if kind == "qkv":
        return 3 * d * d + 3 * d
    if kind == "attn_out":
        return d * d + d
    if kind == "mlp":
        h = cfg.mlp_hidden
        return d * h + h + h * d + d
    raise ValueError(f"unknown kind {kind!r}")


def cls_path_params(kind: str, cfg: ModelConfig) -> int:
    """Parameters a CLS path adds to one block: a full copy, or r*(d_in + d_out) for LoRA."""
    r = cfg.spec.lora_rank.get(kind)
    if r is None:
        return layer_params(kind, cfg)
    d_in, d_out = cfg.layer_io(kind)
    return r * (d_in + d_out)


@dataclass
class ParamReport:
    baseline_total: int
    specialized_total: int
    per_kind: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def delta(self) -> int:
        return self.specialized_total - self.baseline_total

    @property
    def delta_percent(self) -> float:
        return 100.0 * self.delta / self.baseline_total

    def rows(self):
        for kind, (base, spec) in self.per_kind.items():
            yield kind, base, spec, spec - base, 100.0 * (spec - base) / self.baseline_total
        yield "total", self.baseline_total, self.specialized_total, self.delta, self.delta_percent

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "baseline", "specialized", "delta", "delta_percent"])
            for kind, base, spec, delta, pct in self.rows():
                w.writerow([kind, base, spec, delta, repr(pct)])


def count_params(config: ModelConfig) -> ParamReport:
    """Count every weight except the task head, with and without specialisation.

    The baseline is the same architecture with no CLS paths.
    """
    cfg, spec = config, config.spec
    d, L = cfg.embed_dim, cfg.depth
    base: dict[str, int] = {
        "embed": cfg.in_chans * cfg.patch_size**2 * d + d,
        "pos_embed": cfg.num_patches * d,
        "cls_token": d,
        "registers": cfg.num_registers * d,
        "attn_bias": 2 * cfg.heads * cfg.head_dim * L if cfg.attn_bias else 0,
    }
    for kind in KINDS:
        base[kind] = L * layer_params(kind, cfg)
    base["final_norm"] = 2 * d

    extra = dict.fromkeys(base, 0)
    for kind, (lo, hi) in spec.ranges.items():
        extra[kind] = (hi - lo) * cls_path_params(kind, cfg)
    if spec.final_norm_specialized(L):
        extra["final_norm"] = 2 * d

    per_kind = {k: (base[k], base[k] + extra[k]) for k in (*_EMBED_ENTRIES, *KINDS, "final_norm")}
    total = sum(base.values())
    return ParamReport(total, total + sum(extra.values()), per_kind)


@dataclass
class FlopsReport:
    per_kind: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.per_kind.values())

    def __eq__(self, other):
        return isinstance(other, FlopsReport) and self.per_kind == other.per_kind


def count_flops(config: ModelConfig, image_size: int | None = None) -> FlopsReport:
    """Multiply-adds of every matmul in one forward pass over a single image.

    A routed layer costs (CLS-route rows + patch rows) times its per-row
    cost, the same as a shared layer; only LoRA adds the low-rank products.
    Element-wise work (norms, softmax, GELU) is not counted.
    """
    cfg, spec = config, config.spec
    size = cfg.image_size if image_size is None else image_size
    if size % cfg.patch_size:
        raise ValueError(f"image size {size} not divisible by patch size {cfg.patch_size}")
    d, h, hd, hid = cfg.embed_dim, cfg.heads, cfg.head_dim, cfg.mlp_hidden
    n_patches = (size // cfg.patch_size) ** 2
    n = 1 + cfg.num_registers + n_patches
    c = cfg.partition(n).n_cls_route
    slots = n + (1 if cfg.attn_bias else 0)

    def rows(d_in: int, d_out: int) -> int:
        return c * d_in * d_out + (n - c) * d_in * d_out

    per = {"embed": n_patches * cfg.in_chans * cfg.patch_size**2 * d}
    per.update(dict.fromkeys(KINDS, 0))
    per["attention"] = 0
    for b in range(cfg.depth):
        per["qkv"] += rows(d, 3 * d)
        per["attention"] += 2 * h * n * slots * hd
        per["attn_out"] += rows(d, d)
        per["mlp"] += rows(d, hid) + rows(hid, d)
        # norms and scales have no matmuls of their own
        for kind in KINDS:
            per[kind] += _lora_flops(spec, cfg, kind, b, c)
    return FlopsReport(per)


def _lora_flops(spec, cfg: ModelConfig, kind: str, block: int, c: int) -> int:
    r = spec.lora_rank.get(kind)
    if r is None or not spec.covers(kind, block):
        return 0
    d_in, d_out = cfg.layer_io(kind)
    return c * (d_in * r + r * d_out)


def write_flops_csv(spec_report: FlopsReport, base_report: FlopsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "baseline", "specialized", "delta"])
        for kind, spec_val in spec_report.per_kind.items():
            base_val = base_report.per_kind[kind]
            w.writerow([kind, base_val, spec_val, spec_val - base_val])
        w.writerow(["total", base_report.total, spec_report.total, spec_report.total - base_report.total])
