"""Token bookkeeping and activation capture shared by the model and the probes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# One record per name per block; "mlp_in" is omitted because it is the same
# activation as "pre_mlp_ln_out" (attention likewise has no separate input point).
PROBE_POINTS = (
    "pre_attn_ln_in",
    "pre_attn_ln_out",
    "attn_out",
    "post_attn_ls_in",
    "post_attn_ls_out",
    "pre_mlp_ln_in",
    "pre_mlp_ln_out",
    "mlp_out",
    "post_mlp_ls_in",
    "post_mlp_ls_out",
    "block_out",
)

ROUTINGS = ("with_cls", "with_patches")


@dataclass(frozen=True)
class TokenPartition:
    """Row layout ``[CLS, registers..., patches...]`` of a token matrix."""

    n_tokens: int
    num_registers: int = 0
    register_routing: str = "with_cls"

    def __post_init__(self):
        if self.register_routing not in ROUTINGS:
            raise ValueError(f"register_routing must be one of {ROUTINGS}")
        if self.num_registers < 0 or self.n_tokens < 1 + self.num_registers:
            raise ValueError(
                f"{self.n_tokens} tokens cannot hold CLS plus {self.num_registers} registers"
            )

    cls_index = 0

    @property
    def register_indices(self) -> range:
        return range(1, 1 + self.num_registers)

    @property
    def patch_indices(self) -> range:
        return range(1 + self.num_registers, self.n_tokens)

    @property
    def n_cls_route(self) -> int:
        """Leading rows that take the CLS path."""
        return 1 + self.num_registers if self.register_routing == "with_cls" else 1


@dataclass
class ProbeTrace:
    """Detached activation snapshots keyed by (block, point)."""

    partition: TokenPartition
    records: list[tuple[int, str, np.ndarray]] = field(default_factory=list)

    def record(self, block: int, point: str, activation) -> None:
        data = getattr(activation, "data", activation)
        self.records.append((block, point, np.array(data, dtype=np.float64, copy=True)))

    def get(self, block: int, point: str) -> np.ndarray:
        for b, p, a in self.records:
            if b == block and p == point:
                return a
        raise KeyError(f"no record for block {block}, point {point!r}")

    @property
    def blocks(self) -> list[int]:
        return sorted({b for b, _, _ in self.records})

    def points(self, block: int) -> list[str]:
        return [p for b, p, _ in self.records if b == block]
