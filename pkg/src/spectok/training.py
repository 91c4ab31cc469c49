"""Toy supervised training for specialised ViTs.

The task: 1x16x16 noise images where one quadrant has a raised mean; the
label is that quadrant. A linear head reads the CLS output and an optional
auxiliary head reconstructs each patch's pixels from its patch output, so
both weight paths receive gradient.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import KINDS, ModelConfig, SpecConfig, ViT, _patchify, build_model, model_forward
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class ToyTask:
    seed: int = 0
    n_train: int = 512
    n_eval: int = 256
    image_size: int = 16
    signal: float = 1.0
    noise: float = 0.5

    def generate(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        s = self.image_size
        half = s // 2
        labels = rng.integers(0, 4, size=n)
        images = rng.normal(0.0, self.noise, size=(n, 1, s, s))
        for i, q in enumerate(labels):
            r0, c0 = (q // 2) * half, (q % 2) * half
            images[i, 0, r0:r0 + half, c0:c0 + half] += self.signal
        return images, labels

    def splits(self):
        """``((train_x, train_y), (eval_x, eval_y))``, deterministic in ``seed``."""
        rng = np.random.default_rng(self.seed)
        return self.generate(self.n_train, rng), self.generate(self.n_eval, rng)


class Classifier:
    """A ViT plus a CLS classification head and a patch reconstruction head."""

    def __init__(self, vit: ViT, seed: int = 0):
        cfg = vit.config
        rng = np.random.default_rng([seed, 2])
        d = cfg.embed_dim
        pix = cfg.in_chans * cfg.patch_size**2
        self.vit = vit
        self.head_w = Tensor(rng.normal(0.0, cfg.init_std, (d, cfg.num_classes)), requires_grad=True)
        self.head_b = Tensor(np.zeros(cfg.num_classes), requires_grad=True)
        self.aux_w = Tensor(rng.normal(0.0, cfg.init_std, (d, pix)), requires_grad=True)
        self.aux_b = Tensor(np.zeros(pix), requires_grad=True)

    @property
    def config(self) -> ModelConfig:
        return self.vit.config

    def named_parameters(self):
        yield from self.vit.named_parameters()
        yield "head.weight", self.head_w
        yield "head.bias", self.head_b
        yield "aux_head.weight", self.aux_w
        yield "aux_head.bias", self.aux_b

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def logits(self, images) -> Tensor:
        out = model_forward(images, self.vit)
        return out.cls_out @ self.head_w + self.head_b


def loss_forward(model: Classifier, batch, w_aux: float = 0.1) -> Tensor:
    """Mean cross-entropy on the CLS head plus ``w_aux`` times the patch-pixel MSE."""
    images, labels = batch
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty batch")
    out = model_forward(images, model.vit)
    logits = out.cls_out @ model.head_w + model.head_b
    picked = T.log_softmax_rows(logits)[np.arange(len(labels)), labels]
    loss = -T.reduce("mean", picked)
    if w_aux > 0:
        target = _patchify(images, model.config.patch_size)
        pred = out.patch_out @ model.aux_w + model.aux_b
        diff = pred - target
        loss = loss + T.scale(T.reduce("mean", diff * diff), w_aux)
    return loss


@dataclass
class OptimState:
    lr: float = 0.02
    momentum: float = 0.9
    buffers: list[np.ndarray] = field(default_factory=list)


def sgd_step(params: list[Tensor], state: OptimState) -> None:
    """Classic momentum: ``b <- mu*b + g``; ``p <- p - lr*b``. Clears grads."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {i} {p.shape} has no gradient")
    if state.momentum > 0 and not state.buffers:
        state.buffers = [np.zeros_like(p.data) for p in params]
    for i, p in enumerate(params):
        if state.momentum > 0:
            buf = state.buffers[i]
            buf *= state.momentum
            buf += p.grad
            step = buf
        else:
            step = p.grad
        p.data = p.data - state.lr * step
        p.grad = None


def evaluate(model: Classifier, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
    correct = 0
    with T.no_grad():
        for i in range(0, len(labels), batch_size):
            logits = model.logits(images[i:i + batch_size]).data
            correct += int((logits.argmax(axis=-1) == labels[i:i + batch_size]).sum())
    return correct / len(labels)


@dataclass
class TrainResult:
    losses: list[float]
    eval_accuracy: float
    model: Classifier
    eval_history: dict[int, float] = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "eval_acc"])
            for step, loss in enumerate(self.losses):
                acc = self.eval_history.get(step)
                w.writerow([step, repr(loss), "" if acc is None else repr(acc)])


def train_toy(
    config: ModelConfig,
    task: ToyTask | None = None,
    steps: int = 300,
    seed: int = 0,
    batch_size: int = 16,
    lr: float = 0.02,
    momentum: float = 0.9,
    w_aux: float = 0.1,
    eval_every: int = 50,
    cls_init: str = "independent",
) -> TrainResult:
    """Train on the quadrant task; identical arguments give identical curves."""
    task = task or ToyTask(seed=seed, image_size=config.image_size)
    (train_x, train_y), (eval_x, eval_y) = task.splits()
    model = Classifier(build_model(config, seed, cls_init=cls_init), seed)
    # the reconstruction head is idle without the auxiliary loss
    params = [p for n, p in model.named_parameters() if w_aux > 0 or not n.startswith("aux_head.")]
    state = OptimState(lr, momentum)
    rng = np.random.default_rng([seed, 3])
    losses: list[float] = []
    history: dict[int, float] = {}
    for step in range(steps):
        idx = rng.choice(len(train_y), size=batch_size, replace=False)
        loss = loss_forward(model, (train_x[idx], train_y[idx]), w_aux)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergence(step, value)
        losses.append(value)
        T.backward(loss)
        sgd_step(params, state)
        if eval_every and (step + 1) % eval_every == 0 and step + 1 < steps:
            history[step] = evaluate(model, eval_x, eval_y)
            log.info("step %d loss %.4f eval_acc %.3f", step, value, history[step])
    acc = evaluate(model, eval_x, eval_y)
    if steps:
        history[steps - 1] = acc
    return TrainResult(losses, acc, model, history)


# --------------------------------------------------------------- grad check


def randomize_parameters(model: Classifier, seed: int = 0, scale: float = 0.3) -> None:
    """Give every weight a generic value so no gradient is trivially zero.

    Norm gains and LayerScale factors are drawn around 1, everything else
    around 0 with spread ``scale``.
    """
    rng = np.random.default_rng([seed, 4])
    for name, p in model.named_parameters():
        if name.endswith(".scale") or (name.endswith(".weight") and p.ndim == 1):
            p.data = rng.uniform(0.5, 1.5, size=p.shape)
        else:
            p.data = rng.normal(0.0, scale, size=p.shape)


def toy_config(**kw) -> ModelConfig:
    """The 16 px, d=32, two-block model used for the quadrant task.

    LayerScale starts at 1 rather than the usual small value: with plain SGD
    a near-zero residual branch barely moves in a few hundred steps.
    """
    base = dict(
        image_size=16, patch_size=4, embed_dim=32, depth=2, heads=4, in_chans=1,
        layerscale_init=1.0, init_std=0.1,
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_config(**kw) -> ModelConfig:
    base = dict(image_size=8, patch_size=4, embed_dim=8, depth=1, heads=2, in_chans=1)
    base.update(kw)
    return ModelConfig(**base)


def grad_check_model(config: ModelConfig, seed: int = 0, batch: int = 2, w_aux: float = 0.1, eps: float = 1e-5, corrupt: bool = False) -> float:
    """Central-difference check of :func:`loss_forward` over every parameter.

    ``corrupt`` shifts the autodiff gradient of one tensor, a fault hook for
    checking that the checker notices.
    """
    model = Classifier(build_model(config, seed), seed)
    randomize_parameters(model, seed)
    task = ToyTask(seed=seed, image_size=config.image_size)
    rng = np.random.default_rng([seed, 5])
    images, labels = task.generate(batch, rng)
    if config.in_chans != 1:
        images = np.repeat(images, config.in_chans, axis=1)
    labels = labels % config.num_classes
    named = list(model.named_parameters())
    params = [p for _, p in named]
    index = {n: i for i, (n, _) in enumerate(named)}
    known_zero = {index[n]: m for n, m in shift_invariant_coords(model.vit).items()}

    def loss_fn():
        out = loss_forward(model, (images, labels), w_aux)
        if corrupt and T._GRAD_ENABLED:
            return out + T.scale(T.reduce("sum", params[0]), 1e-3)
        return out

    return T.grad_check_params(loss_fn, params, eps, known_zero)


def shift_invariant_coords(vit) -> dict[str, np.ndarray]:
    """Key-bias coordinates whose gradient is exactly zero.

    When every token's key gets the same bias ``b`` and there is no learned
    bias slot, each attention row's logits all move by ``q . b`` and the
    softmax cancels it. That holds for the patch-path key bias of a block
    whose QKV is shared or LoRA-adapted.
    """
    out = {}
    d = vit.config.embed_dim
    for i, block in enumerate(vit.blocks):
        if block.bias_k is not None or block.qkv.cls is not None:
            continue
        mask = np.zeros(3 * d, dtype=bool)
        mask[d:2 * d] = True
        out[f"block{i}.qkv.patch.bias"] = mask
    return out


def gradcheck_grid() -> list[tuple[str, ModelConfig]]:
    """Small configurations covering every kind of CLS path and token layout."""
    grid = [(kind, tiny_config(spec=SpecConfig(ranges={kind: (0, 1)}))) for kind in KINDS]
    grid.append(("lora_qkv_r2", tiny_config(spec=SpecConfig(ranges={"qkv": (0, 1)}, lora_rank={"qkv": 2}))))
    grid.append(("attn_bias", tiny_config(attn_bias=True, spec=SpecConfig.best(1))))
    for routing in ("with_cls", "with_patches"):
        spec = SpecConfig.best(1, register_routing=routing)
        grid.append((f"registers_{routing}", tiny_config(num_registers=2, spec=spec)))
    return grid
