"""``spectok`` command line.

Every run is described by one JSON document (``--config``); ``--set
dotted.key=value`` overrides single fields, with ``value`` parsed as JSON
when possible. Exit codes: 0 success, 1 check failed, 2 config error,
3 I/O error, 4 training diverged.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import accounting, probes
from .images import SUFFIX, read_raw_image
from .model import ConfigError, ModelConfig, SpecConfig, build_model, load_checkpoint, model_forward, save_checkpoint
from .training import ToyTask, TrainingDivergence, grad_check_model, gradcheck_grid, train_toy

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4
GRADCHECK_TOL = 1e-4

DEFAULTS: dict = {
    "model": {
        "image_size": 16,
        "patch_size": 4,
        "embed_dim": 32,
        "depth": 2,
        "heads": 4,
        "mlp_ratio": 4.0,
        "num_registers": 0,
        "attn_bias": False,
        "num_classes": 4,
        "in_chans": 1,
        "layerscale_init": 1.0,
        "init_std": 0.1,
    },
    "spec": {
        "preset": "none",
        "ranges": {},
        "lora_rank": {},
        "register_routing": "with_cls",
        "final_norm": None,
    },
    "seed": 0,
    "output_dir": "spectok_out",
    "checkpoint": None,
    "probe": {"images": "synthetic", "num_images": 4},
    "train": {
        "steps": 300,
        "batch_size": 16,
        "lr": 0.02,
        "momentum": 0.9,
        "w_aux": 0.1,
        "eval_every": 50,
        "n_train": 512,
        "n_eval": 256,
        "signal": 1.0,
        "noise": 0.5,
    },
    "gradcheck": {"eps": 1e-5, "batch": 2, "max_params": 10_000, "grid": False, "fault_injection": False},
    "separation": {"d": 16, "n_patches": 16, "shared": 10.0, "distinct": 1.0, "gamma_shared": 0.01},
}

# sections whose keys are free-form mappings
_OPEN_SECTIONS = {("spec", "ranges"), ("spec", "lora_rank")}


class RunConfigError(Exception):
    pass


def _merge(base: dict, override: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = ".".join(path + (key,))
        if key not in base:
            raise RunConfigError(f"unknown key '{where}'")
        if isinstance(base[key], dict) and path + (key,) not in _OPEN_SECTIONS:
            if not isinstance(value, dict):
                raise RunConfigError(f"'{where}' must be an object")
            out[key] = _merge(base[key], value, path + (key,))
        else:
            out[key] = value
    return out


def _apply_set(doc: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise RunConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise RunConfigError(f"--set {key}: '{part}' is not an object")
    node[parts[-1]] = value


def load_run_config(path: str | None, sets: list[str] = ()) -> dict:
    """Parse, merge over defaults and validate; raises RunConfigError."""
    doc: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise RunConfigError(f"cannot read config {path}: {exc}") from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise RunConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise RunConfigError(f"{path}: top level must be an object")
    for s in sets:
        _apply_set(doc, s)
    return _merge(DEFAULTS, doc)


def build_spec(section: dict, depth: int) -> SpecConfig:
    preset = section["preset"]
    kw = dict(
        lora_rank=section["lora_rank"],
        register_routing=section["register_routing"],
        final_norm=section["final_norm"],
    )
    if preset == "none":
        ranges = {}
    elif preset == "norms":
        ranges = dict(SpecConfig.norms(depth).ranges)
    elif preset == "best":
        ranges = dict(SpecConfig.best(depth).ranges)
    else:
        raise RunConfigError(f"spec.preset must be none, norms or best, got {preset!r}")
    ranges.update({k: tuple(v) for k, v in section["ranges"].items()})
    return SpecConfig(ranges=ranges, **kw)


def model_config(run: dict) -> ModelConfig:
    try:
        m = run["model"]
        return ModelConfig(spec=build_spec(run["spec"], int(m["depth"])), **m)
    except (ConfigError, TypeError, ValueError) as exc:
        raise RunConfigError(f"model/spec: {exc}") from None


# ------------------------------------------------------------------ commands


def _outdir(run: dict) -> Path:
    out = Path(run["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_count(run: dict) -> int:
    cfg = model_config(run)
    out = _outdir(run)
    params = accounting.count_params(cfg)
    flops = accounting.count_flops(cfg)
    base_flops = accounting.count_flops(cfg.baseline())
    params.write_csv(out / "params.csv")
    accounting.write_flops_csv(flops, base_flops, out / "flops.csv")
    print(f"baseline_params {params.baseline_total}")
    print(f"specialized_params {params.specialized_total}")
    print(f"delta_percent {params.delta_percent:.4f}")
    print(f"flops_baseline {base_flops.total}")
    print(f"flops_specialized {flops.total}")
    return EXIT_OK


def _load_images(run: dict, cfg: ModelConfig) -> list[np.ndarray]:
    src = run["probe"]["images"]
    if src == "synthetic":
        task = ToyTask(seed=run["seed"], image_size=cfg.image_size)
        imgs, _ = task.generate(int(run["probe"]["num_images"]), np.random.default_rng([run["seed"], 7]))
        return [np.repeat(im, cfg.in_chans, axis=0) for im in imgs]
    folder = Path(src)
    if not folder.is_dir():
        raise OSError(f"image source {src} is neither 'synthetic' nor a directory")
    files = sorted(folder.glob(f"*{SUFFIX}"))
    if not files:
        raise OSError(f"no {SUFFIX} files in {src}")
    images, bad = [], []
    for f in files:
        try:
            img = read_raw_image(f)
        except (OSError, ValueError) as exc:
            bad.append(f"{f}: {exc}")
            continue
        if img.shape != (cfg.in_chans, cfg.image_size, cfg.image_size):
            bad.append(f"{f}: shape {img.shape} does not match the model")
            continue
        images.append(img)
    if bad:
        raise OSError("unreadable images:\n  " + "\n  ".join(bad))
    return images


def _build_vit(run: dict, cfg: ModelConfig):
    vit = build_model(cfg, run["seed"])
    if run["checkpoint"]:
        state = load_checkpoint(run["checkpoint"])
        names = {n for n, _ in vit.named_parameters()}
        vit.load_state_dict({k: v for k, v in state.items() if k in names})
    return vit


def cmd_probe(run: dict) -> int:
    cfg = model_config(run)
    try:
        images = _load_images(run, cfg)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    out = _outdir(run)
    try:
        vit = _build_vit(run, cfg)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return EXIT_IO
    traces = []
    for i, img in enumerate(images):
        res = model_forward(img, vit, trace=True)
        traces.append(res.trace)
        probes.write_ppm(out / f"pca_{i:03d}.ppm", probes.pca_rgb(res.patch_out, (cfg.grid, cfg.grid)))
    rows = probes.similarity_rows(traces, seed=run["seed"])
    probes.write_stats_csv(rows, out / "similarity.csv")
    print(f"wrote {len(rows)} similarity rows and {len(images)} PCA maps to {out}")
    return EXIT_OK


def cmd_train(run: dict) -> int:
    cfg = model_config(run)
    t = run["train"]
    task = ToyTask(
        seed=run["seed"], n_train=t["n_train"], n_eval=t["n_eval"],
        image_size=cfg.image_size, signal=t["signal"], noise=t["noise"],
    )
    out = _outdir(run)
    try:
        res = train_toy(
            cfg, task, steps=t["steps"], seed=run["seed"], batch_size=t["batch_size"],
            lr=t["lr"], momentum=t["momentum"], w_aux=t["w_aux"], eval_every=t["eval_every"],
        )
    except TrainingDivergence as exc:
        print(f"error: training diverged at step {exc.step}", file=sys.stderr)
        return EXIT_DIVERGED
    res.write_csv(out / "loss.csv")
    save_checkpoint(out / "checkpoint.sptk", res.model.state_dict())
    print(f"steps {len(res.losses)}")
    print(f"eval_accuracy {res.eval_accuracy:.4f}")
    return EXIT_OK


def _gradcheck_size(cfg: ModelConfig) -> int:
    heads = (cfg.embed_dim + 1) * (cfg.num_classes + cfg.in_chans * cfg.patch_size**2)
    return accounting.count_params(cfg).specialized_total + heads


def cmd_gradcheck(run: dict) -> int:
    """Check the configured model, or with ``gradcheck.grid`` the built-in tiny grid."""
    g = run["gradcheck"]
    targets = gradcheck_grid() if g["grid"] else [("config", model_config(run))]
    for name, c in targets:
        size = _gradcheck_size(c)
        if size > g["max_params"]:
            print(f"error: {name} has {size} parameters; gradcheck allows at most {g['max_params']}", file=sys.stderr)
            return EXIT_CONFIG
    worst = 0.0
    for name, c in targets:
        err = grad_check_model(c, run["seed"], batch=g["batch"], eps=g["eps"], corrupt=g["fault_injection"])
        print(f"{name} max_rel_error {err:.3e}")
        worst = max(worst, err)
    print(f"max_rel_error {worst:.3e}")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_CHECK


def cmd_separation(run: dict) -> int:
    s = run["separation"]
    pre, post = probes.ln_separation_demo(
        s["d"], s["n_patches"], run["seed"], s["shared"], s["distinct"], s["gamma_shared"]
    )
    print(f"pre_sim {pre:.6f}")
    print(f"post_sim {post:.6f}")
    return EXIT_OK


COMMANDS = {
    "count": cmd_count,
    "probe": cmd_probe,
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "separation": cmd_separation,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="spectok", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config field (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run = load_run_config(args.config, args.set)
        return COMMANDS[args.command](run)
    except RunConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
