"""Batch command-line pipeline: synth, train, predict, eval, gradcheck.

Config precedence is defaults < config file < command-line flags; every run
echoes its effective configuration, which is the reference for reproducing
it. Exit codes are stable for scripting: 0 success, 2 usage or I/O problems,
3 numerical failure, 4 data mismatch.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from .blocks import Conv2dLayer, DenseBlock, DenseBlockConfig, DenseLayer, TransitionDown, TransitionUp
from .checkpoint import read_kv, write_kv
from .deform import bilinear_sample, deformable_conv2d
from .ensemble import (
    EnsembleBundle,
    Hyperparams,
    fuse_nuclei,
    train_ensemble,
    train_path,
)
from .network import DEFORM_CONTRACT, DEFORM_EXPAND, PLAIN, VARIANTS, ArchConfig, load_model
from .tensor import (
    NumericalError,
    ShapeError,
    Tensor,
    concat_channels,
    conv2d,
    cross_entropy_loss,
    grad_check,
    max_pool2d,
    relu,
    scale_grad,
    softmax_channels,
    transposed_conv2d,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_MISMATCH = 4

VARIANT_ALIASES = {
    "plain": PLAIN,
    "d-con": DEFORM_CONTRACT,
    "deform-contract": DEFORM_CONTRACT,
    "d-exp": DEFORM_EXPAND,
    "deform-expand": DEFORM_EXPAND,
}


class DataMismatch(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Config handling


def _coerce(default, raw):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in parts)
    return raw


def effective_config(defaults, config_path, overrides):
    """defaults < config file < explicit flags (None means not passed)."""
    cfg = dict(defaults)
    if config_path:
        kv = read_kv(config_path)
        unknown = sorted(set(kv) - set(defaults))
        if unknown:
            raise ValueError(f"unknown config key(s) {unknown}; known: {sorted(defaults)}")
        for key, raw in kv.items():
            cfg[key] = _coerce(defaults[key], raw)
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    return cfg


def _echo_config(cfg, header):
    print(f"# {header}")
    for key in sorted(cfg):
        print(f"config: {key} = {cfg[key]}")


def _config_text(cfg):
    return {k: cfg[k] for k in sorted(cfg)}


# ---------------------------------------------------------------------------
# synth


SYNTH_DEFAULTS = {
    "count": 16,
    "size": 64,
    "seed": 0,
    "noise": 0.08,
    "nuclei_min": 1,
    "nuclei_max": 3,
    "normal_radius": (6.0, 9.0),
    "abnormal_radius": (2.5, 4.5),
    "image_format": "png",
}


def cmd_synth(args):
    cfg = effective_config(SYNTH_DEFAULTS, args.config, {
        "count": args.count,
        "size": args.size,
        "seed": args.seed,
        "noise": args.noise,
        "nuclei_min": args.nuclei_min,
        "nuclei_max": args.nuclei_max,
        "normal_radius": args.normal_radius,
        "abnormal_radius": args.abnormal_radius,
        "image_format": args.image_format,
    })
    _echo_config(cfg, "synth")
    spec = data_mod.SynthSpec(
        count=cfg["count"], size=cfg["size"], seed=cfg["seed"], noise=cfg["noise"],
        nuclei_min=cfg["nuclei_min"], nuclei_max=cfg["nuclei_max"],
        normal_radius=tuple(cfg["normal_radius"]),
        abnormal_radius=tuple(cfg["abnormal_radius"]))
    samples = data_mod.generate_synthetic(spec)
    os.makedirs(args.out, exist_ok=True)
    index = data_mod.save_dataset(samples, args.out, image_format=cfg["image_format"])
    write_kv(os.path.join(args.out, "synth_config.txt"), _config_text(cfg))
    print(f"wrote {len(samples)} samples under {args.out} (index: {index})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


TRAIN_DEFAULTS = {
    "epochs": 40,
    "batch_size": 8,
    "lr": 1e-3,
    "optimizer": "adam",
    "seed": 0,
    "jobs": 1,
    "val_count": 0,  # 0 means one fifth of the dataset
    "stages": 3,
    "initial_channels": 16,
    "growth_rate": 8,
    "layers_per_block": 3,
    "num_classes": 4,
    "class_weights": (1.0, 1.0, 1.0, 1.0),
    "patience": 0,
    "target_zsi": 0.0,
    "flip_augment": False,
}


def _write_history(path, history):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\ttrain_loss\tval_zsi\n")
        for epoch, loss, val in history:
            fh.write(f"{epoch}\t{loss:.6f}\t{val:.6f}\n")


def cmd_train(args):
    cfg = effective_config(TRAIN_DEFAULTS, args.config, {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "optimizer": args.optimizer,
        "seed": args.seed,
        "jobs": args.jobs,
        "val_count": args.val_count,
        "stages": args.stages,
        "initial_channels": args.initial_channels,
        "growth_rate": args.growth_rate,
        "layers_per_block": args.layers_per_block,
        "num_classes": args.num_classes,
        "class_weights": args.class_weights,
        "patience": args.patience,
        "target_zsi": args.target_zsi,
        "flip_augment": args.flip_augment,
    })
    _echo_config(cfg, "train")
    if cfg["epochs"] < 1:
        raise ValueError(f"epochs must be >= 1, got {cfg['epochs']}")

    samples = data_mod.load_dataset(args.data)
    if not samples:
        raise ValueError(f"dataset {args.data} is empty")
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"dataset images disagree on shape: {sorted(shapes)}")
    c, h, w = samples[0].image.shape
    val_count = cfg["val_count"] or max(1, len(samples) // 5)
    if val_count >= len(samples):
        raise ValueError(f"val_count {val_count} leaves no training samples of {len(samples)}")
    train_samples, val_samples = samples[:-val_count], samples[-val_count:]
    print(f"dataset: {len(train_samples)} train / {len(val_samples)} val, images {c}x{h}x{w}")

    arch = ArchConfig(
        stages=cfg["stages"], in_channels=c, initial_channels=cfg["initial_channels"],
        growth_rate=cfg["growth_rate"], layers_per_block=cfg["layers_per_block"],
        num_classes=cfg["num_classes"], input_size=(h, w))
    arch.validate()
    hp = Hyperparams(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        optimizer=cfg["optimizer"], class_weights=tuple(cfg["class_weights"]),
        patience=cfg["patience"], target_zsi=cfg["target_zsi"],
        flip_augment=cfg["flip_augment"])

    os.makedirs(args.out, exist_ok=True)
    write_kv(os.path.join(args.out, "run_config.txt"), _config_text(cfg))
    run_extra = {"optimizer": hp.optimizer, "lr": hp.lr, "batch_size": hp.batch_size,
                 "epochs_max": hp.epochs}

    if args.single_path:
        variant = VARIANT_ALIASES[args.single_path]
        try:
            result = train_path(arch.with_variant(variant), train_samples, val_samples,
                                hp, cfg["seed"], log_fn=print)
        except NumericalError as exc:
            raise NumericalError(f"[{variant}] {exc}") from exc
        extra = dict(run_extra)
        extra.update(result.manifest_extra())
        extra["run"] = "ablation-single-path"
        result.model.save(os.path.join(args.out, "checkpoint.dmem"),
                          os.path.join(args.out, "manifest.txt"), extra=extra)
        _write_history(os.path.join(args.out, "history.tsv"), result.history)
        print(f"[{variant}] best val_zsi {result.best_val_zsi:.4f} at epoch {result.best_epoch}; "
              f"saved to {args.out}")
        return EXIT_OK

    results = train_ensemble(arch, train_samples, val_samples, hp, cfg["seed"],
                             jobs=cfg["jobs"], log_fn=print)
    manifests = []
    for r in results:
        extra = dict(run_extra)
        extra.update(r.manifest_extra())
        extra["run"] = "ensemble-path"
        manifests.append(extra)
    bundle = EnsembleBundle([r.model for r in results], manifests)
    bundle.save(args.out)
    for i, r in enumerate(results):
        _write_history(os.path.join(args.out, f"path{i}", "history.tsv"), r.history)
        print(f"[{r.variant}] best val_zsi {r.best_val_zsi:.4f} at epoch {r.best_epoch}")
    print(f"bundle saved to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict


def _load_predictor(bundle_dir):
    """A bundle dir (bundle.txt) or a single-model dir (checkpoint.dmem)."""
    if os.path.exists(os.path.join(bundle_dir, "bundle.txt")):
        bundle = EnsembleBundle.load(bundle_dir)

        def run(image):
            return bundle.predict(image)

        return run, bundle.input_size
    ckpt = os.path.join(bundle_dir, "checkpoint.dmem")
    manifest = os.path.join(bundle_dir, "manifest.txt")
    if not os.path.exists(ckpt):
        raise OSError(f"{bundle_dir} holds neither bundle.txt nor checkpoint.dmem")
    model = load_model(ckpt, manifest)

    def run(image):
        x = Tensor(data_mod.normalize(image)[None])
        labels = np.argmax(model.forward(x).data[0], axis=0)
        return labels, fuse_nuclei(labels)

    return run, tuple(model.cfg.input_size)


def cmd_predict(args):
    predictor, input_size = _load_predictor(args.bundle)
    samples = data_mod.load_dataset(args.data)
    if not samples:
        raise ValueError(f"dataset {args.data} is empty")
    os.makedirs(args.out, exist_ok=True)
    timings = []
    for s in samples:
        if s.image.shape[1:] != input_size:
            raise ShapeError(
                f"{s.id}: image size {s.image.shape[1:]} does not match model {input_size}")
        t0 = time.perf_counter()
        labels, nuclei = predictor(s.image)
        dt = time.perf_counter() - t0
        timings.append((s.id, dt))
        data_mod.write_mask_png(os.path.join(args.out, f"{s.id}_labels.png"), labels)
        data_mod.write_mask_png(os.path.join(args.out, f"{s.id}_nuclei.png"), nuclei)
    with open(os.path.join(args.out, "timing.tsv"), "w", encoding="utf-8") as fh:
        fh.write("id\tseconds\n")
        for sid, dt in timings:
            fh.write(f"{sid}\t{dt:.4f}\n")
    mean_dt = float(np.mean([dt for _, dt in timings]))
    print(f"predicted {len(samples)} images to {args.out} "
          f"(mean {mean_dt:.3f} s/image on this host)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _binary_from_mask(path):
    mask = data_mod.read_mask_png(path)
    values = set(np.unique(mask).tolist())
    if values <= {0, 1}:
        return mask.astype(bool)
    if values <= {0, 255}:
        return mask > 0
    if values <= {0, 1, 2, 3}:
        return fuse_nuclei(mask).astype(bool)
    raise ValueError(f"{path}: cannot interpret mask values {sorted(values)}")


def _gt_masks(gt_path):
    """{id: binary nuclei mask} from a mask directory or an index file."""
    if os.path.isdir(gt_path):
        out = {}
        for name in sorted(os.listdir(gt_path)):
            if not name.endswith(".png"):
                continue
            sid = name[:-4]
            for suffix in ("_labels", "_nuclei", "_mask"):
                if sid.endswith(suffix):
                    sid = sid[: -len(suffix)]
            out[sid] = _binary_from_mask(os.path.join(gt_path, name))
        if not out:
            raise ValueError(f"no .png masks found in {gt_path}")
        return out
    samples = data_mod.load_dataset(gt_path)
    return {s.id: fuse_nuclei(s.mask).astype(bool) for s in samples}


def _pred_masks(pred_dir, ids):
    out = {}
    found = set()
    for name in os.listdir(pred_dir):
        if not name.endswith(".png"):
            continue
        stem = name[:-4]
        for suffix in ("_nuclei", "_labels"):
            if stem.endswith(suffix):
                stem = stem[: -len(suffix)]
        found.add(stem)
    missing = sorted(set(ids) - found)
    extra = sorted(found - set(ids))
    if missing or extra:
        raise DataMismatch(
            f"{pred_dir}: id mismatch with ground truth; missing {missing or 'none'}, "
            f"unexpected {extra or 'none'}")
    for sid in ids:
        nuclei = os.path.join(pred_dir, f"{sid}_nuclei.png")
        labels = os.path.join(pred_dir, f"{sid}_labels.png")
        plain = os.path.join(pred_dir, f"{sid}.png")
        path = nuclei if os.path.exists(nuclei) else labels if os.path.exists(labels) else plain
        out[sid] = _binary_from_mask(path)
    return out


def cmd_eval(args):
    gt = _gt_masks(args.gt)
    ids = sorted(gt)
    columns = {}
    for spec in args.pred:
        name, _, path = spec.rpartition("=")
        if not name:
            name = os.path.basename(os.path.normpath(path))
        preds = _pred_masks(path, ids)
        rows = [metrics_mod.score_pair(sid, preds[sid], gt[sid]) for sid in ids]
        columns[name] = metrics_mod.aggregate(rows)
    table = metrics_mod.summary_table(columns)
    print(table, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        for name, report in columns.items():
            with open(os.path.join(args.out, f"{name}.tsv"), "w", encoding="utf-8") as fh:
                fh.write(metrics_mod.report_tsv(report))
        with open(os.path.join(args.out, "summary.txt"), "w", encoding="utf-8") as fh:
            fh.write(table)
        print(f"reports written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


GRADCHECK_TOL = 1e-4


def _sq_sum(t):
    return (t * t).sum()


def _case_conv2d(rng):
    x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    return lambda x, w, b: _sq_sum(conv2d(x, w, b, pad=1)), [x, w, b]


def _case_conv2d_stride2(rng):
    x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    return lambda x, w, b: _sq_sum(conv2d(x, w, b, stride=2, pad=1)), [x, w, b]


def _case_transposed_conv2d(rng):
    x = Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    return lambda x, w, b: _sq_sum(transposed_conv2d(x, w, b)), [x, w, b]


def _case_max_pool2d(rng):
    # evenly spaced values keep window gaps far above the probe step
    vals = rng.permutation(np.linspace(-1.0, 1.0, 72)).reshape(1, 2, 6, 6)
    x = Tensor(vals, requires_grad=True)
    return lambda x: _sq_sum(max_pool2d(x)), [x]


def _case_relu(rng):
    # keep probes away from the kink at 0
    vals = rng.uniform(0.05, 1.0, (1, 3, 4, 4)) * rng.choice([-1.0, 1.0], (1, 3, 4, 4))
    x = Tensor(vals, requires_grad=True)
    return lambda x: _sq_sum(relu(x)), [x]


def _case_softmax_channels(rng):
    x = Tensor(rng.standard_normal((1, 4, 3, 3)), requires_grad=True)
    return lambda x: _sq_sum(softmax_channels(x)), [x]


def _case_cross_entropy(rng):
    logits = Tensor(rng.standard_normal((1, 4, 4, 4)), requires_grad=True)
    target = rng.integers(0, 4, (1, 4, 4))
    weights = (1.0, 0.8, 1.2, 1.5)
    return lambda lg: cross_entropy_loss(lg, target, class_weights=weights), [logits]


def _case_concat_channels(rng):
    a = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True)
    return lambda a, b: _sq_sum(concat_channels([a, b])), [a, b]


def _case_bilinear_sample(rng):
    x = Tensor(rng.standard_normal((1, 1, 5, 5)), requires_grad=True)
    p = Tensor(np.array([1.0, 2.0]) + rng.uniform(0.2, 0.4, 2), requires_grad=True)
    return lambda x, p: _sq_sum(bilinear_sample(x, p)), [x, p]


def _case_deformable_conv2d(rng):
    x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    # offsets sit ~0.3 px off-grid so probes stay clear of interpolation kinks
    off = Tensor(0.3 + rng.uniform(-0.1, 0.1, (1, 18, 5, 5)), requires_grad=True)
    return lambda x, w, b, off: _sq_sum(deformable_conv2d(x, w, b, off, pad=1)), [x, w, b, off]


def _layer_tensors(layer, rng, fractional_offsets=False):
    params = []
    for name, t, kind, fan_in in layer.named_params("p"):
        if kind == "he":
            t.data = rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)), t.data.shape)
        elif fractional_offsets and name.endswith("offset.b"):
            t.data = 0.25 + rng.uniform(-0.05, 0.05, t.data.shape)
        params.append(t)
    return params


def _case_dense_layer(rng):
    layer = DenseLayer(3, DenseBlockConfig(1, 2))
    params = _layer_tensors(layer, rng)
    x = Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
    return lambda x, *ps: _sq_sum(layer(x)), [x] + params


def _case_dense_layer_deformable(rng):
    layer = DenseLayer(2, DenseBlockConfig(1, 2, deformable=True))
    params = _layer_tensors(layer, rng, fractional_offsets=True)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    return lambda x, *ps: _sq_sum(layer(x)), [x] + params


def _case_dense_block(rng):
    block = DenseBlock(3, DenseBlockConfig(2, 2))
    params = _layer_tensors(block, rng)
    x = Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
    return lambda x, *ps: _sq_sum(block(x)), [x] + params


def _case_transition_down(rng):
    layer = TransitionDown(3)
    params = _layer_tensors(layer, rng)
    x = Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
    return lambda x, *ps: _sq_sum(layer(x)), [x] + params


def _case_transition_up(rng):
    layer = TransitionUp(3, 2)
    params = _layer_tensors(layer, rng)
    x = Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True)
    return lambda x, *ps: _sq_sum(layer(x)), [x] + params


GRADCHECK_CASES = {
    "conv2d": _case_conv2d,
    "conv2d_stride2": _case_conv2d_stride2,
    "transposed_conv2d": _case_transposed_conv2d,
    "max_pool2d": _case_max_pool2d,
    "relu": _case_relu,
    "softmax_channels": _case_softmax_channels,
    "cross_entropy": _case_cross_entropy,
    "concat_channels": _case_concat_channels,
    "bilinear_sample": _case_bilinear_sample,
    "deformable_conv2d": _case_deformable_conv2d,
    "dense_layer": _case_dense_layer,
    "dense_layer_deformable": _case_dense_layer_deformable,
    "dense_block": _case_dense_block,
    "transition_down": _case_transition_down,
    "transition_up": _case_transition_up,
}


def run_gradcheck(scope="all", seed=0, h=1e-5, corrupt=None):
    """Run the finite-difference suite; returns [(name, max_rel_err)]."""
    if scope == "all":
        names = list(GRADCHECK_CASES)
    elif scope in GRADCHECK_CASES:
        names = [scope]
    else:
        raise ValueError(f"unknown gradcheck op {scope!r}; known: all, {', '.join(GRADCHECK_CASES)}")
    results = []
    for name in names:
        rng = np.random.default_rng(seed + sum(name.encode()))
        f, inputs = GRADCHECK_CASES[name](rng)
        if corrupt == name:
            inner = f
            f = lambda *xs: scale_grad(inner(*xs), 1.001)
        results.append((name, grad_check(f, inputs, h=h)))
    return results


def cmd_gradcheck(args):
    results = run_gradcheck(scope=args.scope, seed=args.seed if args.seed is not None else 0,
                            corrupt=args.selftest_corrupt)
    width = max(len(n) for n, _ in results)
    failed = False
    for name, err in results:
        ok = err < GRADCHECK_TOL
        failed = failed or not ok
        print(f"{name:<{width}}  {err:.3e}  {'ok' if ok else 'FAIL'}")
    if failed:
        print(f"gradcheck: FAILED (tolerance {GRADCHECK_TOL:g})")
        return EXIT_NUMERIC
    print(f"gradcheck: all passed (tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _pair(text):
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}")
    return tuple(float(p) for p in parts)


def _weights(text):
    parts = [p for p in text.replace(",", " ").split() if p]
    return tuple(float(p) for p in parts)


def build_parser():
    parser = argparse.ArgumentParser(prog="dmem", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (overridden by flags)")
    common.add_argument("--seed", type=int, help="random seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--nuclei-min", type=int, dest="nuclei_min")
    p.add_argument("--nuclei-max", type=int, dest="nuclei_max")
    p.add_argument("--normal-radius", type=_pair, dest="normal_radius")
    p.add_argument("--abnormal-radius", type=_pair, dest="abnormal_radius")
    p.add_argument("--image-format", choices=["png", "raw"], dest="image_format")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train the three-path ensemble")
    p.add_argument("--data", required=True, help="dataset index file")
    p.add_argument("--out", required=True, help="bundle output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--jobs", type=int, help="parallel worker processes for the three paths")
    p.add_argument("--val-count", type=int, dest="val_count")
    p.add_argument("--stages", type=int)
    p.add_argument("--initial-channels", type=int, dest="initial_channels")
    p.add_argument("--growth-rate", type=int, dest="growth_rate")
    p.add_argument("--layers-per-block", type=int, dest="layers_per_block")
    p.add_argument("--num-classes", type=int, dest="num_classes")
    p.add_argument("--class-weights", type=_weights, dest="class_weights")
    p.add_argument("--patience", type=int)
    p.add_argument("--target-zsi", type=float, dest="target_zsi")
    p.add_argument("--flip-augment", action="store_const", const=True, dest="flip_augment")
    p.add_argument("--single-path", choices=sorted(VARIANT_ALIASES), dest="single_path",
                   help="train one variant only (ablation run)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="write label and nuclei masks")
    p.add_argument("--bundle", required=True, help="bundle or single-model directory")
    p.add_argument("--data", required=True, help="dataset index file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("--gt", required=True, help="mask directory or dataset index file")
    p.add_argument("--pred", action="append", required=True,
                   help="prediction directory, optionally NAME=DIR; repeatable")
    p.add_argument("--out", help="directory for TSV reports and the summary block")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of every differentiable op")
    p.add_argument("scope", nargs="?", default="all")
    p.add_argument("--selftest-corrupt", dest="selftest_corrupt",
                   help="perturb the named op's analytic gradient to prove failures are caught")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DataMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, data_mod.GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
