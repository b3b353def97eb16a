"""Three-path training and per-pixel majority-vote fusion.

The ensemble trains the plain, deform-contract, and deform-expand network
variants independently (optionally in parallel processes), keeps each path's
best-validation checkpoint, and fuses predictions per pixel: each path votes
its argmax class, two or more votes win, and a three-way split falls back to
the class with the highest mean probability across paths. The final nuclei
mask is the union of the normal and abnormal nucleus classes.
"""

from __future__ import annotations

import multiprocessing as mp
from dataclasses import dataclass, replace

import numpy as np

from . import checkpoint
from .data import CLASS_ABNORMAL, CLASS_NORMAL, normalize
from .metrics import zsi
from .network import VARIANTS, ArchConfig, Model, build_network, load_model
from .tensor import NumericalError, ShapeError, Tensor, cross_entropy_loss, softmax_channels


@dataclass
class Hyperparams:
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-3
    optimizer: str = "adam"  # "adam" or "sgd"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.9
    class_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    shuffle: bool = True
    flip_augment: bool = False
    patience: int = 0  # 0 disables; else stop after this many epochs without improvement
    target_zsi: float = 0.0  # stop once validation ZSI reaches this (0 disables)

    def make_optimizer(self, params):
        if self.optimizer == "adam":
            return Adam(params, lr=self.lr, betas=self.betas, eps=self.eps)
        if self.optimizer == "sgd":
            return SGD(params, lr=self.lr, momentum=self.momentum)
        raise ValueError(f"unknown optimizer {self.optimizer!r} (adam or sgd)")


class Adam:
    """Adaptive moment estimation over a fixed parameter list."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, params, lr=1e-3, momentum=0.9):
        self.params = list(params)
        self.lr, self.momentum = lr, momentum
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.buf[i] = self.momentum * self.buf[i] + p.grad
            p.data = p.data - self.lr * self.buf[i]


@dataclass
class TrainResult:
    model: Model
    variant: str
    seed: int
    history: list  # (epoch, train_loss, val_zsi) tuples
    best_epoch: int
    best_val_zsi: float
    final_train_loss: float
    epochs_run: int

    def manifest_extra(self):
        return {
            "seed": self.seed,
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
            "best_val_zsi": f"{self.best_val_zsi:.6f}",
            "final_train_loss": f"{self.final_train_loss:.6f}",
        }


def fuse_nuclei(mask):
    """Binary nuclei mask: 1 where the class is normal or abnormal nucleus."""
    a = np.asarray(mask)
    if a.size and (a.min() < 0 or a.max() > 3):
        raise ValueError(f"label mask values must lie in 0..3, got [{a.min()}, {a.max()}]")
    return ((a == CLASS_NORMAL) | (a == CLASS_ABNORMAL)).astype(np.uint8)


def majority_vote(prob_maps):
    """Per-pixel vote over three (C, h, w) probability maps.

    Each path votes its argmax class; two or more matching votes win. On a
    three-way split the class with the highest mean probability across paths
    wins. Deterministic, and invariant to path order.
    """
    maps = [np.asarray(p, dtype=np.float64) for p in prob_maps]
    if len(maps) != 3:
        raise ShapeError(f"majority_vote needs exactly 3 probability maps, got {len(maps)}")
    shape = maps[0].shape
    if any(p.shape != shape for p in maps):
        raise ShapeError("probability map shapes differ: "
                         + " vs ".join(str(p.shape) for p in maps))
    if len(shape) != 3:
        raise ShapeError(f"probability maps must be (classes, h, w), got {shape}")
    for p in maps:
        if np.abs(p.sum(axis=0) - 1.0).max() > 1e-6:
            raise ValueError("probability maps must be pixel-normalized (channels sum to 1)")
    c = shape[0]
    votes = np.stack([p.argmax(axis=0) for p in maps])  # (3, h, w)
    counts = (votes[None] == np.arange(c)[:, None, None, None]).sum(axis=1)  # (C, h, w)
    winner = counts.argmax(axis=0)
    mean_prob = (maps[0] + maps[1] + maps[2]) / 3.0
    split = counts.max(axis=0) == 1  # all three disagree
    return np.where(split, mean_prob.argmax(axis=0), winner).astype(np.int64)


def _batch(samples, idxs, flips=None):
    xs, ys = [], []
    for pos, i in enumerate(idxs):
        img, msk = samples[i].image, samples[i].mask
        if flips is not None:
            fv, fh = flips[pos]
            if fv:
                img, msk = img[:, ::-1], msk[::-1]
            if fh:
                img, msk = img[:, :, ::-1], msk[:, ::-1]
        xs.append(img)
        ys.append(msk)
    return Tensor(np.stack(xs)), np.stack(ys).astype(np.int64)


def _predict_labels(model, images, batch_size):
    """Argmax label maps for a list of (c,h,w) normalized images."""
    out = []
    for start in range(0, len(images), batch_size):
        chunk = np.stack(images[start:start + batch_size])
        logits = model.forward(Tensor(chunk))
        out.extend(np.argmax(logits.data, axis=1))
    return out


def validation_zsi(model, val_samples, batch_size=8):
    """Mean nuclei-mask ZSI of a single model over a validation set."""
    images = [normalize(s.image) for s in val_samples]
    labels = _predict_labels(model, images, batch_size)
    scores = [zsi(fuse_nuclei(lbl), fuse_nuclei(s.mask))
              for lbl, s in zip(labels, val_samples)]
    return float(np.mean(scores))


def train_path(cfg, train_samples, val_samples, hp, seed, log_fn=None):
    """Train one network variant; returns the best-validation-ZSI model.

    Aborts with NumericalError (naming the epoch and batch) if the loss goes
    non-finite. Identical (cfg, data, hp, seed) reproduce the run exactly.
    """
    if not train_samples:
        raise ValueError("train_path needs a non-empty training set")
    if hp.epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {hp.epochs}")
    model = build_network(cfg, seed=seed)
    params = [t for _, t, _, _ in model.param_specs]
    opt = hp.make_optimizer(params)
    rng = np.random.default_rng(seed)
    weights = np.asarray(hp.class_weights, dtype=np.float64)
    train_norm = [replace(s, image=normalize(s.image)) for s in train_samples]

    history = []
    best_zsi, best_epoch, best_state = -1.0, 0, None
    final_loss = float("nan")
    epochs_run = 0
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(len(train_norm)) if hp.shuffle else np.arange(len(train_norm))
        flips = (rng.integers(0, 2, size=(len(train_norm), 2)).astype(bool)
                 if hp.flip_augment else None)
        loss_sum = 0.0
        for bi, start in enumerate(range(0, len(order), hp.batch_size)):
            idxs = order[start:start + hp.batch_size]
            bflips = flips[start:start + hp.batch_size] if flips is not None else None
            x, y = _batch(train_norm, idxs, bflips)
            loss = cross_entropy_loss(model.forward(x), y, class_weights=weights)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {bi}")
            model.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += value * len(idxs)
        train_loss = loss_sum / len(order)
        val = validation_zsi(model, val_samples, hp.batch_size) if val_samples else 0.0
        history.append((epoch, train_loss, val))
        final_loss = train_loss
        epochs_run = epoch
        if log_fn:
            log_fn(f"epoch {epoch:3d}  loss {train_loss:.4f}  val_zsi {val:.4f}")
        if val > best_zsi:
            best_zsi, best_epoch = val, epoch
            best_state = {k: v.copy() for k, v in model.state_arrays().items()}
        if hp.target_zsi and val >= hp.target_zsi:
            break
        if hp.patience and epoch - best_epoch >= hp.patience:
            break
    if best_state is not None:
        model.load_state_arrays(best_state)
    return TrainResult(model=model, variant=cfg.variant, seed=seed, history=history,
                       best_epoch=best_epoch, best_val_zsi=best_zsi,
                       final_train_loss=final_loss, epochs_run=epochs_run)


def _train_worker(payload):
    cfg, train_samples, val_samples, hp, seed = payload
    return train_path(cfg, train_samples, val_samples, hp, seed)


def train_ensemble(base_cfg, train_samples, val_samples, hp, seed, jobs=1, log_fn=None):
    """Train all three variants with consecutive seeds; independent runs, so
    jobs > 1 fans them out to worker processes."""
    cfgs = [base_cfg.with_variant(v) for v in VARIANTS]
    seeds = [seed + i for i in range(3)]
    if jobs <= 1:
        results = []
        for cfg, s in zip(cfgs, seeds):
            if log_fn:
                log_fn(f"[{cfg.variant}] training (seed {s})")
            wrapped = (lambda msg, v=cfg.variant: log_fn(f"[{v}] {msg}")) if log_fn else None
            results.append(train_path(cfg, train_samples, val_samples, hp, s, log_fn=wrapped))
        return results
    ctx = mp.get_context("spawn")
    payloads = [(cfg, train_samples, val_samples, hp, s) for cfg, s in zip(cfgs, seeds)]
    with ctx.Pool(processes=min(jobs, 3)) as pool:
        results = pool.map(_train_worker, payloads)
    if log_fn:
        for r in results:
            log_fn(f"[{r.variant}] done: best val_zsi {r.best_val_zsi:.4f} "
                   f"at epoch {r.best_epoch}")
    return results


class EnsembleBundle:
    """Exactly three trained models (one per variant) plus their manifests."""

    def __init__(self, models, manifests=None):
        if len(models) != 3:
            raise ValueError(f"a bundle holds exactly 3 models, got {len(models)}")
        sizes = {tuple(m.cfg.input_size) for m in models}
        classes = {m.cfg.num_classes for m in models}
        if len(sizes) != 1 or len(classes) != 1:
            raise ValueError("bundle models must share input_size and num_classes")
        self.models = list(models)
        self.manifests = manifests or [{} for _ in models]

    @property
    def input_size(self):
        return tuple(self.models[0].cfg.input_size)

    def predict(self, image):
        """Raw (c, h, w) image -> (label mask, binary nuclei mask)."""
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3:
            raise ShapeError(f"predict expects a (c, h, w) image, got shape {img.shape}")
        if img.shape[1:] != self.input_size:
            raise ShapeError(
                f"image size {img.shape[1:]} does not match bundle input size {self.input_size}")
        x = Tensor(normalize(img)[None])
        probs = [softmax_channels(m.forward(x)).data[0] for m in self.models]
        labels = majority_vote(probs)
        return labels, fuse_nuclei(labels)

    def save(self, out_dir):
        import os

        os.makedirs(out_dir, exist_ok=True)
        lines = []
        for i, (model, manifest) in enumerate(zip(self.models, self.manifests)):
            path_dir = os.path.join(out_dir, f"path{i}")
            os.makedirs(path_dir, exist_ok=True)
            model.save(os.path.join(path_dir, "checkpoint.dmem"),
                       os.path.join(path_dir, "manifest.txt"), extra=manifest)
            lines.append(f"path{i}\t{model.cfg.variant}")
        with open(os.path.join(out_dir, "bundle.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, bundle_dir):
        import os

        listing = os.path.join(bundle_dir, "bundle.txt")
        models, manifests = [], []
        with open(listing, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                sub, variant = line.split("\t")
                ckpt = os.path.join(bundle_dir, sub, "checkpoint.dmem")
                manifest = os.path.join(bundle_dir, sub, "manifest.txt")
                model = load_model(ckpt, manifest)
                if model.cfg.variant != variant:
                    raise ValueError(
                        f"{sub}: bundle.txt says {variant} but manifest says {model.cfg.variant}")
                models.append(model)
                manifests.append(checkpoint.read_kv(manifest))
        return cls(models, manifests)


def predict(bundle, image):
    return bundle.predict(image)
