"""Training loop, optimizers, evaluation, and a whole-model gradient check.

The optimizer updates and the shuffle order are driven entirely by the
config seed, so a run is reproducible bit for bit on the same machine.
Weight decay is decoupled and applied only to tensors with more than one
axis; biases and normalization parameters are exempt.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset, normalize_images
from .errors import ConfigurationError, DivergenceError, NumericError
from .model import ModelSpec, ParamStore, build_model, count_params, forward_logits, variant
from .tensor import Tensor, cross_entropy_logits


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    warmup_epochs: int = 5
    weight_decay: float = 0.025
    label_smoothing: float = 0.1
    grad_clip: float = 0.02
    optimizer: str = "adamw"
    momentum: float = 0.9
    seed: int = 0
    hflip: bool = False
    # "train" uses batch statistics and updates the running state;
    # "frozen" trains against the stored running statistics, which is
    # the only sensible choice when batches are degenerate (size 1 or
    # 1x1 feature maps).
    bn_mode: str = "train"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigurationError("warmup_epochs must lie in [0, epochs]")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.bn_mode not in ("train", "frozen"):
            raise ConfigurationError(f"bn_mode must be train or frozen, got {self.bn_mode!r}")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigurationError("label_smoothing must lie in [0, 1)")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ConfigurationError("lr and grad_clip must be positive")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError("weight_decay must be >= 0 and momentum in [0, 1)")

    @property
    def forward_mode(self) -> str:
        return "train" if self.bn_mode == "train" else "infer"


def schedule_lr(base_lr: float, progress: float, warmup_frac: float) -> float:
    """Linear warmup to ``base_lr`` then a cosine decay to zero."""
    progress = min(max(progress, 0.0), 1.0)
    if warmup_frac > 0.0 and progress < warmup_frac:
        return base_lr * progress / warmup_frac
    span = max(1e-12, 1.0 - warmup_frac)
    c = (progress - warmup_frac) / span
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * c))


def _decayable(data: np.ndarray) -> bool:
    return data.ndim > 1


class AdamW:
    def __init__(self, params: dict, lr: float = 1e-3, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay and _decayable(p.data):
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class Sgd:
    def __init__(self, params: dict, lr: float = 0.1, weight_decay: float = 0.0,
                 momentum: float = 0.9):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.vel = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float = None) -> None:
        lr = self.lr if lr is None else lr
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay and _decayable(p.data):
                g = g + self.weight_decay * p.data
            v = self.vel[k]
            v *= self.momentum
            v += g
            p.data -= lr * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def make_optimizer(cfg: TrainConfig, params: dict):
    if cfg.optimizer == "adamw":
        return AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return Sgd(params, lr=cfg.lr, weight_decay=cfg.weight_decay, momentum=cfg.momentum)


def clip_gradients(params: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


def _batch(ds: Dataset, idx: np.ndarray, hflip_mask=None, dtype=np.float32):
    imgs = ds.images[idx]
    if hflip_mask is not None and hflip_mask.any():
        imgs = imgs.copy()
        imgs[hflip_mask] = imgs[hflip_mask][..., ::-1]
    x = normalize_images(imgs, ds.mean, ds.std, dtype=dtype)
    return x, ds.labels[idx]


def train_epoch(store: ParamStore, ds: Dataset, cfg: TrainConfig, opt, rng,
                total_steps: int, step_offset: int):
    """One pass over ``ds`` in a fresh shuffled order. Returns
    (mean loss, accuracy, next step offset)."""
    order = rng.permutation(len(ds))
    mode = cfg.forward_mode
    warmup_frac = cfg.warmup_epochs / cfg.epochs
    loss_sum = 0.0
    correct = 0
    step = step_offset
    for lo in range(0, len(order), cfg.batch_size):
        idx = order[lo : lo + cfg.batch_size]
        flips = rng.random(len(idx)) < 0.5 if cfg.hflip else None
        x, y = _batch(ds, idx, flips, dtype=store.dtype)
        try:
            logits = forward_logits(store, x, mode=mode)
            loss = cross_entropy_logits(logits, y, smoothing=cfg.label_smoothing)
        except NumericError as exc:
            # overflow inside an op is how divergence actually surfaces
            # when finite checks are on; keep the step index
            raise DivergenceError(step, f"step {step}: {exc}") from exc
        value = float(loss.data)
        if not np.isfinite(value):
            raise DivergenceError(step)
        loss.backward()
        clip_gradients(store.params, cfg.grad_clip)
        lr = schedule_lr(cfg.lr, (step + 1) / total_steps, warmup_frac)
        opt.step(lr)
        opt.zero_grad()
        loss_sum += value * len(idx)
        correct += int((logits.data.argmax(axis=1) == y).sum())
        step += 1
    return loss_sum / len(order), correct / len(order), step


def evaluate(store: ParamStore, ds: Dataset, batch_size: int = 256,
             label_smoothing: float = 0.0):
    """Inference-mode loss and accuracy; never touches model state."""
    loss_sum = 0.0
    correct = 0
    for lo in range(0, len(ds), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(ds)))
        x, y = _batch(ds, idx, dtype=store.dtype)
        logits = forward_logits(store, x, mode="infer")
        loss = cross_entropy_logits(logits, y, smoothing=label_smoothing)
        loss_sum += float(loss.data) * len(idx)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return loss_sum / len(ds), correct / len(ds)


def fit(store: ParamStore, train_ds: Dataset, test_ds: Dataset, cfg: TrainConfig,
        out_dir=None, header_lines=(), log=None) -> dict:
    """Full training run. Returns a summary dict and, when ``out_dir`` is
    given, writes metrics.csv and summary.json with self-describing
    comment headers."""
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg, store.params)
    steps_per_epoch = math.ceil(len(train_ds) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    rows = []
    step = 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        te = time.perf_counter()
        tr_loss, tr_acc, step = train_epoch(
            store, train_ds, cfg, opt, rng, total_steps, step
        )
        ev_loss, ev_acc = evaluate(store, test_ds, batch_size=max(cfg.batch_size, 256))
        lr_now = schedule_lr(cfg.lr, step / total_steps, cfg.warmup_epochs / cfg.epochs)
        rows.append(
            dict(epoch=epoch, lr=lr_now, train_loss=tr_loss, train_acc=tr_acc,
                 test_loss=ev_loss, test_acc=ev_acc,
                 seconds=time.perf_counter() - te)
        )
        if log:
            log(f"epoch {epoch:3d}/{cfg.epochs}  lr {lr_now:.2e}  "
                f"train {tr_loss:.4f}/{tr_acc:.3f}  test {ev_loss:.4f}/{ev_acc:.3f}")
    summary = dict(
        model=store.spec.name,
        digest=store.spec.digest(),
        params=count_params(store),
        dataset=train_ds.name,
        config=asdict(cfg),
        epochs=[dict(r) for r in rows],
        train_losses=[r["train_loss"] for r in rows],
        final_train_acc=rows[-1]["train_acc"],
        final_test_acc=rows[-1]["test_acc"],
        best_test_acc=max(r["test_acc"] for r in rows),
        wall_seconds=time.perf_counter() - t0,
    )
    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
            fh.write(f"# training metrics for model {store.spec.name}\n")
            fh.write(f"# digest {store.spec.digest()}\n")
            fh.write(f"# seed {cfg.seed} dataset {train_ds.name}\n")
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write("epoch,split,loss,top1\n")
            for r in rows:
                fh.write(f"{r['epoch']},train,{r['train_loss']:.6g},{r['train_acc']:.6g}\n")
                fh.write(f"{r['epoch']},test,{r['test_loss']:.6g},{r['test_acc']:.6g}\n")
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(dict(summary, header=list(header_lines)), fh, indent=2)
            fh.write("\n")
    return summary


def _param_kind(name: str) -> str:
    parts = [p for p in name.split(".") if not (p[:1] in "sb" and p[1:].isdigit())]
    return ".".join(parts)


GRADCHECK_STEPS = (1e-5, 1e-6, 1e-7)


def gradcheck_model(spec: ModelSpec = None, seed: int = 0, min_coords: int = 200,
                    steps=GRADCHECK_STEPS, batch: int = 2, side: int = 32) -> dict:
    """Central-difference check of the full backward pass in float64.

    Builds the model, evaluates a smoothed cross-entropy loss in train
    mode, and compares analytic gradients against two-sided finite
    differences at ``min_coords`` distinct coordinates spread round-robin
    over every parameter tensor. Relative error uses
    ``|a - n| / max(|a|, |n|, 1e-6)``.

    Each coordinate is probed at a ladder of step sizes
    ``h = s * max(1, |theta|)`` and scored by its best-converged
    estimate. A single fixed step cannot separate oracle error from
    gradient error here: too coarse and the difference quotient crosses
    ReLU kinks or feels BatchNorm's var^(-3/2) curvature, too fine and
    float64 cancellation dominates. A genuinely wrong gradient fails at
    every step because the quotient converges to the true derivative.

    BatchNorm runs on batch statistics, so the loss is a pure function
    of the parameters even though running states drift during the sweep.
    """
    if spec is None:
        spec = variant("gradcheck-tiny")
    store = build_model(spec, seed=seed, dtype="f64")
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(0.0, 1.0, size=(batch, spec.in_channels, side, side))
    labels = np.arange(batch, dtype=np.int64) % spec.classes

    def loss_value() -> float:
        logits = forward_logits(store, Tensor(x), mode="train")
        return float(cross_entropy_logits(logits, labels, smoothing=0.1).data)

    logits = forward_logits(store, Tensor(x), mode="train")
    loss = cross_entropy_logits(logits, labels, smoothing=0.1)
    loss.backward()
    analytic = {k: p.grad.copy() for k, p in store.params.items()}
    for p in store.params.values():
        p.grad = None

    names = list(store.params)
    chosen = []
    seen = set()
    i = 0
    while len(chosen) < min_coords:
        name = names[i % len(names)]
        flat = int(rng.integers(store.params[name].size))
        if (name, flat) not in seen:
            seen.add((name, flat))
            chosen.append((name, flat))
        i += 1

    t0 = time.perf_counter()
    worst = 0.0
    worst_name = ""
    per_kind: dict = {}
    for name, flat in chosen:
        buf = store.params[name].data.reshape(-1)
        orig = float(buf[flat])
        ana = float(analytic[name].reshape(-1)[flat])
        rel = math.inf
        for s in steps:
            h = s * max(1.0, abs(orig))
            buf[flat] = orig + h
            fp = loss_value()
            buf[flat] = orig - h
            fm = loss_value()
            buf[flat] = orig
            numeric = (fp - fm) / (2.0 * h)
            rel = min(rel, abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-6))
        kind = _param_kind(name)
        prev = per_kind.get(kind, (0.0, 0))
        per_kind[kind] = (max(prev[0], rel), prev[1] + 1)
        if rel > worst:
            worst, worst_name = rel, f"{name}[{flat}]"
    return dict(
        model=spec.name,
        param_total=count_params(store),
        coords=len(chosen),
        worst_rel=worst,
        worst_name=worst_name,
        per_kind=per_kind,
        seconds=time.perf_counter() - t0,
    )
