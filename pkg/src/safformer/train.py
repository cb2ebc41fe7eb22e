"""Surrogate-gradient BPTT training and finite-difference gradient checks."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .layers import NonFiniteError

GRAD_CLIP = 5.0


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 2e-3
    weight_decay: float = 0.0
    seed: int = 0
    optimizer: str = "adamw"  # adamw | sgd-momentum
    momentum: float = 0.9
    grad_clip: float = GRAD_CLIP
    loss: str = "cross-entropy"
    schedule: str = "constant"  # constant | cosine
    target_accuracy: float | None = None

    def validate(self) -> "TrainConfig":
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.optimizer not in ("adamw", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss != "cross-entropy":
            raise ValueError(f"unsupported loss {self.loss!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        return self


# -- loss and gradients -----------------------------------------------------------


def forward_loss(model, images, labels, *, training=True, param_vars=None, **ctx_kw):
    logits = model.forward(images, training=training, param_vars=param_vars, **ctx_kw)
    return ag.cross_entropy(logits, labels), logits


def loss_and_grad(model, images, labels, **ctx_kw):
    """Cross-entropy of the time-averaged logits and its gradient per parameter.

    Returns ``(loss, grads, logits)``. A non-finite loss raises
    :class:`NonFiniteError` naming the first layer that produced bad values.
    """
    ctx_kw.setdefault("training", True)
    ctx_kw.setdefault("check_finite", True)
    leaves = {k: ag.param(v) for k, v in model.params.items()}
    loss, logits = forward_loss(model, images, labels, param_vars=leaves, **ctx_kw)
    if not np.isfinite(loss.data):
        raise NonFiniteError("loss")
    ag.backward(loss)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in leaves.items()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of {k}")
    return float(loss.data), grads, logits.data


def clip_grads(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return norm


class AdamW:
    def __init__(self, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict, lr=None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        for k, g in grads.items():
            m = self.m[k] = b1 * self.m.get(k, 0.0) + (1 - b1) * g
            v = self.v[k] = b2 * self.v.get(k, 0.0) + (1 - b2) * g * g
            mh = m / (1 - b1**self.t)
            vh = v / (1 - b2**self.t)
            params[k] = params[k] - lr * (mh / (np.sqrt(vh) + self.eps) + self.wd * params[k])


class SGDMomentum:
    def __init__(self, lr, momentum=0.9, weight_decay=0.0):
        self.lr, self.mu, self.wd = lr, momentum, weight_decay
        self.buf = {}

    def step(self, params: dict, grads: dict, lr=None):
        lr = self.lr if lr is None else lr
        for k, g in grads.items():
            g = g + self.wd * params[k]
            b = self.buf[k] = self.mu * self.buf.get(k, 0.0) + g
            params[k] = params[k] - lr * b


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adamw":
        return AdamW(cfg.learning_rate, cfg.weight_decay)
    return SGDMomentum(cfg.learning_rate, cfg.momentum, cfg.weight_decay)


# -- training loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_acc: float = 0.0
    best_epoch: int = -1
    checkpoint: Path | None = None


def train_loop(model, data, cfg: TrainConfig, out_dir=None, metrics_stream=None, quiet=True) -> TrainResult:
    """Train ``model`` in place on ``data``.

    Writes one JSON line per epoch to ``metrics_stream`` and
    ``out_dir/metrics.jsonl``; the best-accuracy weights go to
    ``out_dir/best.ckpt``.
    """
    cfg.validate()
    if len(data) == 0:
        raise ValueError("training set is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            metrics_file = open(out_dir / "metrics.jsonl", "w")
        except OSError as exc:
            raise OSError(f"cannot write metrics under {out_dir}: {exc}") from exc
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    opt = make_optimizer(cfg)
    result = TrainResult()
    n = len(data)
    try:
        for epoch in range(cfg.epochs):
            start = time.perf_counter()
            lr = cfg.learning_rate
            if cfg.schedule == "cosine" and cfg.epochs > 1:
                lr = 0.5 * cfg.learning_rate * (1 + math.cos(math.pi * epoch / cfg.epochs))
            order = rng.permutation(n)
            total_loss, correct = 0.0, 0
            for i in range(0, n, cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                loss, grads, logits = loss_and_grad(model, data.images[idx], data.labels[idx])
                clip_grads(grads, cfg.grad_clip)
                opt.step(model.params, grads, lr)
                total_loss += loss * len(idx)
                correct += int(np.sum(logits.argmax(axis=1) == data.labels[idx]))
            rec = {"epoch": epoch, "train_loss": total_loss / n, "train_acc": correct / n,
                   "wall_ms": (time.perf_counter() - start) * 1e3}
            result.history.append(rec)
            line = json.dumps(rec)
            if metrics_stream is not None:
                print(line, file=metrics_stream, flush=True)
            if metrics_file is not None:
                metrics_file.write(line + "\n")
                metrics_file.flush()
            if rec["train_acc"] > result.best_acc or result.best_epoch < 0:
                result.best_acc, result.best_epoch = rec["train_acc"], epoch
                if out_dir is not None:
                    result.checkpoint = out_dir / "best.ckpt"
                    model.save(result.checkpoint)
            if cfg.target_accuracy is not None and rec["train_acc"] >= cfg.target_accuracy:
                break
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if out_dir is not None:
        model.save(out_dir / "last.ckpt")
    return result


def evaluate(model, data, batch_size: int = 64) -> dict:
    logits = model.predict(data.images, batch_size)
    loss = float(ag.cross_entropy(ag.Var(logits), data.labels).data)
    acc = float(np.mean(logits.argmax(axis=1) == data.labels))
    return {"loss": loss, "accuracy": acc, "samples": len(data)}


# -- gradient checking ----------------------------------------------------------------


@dataclass
class GradReport:
    max_rel_err: dict  # parameter name -> max relative error over its elements
    checked: int
    passed: int
    failing: list  # names of parameters with at least one failing element
    rtol: float

    @property
    def pass_fraction(self) -> float:
        return self.passed / self.checked if self.checked else 1.0

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0

    def ok(self, min_fraction: float = 1.0) -> bool:
        return self.pass_fraction >= min_fraction


def compare_gradients(loss_fn, params: dict, analytic: dict, eps=1e-4, rtol=1e-2, atol=1e-8,
                      full_params: dict | None = None) -> GradReport:
    """Central differences of ``loss_fn`` against ``analytic`` grads.

    Every element of ``params`` is perturbed in place; ``loss_fn`` receives
    ``full_params`` (default ``params``). An element passes when
    ``|a - n| <= rtol * max(|a|, |n|) + atol``.
    """
    everything = params if full_params is None else full_params
    max_err, failing = {}, []
    checked = passed = 0
    for name, w in params.items():
        a = np.asarray(analytic[name])
        worst, bad = 0.0, False
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + eps
            fp = loss_fn(everything)
            w[idx] = orig - eps
            fm = loss_fn(everything)
            w[idx] = orig
            num = (fp - fm) / (2 * eps)
            diff = abs(a[idx] - num)
            scale_ = max(abs(a[idx]), abs(num))
            ok = diff <= rtol * scale_ + atol
            checked += 1
            passed += ok
            bad |= not ok
            if scale_ > atol:
                worst = max(worst, diff / scale_)
        max_err[name] = worst
        if bad:
            failing.append(name)
    return GradReport(max_err, checked, passed, failing, rtol)


def _unit_of(name: str, units: list[str]) -> int:
    for i, u in enumerate(units):
        if name.startswith(u + "."):
            return i
    return len(units)  # classifier head


def grad_check(model, images, labels, eps=1e-4, rtol=1e-2, atol=1e-8, temperature=1.0,
               max_params=50_000) -> GradReport:
    """Check BPTT gradients of ``model`` on the relaxed (smooth) path.

    Top-K masks are computed once and frozen; batch statistics are used but
    not accumulated; the reset term is differentiated exactly. A perturbed
    parameter only re-runs the network from the unit that owns it.
    """
    total = sum(v.size for v in model.params.values())
    if total > max_params:
        raise ValueError(f"grad_check limited to {max_params} parameters, model has {total}")
    kw = dict(relaxed=True, temperature=temperature, exact_reset=True, update_stats=False, masks={})
    _, grads, _ = loss_and_grad(model, images, labels, **kw)
    params = {k: v.copy() for k, v in model.params.items()}
    units = model.units()

    cache: list = []
    ctx = model.context({k: ag.Var(v) for k, v in params.items()}, training=True, **kw)
    cache.append(model.run_units(ctx, model.encode(images), cache=cache))
    owner = {k: _unit_of(k, units) for k in params}
    current = {"unit": 0}

    def f(p):
        start = current["unit"]
        ctx = model.context({k: ag.Var(v) for k, v in p.items()}, training=True, **kw)
        x = model.run_units(ctx, cache[start], start=start) if start < len(units) else cache[start]
        return float(ag.cross_entropy(model.head(ctx, x), labels).data)

    report = GradReport({}, 0, 0, [], rtol)
    for name in params:
        current["unit"] = owner[name]
        r = compare_gradients(f, {name: params[name]}, grads, eps, rtol, atol, full_params=params)
        report.max_rel_err.update(r.max_rel_err)
        report.checked += r.checked
        report.passed += r.passed
        report.failing += r.failing
    return report
