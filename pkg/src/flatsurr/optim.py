"""Training update rules: momentum SGD, the SAM family, SWA and the trainer."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Mapping

import numpy as np

from . import ndgrad as nd
from .models import Checkpoint, Graph, ParamSet, apply_bn_stats, refresh_bn_stats

RULES = ("sgd", "swa", "sam", "asam", "gsam", "agsam", "looksam", "wasam")
_ASCENT_RULES = ("sam", "asam", "gsam", "agsam", "looksam", "wasam")


class GradientVanished(ValueError):
    pass


class Diverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class OptimizerSpec:
    rule: str = "sgd"
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    rho: float = 0.0
    alpha_gsam: float = 0.15
    looksam_k: int = 5
    looksam_warmup: int = 3
    looksam_alpha: float = 0.7
    swa_fraction: float = 0.25
    schedule: tuple = ()  # ((epoch, divisor), ...); empty means constant

    def __post_init__(self):
        object.__setattr__(self, "schedule",
                           tuple((int(e), float(d)) for e, d in self.schedule))
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}; expected one of {RULES}")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.looksam_k < 1:
            raise ValueError("looksam_k must be >= 1")
        if not 0 < self.swa_fraction <= 1:
            raise ValueError("swa_fraction must be in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = [list(s) for s in self.schedule]
        return d

    @property
    def averages_weights(self) -> bool:
        return self.rule in ("swa", "wasam")


# Neighbourhood sizes per rule; "l-" presets are the large-rho surrogates.
PRESETS: dict[str, dict] = {
    "sgd": {"rule": "sgd"},
    "swa": {"rule": "swa"},
    "sam": {"rule": "sam", "rho": 0.05},
    "l-sam": {"rule": "sam", "rho": 0.4},
    "l-sam-0.3": {"rule": "sam", "rho": 0.3},
    "gsam": {"rule": "gsam", "rho": 0.05, "alpha_gsam": 0.15},
    "l-gsam": {"rule": "gsam", "rho": 0.2, "alpha_gsam": 0.15},
    "asam": {"rule": "asam", "rho": 0.5},
    "l-asam": {"rule": "asam", "rho": 3.0},
    "agsam": {"rule": "agsam", "rho": 0.5, "alpha_gsam": 0.15},
    "l-agsam": {"rule": "agsam", "rho": 4.0, "alpha_gsam": 0.15},
    "looksam": {"rule": "looksam", "rho": 0.05, "looksam_k": 5, "looksam_warmup": 3},
    "l-looksam": {"rule": "looksam", "rho": 0.3, "looksam_k": 5, "looksam_warmup": 3},
    "wasam": {"rule": "wasam", "rho": 0.05},
}


def preset(name: str, **overrides) -> OptimizerSpec:
    return OptimizerSpec(**{**PRESETS[name], **overrides})


def step_schedule(every: int, total: int, divisor: float = 10.0) -> tuple:
    """Decay by ``divisor`` at every multiple of ``every`` below ``total``."""
    return tuple((e, divisor) for e in range(every, total, every))


def lr_at(spec: OptimizerSpec, epoch: int) -> float:
    lr = spec.lr0
    for e, div in spec.schedule:
        if e <= epoch:
            lr /= div
    return lr


@dataclass
class OptimizerState:
    momentum: dict = field(default_factory=dict)
    step: int = 0
    looksam_gv: dict | None = None
    looksam_gnorm: float = 0.0
    swa_sum: dict | None = None
    swa_count: int = 0
    swa_fingerprint: str = ""


# -- vector helpers over {name: array} ------------------------------------


def _dot(a: Mapping, b: Mapping) -> float:
    return float(sum(np.dot(np.ravel(a[k]).astype(np.float64), np.ravel(b[k]).astype(np.float64))
                     for k in a))


def _axpy(alpha: float, x: Mapping, y: Mapping) -> dict:
    """alpha * x + y, keyed like y, in y's dtype."""
    return {k: (y[k] + y[k].dtype.type(alpha) * x[k]).astype(y[k].dtype, copy=False) for k in y}


def sgd_step(params: Mapping, grads: Mapping, state: OptimizerState, lr: float,
             momentum: float, weight_decay: float) -> dict:
    """One heavy-ball step: g' = g + wd*w; m = mu*m + g'; w = w - lr*m.

    Returns the updated tensors; momentum buffers in ``state`` are replaced.
    """
    out = {}
    for k, w in params.items():
        g = grads[k]
        if not np.isfinite(g).all():
            raise nd.NonFiniteError(f"grad:{k}")
        dt = w.dtype.type
        gd = g + dt(weight_decay) * w if weight_decay else g
        m = state.momentum.get(k)
        m = gd.copy() if m is None else dt(momentum) * m + gd
        state.momentum[k] = m
        out[k] = w - dt(lr) * m
    return out


def sam_perturbation(params: Mapping, grads: Mapping, rho: float, variant: str = "sam") -> dict:
    """Ascent step of radius ``rho``; ``asam`` rescales by T_w = |w| elementwise."""
    if variant not in ("sam", "asam"):
        raise ValueError(f"unknown variant {variant!r}")
    if rho == 0:
        return {k: np.zeros_like(g) for k, g in grads.items()}
    if variant == "sam":
        gn = nd.norm(grads)
        if gn == 0:
            raise GradientVanished("zero gradient norm in SAM ascent")
        eps = {k: (g.astype(np.float64) * (rho / gn)).astype(g.dtype) for k, g in grads.items()}
        # nudge the scale by a few ulps so the measured norm lands on rho
        dt = next(iter(grads.values())).dtype
        ulp = float(np.finfo(dt).eps) if np.issubdtype(dt, np.floating) else 2.0 ** -52
        tol = float(np.spacing(dt.type(rho)))
        best, best_err = eps, abs(nd.norm(eps) - rho)
        for k in range(-8, 9):
            if best_err <= tol:
                break
            cand = {n: (e.astype(np.float64) * (1.0 + k * ulp)).astype(e.dtype)
                    for n, e in eps.items()}
            err = abs(nd.norm(cand) - rho)
            if err < best_err:
                best, best_err = cand, err
        return best
    tg = {k: np.abs(params[k]).astype(np.float64) * g for k, g in grads.items()}
    tn = nd.norm(tg)
    if tn == 0:
        raise GradientVanished("zero norm of T_w * grad in ASAM ascent")
    return {k: (np.abs(params[k]).astype(np.float64) * tg[k] * (rho / tn)).astype(grads[k].dtype)
            for k in grads}


def gsam_direction(g0: Mapping, g1: Mapping, alpha: float) -> dict:
    """g1 - alpha * (component of g0 orthogonal to g1)."""
    n1 = _dot(g1, g1)
    if n1 == 0:
        raise GradientVanished("zero perturbed-gradient norm in GSAM decomposition")
    c = _dot(g0, g1) / n1
    perp = {k: (g0[k].astype(np.float64) - c * g1[k].astype(np.float64)).astype(g0[k].dtype)
            for k in g0}
    return {k: g1[k] - g1[k].dtype.type(alpha) * perp[k] for k in g1}, perp


def sam_family_step(graph: Graph, params: ParamSet, batch, spec: OptimizerSpec,
                    state: OptimizerState, lr: float, epoch: int = 0):
    """One update of ``spec.rule`` on a mini-batch.

    Returns ``(new_params, info)`` with ``info`` holding the loss at ``w``,
    the plain gradient, the logits and the number of forward-backward passes.
    Running BN statistics are updated from the unperturbed pass only.
    """
    x, y = batch
    r0 = nd.forward_backward(graph, params, x, y, mode="train")
    g0 = r0.grads
    passes = 1
    w = params.trainable()
    rule = spec.rule
    direction = g0

    looksam_full = rule == "looksam" and (
        epoch < spec.looksam_warmup or state.step % spec.looksam_k == 0)
    if rule in ("sam", "asam", "gsam", "agsam", "wasam") or looksam_full:
        variant = "asam" if rule in ("asam", "agsam") else "sam"
        eps = sam_perturbation(w, g0, spec.rho, variant)
        r1 = nd.forward_backward(graph, params.replace(
            {k: w[k] + eps[k] for k in w}), x, y, mode="train")
        g1 = r1.grads
        passes = 2
        direction = g1
        if rule in ("gsam", "agsam"):
            direction, _ = gsam_direction(g0, g1, spec.alpha_gsam)
        elif rule == "looksam":
            n0 = _dot(g0, g0)
            c = _dot(g1, g0) / n0 if n0 > 0 else 0.0
            state.looksam_gv = {k: (g1[k].astype(np.float64) - c * g0[k].astype(np.float64)
                                    ).astype(g1[k].dtype) for k in g1}
            state.looksam_gnorm = math.sqrt(n0)
    elif rule == "looksam" and state.looksam_gv is not None:
        gvn = nd.norm(state.looksam_gv)
        if gvn > 0:
            scale = spec.looksam_alpha * nd.norm(g0) / gvn
            direction = _axpy(scale, state.looksam_gv, g0)

    new_w = sgd_step(w, direction, state, lr, spec.momentum, spec.weight_decay)
    state.step += 1
    new_params = apply_bn_stats(params.replace(new_w), r0.bn_stats)
    info = {"loss": r0.loss, "grads": g0, "logits": r0.logits, "passes": passes,
            "direction": direction}
    return new_params, info


# -- SWA --------------------------------------------------------------------


def swa_accumulate(state: OptimizerState, params: ParamSet):
    if state.swa_sum is None:
        state.swa_sum = {k: v.astype(np.float64) for k, v in params.items()}
        state.swa_fingerprint = params.fingerprint
    else:
        for k, v in params.items():
            state.swa_sum[k] += v
    state.swa_count += 1


def swa_average(state: OptimizerState, like: ParamSet | None = None) -> ParamSet:
    if not state.swa_count:
        raise ValueError("SWA finalize called with zero accumulated checkpoints")
    out = {k: (s / state.swa_count).astype(like[k].dtype if like is not None else np.float32)
           for k, s in state.swa_sum.items()}
    return ParamSet(out, state.swa_fingerprint)


def swa_finalize(state: OptimizerState, graph: Graph, data, like: ParamSet | None = None,
                 fraction: float = 1.0) -> ParamSet:
    """Mean of the accumulated parameters with batch-norm statistics refreshed."""
    avg = swa_average(state, like)
    return refresh_bn_stats(graph, avg, data, fraction)


# -- trainer ----------------------------------------------------------------


@dataclass
class Trajectory:
    checkpoints: list[Checkpoint]
    metrics: list[dict]
    swa_params: ParamSet | None = None
    passes: int = 0

    @property
    def final(self) -> ParamSet:
        if self.swa_params is not None:
            return self.swa_params
        return self.checkpoints[-1].params

    def at_epoch(self, epoch: int) -> Checkpoint:
        for c in self.checkpoints:
            if c.epoch == epoch:
                return c
        raise KeyError(f"no checkpoint for epoch {epoch}")


def _call(hooks, method, info):
    for h in hooks:
        fn = getattr(h, method, None)
        if fn is not None:
            fn(info)


def train(graph: Graph, params: ParamSet, data, spec: OptimizerSpec, epochs: int, seed: int,
          hooks: Iterable = (), batch_size: int = 128, eval_data=None,
          checkpoint_every: int = 1, batch_transform: Callable | None = None,
          metrics_sink: Callable[[dict], None] | None = None,
          config_hash: str = "") -> Trajectory:
    """Train for ``epochs`` epochs of seeded shuffled mini-batches.

    ``data`` is an ``(inputs, labels)`` pair. Checkpoints are tagged with the
    number of completed epochs (1-based). ``batch_transform(params, x, y, rng)``
    may replace each batch before the step (adversarial training).
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    x_all, y_all = np.asarray(data[0]), np.asarray(data[1])
    graph.check_batch(x_all[:1], y_all[:1])
    n = len(x_all)
    bs = min(batch_size, n)
    steps = n // bs
    hooks = list(hooks)
    rng = np.random.default_rng(seed)
    state = OptimizerState()
    swa_start = epochs - math.ceil(spec.swa_fraction * epochs)
    checkpoints, metrics = [], []
    passes = 0
    t0 = time.perf_counter()
    for epoch in range(epochs):
        lr = lr_at(spec, epoch)
        perm = rng.permutation(n)
        loss_sum, correct, seen = 0.0, 0, 0
        for it in range(steps):
            idx = perm[it * bs:(it + 1) * bs]
            xb, yb = x_all[idx], y_all[idx]
            if batch_transform is not None:
                xb = batch_transform(params, xb, yb, rng)
            before = params
            try:
                params, info = sam_family_step(graph, params, (xb, yb), spec, state, lr, epoch)
            except nd.NonFiniteError:
                raise Diverged(epoch + 1, float("nan")) from None
            if not info["loss"] <= 1e6:
                raise Diverged(epoch + 1, info["loss"])
            passes += info["passes"]
            loss_sum += info["loss"] * len(yb)
            correct += int((info["logits"].argmax(axis=1) == yb).sum())
            seen += len(yb)
            if hooks:
                _call(hooks, "on_iteration", {
                    "graph": graph, "before": before, "after": params, "x": xb, "y": yb,
                    "loss": info["loss"], "grads": info["grads"], "epoch": epoch,
                    "iteration": state.step - 1, "lr": lr})
        if spec.averages_weights and epoch >= swa_start:
            swa_accumulate(state, params)
        rec = {"epoch": epoch + 1, "lr": lr, "train_loss": loss_sum / seen,
               "train_acc": correct / seen, "eval_acc": None,
               "wallclock_s": round(time.perf_counter() - t0, 3), "fwdbwd_passes": passes}
        if eval_data is not None:
            from .models import accuracy
            rec["eval_acc"] = accuracy(graph, params, eval_data[0], eval_data[1])
        metrics.append(rec)
        if metrics_sink is not None:
            metrics_sink(rec)
        if (epoch + 1) % checkpoint_every == 0 or epoch + 1 == epochs:
            checkpoints.append(Checkpoint(params=params, epoch=epoch + 1, seed=seed,
                                          optimizer=spec.rule, config_hash=config_hash,
                                          arch=graph.spec))
        if hooks:
            _call(hooks, "on_epoch", {"graph": graph, "params": params, "epoch": epoch + 1,
                                      "metrics": rec})
    traj = Trajectory(checkpoints, metrics, passes=passes)
    if spec.averages_weights:
        traj.swa_params = swa_finalize(state, graph, x_all, like=params)
    return traj


def metrics_jsonl(metrics: Iterable[dict]) -> str:
    return "".join(json.dumps(m, sort_keys=True) + "\n" for m in metrics)


def looksam_pass_ratio(epochs: int, steps_per_epoch: int, warmup: int, k: int) -> float:
    """Closed-form LookSAM forward-backward passes relative to SGD.

    Warmup epochs cost two passes per step; afterwards every k-th global step
    (counted from 0) costs two passes and the rest one.
    """
    warm = min(warmup, epochs)
    total = epochs * steps_per_epoch
    start = warm * steps_per_epoch
    full_after = -(-total // k) - (-(-start // k))
    return (total + start + full_after) / total


def with_rho(spec: OptimizerSpec, rho: float) -> OptimizerSpec:
    return replace(spec, rho=rho)
