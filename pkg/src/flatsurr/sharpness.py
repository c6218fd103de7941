"""Weight-space sharpness diagnostics and the per-step alpha quantity.

Hessian quantities are computed from finite-difference Hessian-vector
products on a fixed data subset, in eval mode (running BN statistics), over
the trainable parameters only, in float64.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import ndgrad as nd
from .stats import welch_t_test


class NotDescent(ValueError):
    pass


class Objective:
    """A differentiable scalar function of a dict of tensors.

    ``loss_at(p)`` returns ``(loss, grads)``; ``params`` is the base point.
    """

    def __init__(self, loss_at: Callable[[Mapping], tuple], params: Mapping[str, np.ndarray]):
        self.loss_at = loss_at
        self.params = dict(params)

    def hvp(self, v: Mapping, delta: float | None = None) -> dict:
        return nd.hvp(self.loss_at, self.params, v, delta)

    def hvp_flat(self, v: np.ndarray, delta: float | None = None) -> np.ndarray:
        return nd.flat(self.hvp(nd.unflat(v, self.params), delta)).astype(np.float64)

    @property
    def dim(self) -> int:
        return sum(v.size for v in self.params.values())


def model_objective(graph, params, data, mode: str = "eval", dtype=np.float64) -> Objective:
    """Mean cross-entropy on ``data = (x, y)`` as a function of trainable params."""
    x, y = data
    if len(y) == 0:
        raise ValueError("data subset is empty")
    full = params.astype(dtype)
    x = np.asarray(x, dtype=dtype)

    def loss_at(p):
        r = nd.forward_backward(graph, full.replace(p), x, y, mode=mode)
        return r.loss, r.grads

    return Objective(loss_at, full.trainable())


def quadratic_objective(H: np.ndarray, w0: np.ndarray | None = None) -> Objective:
    """L(w) = 0.5 wᵀHw over a single tensor named ``w``."""
    H = np.asarray(H, dtype=np.float64)
    w0 = np.zeros(len(H)) if w0 is None else np.asarray(w0, dtype=np.float64)

    def loss_at(p):
        w = p["w"]
        g = H @ w
        return 0.5 * float(w @ g), {"w": g}

    return Objective(loss_at, {"w": w0})


def _objective(target, params, data) -> Objective:
    if isinstance(target, Objective):
        return target
    return model_objective(target, params, data)


def _rademacher(rng, n: int) -> np.ndarray:
    return rng.integers(0, 2, n).astype(np.float64) * 2.0 - 1.0


def hessian_top_eigenvalue(target, params=None, data=None, max_iters: int = 100,
                           tol: float = 1e-4, seed: int = 0,
                           delta: float | None = None) -> tuple[float, int]:
    """Dominant-magnitude Hessian eigenvalue by power iteration.

    ``target`` is a graph (with ``params`` and ``data``) or an ``Objective``.
    Stops when the Rayleigh quotient changes by less than ``tol`` relatively,
    or when the eigen-residual ``||Hv - λv||`` is within ``tol·|λ|``.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    obj = _objective(target, params, data)
    v = _rademacher(np.random.default_rng(seed), obj.dim)
    v /= np.linalg.norm(v)
    lam_prev = None
    lam = 0.0
    for it in range(1, max_iters + 1):
        hv = obj.hvp_flat(v, delta)
        lam = float(v @ hv)
        hn = float(np.linalg.norm(hv))
        if hn == 0.0:
            return 0.0, it
        if np.linalg.norm(hv - lam * v) <= tol * abs(lam):
            return lam, it
        if lam_prev is not None and abs(lam - lam_prev) < tol * abs(lam):
            return lam, it
        lam_prev = lam
        v = hv / hn
    return lam, max_iters


def hessian_trace(target, params=None, data=None, probes: int = 20, seed: int = 0,
                  delta: float | None = None) -> tuple[float, float]:
    """Hutchinson trace estimate with Rademacher probes and its standard error."""
    if probes < 2:
        raise ValueError("probes must be >= 2")
    obj = _objective(target, params, data)
    rng = np.random.default_rng(seed)
    vals = np.empty(probes)
    for i in range(probes):
        z = _rademacher(rng, obj.dim)
        vals[i] = z @ obj.hvp_flat(z, delta)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(probes))


def worst_case_sharpness(target, params=None, data=None, rho: float = 0.05,
                         steps: int = 20, seed: int = 0) -> float:
    """max over ||ε||₂ ≤ ρ of L(w+ε) − L(w), by projected gradient ascent.

    Steps of size ρ/10 along the normalized gradient, projected on the ball.
    The returned gap is the best over all visited points, which include the
    one-step SAM ascent point. A zero gradient is replaced by a seeded random
    unit direction.
    """
    if rho <= 0:
        raise ValueError("rho must be > 0")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    obj = _objective(target, params, data)
    w = {k: np.asarray(v, dtype=np.float64) for k, v in obj.params.items()}
    wf = nd.flat(w)
    rng = np.random.default_rng(seed)

    def at(e):
        loss, g = obj.loss_at(nd.unflat(wf + e, w))
        return loss, nd.flat(g).astype(np.float64)

    def unit(g):
        n = np.linalg.norm(g)
        if n == 0.0:
            g = rng.standard_normal(g.size)
            n = np.linalg.norm(g)
        return g / n

    base, g0 = at(np.zeros_like(wf))
    best = at(rho * unit(g0))[0]
    eps = np.zeros_like(wf)
    g = g0
    for _ in range(steps):
        eps = eps + (rho / 10.0) * unit(g)
        n = np.linalg.norm(eps)
        if n > rho:
            eps *= rho / n
        loss, g = at(eps)
        best = max(best, loss)
    return float(best - base)


# ---------------------------------------------------------------------------
# alpha quantity

_ALPHA_DESIGN = np.array([[0.0, 0.0, 1.0],
                          [0.0, 1.0, 0.0],
                          [1.0, 1.0, 1.0],
                          [2.0, 1.0, 0.0]])


def alpha_quantity(f0: float, s0: float, f1: float, s1: float) -> float:
    """Slope ratio f'(1)/|f'(0)| of the least-squares parabola through a step.

    ``s0``, ``s1`` are directional derivatives along the step measured per
    unit step length, so t=0 is the step start and t=1 its end. −1 means an
    understep with unchanged slope, 0 landing at the minimum, +1 the mirror
    overshoot.
    """
    if not s0 < 0:
        raise NotDescent(f"start slope {s0} is not negative")
    (a, b, _), *_ = np.linalg.lstsq(_ALPHA_DESIGN, np.array([f0, s0, f1, s1], dtype=np.float64),
                                    rcond=None)
    return float((2.0 * a + b) / abs(b))


@dataclass
class AlphaRecord:
    iteration: int
    epoch: int
    f0: float
    s0: float
    f1: float
    s1: float
    alpha: float


def _dot(a: Mapping, b: Mapping) -> float:
    return float(sum(np.dot(np.ravel(a[k]).astype(np.float64), np.ravel(b[k]).astype(np.float64))
                     for k in a))


class AlphaTracker:
    """Training hook recording the alpha quantity every ``every`` iterations.

    The loss and gradient at the step start come from the optimizer's own
    train-mode pass; one extra train-mode pass on the same batch evaluates
    the step end. Steps that are not descent directions are counted in
    ``skipped``. ``epoch`` on each record is the 1-based epoch being trained.
    """

    def __init__(self, every: int = 4):
        if every < 1:
            raise ValueError("every must be >= 1")
        self.every = every
        self.records: list[AlphaRecord] = []
        self.skipped = 0

    def on_iteration(self, info: dict):
        if info["iteration"] % self.every:
            return
        before, after = info["before"].trainable(), info["after"].trainable()
        d = {k: after[k].astype(np.float64) - before[k] for k in before}
        s0 = _dot(info["grads"], d)
        r1 = nd.forward_backward(info["graph"], info["after"], info["x"], info["y"], mode="train")
        s1 = _dot(r1.grads, d)
        try:
            a = alpha_quantity(info["loss"], s0, r1.loss, s1)
        except NotDescent:
            self.skipped += 1
            return
        self.records.append(AlphaRecord(info["iteration"], info["epoch"] + 1,
                                        info["loss"], s0, r1.loss, s1, a))


def alpha_campaign(records: Sequence[AlphaRecord], window_before: int, window_after: int,
                   decay_epoch: int):
    """Compare alpha before and after a learning-rate decay.

    ``decay_epoch`` is the number of completed epochs when the rate drops.
    Returns ``(before, after, (t, df, p))`` with the one-sided Welch test of
    mean(before) > mean(after).
    """
    if window_before < 1 or window_after < 1:
        raise ValueError("windows must be non-empty")
    before = [r for r in records if decay_epoch - window_before < r.epoch <= decay_epoch]
    after = [r for r in records if decay_epoch < r.epoch <= decay_epoch + window_after]
    if len(before) < 2 or len(after) < 2:
        raise ValueError(f"need >= 2 records per group, got {len(before)} and {len(after)}")
    test = welch_t_test([r.alpha for r in before], [r.alpha for r in after], "greater")
    return before, after, test


# ---------------------------------------------------------------------------
# per-epoch sharpness trace


@dataclass
class SharpnessRecord:
    epoch: int
    top_eigenvalue: float
    trace_estimate: float
    trace_stderr: float
    worst_case_gap: float | None
    n_examples: int
    probes: int


@dataclass
class SharpnessTracker:
    """Epoch hook computing Hessian diagnostics on a fixed data subset.

    ``epochs`` restricts measurement to those completed-epoch counts
    (``None`` measures every epoch). ``rho=None`` skips the worst-case probe.
    """

    data: tuple
    epochs: Iterable[int] | None = None
    probes: int = 10
    max_iters: int = 100
    tol: float = 1e-4
    rho: float | None = None
    seed: int = 0
    records: list[SharpnessRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.epochs is not None:
            self.epochs = set(self.epochs)

    def measure(self, graph, params, epoch: int) -> SharpnessRecord:
        obj = model_objective(graph, params, self.data)
        lam, _ = hessian_top_eigenvalue(obj, max_iters=self.max_iters, tol=self.tol, seed=self.seed)
        tr, se = hessian_trace(obj, probes=self.probes, seed=self.seed)
        gap = None if self.rho is None else worst_case_sharpness(obj, rho=self.rho, seed=self.seed)
        rec = SharpnessRecord(epoch, lam, tr, se, gap, len(self.data[1]), self.probes)
        self.records.append(rec)
        return rec

    def on_epoch(self, info: dict):
        if self.epochs is None or info["epoch"] in self.epochs:
            self.measure(info["graph"], info["params"], info["epoch"])


SHARPNESS_COLUMNS = ("epoch", "lambda_max", "trace", "trace_se", "worst_gap")


def sharpness_csv(records: Iterable[SharpnessRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SHARPNESS_COLUMNS)
    for r in records:
        w.writerow([r.epoch, repr(r.top_eigenvalue), repr(r.trace_estimate),
                    repr(r.trace_stderr), "" if r.worst_case_gap is None else repr(r.worst_case_gap)])
    return buf.getvalue()


def records_jsonl(records: Iterable) -> str:
    return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in records)
