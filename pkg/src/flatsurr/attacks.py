"""L-infinity BIM with composable transfer plugins, L2 PGD, SAT and LGV.

A surrogate is a ``(graph, params)`` pair. Skip-gradient (SGM) and ghost
(GN) behaviour live on the graph (see ``wrap_sgm`` / ``wrap_gn``); LGV passes
a pool of parameter sets for one graph.

Per outer iteration the attack
  1. draws the LGV pool member and the GN branch factors,
  2. picks the evaluation point: NI look-ahead, then the RAP displacement,
  3. estimates the gradient there: VT averaging over SI scale copies, each
     seen through a fresh DI transform,
  4. accumulates MI/NI momentum,
  5. takes a signed step and projects onto the ε-ball and [0, 1].
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ndgrad as nd
from .models import Graph, ParamSet, predict
from .ndgrad import Node


class AttackSpecError(ValueError):
    pass


# ---------------------------------------------------------------------------
# spec


@dataclass(frozen=True)
class MI:
    decay: float = 1.2


@dataclass(frozen=True)
class NI:
    decay: float = 0.6


@dataclass(frozen=True)
class DI:
    resize_rate: float = 0.85
    prob: float = 0.8


@dataclass(frozen=True)
class SI:
    m: int = 5


@dataclass(frozen=True)
class VT:
    beta: float = 1.8
    n: int = 5


@dataclass(frozen=True)
class RAP:
    inner_steps: int = 5
    eps_ratio: float = 2.0 / 3.0
    late_start: int = 10


@dataclass(frozen=True)
class GN:
    low: float = 0.7
    high: float = 1.3


@dataclass(frozen=True)
class SGM:
    gamma: float = 0.5


@dataclass(frozen=True)
class LGV:
    pass


PLUGINS = {"mi": MI, "ni": NI, "di": DI, "si": SI, "vt": VT, "rap": RAP, "gn": GN,
           "sgm": SGM, "lgv": LGV}


@dataclass(frozen=True)
class AttackSpec:
    """BIM configuration; ``step`` defaults to ε/10."""

    epsilon: float
    iterations: int = 50
    step: float | None = None
    targeted: bool = False
    mi: MI | None = None
    ni: NI | None = None
    di: DI | None = None
    si: SI | None = None
    vt: VT | None = None
    rap: RAP | None = None
    gn: GN | None = None
    sgm: SGM | None = None
    lgv: LGV | None = None

    def __post_init__(self):
        if self.step is None:
            object.__setattr__(self, "step", self.epsilon / 10.0)
        self.validate()

    @property
    def step_size(self) -> float:
        return float(self.step)

    @property
    def eps_n(self) -> float:
        return self.rap.eps_ratio * self.epsilon if self.rap else 0.0

    def validate(self):
        bad = []
        if not self.epsilon > 0:
            bad.append("epsilon must be > 0")
        if not self.step > 0:
            bad.append("step must be > 0")
        if self.iterations < 1:
            bad.append("iterations must be >= 1")
        if self.mi and self.ni:
            bad.append("mi and ni are mutually exclusive")
        if self.mi and self.mi.decay < 0:
            bad.append("mi.decay must be >= 0")
        if self.ni and self.ni.decay < 0:
            bad.append("ni.decay must be >= 0")
        if self.di and not (0 < self.di.resize_rate <= 1 and 0 <= self.di.prob <= 1):
            bad.append("di needs 0 < resize_rate <= 1 and 0 <= prob <= 1")
        if self.si and self.si.m < 1:
            bad.append("si.m must be >= 1")
        if self.vt and (self.vt.beta < 0 or self.vt.n < 1):
            bad.append("vt needs beta >= 0 and n >= 1")
        if self.rap and (self.rap.inner_steps < 1 or not self.rap.eps_ratio > 0
                         or self.rap.late_start < 0):
            bad.append("rap needs inner_steps >= 1, eps_ratio > 0, late_start >= 0")
        if self.gn and not 0 <= self.gn.low <= self.gn.high:
            bad.append("gn needs 0 <= low <= high")
        if self.sgm and self.sgm.gamma < 0:
            bad.append("sgm.gamma must be >= 0")
        if bad:
            raise AttackSpecError("; ".join(bad))

    def to_dict(self) -> dict:
        d = {"epsilon": self.epsilon, "iterations": self.iterations, "step": self.step,
             "targeted": self.targeted}
        for name in PLUGINS:
            v = getattr(self, name)
            d[name] = None if v is None else asdict(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        d = dict(d)
        for name, kind in PLUGINS.items():
            if d.get(name) is not None:
                d[name] = kind(**d[name])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise AttackSpecError(f"unknown attack keys {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def techniques(self) -> list[str]:
        return [n for n in PLUGINS if getattr(self, n) is not None]


# ---------------------------------------------------------------------------
# adversarial batches


@dataclass
class AdvBatch:
    originals: np.ndarray
    adversarials: np.ndarray
    labels: np.ndarray
    targets: np.ndarray | None = None
    surrogate_fingerprint: str = ""
    spec_hash: str = ""
    seed: int = 0
    epsilon: float = 0.0
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def targeted(self) -> bool:
        return self.targets is not None

    def linf(self) -> float:
        if not len(self):
            return 0.0
        return float(np.max(np.abs(self.adversarials.astype(np.float64) - self.originals)))


ADV_MAGIC = b"FSAB"


def adv_bytes(adv: AdvBatch) -> bytes:
    header = {"version": 1, "shape": list(adv.originals.shape), "n": len(adv),
              "targeted": adv.targeted, "surrogate_fingerprint": adv.surrogate_fingerprint,
              "spec_hash": adv.spec_hash, "seed": adv.seed, "epsilon": adv.epsilon,
              "extra": adv.extra}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [ADV_MAGIC, struct.pack("<I", len(hb)), hb,
             np.ascontiguousarray(adv.originals, dtype="<f4").tobytes(),
             np.ascontiguousarray(adv.adversarials, dtype="<f4").tobytes(),
             np.ascontiguousarray(adv.labels, dtype="<u2").tobytes()]
    if adv.targeted:
        parts.append(np.ascontiguousarray(adv.targets, dtype="<u2").tobytes())
    return b"".join(parts)


def parse_adv(buf: bytes) -> AdvBatch:
    if buf[:4] != ADV_MAGIC:
        raise ValueError("not an adversarial batch file")
    (hl,) = struct.unpack_from("<I", buf, 4)
    h = json.loads(buf[8:8 + hl])
    shape, n = tuple(h["shape"]), h["n"]
    size = math.prod(shape)
    off = 8 + hl
    expected = off + 8 * size + 2 * n * (2 if h["targeted"] else 1)
    if len(buf) != expected:
        raise ValueError(f"adversarial batch has {len(buf)} bytes, expected {expected}")
    xo = np.frombuffer(buf, "<f4", size, off).reshape(shape).astype(np.float32)
    xa = np.frombuffer(buf, "<f4", size, off + 4 * size).reshape(shape).astype(np.float32)
    off += 8 * size
    y = np.frombuffer(buf, "<u2", n, off).astype(np.int64)
    t = np.frombuffer(buf, "<u2", n, off + 2 * n).astype(np.int64) if h["targeted"] else None
    return AdvBatch(xo, xa, y, t, h["surrogate_fingerprint"], h["spec_hash"], h["seed"],
                    h["epsilon"], h.get("extra", {}))


def save_adv(path, adv: AdvBatch):
    from .models import atomic_write

    atomic_write(path, adv_bytes(adv))


def load_adv(path) -> AdvBatch:
    return parse_adv(Path(path).read_bytes())


def success_rate(adv: AdvBatch, graph: Graph, params: ParamSet) -> float:
    """Misclassification rate (untargeted) or hit rate on the target labels."""
    if not len(adv):
        raise ValueError("empty adversarial batch")
    pred = predict(graph, params, adv.adversarials).argmax(axis=1)
    if adv.targeted:
        return float(np.mean(pred == adv.targets))
    return float(np.mean(pred != adv.labels))


# ---------------------------------------------------------------------------
# model wrappers


def _require_residual(graph: Graph, what: str):
    if graph.residual_blocks < 1:
        raise ValueError(f"{what} needs a model with residual blocks, got {graph.spec.family}")


def wrap_sgm(graph: Graph, gamma: float = 0.5) -> Graph:
    """Scale backward gradients through every residual branch by ``gamma``."""
    _require_residual(graph, "SGM")
    return graph.with_options(sgm_gamma=gamma)


def wrap_gn(graph: Graph, value_range: tuple[float, float] = (0.7, 1.3)) -> Graph:
    """Mark the residual branches for per-iteration random scaling."""
    _require_residual(graph, "GN")
    return graph.with_options(gn_range=tuple(value_range))


def gn_factors(graph: Graph, rng) -> list[float] | None:
    if graph.gn_range is None:
        return None
    lo, hi = graph.gn_range
    return [float(f) for f in rng.uniform(lo, hi, graph.residual_blocks)]


# ---------------------------------------------------------------------------
# primitive pieces


def _l1_normalize(g: np.ndarray) -> np.ndarray:
    n = np.abs(g).reshape(len(g), -1).sum(axis=1).reshape((-1,) + (1,) * (g.ndim - 1))
    return np.divide(g, n, out=np.zeros_like(g), where=n > 0)


def mi_accumulate(m_prev: np.ndarray, g: np.ndarray, decay: float) -> np.ndarray:
    """m = decay·m_prev + g/||g||₁, normalized per example (first axis)."""
    if np.shape(m_prev) != np.shape(g):
        raise ValueError("momentum and gradient shapes differ")
    return decay * m_prev + _l1_normalize(g)


def ni_lookahead(x: np.ndarray, m: np.ndarray, step: float, decay: float) -> np.ndarray:
    return x + step * decay * m


def _di_draw(size: int, resize_rate: float, prob: float, rng):
    if size < 2:
        raise ValueError("input transform needs spatial size >= 2")
    if rng.random() >= prob:
        return None
    lo = math.ceil(resize_rate * size)
    side = int(rng.integers(lo, size + 1))
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    return side, top, left


def _di_apply(x: Node, draw) -> Node:
    if draw is None:
        return x
    side, top, left = draw
    size = x.value.shape[-1]
    return nd.pad_to(nd.resize_nearest(x, side), top, left, size)


def di_transform(x: np.ndarray, resize_rate: float, prob: float, rng) -> np.ndarray:
    """Random nearest-neighbour shrink and zero-pad back to the input size."""
    if not (0 < resize_rate <= 1 and 0 <= prob <= 1):
        raise ValueError("need 0 < resize_rate <= 1 and 0 <= prob <= 1")
    x = np.asarray(x)
    return _di_apply(Node(x), _di_draw(x.shape[-1], resize_rate, prob, rng)).value


class _Oracle:
    """Gradient of the attack objective w.r.t. the input, which is ascended.

    The objective is CE(y) untargeted and −CE(t) targeted.
    """

    def __init__(self, graph: Graph, params, labels, targets, di: DI | None, di_rng,
                 mode: str = "eval"):
        self.graph = graph
        self.params = params
        self.targeted = targets is not None
        self.labels = targets if self.targeted else labels
        self.di = di
        self.di_rng = di_rng
        self.mode = mode
        self.factors = None
        self.calls = 0

    def raw(self, x: np.ndarray, transform: bool = True) -> np.ndarray:
        self.calls += 1
        xn = Node(np.asarray(x, dtype=self.graph.dtype_of(self.params)))
        z = xn
        if transform and self.di is not None:
            z = _di_apply(xn, _di_draw(x.shape[-1], self.di.resize_rate, self.di.prob,
                                       self.di_rng))
        logits, _ = self.graph.forward(self.params, z, mode=self.mode,
                                       branch_factors=self.factors)
        loss = nd.softmax_cross_entropy(logits, self.labels)
        (g,) = nd.backward(loss, [xn])
        g = g.astype(np.float64)
        return -g if self.targeted else g


def si_gradient(oracle, x: np.ndarray, m: int) -> np.ndarray:
    """Mean over i < m of the gradient of J(x / 2^i) w.r.t. x."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if m == 1:
        return oracle(x)
    total = np.zeros(np.shape(x))
    for i in range(m):
        c = 0.5 ** i
        total += c * oracle(x * c)
    return total / m


def vt_gradient(oracle, x: np.ndarray, beta: float, eps: float, n: int, rng,
                v_prev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Variance-tuned gradient: ``(g + v_prev, mean_r g(x + r) − g)``.

    ``r`` is uniform in [−βε, βε]. With β = 0 all samples coincide with
    ``x`` and ``v_next`` is exactly zero.
    """
    if n < 1 or beta < 0:
        raise ValueError("need n >= 1 and beta >= 0")
    g = oracle(x)
    if beta == 0:
        return g + v_prev, np.zeros_like(g)
    acc = np.zeros_like(g)
    for _ in range(n):
        r = rng.uniform(-beta * eps, beta * eps, size=np.shape(x))
        acc += oracle(x + r)
    return g + v_prev, acc / n - g


def rap_displace(oracle, x_cur: np.ndarray, eps_n: float, inner_steps: int) -> np.ndarray:
    """Signed descent on the attack objective inside the ε_n box around ``x_cur``.

    Returns the displacement ``n`` with ||n||∞ ≤ ε_n and x_cur + n ∈ [0, 1].
    """
    if not eps_n > 0 or inner_steps < 1:
        raise ValueError("need eps_n > 0 and inner_steps >= 1")
    n = np.zeros(np.shape(x_cur))
    a = eps_n / inner_steps
    for _ in range(inner_steps):
        g = oracle(x_cur + n)
        n = np.clip(n - a * np.sign(g), -eps_n, eps_n)
        n = np.clip(x_cur + n, 0.0, 1.0) - x_cur
    return n


# ---------------------------------------------------------------------------
# BIM


def _as_pool(surrogate):
    graph, params = surrogate
    if isinstance(params, ParamSet):
        return graph, [params]
    pool = list(params)
    if not pool:
        raise ValueError("empty surrogate pool")
    return graph, pool


def bim(surrogate, inputs: np.ndarray, labels: np.ndarray, spec: AttackSpec, seed: int = 0,
        targets: np.ndarray | None = None, mode: str = "eval") -> AdvBatch:
    """Iterative signed-gradient L∞ attack with the plugins of ``spec``.

    ``surrogate`` is ``(graph, params)``; with LGV ``params`` is a list of
    parameter sets drawn uniformly without replacement, one per iteration.
    """
    graph, pool = _as_pool(surrogate)
    if len(pool) > 1 and spec.lgv is None:
        raise AttackSpecError("several surrogate parameter sets need the lgv plugin")
    if spec.targeted != (targets is not None):
        raise AttackSpecError("targets must be given exactly when the spec is targeted")
    if spec.sgm is not None:
        graph = wrap_sgm(graph, spec.sgm.gamma)
    if spec.gn is not None:
        graph = wrap_gn(graph, (spec.gn.low, spec.gn.high))
    x0 = np.asarray(inputs, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    graph.check_batch(x0, labels)
    if x0.min() < 0 or x0.max() > 1:
        raise ValueError("inputs must lie in [0, 1]")
    if targets is not None:
        targets = np.asarray(targets, dtype=np.int64)
        if targets.shape != labels.shape:
            raise ValueError("targets and labels differ in shape")

    lgv_rng, gn_rng, di_rng, vt_rng = (np.random.default_rng(s)
                                       for s in np.random.SeedSequence(seed).spawn(4))
    eps, step = spec.epsilon, spec.step_size
    x = x0.astype(np.float64)
    lo, hi = np.maximum(x - eps, 0.0), np.minimum(x + eps, 1.0)
    adv = x.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    order: list[int] = []
    oracle = _Oracle(graph, pool[0], labels, targets, spec.di, di_rng, mode)

    def estimate(p):
        g_fn = oracle.raw
        if spec.si is not None:
            def g_fn(z, _m=spec.si.m):
                return si_gradient(oracle.raw, z, _m)
        return g_fn(p)

    for it in range(spec.iterations):
        if len(pool) > 1:
            if not order:
                order = list(lgv_rng.permutation(len(pool)))
            oracle.params = pool[order.pop(0)]
        oracle.factors = gn_factors(graph, gn_rng)

        point = adv
        if spec.ni is not None:
            point = ni_lookahead(adv, m, step, spec.ni.decay)
        if spec.rap is not None and it >= spec.rap.late_start:
            point = point + rap_displace(lambda z: oracle.raw(z, transform=False),
                                         point, spec.eps_n, spec.rap.inner_steps)
        if spec.vt is not None:
            g, v = vt_gradient(estimate, point, spec.vt.beta, eps, spec.vt.n, vt_rng, v)
        else:
            g = estimate(point)
        if spec.mi is not None:
            m = mi_accumulate(m, g, spec.mi.decay)
            g = m
        elif spec.ni is not None:
            m = mi_accumulate(m, g, spec.ni.decay)
            g = m
        adv = np.clip(adv + step * np.sign(g), lo, hi)

    return AdvBatch(x0, adv.astype(np.float32), labels, targets, graph.fingerprint,
                    spec.digest(), seed, eps, {"gradient_calls": oracle.calls})


# ---------------------------------------------------------------------------
# L2 PGD and slight adversarial training


def _l2_per_example(a: np.ndarray) -> np.ndarray:
    return np.sqrt((a.reshape(len(a), -1) ** 2).sum(axis=1)).reshape((-1,) + (1,) * (a.ndim - 1))


def pgd_l2(graph: Graph, params, inputs, labels, epsilon: float, steps: int, step_size: float,
           targeted: bool = False, targets=None, mode: str = "eval") -> AdvBatch:
    """L2 PGD: normalized-gradient steps, per-example projection on the ε-ball."""
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if targeted != (targets is not None):
        raise ValueError("targets must be given exactly when targeted")
    x0 = np.asarray(inputs, dtype=np.float32)
    oracle = _Oracle(graph, params, np.asarray(labels), None if targets is None
                     else np.asarray(targets), None, None, mode)
    x = x0.astype(np.float64)
    adv = x.copy()
    for _ in range(steps):
        g = oracle.raw(adv)
        gn = _l2_per_example(g)
        adv = adv + step_size * np.divide(g, gn, out=np.zeros_like(g), where=gn > 0)
        d = adv - x
        dn = _l2_per_example(d)
        d = d * np.minimum(1.0, epsilon / np.maximum(dn, 1e-300))
        adv = np.clip(x + d, 0.0, 1.0)
    return AdvBatch(x0, adv.astype(np.float32), np.asarray(labels),
                    None if targets is None else np.asarray(targets),
                    graph.fingerprint, "", 0, epsilon)


def sat_transform(graph: Graph, epsilon: float, steps: int, step_size: float):
    """Batch transform replacing each training batch by its L2 PGD perturbation.

    The inner attack uses train-mode batch statistics without updating the
    running estimates.
    """
    def transform(params, x, y, rng):
        if steps == 0:
            return x
        return pgd_l2(graph, params, x, y, epsilon, steps, step_size, mode="train").adversarials
    return transform


def adversarial_train_sat(graph: Graph, params: ParamSet, data, epsilon: float, steps: int,
                          step_size: float, spec, epochs: int, seed: int, **train_kw):
    from .optim import train

    return train(graph, params, data, spec, epochs, seed,
                 batch_transform=sat_transform(graph, epsilon, steps, step_size), **train_kw)


# ---------------------------------------------------------------------------
# LGV


class _Snapshot:
    def __init__(self, marks: set[int]):
        self.marks = marks
        self.taken: list[ParamSet] = []

    def on_iteration(self, info):
        if info["iteration"] in self.marks:
            self.taken.append(info["after"])


def lgv_collect(graph: Graph, params: ParamSet, data, lr_const: float = 0.05, epochs: int = 10,
                per_epoch: int = 4, seed: int = 0, momentum: float = 0.9,
                weight_decay: float = 5e-4, batch_size: int = 128) -> list[ParamSet]:
    """Continue SGD at a constant rate, keeping ``per_epoch`` evenly spaced snapshots."""
    from .optim import OptimizerSpec, train

    if epochs < 1 or per_epoch < 1:
        raise ValueError("epochs and per_epoch must be >= 1")
    steps = len(data[1]) // min(batch_size, len(data[1]))
    if per_epoch > steps:
        raise ValueError(f"per_epoch={per_epoch} exceeds {steps} steps per epoch")
    marks = {e * steps + (j + 1) * steps // per_epoch - 1
             for e in range(epochs) for j in range(per_epoch)}
    snap = _Snapshot(marks)
    spec = OptimizerSpec(rule="sgd", lr0=lr_const, momentum=momentum, weight_decay=weight_decay)
    train(graph, params, data, spec, epochs, seed, hooks=[snap], batch_size=batch_size)
    return snap.taken


def lgv_swa(pool: Sequence[ParamSet], graph: Graph | None = None, data=None,
            fraction: float = 1.0) -> ParamSet:
    """Mean of the pool; running BN statistics are recomputed when ``data`` is given."""
    from .models import refresh_bn_stats

    if not pool:
        raise ValueError("empty pool")
    like = pool[0]
    mean = {k: (sum(p[k].astype(np.float64) for p in pool) / len(pool)).astype(like[k].dtype)
            for k in like}
    out = ParamSet(mean, like.fingerprint)
    if data is not None and graph is not None:
        out = refresh_bn_stats(graph, out, data, fraction=fraction)
    return out
