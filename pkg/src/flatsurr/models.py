"""Desk-scale architectures, parameter sets and the FSKP checkpoint format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import struct
import threading
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import ndgrad as nd
from .ndgrad import Node, ShapeError

FAMILIES = ("mlp", "smallcnn", "miniresnet")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
_RUNNING = (".running_mean", ".running_var")


class SpecError(ValueError):
    pass


class FingerprintMismatch(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    family: str
    input_shape: tuple[int, ...]
    num_classes: int
    widths: tuple[int, ...] = (32,)
    blocks: int = 1

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        self.validate()

    def validate(self):
        if self.family not in FAMILIES:
            raise SpecError(f"unknown family {self.family!r}")
        if self.num_classes < 2:
            raise SpecError("class count must be >= 2")
        if any(d < 1 for d in self.input_shape) or not self.input_shape:
            raise SpecError(f"bad input shape {self.input_shape}")
        if any(w < 1 for w in self.widths):
            raise SpecError("widths must be positive")
        if self.family == "mlp":
            return
        if len(self.input_shape) != 3:
            raise SpecError(f"{self.family} needs a (C, H, W) input shape")
        _, H, W = self.input_shape
        if H % 4 or W % 4:
            raise SpecError(f"{self.family} needs H and W divisible by 4")
        if self.family == "smallcnn" and len(self.widths) != 2:
            raise SpecError("smallcnn takes exactly two widths")
        if self.family == "miniresnet":
            if self.blocks < 1:
                raise SpecError("miniresnet needs at least one residual block")
            if len(self.widths) != 1:
                raise SpecError("miniresnet takes exactly one width")

    def to_dict(self) -> dict:
        return {"family": self.family, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "widths": list(self.widths),
                "blocks": self.blocks}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchSpec":
        return cls(family=d["family"], input_shape=tuple(d["input_shape"]),
                   num_classes=int(d["num_classes"]), widths=tuple(d.get("widths", (32,))),
                   blocks=int(d.get("blocks", 1)))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class ParamSet(Mapping):
    """Ordered named tensors of one model, batch-norm running stats included."""

    def __init__(self, tensors: Mapping[str, np.ndarray], fingerprint: str):
        self._t = dict(tensors)
        self.fingerprint = fingerprint

    def __getitem__(self, k):
        return self._t[k]

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def __repr__(self):
        return f"ParamSet({len(self)} tensors, fingerprint={self.fingerprint})"

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._t.items()}, self.fingerprint)

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamSet":
        t = dict(self._t)
        for k, v in updates.items():
            if k not in t:
                raise KeyError(k)
            t[k] = v
        return ParamSet(t, self.fingerprint)

    def trainable(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self._t.items() if not k.endswith(_RUNNING)}

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({k: v.astype(dtype) for k, v in self._t.items()}, self.fingerprint)

    def count(self, trainable_only: bool = True) -> int:
        src = self.trainable() if trainable_only else self._t
        return int(sum(v.size for v in src.values()))

    def digest(self) -> str:
        h = hashlib.sha256(self.fingerprint.encode())
        for k, v in self._t.items():
            h.update(k.encode())
            h.update(str(v.dtype).encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def equal(self, other: "ParamSet") -> bool:
        return list(self) == list(other) and all(
            np.array_equal(self[k], other[k]) for k in self)


@dataclass
class Checkpoint:
    params: ParamSet
    epoch: int
    seed: int
    optimizer: str
    config_hash: str = ""
    arch: ArchSpec | None = None
    extra: dict = field(default_factory=dict)


class Graph:
    """Architecture description plus forward construction on the tape.

    ``sgm_gamma`` sets the gradient scale of every residual-branch output;
    ``gn_range`` marks the model as a ghost network whose branch outputs are
    multiplied by per-block factors supplied at forward time.
    """

    def __init__(self, spec: ArchSpec, sgm_gamma: float = 1.0,
                 gn_range: tuple[float, float] | None = None):
        self.spec = spec
        self.sgm_gamma = float(sgm_gamma)
        self.gn_range = gn_range

    def __repr__(self):
        extra = ""
        if self.sgm_gamma != 1.0:
            extra += f", sgm_gamma={self.sgm_gamma}"
        if self.gn_range is not None:
            extra += f", gn_range={self.gn_range}"
        return f"Graph({self.spec.family}, widths={self.spec.widths}{extra})"

    def with_options(self, **kw) -> "Graph":
        opts = {"sgm_gamma": self.sgm_gamma, "gn_range": self.gn_range}
        opts.update(kw)
        return Graph(self.spec, **opts)

    @property
    def fingerprint(self) -> str:
        return self.spec.fingerprint()

    @property
    def residual_blocks(self) -> int:
        return self.spec.blocks if self.spec.family == "miniresnet" else 0

    # -- layout ---------------------------------------------------------

    def layout(self) -> list[tuple[str, tuple[int, ...], str, int]]:
        """(name, shape, kind, fan_in) for every tensor, in ParamSet order."""
        s = self.spec
        out: list = []

        def conv(name, cin, cout):
            out.append((f"{name}.weight", (cout, cin, 3, 3), "he", cin * 9))

        def bn(name, c):
            out.append((f"{name}.weight", (c,), "one", 0))
            out.append((f"{name}.bias", (c,), "zero", 0))
            out.append((f"{name}.running_mean", (c,), "zero", 0))
            out.append((f"{name}.running_var", (c,), "one", 0))

        def fc(name, din, dout, kind):
            out.append((f"{name}.weight", (din, dout), kind, din))
            out.append((f"{name}.bias", (dout,), "zero", 0))

        C = s.num_classes
        if s.family == "mlp":
            d = int(np.prod(s.input_shape))
            for i, h in enumerate(s.widths):
                fc(f"fc{i}", d, h, "he")
                d = h
            fc("out", d, C, "lecun")
        elif s.family == "smallcnn":
            cin, H, W = s.input_shape
            c1, c2 = s.widths
            conv("conv1", cin, c1)
            bn("bn1", c1)
            conv("conv2", c1, c2)
            bn("bn2", c2)
            fc("out", c2, C, "lecun")
        else:
            cin, H, W = s.input_shape
            (c,) = s.widths
            conv("stem", cin, c)
            bn("stem_bn", c)
            for b in range(s.blocks):
                conv(f"block{b}.conv_a", c, c)
                bn(f"block{b}.bn_a", c)
                conv(f"block{b}.conv_b", c, c)
                bn(f"block{b}.bn_b", c)
            fc("out", c, C, "lecun")
        return out

    def bn_layers(self) -> list[str]:
        return [n[: -len(".running_mean")] for n, *_ in self.layout() if n.endswith(".running_mean")]

    # -- checks ---------------------------------------------------------

    @staticmethod
    def dtype_of(params: Mapping[str, np.ndarray]):
        return next(iter(params.values())).dtype

    @staticmethod
    def trainable_names(params: Mapping[str, np.ndarray]) -> list[str]:
        return [k for k in params if not k.endswith(_RUNNING)]

    def check_batch(self, inputs, labels=None):
        shape = tuple(np.shape(inputs))
        if shape[1:] != self.spec.input_shape:
            raise ShapeError(f"input batch shape {shape} does not match model input "
                             f"{self.spec.input_shape}")
        if labels is not None:
            lab = np.asarray(labels)
            if lab.shape != (shape[0],):
                raise ShapeError(f"labels shape {lab.shape} does not match batch size {shape[0]}")
            if lab.size and (lab.min() < 0 or lab.max() >= self.spec.num_classes):
                raise ShapeError("label outside [0, num_classes)")

    def check_params(self, params: Mapping[str, np.ndarray]):
        expected = [(n, shp) for n, shp, *_ in self.layout()]
        got = [(k, tuple(v.shape)) for k, v in params.items()]
        if expected != got:
            raise FingerprintMismatch("parameter names/shapes do not match the architecture")
        fp = getattr(params, "fingerprint", None)
        if fp is not None and fp != self.fingerprint:
            raise FingerprintMismatch(f"fingerprint {fp} != {self.fingerprint}")

    # -- forward --------------------------------------------------------

    def forward(self, params, x: Node, mode: str = "eval", nodes=None,
                branch_factors=None):
        """Build the tape for one batch; returns ``(logits_node, bn_stats)``."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        train = mode == "train"
        nodes = dict(nodes or {})
        stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}

        def p(name) -> Node:
            if name not in nodes:
                nodes[name] = Node(params[name])
            return nodes[name]

        def bn(h, name):
            out, st = nd.batchnorm(h, p(f"{name}.weight"), p(f"{name}.bias"),
                                   params[f"{name}.running_mean"],
                                   params[f"{name}.running_var"], train, BN_EPS, name=name)
            if st is not None:
                stats[name] = st
            return out

        s = self.spec
        h = x
        if s.family == "mlp":
            if h.value.ndim > 2:
                h = nd.flatten(h)
            for i in range(len(s.widths)):
                h = nd.relu(nd.linear(h, p(f"fc{i}.weight"), p(f"fc{i}.bias"), name=f"fc{i}"),
                            name=f"fc{i}.relu")
        elif s.family == "smallcnn":
            h = nd.conv2d(h, p("conv1.weight"), name="conv1")
            h = nd.maxpool2x2(nd.relu(bn(h, "bn1")), name="pool1")
            h = nd.conv2d(h, p("conv2.weight"), name="conv2")
            h = nd.maxpool2x2(nd.relu(bn(h, "bn2")), name="pool2")
            h = nd.global_avg_pool(h)
        else:
            h = nd.conv2d(h, p("stem.weight"), name="stem")
            h = nd.maxpool2x2(nd.relu(bn(h, "stem_bn")), name="stem_pool")
            for b in range(s.blocks):
                r = nd.conv2d(h, p(f"block{b}.conv_a.weight"), name=f"block{b}.conv_a")
                r = nd.relu(bn(r, f"block{b}.bn_a"))
                r = nd.conv2d(r, p(f"block{b}.conv_b.weight"), name=f"block{b}.conv_b")
                r = bn(r, f"block{b}.bn_b")
                if branch_factors is not None:
                    r = nd.scale(r, branch_factors[b], name=f"block{b}.ghost")
                r.grad_scale = self.sgm_gamma
                h = nd.relu(nd.add(h, r, name=f"block{b}.add"))
            h = nd.global_avg_pool(h)
        logits = nd.linear(h, p("out.weight"), p("out.bias"), name="out")
        return logits, stats


def build_model(spec: ArchSpec, seed: int, dtype=np.float32) -> tuple[Graph, ParamSet]:
    """Construct a graph and its seeded initial parameters.

    Weights feeding a ReLU are He-uniform, the classifier is
    U(+-1/sqrt(fan_in)); biases and BN shifts start at 0, BN scales at 1.
    """
    spec.validate()
    graph = Graph(spec)
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, kind, fan_in in graph.layout():
        if kind == "he":
            bound = math.sqrt(6.0 / fan_in)
            t = rng.uniform(-bound, bound, size=shape)
        elif kind == "lecun":
            bound = 1.0 / math.sqrt(fan_in)
            t = rng.uniform(-bound, bound, size=shape)
        elif kind == "one":
            t = np.ones(shape)
        else:
            t = np.zeros(shape)
        tensors[name] = t.astype(dtype)
    return graph, ParamSet(tensors, spec.fingerprint())


def predict(graph: Graph, params, batch, mode: str = "eval", chunk: int = 1024,
            **fw) -> np.ndarray:
    """Logits of shape (B, C). Eval mode is side-effect free and chunked."""
    batch = np.asarray(batch, dtype=graph.dtype_of(params))
    graph.check_batch(batch)
    if mode == "train" or len(batch) <= chunk:
        logits, _ = graph.forward(params, Node(batch), mode=mode, **fw)
        return logits.value
    parts = [graph.forward(params, Node(batch[i:i + chunk]), mode=mode, **fw)[0].value
             for i in range(0, len(batch), chunk)]
    return np.concatenate(parts)


def accuracy(graph: Graph, params, inputs, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    return float((predict(graph, params, inputs).argmax(axis=1) == np.asarray(labels)).mean())


def apply_bn_stats(params: ParamSet, stats, momentum: float = BN_MOMENTUM) -> ParamSet:
    """Exponential running-stat update from train-mode batch statistics."""
    if not stats:
        return params
    upd = {}
    for name, (mean, var) in stats.items():
        rm, rv = params[f"{name}.running_mean"], params[f"{name}.running_var"]
        upd[f"{name}.running_mean"] = ((1 - momentum) * rm + momentum * mean).astype(rm.dtype)
        upd[f"{name}.running_var"] = ((1 - momentum) * rv + momentum * var).astype(rv.dtype)
    return params.replace(upd)


def refresh_bn_stats(graph: Graph, params: ParamSet, data, fraction: float = 1.0,
                     seed: int = 0, chunk: int | None = None) -> ParamSet:
    """Replace running BN statistics by those of one pass over the data.

    ``ceil(fraction * N)`` examples are drawn by a seeded permutation; the
    per-chunk batch means/variances are averaged weighted by chunk size
    (a single chunk, the default, gives the exact subset statistics).
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    data = np.asarray(data)
    if len(data) == 0:
        raise ValueError("cannot refresh batch-norm statistics on an empty dataset")
    layers = graph.bn_layers()
    if not layers:
        return params
    n = math.ceil(fraction * len(data))
    idx = np.sort(np.random.default_rng(seed).permutation(len(data))[:n])
    sub = data[idx].astype(graph.dtype_of(params))
    chunk = chunk or n
    acc = {name: [np.zeros(params[f"{name}.running_mean"].shape), np.zeros(
        params[f"{name}.running_var"].shape)] for name in layers}
    for i in range(0, n, chunk):
        xb = sub[i:i + chunk]
        _, stats = graph.forward(params, Node(xb), mode="train")
        w = len(xb) / n
        for name, (m, v) in stats.items():
            acc[name][0] += w * m.astype(np.float64)
            acc[name][1] += w * v.astype(np.float64)
    upd = {}
    for name, (m, v) in acc.items():
        dt = params[f"{name}.running_mean"].dtype
        upd[f"{name}.running_mean"] = m.astype(dt)
        upd[f"{name}.running_var"] = v.astype(dt)
    return params.replace(upd)


# ---------------------------------------------------------------------------
# FSKP checkpoint files

MAGIC = b"FSKP"
FORMAT_VERSION = 1


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {"epoch": int(ckpt.epoch), "seed": int(ckpt.seed), "optimizer": ckpt.optimizer,
            "config_hash": ckpt.config_hash, "fingerprint": ckpt.params.fingerprint,
            "arch": ckpt.arch.to_dict() if ckpt.arch is not None else None,
            "extra": ckpt.extra}
    mb = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(mb)), mb,
             struct.pack("<I", len(ckpt.params))]
    for name, t in ckpt.params.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(parts)


def parse_checkpoint(buf: bytes, spec: ArchSpec | None = None) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointFormatError("bad magic, not an FSKP checkpoint")
    try:
        version, mlen = struct.unpack_from("<II", buf, 4)
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"unsupported format version {version}")
        off = 12
        meta = json.loads(buf[off:off + mlen].decode("utf-8"))
        off += mlen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 4 * size > len(buf):
                raise CheckpointFormatError("truncated tensor payload")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(
                dims).astype(np.float32)
            off += 4 * size
    except struct.error as e:
        raise CheckpointFormatError(f"truncated checkpoint: {e}") from None
    if off != len(buf):
        raise CheckpointFormatError("trailing bytes after last tensor")
    arch = ArchSpec.from_dict(meta["arch"]) if meta.get("arch") else None
    params = ParamSet(tensors, meta["fingerprint"])
    if arch is not None:
        if arch.fingerprint() != meta["fingerprint"]:
            raise FingerprintMismatch("stored fingerprint does not match stored architecture")
        Graph(arch).check_params(params)
    if spec is not None and spec.fingerprint() != meta["fingerprint"]:
        raise FingerprintMismatch(
            f"checkpoint fingerprint {meta['fingerprint']} != expected {spec.fingerprint()}")
    return Checkpoint(params=params, epoch=meta["epoch"], seed=meta["seed"],
                      optimizer=meta["optimizer"], config_hash=meta["config_hash"],
                      arch=arch, extra=meta.get("extra") or {})


def atomic_write(path, data: bytes):
    """Write via a temporary sibling and rename; creates parent directories."""
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = f"{path}.tmp{os.getpid()}-{threading.get_ident()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def save_checkpoint(path, ckpt: Checkpoint):
    atomic_write(path, checkpoint_bytes(ckpt))


def load_checkpoint(path, spec: ArchSpec | None = None) -> Checkpoint:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read(), spec)


def replace_spec(spec: ArchSpec, **kw) -> ArchSpec:
    return dataclasses.replace(spec, **kw)
