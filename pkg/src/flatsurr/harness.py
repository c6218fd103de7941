"""Experiment orchestration: config, resumable runs, sweeps, early stopping.

An artifact directory holds

    data/{train,test,val}.fsds          datasets
    targets/<name>.fskp                 fully trained target models
    surrogates/seed<s>/epoch<e>.fskp    per-epoch surrogate checkpoints
    surrogates/seed<s>/metrics.jsonl    training metrics
    surrogates/seed<s>/alpha.jsonl      alpha records (when enabled)
    surrogates/seed<s>/sharpness.csv    Hessian diagnostics (when enabled)
    surrogates/seed<s>/done.json        completion marker
    eval/seed<s>-n<n>.json              attack evaluation indices
    manifest.json                       data/targets configuration of the shared part
    adv/seed<s>/epoch<e>.fsab           adversarial batches
    transfer.csv, aggregate.csv, argmax.csv, *.svg

Every file is written atomically and every stage skips work whose output
already exists, so a rerun over a complete directory trains nothing.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import attacks as A
from . import data as D
from . import models as M
from . import optim as O
from . import report as R
from . import sharpness as S

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class RunError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# configuration


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataCfg(_Strict):
    kind: Literal["blobs", "spirals", "patterned-images"] = "patterned-images"
    n_train: int = Field(2048, ge=1)
    n_test: int = Field(1024, ge=1)
    n_val: int = Field(0, ge=0)
    classes: int = Field(10, ge=2)
    noise: float = Field(0.1, ge=0)
    seed: int = 0
    image_shape: tuple[int, int, int] = (1, 16, 16)
    amplitude: float = 0.08
    texture: float = 0.035
    label_noise: float = Field(0.2, ge=0, le=1)
    dim: int = 2


class ArchCfg(_Strict):
    family: Literal["mlp", "smallcnn", "miniresnet"] = "miniresnet"
    widths: tuple[int, ...] = (16,)
    blocks: int = 1

    def spec(self, data: DataCfg) -> M.ArchSpec:
        shape = data.image_shape if data.kind == "patterned-images" else (data.dim,)
        return M.ArchSpec(self.family, shape, data.classes, self.widths, self.blocks)

    def tag(self) -> str:
        return f"{self.family}-{'x'.join(map(str, self.widths))}-b{self.blocks}"


class ZooEntry(ArchCfg):
    lr0: float = Field(0.1, gt=0)


def default_zoo() -> list[ZooEntry]:
    return [ZooEntry(family="mlp", widths=(128,), lr0=0.03),
            ZooEntry(family="mlp", widths=(256, 128), lr0=0.03),
            ZooEntry(family="smallcnn", widths=(16, 32)),
            ZooEntry(family="smallcnn", widths=(32, 32)),
            ZooEntry(family="miniresnet", widths=(16,), blocks=1),
            ZooEntry(family="miniresnet", widths=(16,), blocks=2)]


class OptCfg(_Strict):
    preset: str = "sgd"
    rule: str | None = None
    lr0: float | None = None
    momentum: float | None = None
    weight_decay: float | None = None
    rho: float | None = None
    alpha_gsam: float | None = None
    looksam_k: int | None = None
    looksam_warmup: int | None = None
    looksam_alpha: float | None = None
    swa_fraction: float | None = None
    # decays of the desk-scale 60-epoch run; [] keeps the rate constant
    schedule: list[tuple[int, float]] = [(20, 10.0), (40, 10.0)]

    def spec(self) -> O.OptimizerSpec:
        over = {k: v for k, v in self.model_dump().items() if k != "preset" and v is not None}
        if "schedule" in over:
            over["schedule"] = tuple(tuple(s) for s in over["schedule"])
        try:
            return O.preset(self.preset, **over)
        except (KeyError, ValueError, TypeError) as e:
            raise ConfigError(str(e)) from e


class TargetsCfg(_Strict):
    zoo: list[ZooEntry] = Field(default_factory=default_zoo)
    seeds: list[int] = Field(default_factory=lambda: [100], min_length=1)
    epochs: int = Field(30, ge=1)
    schedule: list[tuple[int, float]] = [(10, 10.0), (20, 10.0)]
    batch_size: int = 128


class SatCfg(_Strict):
    epsilon: float = Field(0.025, gt=0)
    steps: int = Field(7, ge=0)
    step_size: float | None = None


class SurrogateCfg(_Strict):
    arch: ArchCfg = Field(default_factory=ArchCfg)
    optimizer: OptCfg = Field(default_factory=OptCfg)
    epochs: int = Field(60, ge=1)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    batch_size: int = 128
    checkpoint_every: int = Field(1, ge=1)
    sat: SatCfg | None = None


class LgvCfg(_Strict):
    lr_const: float | None = None
    epochs: int = Field(10, ge=1)
    per_epoch: int = Field(4, ge=1)


class AttackCfg(_Strict):
    epsilon: float = Field(8 / 255, gt=0)
    iterations: int = Field(50, ge=1)
    step: float | None = None
    targeted: bool = False
    plugins: dict[str, dict[str, Any]] = Field(default_factory=dict)
    eval_n: int = Field(500, ge=1)
    epochs: Literal["all", "final"] | list[int] = "final"
    lgv: LgvCfg | None = None

    @field_validator("plugins")
    @classmethod
    def _known(cls, v):
        bad = set(v) - set(A.PLUGINS)
        if bad:
            raise ValueError(f"unknown attack plugins {sorted(bad)}")
        return v

    def spec(self) -> A.AttackSpec:
        d = {"epsilon": self.epsilon, "iterations": self.iterations, "step": self.step,
             "targeted": self.targeted}
        d.update(self.plugins)
        if self.lgv is not None:
            d.setdefault("lgv", {})
        try:
            return A.AttackSpec.from_dict(d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e


class DiagCfg(_Strict):
    sharpness: bool = False
    sharpness_epochs: list[int] | None = None
    hessian_subset: int = Field(256, ge=1)
    probes: int = Field(10, ge=2)
    max_iters: int = Field(100, ge=1)
    tol: float = 1e-4
    worst_rho: float | None = None
    alpha_every: int = Field(0, ge=0)


class EarlyStopCfg(_Strict):
    enabled: bool = False
    zoo: list[ZooEntry] = Field(default_factory=list)
    seeds: list[int] = Field(default_factory=lambda: [200])
    n: int = Field(200, ge=1)


class SweepCfg(_Strict):
    path: str
    values: list[Any] = Field(min_length=2)


class OutputCfg(_Strict):
    dir: str = "runs/experiment"
    shared_dir: str | None = None


class ExperimentConfig(_Strict):
    name: str = "experiment"
    data: DataCfg = Field(default_factory=DataCfg)
    targets: TargetsCfg = Field(default_factory=TargetsCfg)
    surrogate: SurrogateCfg = Field(default_factory=SurrogateCfg)
    attack: AttackCfg = Field(default_factory=AttackCfg)
    diagnostics: DiagCfg = Field(default_factory=DiagCfg)
    early_stop: EarlyStopCfg = Field(default_factory=EarlyStopCfg)
    sweep: SweepCfg | None = None
    output: OutputCfg = Field(default_factory=OutputCfg)
    threads: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.sweep is not None:
            get_path(self.model_dump(), self.sweep.path)
        if self.early_stop.enabled and self.data.n_val < 1:
            raise ValueError("early stopping needs data.n_val >= 1")
        self.surrogate.optimizer.spec()
        self.attack.spec()
        return self

    def digest(self) -> str:
        d = self.model_dump(mode="json")
        d.pop("output")
        d.pop("threads")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def get_path(d: dict, path: str):
    cur = d
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise ConfigError(f"config path {path!r} does not exist")
        cur = cur[part]
    return cur


def set_path(d: dict, path: str, value) -> dict:
    d = copy.deepcopy(d)
    get_path(d, path)
    parts = path.split(".")
    cur = d
    for part in parts[:-1]:
        cur = cur[part]
    cur[parts[-1]] = value
    return d


def parse_config(obj) -> ExperimentConfig:
    """Validate a mapping, YAML text or an existing config."""
    if isinstance(obj, ExperimentConfig):
        return obj
    if isinstance(obj, str):
        obj = yaml.safe_load(obj) or {}
    try:
        return ExperimentConfig.model_validate(obj)
    except ConfigError:
        raise
    except Exception as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


# ---------------------------------------------------------------------------
# helpers


def _json_write(path: Path, obj):
    M.atomic_write(path, (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode())


def _derive_seed(*parts) -> int:
    h = hashlib.sha256(json.dumps(parts).encode()).digest()
    return int.from_bytes(h[:4], "little")


class AccessLog:
    """Records which (target, example) pairs each phase touches."""

    def __init__(self):
        self.entries: list[tuple[str, str, tuple[str, ...]]] = []

    def touch(self, phase: str, target: str, split: str, example_ids):
        self.entries.append((phase, target, tuple(f"{split}:{int(i)}" for i in example_ids)))

    def pairs(self, phase: str) -> set[tuple[str, str]]:
        return {(t, i) for p, t, ids in self.entries if p == phase for i in ids}

    def targets(self, phase: str) -> set[str]:
        return {t for p, t, _ in self.entries if p == phase}


class Run:
    """Stage runner over one artifact directory."""

    def __init__(self, config, out_dir=None, access_log: AccessLog | None = None):
        self.cfg = parse_config(config)
        self.dir = Path(out_dir or self.cfg.output.dir)
        self.shared = Path(self.cfg.output.shared_dir) if self.cfg.output.shared_dir else self.dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.shared.mkdir(parents=True, exist_ok=True)
        self.log = access_log or AccessLog()
        self._check_manifest()
        self.trained = 0
        self._data: dict[str, D.Dataset] = {}
        self._targets = None
        self._val_targets = None

    def _check_manifest(self):
        # the shared directory caches data and targets; refuse to mix configurations
        c = self.cfg
        key = {"data": c.data.model_dump(mode="json"), "targets": c.targets.model_dump(mode="json"),
               "validation_zoo": c.early_stop.model_dump(mode="json", include={"zoo", "seeds"})}
        path = self.shared / "manifest.json"
        if path.exists():
            if json.loads(path.read_text()) != key:
                raise ConfigError(f"{self.shared} holds data/targets of a different configuration")
        else:
            _json_write(path, key)

    # -- data -------------------------------------------------------------

    def datasets(self) -> dict[str, D.Dataset]:
        if self._data:
            return self._data
        c = self.cfg.data
        sizes = {"train": c.n_train, "test": c.n_test}
        if c.n_val:
            sizes["val"] = c.n_val
        paths = {k: self.shared / "data" / f"{k}.fsds" for k in sizes}
        if all(p.exists() for p in paths.values()):
            self._data = {k: D.load_dataset(p) for k, p in paths.items()}
            return self._data
        kw = {}
        if c.kind == "patterned-images":
            kw = dict(image_shape=c.image_shape, amplitude=c.amplitude, texture=c.texture)
        else:
            kw = dict(dim=c.dim)
        self._data = D.gen_splits(c.kind, sizes, c.classes, c.noise, c.seed,
                                  label_noise=c.label_noise, **kw)
        for k, p in paths.items():
            D.save_dataset(p, self._data[k])
        return self._data

    # -- targets ----------------------------------------------------------

    def _train_zoo(self, zoo, seeds, subdir) -> list[tuple[str, M.Graph, M.ParamSet]]:
        tc = self.cfg.targets
        train = self.datasets()["train"]
        out = []
        for i, entry in enumerate(zoo):
            for s in seeds:
                name = f"{entry.tag()}-s{s}"
                path = self.shared / subdir / f"{name}.fskp"
                spec = entry.spec(self.cfg.data)
                if path.exists():
                    ck = M.load_checkpoint(path, spec)
                    graph = M.Graph(spec)
                else:
                    graph, params = M.build_model(spec, _derive_seed("target", name, i))
                    ospec = O.preset("sgd", lr0=entry.lr0,
                                     schedule=tuple(tuple(x) for x in tc.schedule))
                    traj = O.train(graph, params, train.pair, ospec, tc.epochs, seed=s,
                                   batch_size=tc.batch_size, checkpoint_every=tc.epochs)
                    self.trained += 1
                    ck = traj.checkpoints[-1]
                    ck.extra = {"name": name}
                    M.save_checkpoint(path, ck)
                out.append((name, graph, ck.params))
        return out

    def targets(self):
        if self._targets is None:
            self._targets = self._train_zoo(self.cfg.targets.zoo, self.cfg.targets.seeds,
                                            "targets")
        return self._targets

    def validation_targets(self):
        es = self.cfg.early_stop
        if self._val_targets is None:
            self._val_targets = self._train_zoo(es.zoo, es.seeds, "val_targets")
            test_ids = {p.digest() for _, _, p in self.targets()}
            if any(p.digest() in test_ids for _, _, p in self._val_targets):
                raise ValueError("validation targets overlap the test targets")
        return self._val_targets

    # -- surrogates -------------------------------------------------------

    def surrogate_dir(self, seed: int) -> Path:
        return self.dir / "surrogates" / f"seed{seed}"

    def surrogate_graph(self) -> M.Graph:
        return M.Graph(self.cfg.surrogate.arch.spec(self.cfg.data))

    def train_surrogate(self, seed: int):
        sc, dc = self.cfg.surrogate, self.cfg.diagnostics
        d = self.surrogate_dir(seed)
        if (d / "done.json").exists():
            return
        spec_arch = sc.arch.spec(self.cfg.data)
        graph, params = M.build_model(spec_arch, seed)
        ospec = sc.optimizer.spec()
        train = self.datasets()["train"]
        hooks = []
        alpha = None
        if dc.alpha_every:
            alpha = S.AlphaTracker(dc.alpha_every)
            hooks.append(alpha)
        transform = None
        if sc.sat is not None:
            st = sc.sat
            transform = A.sat_transform(graph, st.epsilon, st.steps,
                                        st.step_size if st.step_size is not None else 0.3 * st.epsilon)
        traj = O.train(graph, params, train.pair, ospec, sc.epochs, seed, hooks=hooks,
                       batch_size=sc.batch_size, checkpoint_every=sc.checkpoint_every,
                       batch_transform=transform, config_hash=self.cfg.digest())
        self.trained += 1
        for ck in traj.checkpoints:
            if traj.swa_params is not None and ck.epoch == sc.epochs:
                ck.params = traj.swa_params
                ck.extra = {"averaged": True}
            M.save_checkpoint(d / f"epoch{ck.epoch:03d}.fskp", ck)
        M.atomic_write(d / "metrics.jsonl", O.metrics_jsonl(traj.metrics).encode())
        if alpha is not None:
            M.atomic_write(d / "alpha.jsonl", S.records_jsonl(alpha.records).encode())
        _json_write(d / "done.json", {"epochs": sc.epochs, "passes": traj.passes,
                                      "rule": ospec.rule, "alpha_skipped":
                                      alpha.skipped if alpha else 0})

    def checkpoint_epochs(self, seed: int) -> list[int]:
        return sorted(int(p.stem[5:]) for p in self.surrogate_dir(seed).glob("epoch*.fskp"))

    def load_surrogate(self, seed: int, epoch: int) -> M.ParamSet:
        spec = self.cfg.surrogate.arch.spec(self.cfg.data)
        return M.load_checkpoint(self.surrogate_dir(seed) / f"epoch{epoch:03d}.fskp", spec).params

    def pass_count(self, seed: int) -> int:
        return json.loads((self.surrogate_dir(seed) / "done.json").read_text())["passes"]

    # -- diagnostics ------------------------------------------------------

    def sharpness(self, seed: int):
        dc = self.cfg.diagnostics
        path = self.surrogate_dir(seed) / "sharpness.csv"
        if not dc.sharpness or path.exists():
            return
        train = self.datasets()["train"]
        rng = np.random.default_rng(_derive_seed("hessian-subset", seed))
        idx = np.sort(rng.choice(len(train), size=min(dc.hessian_subset, len(train)),
                                 replace=False))
        subset = (train.inputs[idx], train.labels[idx])
        tracker = S.SharpnessTracker(subset, probes=dc.probes, max_iters=dc.max_iters,
                                     tol=dc.tol, rho=dc.worst_rho, seed=seed)
        graph = self.surrogate_graph()
        epochs = self.checkpoint_epochs(seed)
        if dc.sharpness_epochs is not None:
            epochs = [e for e in epochs if e in set(dc.sharpness_epochs)]
        for e in epochs:
            tracker.measure(graph, self.load_surrogate(seed, e), e)
        M.atomic_write(path, S.sharpness_csv(tracker.records).encode())
        M.atomic_write(path.with_suffix(".jsonl"), S.records_jsonl(tracker.records).encode())

    def alpha_records(self, seed: int) -> list[S.AlphaRecord]:
        p = self.surrogate_dir(seed) / "alpha.jsonl"
        return [S.AlphaRecord(**json.loads(l)) for l in p.read_text().splitlines() if l]

    # -- evaluation set and attacks --------------------------------------

    def eval_indices(self, seed: int) -> np.ndarray:
        path = self.shared / "eval" / f"seed{seed}-n{self.cfg.attack.eval_n}.json"
        if path.exists():
            return np.asarray(json.loads(path.read_text())["indices"], dtype=np.int64)
        test = self.datasets()["test"]
        tg = [(g, p) for _, g, p in self.targets()]
        idx = D.select_eval_set(tg, test, self.cfg.attack.eval_n, _derive_seed("eval", seed))
        _json_write(path, {"indices": idx.tolist(), "split": "test"})
        return idx

    def attack_epochs(self, seed: int) -> list[int]:
        have = self.checkpoint_epochs(seed)
        sel = self.cfg.attack.epochs
        if sel == "all":
            return have
        if sel == "final":
            return have[-1:]
        return [e for e in have if e in set(sel)]

    def lgv_pool(self, seed: int) -> list[M.ParamSet]:
        lc = self.cfg.attack.lgv
        d = self.dir / "lgv" / f"seed{seed}"
        spec = self.cfg.surrogate.arch.spec(self.cfg.data)
        n = lc.epochs * lc.per_epoch
        paths = [d / f"member{i:03d}.fskp" for i in range(n)]
        if all(p.exists() for p in paths):
            return [M.load_checkpoint(p, spec).params for p in paths]
        final = self.checkpoint_epochs(seed)[-1]
        lr = lc.lr_const if lc.lr_const is not None else self.cfg.surrogate.optimizer.spec().lr0 / 2
        pool = A.lgv_collect(self.surrogate_graph(), self.load_surrogate(seed, final),
                             self.datasets()["train"].pair, lr, lc.epochs, lc.per_epoch,
                             seed=_derive_seed("lgv", seed),
                             batch_size=self.cfg.surrogate.batch_size)
        for i, (p, params) in enumerate(zip(paths, pool)):
            M.save_checkpoint(p, M.Checkpoint(params, final, seed, "lgv", self.cfg.digest(),
                                              spec, {"member": i}))
        return pool

    def adv_path(self, seed: int, epoch: int) -> Path:
        return self.dir / "adv" / f"seed{seed}" / f"epoch{epoch:03d}.fsab"

    def attack(self, seed: int, epoch: int) -> A.AdvBatch:
        path = self.adv_path(seed, epoch)
        if path.exists():
            return A.load_adv(path)
        test = self.datasets()["test"]
        idx = self.eval_indices(seed)
        spec = self.cfg.attack.spec()
        graph = self.surrogate_graph()
        params = self.load_surrogate(seed, epoch)
        surrogate = (graph, self.lgv_pool(seed) if self.cfg.attack.lgv else params)
        targets = None
        if spec.targeted:
            targets = D.shifted_targets(test.labels[idx], test.num_classes)
        adv = A.bim(surrogate, test.inputs[idx], test.labels[idx], spec,
                    seed=_derive_seed("attack", seed, epoch), targets=targets)
        adv.extra.update(epoch=epoch, surrogate_seed=seed)
        A.save_adv(path, adv)
        return adv

    def evaluate(self, seed: int, epoch: int) -> list[dict]:
        adv = self.attack(seed, epoch)
        idx = self.eval_indices(seed)
        rows = []
        for name, g, p in self.targets():
            self.log.touch("test", name, "test", idx)
            rows.append({"epoch": epoch, "target": name, "seed": seed,
                         "success_rate": A.success_rate(adv, g, p)})
        return rows

    # -- full pipeline ----------------------------------------------------

    def _stage(self, name, fn, *args):
        try:
            return fn(*args)
        except Exception as e:
            _json_write(self.dir / "error.json", {"stage": name, "error": repr(e)})
            raise RunError(name, e) from e

    def run(self) -> Path:
        cfg = self.cfg
        self._stage("data", self.datasets)
        self._stage("targets", self.targets)
        seeds = cfg.surrogate.seeds

        def per_seed(s):
            self._stage("surrogate", self.train_surrogate, s)
            self._stage("sharpness", self.sharpness, s)
            self._stage("eval-set", self.eval_indices, s)
            rows = []
            for e in self.attack_epochs(s):
                rows += self._stage("attack", self.evaluate, s, e)
            return rows

        if cfg.threads > 1:
            with ThreadPoolExecutor(cfg.threads) as ex:
                results = list(ex.map(per_seed, seeds))
        else:
            results = [per_seed(s) for s in seeds]
        rows = sorted((r for rs in results for r in rs),
                      key=lambda r: (r["epoch"], r["target"], r["seed"]))
        R.write_csv(self.dir / "transfer.csv", R.TRANSFER_COLUMNS, rows)
        self._stage("report", R.emit_report, self.dir)
        err = self.dir / "error.json"
        if err.exists():
            err.unlink()
        _json_write(self.dir / "config.json", cfg.model_dump(mode="json"))
        return self.dir


def run_experiment(config, out_dir=None, access_log: AccessLog | None = None) -> Path:
    """Run every stage of ``config``; returns the artifact directory."""
    return Run(config, out_dir, access_log).run()


# ---------------------------------------------------------------------------
# sweeps

SWEEP_COLUMNS = ("value", "epoch", "mean", "std", "lo", "hi", "status")


def sweep(config, path: str | None = None, values=None, out_dir=None) -> list[dict]:
    """One run per value with shared data, targets and evaluation sets.

    Writes ``sweep.csv`` (value vs. final-epoch mean success over targets
    and seeds); a failing value is recorded with its error and the sweep
    continues.
    """
    cfg = parse_config(config)
    if path is None or values is None:
        if cfg.sweep is None:
            raise ConfigError("no sweep section and no path/values given")
        path, values = cfg.sweep.path, cfg.sweep.values
    if len(values) < 2:
        raise ConfigError("a sweep needs at least 2 values")
    root = Path(out_dir or cfg.output.dir)
    base = cfg.model_dump(mode="json")
    base["sweep"] = None
    get_path(base, path)
    rows = []
    for i, v in enumerate(values):
        d = set_path(base, path, v)
        d["output"] = {"dir": str(root / f"value{i:02d}"),
                       "shared_dir": cfg.output.shared_dir or str(root / "shared")}
        try:
            run_dir = run_experiment(d)
            agg = R.aggregate(R.read_transfer(run_dir / "transfer.csv"))
            last = max(r["epoch"] for r in agg)
            a = next(r for r in agg if r["epoch"] == last and r["target"] == R.ALL_TARGETS)
            rows.append({"value": json.dumps(v), "epoch": last, "mean": a["mean"],
                         "std": a["std"], "lo": a["lo"], "hi": a["hi"], "status": "ok"})
        except Exception as e:
            log.warning("sweep value %r failed: %s", v, e)
            rows.append({"value": json.dumps(v), "epoch": None, "mean": None, "std": None,
                         "lo": None, "hi": None, "status": f"error: {e}"})
    R.write_csv(root / "sweep.csv", SWEEP_COLUMNS, rows)
    return rows


# ---------------------------------------------------------------------------
# epoch selection


def select_epoch(curve: dict) -> int:
    """Epoch with the highest value; ties resolve to the earliest epoch."""
    if not curve:
        raise ValueError("empty trajectory")
    best = None
    for e in sorted(curve):
        if best is None or curve[e] > curve[best]:
            best = e
    return best


def early_stop_select(run: Run, seed: int, log: AccessLog | None = None) -> tuple[int, dict]:
    """Pick the surrogate epoch by validation success on validation targets.

    Uses the ``val`` split and the early-stop zoo only; every evaluation is
    recorded in the access log under the ``validation`` phase. Returns the
    epoch and the per-epoch validation curve.
    """
    log = log or run.log
    es = run.cfg.early_stop
    val = run.datasets().get("val")
    if val is None:
        raise ValueError("early stopping needs a validation split")
    vt = run.validation_targets()
    test_names = {n for n, _, _ in run.targets()}
    if test_names & {n for n, _, _ in vt}:
        raise ValueError("validation targets overlap the test targets")
    ok = D.correct_mask([(g, p) for _, g, p in vt], val.inputs, val.labels)
    cand = np.flatnonzero(ok)
    rng = np.random.default_rng(_derive_seed("val-examples", seed))
    idx = np.sort(rng.choice(cand, size=min(es.n, len(cand)), replace=False))
    if not len(idx):
        raise D.InsufficientCorrect(0, es.n)
    spec = run.cfg.attack.spec()
    graph = run.surrogate_graph()
    curve = {}
    epochs = run.checkpoint_epochs(seed)
    if not epochs:
        raise ValueError("empty trajectory")
    for e in epochs:
        adv = A.bim((graph, run.load_surrogate(seed, e)), val.inputs[idx], val.labels[idx], spec,
                    seed=_derive_seed("val-attack", seed, e))
        rates = []
        for name, g, p in vt:
            log.touch("validation", name, "val", idx)
            rates.append(A.success_rate(adv, g, p))
        curve[e] = float(np.mean(rates))
    return select_epoch(curve), curve
