"""End-to-end run: train, estimate traces, plan, restructure, fine-tune, report.

A run is driven by a TOML file::

    seed = 0
    output_dir = "runs/demo"

    [data]
    source = "tiny-shapes"      # generator name, CSV path, or IDX images path
    n = 2000

    [model]
    preset = "tiny-convnet"     # or: layers = [{type = "dense", ...}, ...]

    [train]
    epochs = 30

    [finetune]
    epochs = 10

    [trace]
    n_iters = 300
    eval_size = 512

    [prune]
    mode = "channels"           # or "heads"
    ordering = "hap"
    budget_kind = "channel_fraction"
    budget = 0.5

Artifacts land in ``output_dir``: ``baseline.ckpt``, ``traces.json`` and
``traces/group_<id>.csv``, ``plan.txt``, ``pruned.ckpt``, ``final.ckpt`` and
one JSON line per run appended to ``results.jsonl``.
"""

import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import checkpoint
from .datasets import load_dataset
from .errors import ConfigError, HapError
from .hessian import (
    DEFAULT_EVAL_SIZE,
    DEFAULT_ITERS,
    TraceEstimate,
    all_group_traces,
    evaluation_batch,
    write_convergence_csv,
)
from .implant import apply_implant
from .models import PRESETS, ModelSpec, build, cost
from .pruning import (
    BUDGET_KINDS,
    DEFAULT_PER_LAYER_LIMIT,
    ORDERINGS,
    PrunePlan,
    head_prune_plan,
    rank,
    score_groups,
    select,
)
from .training import TrainConfig, finetune, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

RESULTS_FILE = "results.jsonl"
STAGES = ("data", "train", "trace", "plan", "apply", "finetune", "report")


# -- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class TraceConfig:
    n_iters: int = DEFAULT_ITERS
    eval_size: int = DEFAULT_EVAL_SIZE
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_iters < 1 or self.eval_size < 1 or self.n_jobs < 1:
            raise ConfigError(f"trace settings must be positive: {self}")


@dataclass(frozen=True)
class PruneConfig:
    mode: str = "channels"
    ordering: str = "hap"
    budget_kind: str = "channel_fraction"
    budget: float = 0.5
    per_layer_limit: float = DEFAULT_PER_LAYER_LIMIT
    implant_ratio: float = 0.0
    implant_init: str = "center"

    def __post_init__(self):
        if self.mode not in ("channels", "heads"):
            raise ConfigError(f"prune.mode must be 'channels' or 'heads', got {self.mode!r}")
        if self.ordering not in ORDERINGS:
            raise ConfigError(f"prune.ordering must be one of {ORDERINGS}, got {self.ordering!r}")
        if self.mode == "channels" and self.budget_kind not in BUDGET_KINDS:
            raise ConfigError(f"prune.budget_kind must be one of {BUDGET_KINDS}, got {self.budget_kind!r}")
        if not 0 < self.budget <= 1:
            raise ConfigError(f"prune.budget must be in (0, 1], got {self.budget}")
        if not 0 < self.per_layer_limit <= 1:
            raise ConfigError(f"prune.per_layer_limit must be in (0, 1], got {self.per_layer_limit}")
        if not 0 <= self.implant_ratio < 1:
            raise ConfigError(f"prune.implant_ratio must be in [0, 1), got {self.implant_ratio}")
        if self.mode == "heads" and self.implant_ratio:
            raise ConfigError("implants apply to conv channels, not attention heads")
        if self.implant_init not in ("center", "dc"):
            raise ConfigError(f"prune.implant_init must be 'center' or 'dc', got {self.implant_init!r}")


def _section(cls, raw, name):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"[{name}] has unknown keys {unknown}; allowed: {sorted(known)}")
    if "milestones" in raw:
        raw["milestones"] = tuple(raw["milestones"])
    try:
        return cls(**raw)
    except ConfigError as exc:
        raise ConfigError(f"[{name}] {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


@dataclass(frozen=True)
class PipelineConfig:
    data: dict
    model: dict
    train: TrainConfig = TrainConfig()
    finetune: TrainConfig = TrainConfig(epochs=20, lr=0.02)
    trace: TraceConfig = TraceConfig()
    prune: PruneConfig = PruneConfig()
    seed: int = 0
    output_dir: str = "runs"
    name: str = ""
    test_fraction: float = 0.25

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        top = {"seed", "output_dir", "name", "test_fraction"}
        sections = {"data", "model", "train", "finetune", "trace", "prune"}
        unknown = sorted(set(d) - top - sections)
        if unknown:
            raise ConfigError(f"unknown top-level keys {unknown}")
        for s in ("data", "model"):
            if not isinstance(d.get(s), dict):
                raise ConfigError(f"config needs a [{s}] section")
        if "preset" not in d["model"] and "layers" not in d["model"]:
            raise ConfigError("[model] needs 'preset' or 'layers'")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
        test_fraction = d.get("test_fraction", 0.25)
        if not 0 < test_fraction < 1:
            raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
        ft_defaults = {"epochs": 20, "lr": 0.02}
        return cls(
            data=dict(d["data"]),
            model=dict(d["model"]),
            train=_section(TrainConfig, {**d.get("train", {}), "seed": seed}, "train"),
            finetune=_section(TrainConfig, {**ft_defaults, **d.get("finetune", {}), "seed": seed}, "finetune"),
            trace=_section(TraceConfig, d.get("trace"), "trace"),
            prune=_section(PruneConfig, d.get("prune"), "prune"),
            seed=seed,
            output_dir=str(d.get("output_dir", "runs")),
            name=str(d.get("name", "")),
            test_fraction=float(test_fraction),
        )

    @classmethod
    def from_toml(cls, text):
        try:
            return cls.from_dict(tomllib.loads(text))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from exc

    @classmethod
    def from_file(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_toml(text)

    def with_overrides(self, seed=None, output_dir=None, **prune):
        """Copy with CLI-style overrides; ``None`` values are ignored."""
        cfg = self
        prune = {k: v for k, v in prune.items() if v is not None}
        if prune:
            raw = {**asdict(cfg.prune), **prune}
            cfg = replace(cfg, prune=_section(PruneConfig, raw, "prune"))
        if seed is not None:
            cfg = replace(cfg, seed=seed, train=cfg.train.replace(seed=seed), finetune=cfg.finetune.replace(seed=seed))
        if output_dir is not None:
            cfg = replace(cfg, output_dir=str(output_dir))
        return cfg

    def model_spec(self, n_features, n_classes):
        m = dict(self.model)
        if "layers" in m:
            try:
                return ModelSpec.from_dict(m)
            except HapError as exc:
                raise ConfigError(f"[model] {exc}") from exc
        preset = m.pop("preset")
        if preset not in PRESETS:
            raise ConfigError(f"[model] unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        if preset == "mlp":
            hidden = m.pop("hidden", [32])
            m.setdefault("sizes", [n_features, *hidden, n_classes])
        else:
            m.setdefault("n_classes", n_classes)
        try:
            return PRESETS[preset](**m)
        except (TypeError, HapError) as exc:
            raise ConfigError(f"[model] {exc}") from exc


# -- report ----------------------------------------------------------------


@dataclass(frozen=True)
class PipelineReport:
    """Outcome of one run.  Accuracies and remaining fractions are percentages."""

    baseline_accuracy: float
    final_accuracy: float
    accuracy_drop: float
    params_pct: float
    flops_pct: float
    ordering: str
    seed: int
    mode: str
    budget_kind: str
    budget: float
    implant_ratio: float
    per_layer_limit: float
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int
    n_pruned: int
    n_implanted: int
    name: str = ""
    timings: dict = field(default_factory=dict, compare=False)

    def to_record(self, with_timings=True):
        d = asdict(self)
        if not with_timings:
            d.pop("timings")
        return d

    def to_json(self, with_timings=True):
        return json.dumps(self.to_record(with_timings), sort_keys=True)


def append_result(path, report):
    line = (report.to_json() + "\n").encode()
    fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        os.write(fd, line)
    finally:
        os.close(fd)


def read_results(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- stages ----------------------------------------------------------------


class StageError(HapError):
    """A pipeline stage failed; the original exception is ``__cause__``."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def _save_traces(path, traces):
    payload = {
        str(t.group_id): {"mean": t.mean, "n_samples": t.n_samples, "variance": t.variance}
        for t in traces
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def load_traces(path):
    raw = json.loads(Path(path).read_text())
    return [
        TraceEstimate(int(gid), float(v["mean"]), int(v["n_samples"]), float(v["variance"]))
        for gid, v in sorted(raw.items(), key=lambda kv: int(kv[0]))
    ]


class Run:
    """One configured run; stages read and write artifacts under ``out``."""

    def __init__(self, config):
        self.config = config
        self.out = Path(config.output_dir)
        self.timings = {}
        self._data = None

    def path(self, name):
        return self.out / name

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        log.info("stage %s", name)
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = round(time.perf_counter() - t0, 6)

    def data(self):
        """Deterministic (train, test) split of the configured dataset."""
        if self._data is None:
            with self.stage("data"):
                cfg = dict(self.config.data)
                source = cfg.pop("source", None) or cfg.pop("generator", None) or cfg.pop("path", None)
                if source is None:
                    raise ConfigError("[data] needs 'source'")
                try:
                    ds = load_dataset(source, **cfg)
                except TypeError as exc:
                    raise ConfigError(f"[data] {exc}") from exc
                self._data = ds.split(self.config.test_fraction, self.config.seed)
        return self._data

    def train(self):
        train_set, test_set = self.data()
        with self.stage("train"):
            spec = self.config.model_spec(train_set.X[0].size, train_set.n_classes)
            model = build(spec, self.config.seed)
            model, _ = train(model, train_set, self.config.train)
            self.out.mkdir(parents=True, exist_ok=True)
            checkpoint.save_file(model, self.path("baseline.ckpt"))
        return model

    def trace(self, model):
        train_set, _ = self.data()
        cfg = self.config.trace
        with self.stage("trace"):
            batch = evaluation_batch(train_set.X, train_set.targets, cfg.eval_size, self.config.seed)
            traces = all_group_traces(model, batch, cfg.n_iters, self.config.seed, n_jobs=cfg.n_jobs)
            tdir = self.path("traces")
            tdir.mkdir(parents=True, exist_ok=True)
            for t in traces:
                write_convergence_csv(t, tdir / f"group_{t.group_id:04d}.csv")
            _save_traces(self.path("traces.json"), traces)
        return traces

    def plan(self, model, traces):
        cfg = self.config.prune
        with self.stage("plan"):
            if cfg.mode == "heads":
                plan = head_prune_plan(model, traces, cfg.budget, cfg.ordering, self.config.seed)
            else:
                records = score_groups(model, traces)
                ranked = rank(records, cfg.ordering, self.config.seed)
                plan = select(
                    model,
                    ranked,
                    cfg.budget,
                    cfg.budget_kind,
                    cfg.per_layer_limit,
                    cfg.implant_ratio,
                    records=records,
                    ordering=cfg.ordering,
                )
            self.path("plan.txt").write_text(plan.to_report())
        return plan

    def apply(self, model, plan):
        with self.stage("apply"):
            pruned = apply_implant(model, plan, self.config.prune.implant_init)
            checkpoint.save_file(pruned, self.path("pruned.ckpt"))
        return pruned

    def finetune(self, pruned, plan):
        train_set, _ = self.data()
        with self.stage("finetune"):
            if plan.decisions:
                final, _ = finetune(pruned, train_set, self.config.finetune)
            else:
                final = pruned
            checkpoint.save_file(final, self.path("final.ckpt"))
        return final

    def report(self, baseline, final, plan):
        _, test_set = self.data()
        cfg = self.config
        with self.stage("report"):
            c0, c1 = cost(baseline), cost(final)
            base_acc = 100.0 * baseline.accuracy(test_set.X, test_set.y)
            final_acc = 100.0 * final.accuracy(test_set.X, test_set.y) if plan.decisions else base_acc
            report = PipelineReport(
                baseline_accuracy=base_acc,
                final_accuracy=final_acc,
                accuracy_drop=base_acc - final_acc,
                params_pct=100.0 * c1.total_params / c0.total_params,
                flops_pct=100.0 * c1.total_flops / c0.total_flops,
                ordering=cfg.prune.ordering,
                seed=cfg.seed,
                mode=cfg.prune.mode,
                budget_kind=plan.budget_kind,
                budget=plan.budget,
                implant_ratio=plan.implant_ratio,
                per_layer_limit=plan.per_layer_limit,
                params_before=c0.total_params,
                params_after=c1.total_params,
                flops_before=c0.total_flops,
                flops_after=c1.total_flops,
                n_pruned=len(plan.pruned),
                n_implanted=len(plan.implanted),
                name=cfg.name,
                timings=dict(self.timings),
            )
        report.timings["report"] = self.timings["report"]
        append_result(self.path(RESULTS_FILE), report)
        return report

    # artifact loaders for the single-stage commands

    def load_model(self, name):
        path = self.path(name)
        if not path.exists():
            raise ConfigError(f"{path} not found; run the earlier stage first")
        return checkpoint.load_file(path)

    def load_traces(self):
        path = self.path("traces.json")
        if not path.exists():
            raise ConfigError(f"{path} not found; run 'trace' first")
        return load_traces(path)

    def load_plan(self):
        path = self.path("plan.txt")
        if not path.exists():
            raise ConfigError(f"{path} not found; run 'prune' first")
        return PrunePlan.from_report(path.read_text())


def run_pipeline(config, **overrides):
    """Execute every stage and return the :class:`PipelineReport`.

    ``config`` is a :class:`PipelineConfig` or a path to a TOML file.  A plan
    that changes nothing skips fine-tuning, so the final model is the
    baseline.

    Raises:
        StageError: wrapping the failing stage's exception.
    """
    if not isinstance(config, PipelineConfig):
        config = PipelineConfig.from_file(config)
    config = config.with_overrides(**overrides)
    run = Run(config)
    baseline = run.train()
    traces = run.trace(baseline)
    plan = run.plan(baseline, traces)
    pruned = run.apply(baseline, plan)
    final = run.finetune(pruned, plan)
    return run.report(baseline, final, plan)
