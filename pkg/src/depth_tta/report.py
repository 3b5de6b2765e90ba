"""Experiment configuration, sweeps and report files.

Report layout (schema version ``REPORT_SCHEMA``) written by :func:`emit_report`
into one directory:

``steps.jsonl``
    First line is a header object ``{"schema", "kind", "config", "timing"}``;
    ``timing`` is the only field that carries wall-clock data. Every further
    line is one frame: the step report (without wall time) plus its metric
    record under ``"metrics"`` (``null`` when the frame had no ground truth).
``summary.csv``
    One row per domain tag plus an ``all`` row: frame count, valid pixels and
    the aggregated metrics. Floats are written with ``repr`` so re-reading
    gives the identical values.
``frames.csv``
    Plot-ready series: metrics and losses against frame index.

Sweeps additionally write ``lambda.csv`` or ``selection.csv`` with one row per
grid cell.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

from .adaptation import EvalConfig, Hyperparams, SelectionSpec, resolve_selection, run_stream
from .errors import ConfigError, ReportIOError
from .metrics import METRIC_NAMES, MetricRecord, aggregate
from .net import DepthNet
from .scene import DomainShift, SceneConfig, apply_domain_shift, generate_stream, load_frame_dir

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

REPORT_SCHEMA = 1
SUMMARY_FIELDS = ["domain", "n_frames", "n_valid", *METRIC_NAMES]
FRAME_FIELDS = ["frame_index", "domain", "n_instances", "loss_depth", "loss_edge", "loss_total",
                "grad_norm", "updated", *METRIC_NAMES]


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one adaptation run.

    ``stream`` is ``"synthetic"`` or a frame directory with a manifest. For
    synthetic streams ``seed`` seeds the scene generator and ``scene`` holds
    extra :class:`SceneConfig` fields; the resolution follows the checkpoint.
    """

    checkpoint: str = ""
    stream: str = "synthetic"
    n_frames: int = 500
    seed: int = 1
    domain_shift: str = "fog:0.04"
    scene: dict = field(default_factory=dict)
    hyper: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    out: str = "runs/adapt"

    def __post_init__(self):
        if self.n_frames < 0:
            raise ConfigError("n_frames must be >= 0")
        DomainShift.parse(self.domain_shift)
        self.hyperparams()
        self.eval_config()

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        """Read a ``.toml`` or ``.json`` experiment file."""
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            d = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(d)

    def to_dict(self):
        return asdict(self)

    def hyperparams(self):
        d = dict(self.hyper)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        if isinstance(d.get("lambda_"), str):
            d["lambda_"] = float(d["lambda_"])
        if isinstance(d.get("selection"), str):
            d["selection"] = SelectionSpec.parse(d["selection"])
        if "dynamic_labels" in d:
            d["dynamic_labels"] = frozenset(d["dynamic_labels"])
        unknown = set(d) - {f.name for f in fields(Hyperparams)}
        if unknown:
            raise ConfigError(f"unknown hyperparameters: {sorted(unknown)}")
        return Hyperparams(**d)

    def eval_config(self):
        try:
            return EvalConfig(**self.eval)
        except TypeError as exc:
            raise ConfigError(f"bad eval section: {exc}") from None

    def with_hyper(self, **kw):
        return replace(self, hyper={**self.hyper, **kw})


def build_stream(config, resolution=None):
    """Frames for ``config``; synthetic streams render at ``resolution``."""
    if config.stream == "synthetic":
        scene = dict(config.scene)
        scene.setdefault("seed", config.seed)
        if resolution is not None:
            scene.setdefault("resolution", tuple(resolution))
        shift = DomainShift.parse(config.domain_shift)
        return generate_stream(SceneConfig.from_dict(scene), config.n_frames, shift)
    frames = load_frame_dir(config.stream, resolution=resolution)
    if config.domain_shift not in ("", "none"):
        shift = DomainShift.parse(config.domain_shift)
        frames = (apply_domain_shift(f, shift) for f in frames)
    return frames


def run_experiment(config, net=None, frames=None):
    """Load the checkpoint (unless ``net`` is given) and run one stream."""
    net = DepthNet.load(config.checkpoint) if net is None else net
    if frames is None:
        frames = build_stream(config, net.config.input_size[:2])
    return run_stream(net, frames, config.hyperparams(), config.eval_config())


# ------------------------------------------------------------------- sweeps


@dataclass
class SweepRow:
    key: str
    abs_rel: float
    delta1: float
    n_adapted: int
    record: MetricRecord

    def as_row(self):
        return {"key": self.key, "abs_rel": self.abs_rel, "delta1": self.delta1, "n_adapted": self.n_adapted,
                **{k: v for k, v in self.record.as_dict().items() if k in METRIC_NAMES}}


def _sweep(config, cells, frames=None):
    base = DepthNet.load(config.checkpoint)
    if frames is None:
        frames = list(build_stream(config, base.config.input_size[:2]))
    rows = []
    for key, cfg in cells:
        net = base.copy()
        n_adapted = net.store.n_scalars(resolve_selection(cfg.hyperparams().selection, net.store))
        result = run_experiment(cfg, net=net, frames=frames)
        rec = result.cumulative()
        rows.append(SweepRow(key, rec.abs_rel, rec.delta1, n_adapted, rec))
    return rows


def lambda_label(lam):
    return "inf" if math.isinf(lam) else f"{lam:g}"


def sweep_lambda(config, grid, frames=None):
    """One full run per lambda from the same checkpoint and stream."""
    grid = list(grid)
    if not grid:
        raise ConfigError("lambda grid is empty")
    return _sweep(config, [(lambda_label(lam), config.with_hyper(lambda_=lam)) for lam in grid], frames)


def sweep_selection(config, specs, frames=None):
    """One full run per parameter selection from the same checkpoint and stream."""
    specs = [SelectionSpec.parse(s) if isinstance(s, str) else s for s in specs]
    if not specs:
        raise ConfigError("selection grid is empty")
    return _sweep(config, [(s.label, config.with_hyper(selection=s)) for s in specs], frames)


def parse_lambda_grid(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad lambda grid {text!r}") from None


# ------------------------------------------------------------------ writing


def _open(path, mode="w"):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, mode, newline="")
    except OSError as exc:
        raise ReportIOError(f"cannot write {path}: {exc}") from None


def summary_rows(result):
    """Per-domain aggregates plus the ``all`` row; empty for an empty result."""
    rows = []
    if not result.evaluated():
        return rows
    by_domain = result.by_domain()
    for domain in sorted(by_domain):
        rec = by_domain[domain]
        n = sum(1 for m in result.evaluated() if m.domain == domain)
        rows.append({"domain": domain, "n_frames": n, "n_valid": rec.n_valid,
                     **{k: getattr(rec, k) for k in METRIC_NAMES}})
    rec = result.cumulative()
    rows.append({"domain": "all", "n_frames": len(result.evaluated()), "n_valid": rec.n_valid,
                 **{k: getattr(rec, k) for k in METRIC_NAMES}})
    return rows


def write_csv(path, header, rows):
    with _open(path) as fh:
        writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_summary(path):
    """Parse a summary CSV back into ``{domain: MetricRecord}``."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["domain"]] = MetricRecord(**{k: float(row[k]) for k in METRIC_NAMES},
                                              n_valid=int(row["n_valid"]), domain=row["domain"])
    return out


def emit_report(result, path, config=None, kind="adapt", started=None):
    """Write ``steps.jsonl``, ``summary.csv`` and ``frames.csv`` under ``path``."""
    root = Path(path)
    now = datetime.now(timezone.utc)
    header = {
        "schema": REPORT_SCHEMA,
        "kind": kind,
        "config": config or {},
        "timing": {
            "created": now.isoformat(timespec="seconds"),
            "elapsed_s": None if started is None else round(time.perf_counter() - started, 3),
            "step_wall_time_s": [round(s.wall_time, 6) for s in result.steps],
        },
    }
    with _open(root / "steps.jsonl") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for step, rec in result:
            line = step.as_dict(timestamps=False)
            line["metrics"] = None if rec is None else {k: getattr(rec, k) for k in (*METRIC_NAMES, "n_valid")}
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    write_csv(root / "summary.csv", SUMMARY_FIELDS, summary_rows(result))
    frames = []
    for step, rec in result:
        row = {k: v for k, v in step.as_dict(timestamps=False).items() if k in FRAME_FIELDS}
        row.update({k: ("" if rec is None else getattr(rec, k)) for k in METRIC_NAMES})
        frames.append(row)
    write_csv(root / "frames.csv", FRAME_FIELDS, frames)
    return root


def emit_sweep(rows, path, name):
    """Write a sweep table (``lambda.csv`` or ``selection.csv``)."""
    header = ["key", "abs_rel", "delta1", "n_adapted", *[m for m in METRIC_NAMES if m not in ("abs_rel", "delta1")]]
    write_csv(Path(path) / f"{name}.csv", header, [r.as_row() for r in rows])
    return Path(path) / f"{name}.csv"


def load_steps(path):
    """Read a ``steps.jsonl`` file; returns ``(header, step dicts)``."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ConfigError(f"{path} is empty")
    return json.loads(lines[0]), [json.loads(s) for s in lines[1:]]


def summarize_steps(steps, rule="per-frame"):
    """Recompute per-domain aggregates from step dicts read back from JSONL."""
    groups = {}
    for s in steps:
        if s.get("metrics") is None:
            continue
        m = s["metrics"]
        rec = MetricRecord(**{k: m[k] for k in METRIC_NAMES}, n_valid=m["n_valid"], domain=s["domain"])
        groups.setdefault(s["domain"], []).append(rec)
    out = {d: aggregate(rs, rule, domain=d) for d, rs in sorted(groups.items())}
    if groups:
        out["all"] = aggregate([r for rs in groups.values() for r in rs], rule, domain="all")
    return out
