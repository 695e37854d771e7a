"""Experiment orchestration: runs, HJB precomputation, and run comparison.

Every file is written atomically (temporary file in the target directory,
then ``os.replace``), so an interrupted run never leaves a truncated CSV.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
import io
import json
import logging
import math
import os
from pathlib import Path
import pickle
import tempfile
import time
from typing import Optional

import numpy as np

from .analysis import (DensitySeries, control_field, control_metrics, histogram,
                       moments, peak_count, time_to_consensus)
from .config import RunConfig
from .errors import GeometryMismatch, InvalidConfig, MissingArtifacts
from .hjb import FeedbackTable, ValueGrid, solve_policy_iteration
from .kinetic import ParticleEnsemble, TableFeedback, _packed, bci_step, n_steps

logger = logging.getLogger(__name__)

MOMENT_FIELDS = ("t", "mean", "variance", "l1_control_mass", "active_fraction",
                 "peak_count")
CHECKPOINT = "checkpoint.pkl"


def atomic_write(path, data) -> None:
    path = Path(path)
    payload = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    return repr(float(v)) if math.isfinite(v) else ("inf" if v > 0 else "-inf")


# -- HJB precomputation ------------------------------------------------------

@dataclass
class HjbSummary:
    path: str
    iterations: int
    residual: float
    cache_hit: bool
    key: str


def cache_dir() -> Path:
    root = os.environ.get("BOLTZSPARSE_CACHE")
    return Path(root) if root else Path.home() / ".cache" / "boltzsparse"


def _solve_table(config: RunConfig):
    params = config.hjb_params()
    grid = ValueGrid(config.omega_min, config.omega_max, config.hjb_n_nodes)
    _, table, report = solve_policy_iteration(grid, config.kernel(), params, config.box)
    return table, report


def feedback_table(config: RunConfig):
    """Return ``(FeedbackTable, HjbSummary)``, solving only on a cache miss."""
    if config.penalty is None:
        raise InvalidConfig("control", "the HJB solve needs a penalty (ih-l1 or ih-l2)")
    key = config.hjb_hash()
    root = cache_dir()
    cached = root / f"hjb-{key}.csv"
    log = root / f"hjb-{key}.json"
    if cached.exists() and log.exists():
        meta = json.loads(log.read_text())
        logger.info("HJB cache hit %s", cached)
        return FeedbackTable.from_csv(cached), HjbSummary(
            str(cached), meta["iterations"], meta["residual"], True, key)
    table, report = _solve_table(config)
    root.mkdir(parents=True, exist_ok=True)
    _write_table(table, cached)
    atomic_write(log, json.dumps({"iterations": report.iterations,
                                  "residual": report.residual,
                                  "method": report.method}))
    return table, HjbSummary(str(cached), report.iterations, report.residual, False, key)


def _write_table(table: FeedbackTable, path: Path) -> None:
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".csv", dir=path.parent)
    os.close(fd)
    try:
        table.to_csv(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def precompute_hjb(config: RunConfig, out_path) -> HjbSummary:
    """Write ``feedback_table.csv`` at ``out_path`` plus a ``.log`` convergence record."""
    out_path = Path(out_path)
    table, summary = feedback_table(config)
    _write_table(table, out_path)
    atomic_write(out_path.with_suffix(".log"),
                 f"iterations = {summary.iterations}\n"
                 f"residual = {summary.residual!r}\n"
                 f"cache_hit = {str(summary.cache_hit).lower()}\n"
                 f"key = {summary.key}\n")
    return HjbSummary(str(out_path), summary.iterations, summary.residual,
                      summary.cache_hit, summary.key)


# -- runs --------------------------------------------------------------------

@dataclass
class ExitReport:
    status: str
    peak_count: int
    final_variance: float
    final_time: float
    steps: int
    completed: bool
    wall_time: float
    hjb: Optional[dict] = None
    outputs: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=_fmt)


class _Recorder:
    """Observer collecting density frames, moments and control snapshots."""

    def __init__(self, config: RunConfig, kernel, feedback):
        self.config = config
        self.kernel = kernel
        self.feedback = feedback
        # a separate stream, so diagnostics never perturb the dynamics
        self.rng = np.random.default_rng([config.seed, 1])
        self.series = DensitySeries(metadata={"preset": config.preset,
                                              "control": config.control})
        self.rows = []
        self.fields = []

    def __call__(self, ens: ParticleEnsemble) -> None:
        cfg = self.config
        frame = histogram(ens.positions, cfg.omega, cfg.dx, ens.time)
        self.series.append(frame)
        mean, var = moments(ens.positions)
        if self.feedback is None:
            metrics = {"l1_mass": 0.0, "active_fraction": 0.0}
        else:
            metrics = control_metrics(ens.positions, self.feedback, self.kernel,
                                      ens.epsilon, self.rng)
        count, _ = peak_count(frame)
        self.rows.append((ens.time, mean, var, metrics["l1_mass"],
                          metrics["active_fraction"], count))
        if cfg.output_emit_svg:
            self.fields.append(control_field(ens.positions, self.feedback, self.kernel,
                                             ens.epsilon, frame.bin_centers, self.rng))

    def state(self) -> dict:
        return {"frames": self.series.frames, "rows": self.rows, "fields": self.fields,
                "rng_state": self.rng.bit_generator.state}

    def load(self, state: dict) -> None:
        self.series.frames = list(state["frames"])
        self.rows = list(state["rows"])
        self.fields = list(state["fields"])
        self.rng.bit_generator.state = state["rng_state"]


def build_feedback(config: RunConfig):
    """Feedback object for the configured control variant, plus HJB summary."""
    if config.control == "none":
        return None, None
    if config.control.startswith("ic"):
        return config.instantaneous(), None
    table, summary = feedback_table(config)
    return TableFeedback(table), summary


def density_csv(series: DensitySeries) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [_fmt(c) for c in series.bin_centers])
    for f in series.frames:
        w.writerow([_fmt(f.t)] + [_fmt(m) for m in f.mass])
    return buf.getvalue()


def moments_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MOMENT_FIELDS)
    for t, mean, var, l1, active, count in rows:
        w.writerow([_fmt(t), _fmt(mean), _fmt(var), _fmt(l1), _fmt(active), int(count)])
    return buf.getvalue()


def _save_checkpoint(out_dir: Path, ens: ParticleEnsemble, rec: _Recorder,
                     config: RunConfig) -> None:
    state = {"ensemble": ens.checkpoint(), "recorder": rec.state(),
             "config": config.resolved_text()}
    atomic_write(out_dir / CHECKPOINT, pickle.dumps(state))


def _resume_key(resolved: str) -> str:
    # stopping and checkpoint cadence may change between legs of a resumed run
    skip = ("run.max_steps", "output.checkpoint_every")
    return "\n".join(l for l in resolved.splitlines() if not l.startswith(skip))


def load_checkpoint(out_dir) -> dict:
    path = Path(out_dir) / CHECKPOINT
    try:
        return pickle.loads(path.read_bytes())
    except FileNotFoundError:
        raise MissingArtifacts(f"no checkpoint in {out_dir}") from None


def run_experiment(config: RunConfig, out_dir, resume: bool = False) -> ExitReport:
    """Simulate the configured kinetic experiment and write all artifacts."""
    start = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kernel = config.kernel()
    feedback, hjb = build_feedback(config)
    rec = _Recorder(config, kernel, feedback)

    m = n_steps(config.T, config.epsilon)
    every = max(1, int(round(m / config.output_n_frames)))
    if resume:
        state = load_checkpoint(out_dir)
        if _resume_key(state["config"]) != _resume_key(config.resolved_text()):
            raise MissingArtifacts(f"checkpoint in {out_dir} belongs to another config")
        ens = ParticleEnsemble.restore(state["ensemble"])
        rec.load(state["recorder"])
    else:
        ens = ParticleEnsemble.uniform(config.n_samples, config.epsilon, config.seed,
                                       config.omega_min, config.omega_max)
        rec(ens)
    stop = m if config.run_max_steps == 0 else min(m, config.run_max_steps)
    args = _packed(kernel, feedback, ens.epsilon)
    ckpt = config.output_checkpoint_every
    for k in range(ens.step + 1, stop + 1):
        bci_step(ens, kernel, feedback, args)
        if k % every == 0 or k == m:
            rec(ens)
        if ckpt and (k % ckpt == 0 or k == stop):
            _save_checkpoint(out_dir, ens, rec, config)
            logger.info("checkpoint at step %d", k)
    if stop < m and stop % every != 0:
        # off-cadence frame for a truncated run; kept out of the checkpoint
        rec(ens)

    written = ["config.resolved", "density.csv", "moments.csv"]
    atomic_write(out_dir / "config.resolved", config.resolved_text())
    atomic_write(out_dir / "density.csv", density_csv(rec.series))
    atomic_write(out_dir / "moments.csv", moments_csv(rec.rows))
    if config.output_emit_svg:
        from .plotting import heatmap_svg
        times = rec.series.times
        atomic_write(out_dir / "heatmap_density.svg", heatmap_svg(
            times, rec.series.bin_centers, rec.series.matrix(),
            f"density ({config.preset}, {config.control})", "mass / max"))
        atomic_write(out_dir / "heatmap_control.svg", heatmap_svg(
            times, rec.series.bin_centers, np.array(rec.fields),
            f"mean control ({config.preset}, {config.control})", "K / max|K|",
            symmetric=True))
        written += ["heatmap_density.svg", "heatmap_control.svg"]

    last = rec.rows[-1]
    report = ExitReport(status="ok", peak_count=int(last[5]), final_variance=last[2],
                        final_time=last[0], steps=ens.step, completed=ens.step == m,
                        wall_time=time.perf_counter() - start,
                        hjb=None if hjb is None else asdict(hjb), outputs=written)
    atomic_write(out_dir / "report.json", report.to_json())
    return report


# -- comparison --------------------------------------------------------------

def _read_run(run_dir: Path):
    moments_path = run_dir / "moments.csv"
    density_path = run_dir / "density.csv"
    missing = [p.name for p in (moments_path, density_path) if not p.exists()]
    if missing:
        raise MissingArtifacts(f"{run_dir}: missing {', '.join(missing)}")
    with open(density_path, newline="") as fh:
        header = next(csv.reader(fh))
    centers = np.array([float(v) for v in header[1:]])
    data = np.genfromtxt(moments_path, delimiter=",", names=True)
    data = np.atleast_1d(data)
    return centers, data


def compare_runs(dirs) -> str:
    """CSV aligning end-of-run metrics across completed runs."""
    dirs = [Path(d) for d in dirs]
    if len(dirs) < 2:
        raise ValueError("compare needs at least two run directories")
    runs = [_read_run(d) for d in dirs]
    ref = runs[0][0]
    for d, (centers, _) in zip(dirs, runs):
        if centers.shape != ref.shape or not np.allclose(centers, ref, rtol=0, atol=1e-12):
            raise GeometryMismatch(f"{d} uses a different bin grid than {dirs[0]}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "final_variance", "peak_count", "time_to_consensus",
                "cumulative_l1_mass", "mean_active_fraction"])
    for d, (_, m) in zip(dirs, runs):
        t = m["t"]
        l1 = m["l1_control_mass"]
        cumulative = float(np.sum(0.5 * (l1[1:] + l1[:-1]) * np.diff(t))) if t.size > 1 else 0.0
        w.writerow([str(d), _fmt(m["variance"][-1]), int(m["peak_count"][-1]),
                    _fmt(time_to_consensus(t, m["variance"])), _fmt(cumulative),
                    _fmt(float(np.mean(m["active_fraction"])))])
    return buf.getvalue()
