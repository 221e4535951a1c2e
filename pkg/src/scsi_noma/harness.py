"""Seeded Monte-Carlo harness over grouping x analog x digital scheme combinations."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .beamforming import (
    BeamformingState,
    ConditioningError,
    effective_gains,
    egt_analog,
    group_average_covariance,
    sab_analog,
    slnr_digital,
    strongest_users,
    zf_digital,
)
from .channel import covariance, draw_channels, draw_path_profile
from .grouping import agnes, kmeans_baseline
from .power import SinrModel, allocate_max_min, bisection_bounds, sic_constraints_satisfied

log = logging.getLogger(__name__)

SIGMA2 = 1.0
DEFAULT_SCHEMES = (
    "agnes-scsi+sab+zf",
    "agnes-scsi+sab+slnr",
    "agnes-icsi+egt+zf",
    "agnes-icsi+egt+slnr",
    "kmeans-icsi+egt+zf",
)
GROUPINGS = ("agnes-scsi", "agnes-icsi", "kmeans-icsi")
ANALOG = ("sab", "egt")
DIGITAL = ("zf", "slnr")
FAILURE_ABORT_FRACTION = 0.10
SIC_TOL = 1e-8


class ConfigError(ValueError):
    pass


def dbm_to_watts(p_dbm: float) -> float:
    return 10.0 ** ((p_dbm - 30.0) / 10.0)


def db_to_linear(x_db: float) -> float:
    return 10.0 ** (x_db / 10.0)


def parse_scheme(tag: str) -> tuple[str, str, str]:
    parts = tag.split("+")
    if len(parts) != 3 or parts[0] not in GROUPINGS or parts[1] not in ANALOG or parts[2] not in DIGITAL:
        raise ConfigError(
            f"bad scheme {tag!r}: expected <{'|'.join(GROUPINGS)}>+<{'|'.join(ANALOG)}>+<{'|'.join(DIGITAL)}>"
        )
    return parts[0], parts[1], parts[2]


@dataclass
class SimulationConfig:
    n_antennas: int = 64
    n_rf_chains: int = 4
    n_users: int = 9
    n_paths: int = 6
    snr_db: float = 0.0
    p_max_dbm: float | list[float] = 21.0
    k_sweep: list[int] = field(default_factory=list)
    r_min: float = 0.01
    tau: float = 1e-5
    trials: int = 100
    seed: int = 0
    schemes: list[str] = field(default_factory=lambda: list(DEFAULT_SCHEMES))

    def __post_init__(self):
        self.validate()

    def validate(self):
        G, N = self.n_rf_chains, self.n_antennas
        if not (isinstance(N, int) and isinstance(G, int) and N > G >= 1):
            raise ConfigError("need integer n_antennas > n_rf_chains >= 1")
        for K in self.user_counts:
            if not isinstance(K, int) or K < G:
                raise ConfigError(f"user count {K!r} must be an integer >= n_rf_chains")
        if not isinstance(self.n_paths, int) or self.n_paths < 1:
            raise ConfigError("n_paths must be a positive integer")
        if not isinstance(self.trials, int) or self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if not self.r_min >= 0:
            raise ConfigError("r_min must be >= 0")
        if not self.p_max_list or not all(math.isfinite(p) for p in self.p_max_list):
            raise ConfigError("p_max_dbm must be a finite number or non-empty list")
        if not math.isfinite(self.snr_db):
            raise ConfigError("snr_db must be finite")
        if not self.schemes:
            raise ConfigError("at least one scheme required")
        for s in self.schemes:
            parse_scheme(s)

    @property
    def p_max_list(self) -> list[float]:
        p = self.p_max_dbm
        return [float(x) for x in p] if isinstance(p, (list, tuple)) else [float(p)]

    @property
    def user_counts(self) -> list[int]:
        return list(self.k_sweep) if self.k_sweep else [self.n_users]

    @classmethod
    def from_dict(cls, data: dict) -> "SimulationConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "SimulationConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrialRecord:
    scheme: str
    n_users: int
    p_max_dbm: float
    trial: int
    min_rate: float
    sum_rate: float
    rates: tuple[float, ...]
    feasible: bool
    status: str  # ok | infeasible | failed:<reason>
    sic_ok: bool = False
    outer_iterations: int = 0
    inner_iterations: int = 0
    wall_time: float = 0.0

    @property
    def failed(self) -> bool:
        return self.status.startswith("failed")


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(seed + trial)


def run_trial(config: SimulationConfig, n_users: int, trial: int) -> list[TrialRecord]:
    """Draw one channel instance for ``trial`` and evaluate every scheme on it."""
    rng = trial_rng(config.seed, trial)
    N, L = config.n_antennas, config.n_paths
    profiles = [draw_path_profile(rng, L) for _ in range(n_users)]
    R_stat = [covariance(p, N) for p in profiles]
    H = np.stack([draw_channels(p, rng, N)[0] for p in profiles])
    kmeans_seed = int(rng.integers(2**32))
    return evaluate_schemes(config, R_stat, H, kmeans_seed, trial)


def evaluate_schemes(
    config: SimulationConfig, R_stat: Sequence[np.ndarray], H: np.ndarray, kmeans_seed: int = 0, trial: int = 0
) -> list[TrialRecord]:
    """All schemes x P_max points for one instance; P_max-independent stages are shared.

    ``R_stat`` are the long-term covariances, ``H`` the realized channel rows
    (also the perfect ICSI used by the *-icsi schemes).
    """
    G = config.n_rf_chains
    n_users = H.shape[0]
    snr = db_to_linear(config.snr_db)
    R_inst = [np.outer(h.conj(), h) for h in H]
    groupings = {}
    records = []
    for scheme in config.schemes:
        g_tag, analog, digital = parse_scheme(scheme)
        R_design = R_stat if g_tag.endswith("scsi") else R_inst
        t0 = time.perf_counter()
        try:
            if g_tag not in groupings:
                if g_tag == "kmeans-icsi":
                    groupings[g_tag] = kmeans_baseline(H, G, np.random.default_rng(kmeans_seed))
                else:
                    groupings[g_tag] = agnes(R_design, G, g_tag)
            grouping = groupings[g_tag]
            if analog == "sab":
                refs = group_average_covariance(grouping, R_design)
                F = sab_analog(refs)
            else:
                heads = strongest_users(grouping, R_design)
                refs = [R_design[h] for h in heads]
                F = egt_analog(grouping, R_design, heads)
            W_zf = zf_digital(F, refs) if digital == "zf" else None
            setup_err = None
        except (ConditioningError, np.linalg.LinAlgError, ValueError) as exc:
            setup_err = exc
        setup_time = time.perf_counter() - t0

        for p_dbm in config.p_max_list:
            t1 = time.perf_counter()
            p_max = dbm_to_watts(p_dbm)
            try:
                if setup_err is not None:
                    raise setup_err
                W = W_zf if W_zf is not None else slnr_digital(
                    F, grouping, R_design, np.full(n_users, snr * p_max / n_users), SIGMA2
                )
                gains = snr * effective_gains(H, BeamformingState(F, W, scheme))
                model = SinrModel(gains, grouping, SIGMA2)
                bounds = bisection_bounds(R_stat, snr * p_max, SIGMA2, config.r_min)
                res = allocate_max_min(model, p_max, config.r_min, config.tau, bounds)
                status = "ok" if res.feasible else "infeasible"
                sic_ok = res.feasible and sic_constraints_satisfied(model, res.powers, SIC_TOL)[0]
                rec = TrialRecord(
                    scheme, n_users, p_dbm, trial, res.min_rate, float(res.rates.sum()),
                    tuple(float(x) for x in res.rates), res.feasible, status, sic_ok,
                    res.outer_iterations, res.inner_iterations,
                )
            except (ConditioningError, np.linalg.LinAlgError, ValueError) as exc:
                reason = type(exc).__name__
                rec = TrialRecord(scheme, n_users, p_dbm, trial, math.nan, math.nan, (), False, f"failed:{reason}")
            rec.wall_time = time.perf_counter() - t1 + setup_time / len(config.p_max_list)
            records.append(rec)
    return records


def _run_task(args):
    config, n_users, trial = args
    return run_trial(config, n_users, trial)


@dataclass
class AggregateRow:
    scheme: str
    n_users: int
    p_max_dbm: float
    n_trials: int
    n_ok: int
    n_infeasible: int
    n_failed: int
    mean_min_rate: float
    se_min_rate: float
    mean_sum_rate: float
    se_sum_rate: float


@dataclass
class ExperimentResult:
    config: SimulationConfig
    records: list[TrialRecord]
    aggregates: list[AggregateRow]
    failures: Counter

    @property
    def failure_fraction(self) -> float:
        return sum(self.failures.values()) / max(1, len(self.records))

    def aggregate(self, scheme: str, n_users: int, p_max_dbm: float) -> AggregateRow:
        for row in self.aggregates:
            if (row.scheme, row.n_users, row.p_max_dbm) == (scheme, n_users, p_max_dbm):
                return row
        raise KeyError((scheme, n_users, p_max_dbm))


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    if x.size == 0:
        return math.nan, math.nan
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return float(x.mean()), se


def aggregate(records: Sequence[TrialRecord], schemes: Sequence[str]) -> list[AggregateRow]:
    """Mean and standard error per (scheme, n_users, p_max); infeasible trials count as rate 0."""
    keys = sorted({(r.n_users, r.p_max_dbm) for r in records})
    rows = []
    for scheme in schemes:
        for K, p in keys:
            sel = [r for r in records if r.scheme == scheme and r.n_users == K and r.p_max_dbm == p]
            if not sel:
                continue
            usable = [r for r in sel if not r.failed]
            mins = np.array([r.min_rate if r.feasible else 0.0 for r in usable])
            sums = np.array([r.sum_rate if r.feasible else 0.0 for r in usable])
            rows.append(
                AggregateRow(
                    scheme, K, p, len(sel),
                    sum(r.status == "ok" for r in sel),
                    sum(r.status == "infeasible" for r in sel),
                    sum(r.failed for r in sel),
                    *_mean_se(mins), *_mean_se(sums),
                )
            )
    return rows


def iter_tasks(config: SimulationConfig, user_counts: Iterable[int]):
    for K in user_counts:
        for trial in range(config.trials):
            yield config, K, trial


def run_experiment(
    config: SimulationConfig, threads: int = 1, user_counts: Sequence[int] | None = None
) -> ExperimentResult:
    """Run every (user count, trial) task; output order is independent of ``threads``."""
    counts = list(user_counts) if user_counts is not None else config.user_counts
    tasks = list(iter_tasks(config, counts))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (8 * threads))))
    else:
        chunks = [_run_task(t) for t in tasks]
    order = {s: i for i, s in enumerate(config.schemes)}
    records = sorted(
        (r for chunk in chunks for r in chunk),
        key=lambda r: (r.n_users, r.p_max_dbm, order[r.scheme], r.trial),
    )
    failures = Counter(r.status.split(":", 1)[1] for r in records if r.failed)
    return ExperimentResult(config, records, aggregate(records, config.schemes), failures)


TRIAL_COLUMNS = (
    "scheme", "n_users", "p_max_dbm", "p_max_w", "snr_db", "sigma2", "trial", "status", "feasible",
    "sic_ok", "min_rate", "sum_rate", "outer_iterations", "inner_iterations", "rates",
)
AGGREGATE_COLUMNS = tuple(f.name for f in fields(AggregateRow))


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return f"{x:.9g}"
    return str(x)


def trial_row(rec: TrialRecord, snr_db: float) -> list[str]:
    values = {
        **asdict(rec),
        "p_max_w": dbm_to_watts(rec.p_max_dbm),
        "snr_db": float(snr_db),
        "sigma2": SIGMA2,
        "rates": ";".join(_fmt(x) for x in rec.rates),
    }
    return [_fmt(values[c]) for c in TRIAL_COLUMNS]


def emit_csv(rows: Iterable[Sequence], path: str | Path, columns: Sequence[str]) -> Path:
    """Header row then one row per record; floats at 9 significant digits."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])
    return path


def write_outputs(result: ExperimentResult, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    paths = {
        "trials": emit_csv((trial_row(r, cfg.snr_db) for r in result.records), out / "trials.csv", TRIAL_COLUMNS),
        "aggregate": emit_csv(
            ([getattr(a, c) for c in AGGREGATE_COLUMNS] for a in result.aggregates),
            out / "aggregate.csv",
            AGGREGATE_COLUMNS,
        ),
        # wall time is kept out of trials.csv so that file stays reproducible
        "timing": emit_csv(
            ([r.scheme, r.n_users, r.p_max_dbm, r.trial, r.wall_time] for r in result.records),
            out / "timing.csv",
            ("scheme", "n_users", "p_max_dbm", "trial", "wall_time_s"),
        ),
    }
    lines = [
        f"scsi_noma {__version__}",
        f"seed: {cfg.seed}",
        f"sigma2: {SIGMA2}",
        f"snr_db: {cfg.snr_db}",
        f"p_max_dbm: {cfg.p_max_list}",
        f"user_counts: {sorted({r.n_users for r in result.records})}",
        f"records: {len(result.records)}",
        f"failed: {sum(result.failures.values())} ({result.failure_fraction:.2%})",
        "failure_histogram: " + json.dumps(dict(sorted(result.failures.items()))),
        "config: " + json.dumps(cfg.to_dict(), sort_keys=True),
    ]
    paths["meta"] = out / "meta.txt"
    paths["meta"].write_text("\n".join(lines) + "\n")
    return paths
