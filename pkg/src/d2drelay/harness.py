"""Monte Carlo experiments: seeded drops, per-relay solves, aggregation, output.

Drop ``k`` of a run always draws from the stream seeded by
``(master_seed, k)``, whatever the mode or sweep value, so runs that share a
master seed are paired drop by drop.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .allocator import SolverOptions, solve
from .baselines import (
    ORACLE_MAX_RBS,
    ORACLE_MAX_UES,
    oracle_solve,
    rate_gain,
    solve_reference,
)
from .chance import TradeoffConfig, chance_provider, table3_params
from .robustness import UncertaintyModel, robust_provider
from .scenario import make_drop, relay_problem
from .topology import D2D_TX, ScenarioConfig, load_config

__all__ = [
    "MODES",
    "SWEEP_VARIABLES",
    "ChanceSettings",
    "Sweep",
    "ExperimentSpec",
    "DropResult",
    "RunMetrics",
    "COLUMNS",
    "run_drop",
    "run_experiment",
    "emit_results",
    "format_results",
    "spec_from_mapping",
    "load_spec",
]

log = logging.getLogger(__name__)

MODES = ("nominal", "robust", "chance", "reference", "oracle")
SWEEP_VARIABLES = {
    "d2d_pair_distance": "d2d_pair_distance_m",
    "d2d_ring_radius": "d2d_ring_radius_m",
    "num_d2d_pairs": "num_d2d_pairs",
    "theta": None,
    "psi": None,
}
RESULTS_SCHEMA = "d2drelay.results/1"


@dataclass
class ChanceSettings:
    """Experiment-level chance settings; half-widths are fractions of the gains."""

    theta1: float = 0.2
    theta2: float = 0.2
    ghat_fraction: float = 0.5
    family: str = "unimodal-symmetric"
    linearization: str = "l1"

    def validate(self):
        for th in (self.theta1, self.theta2):
            if not 0.0 < th < 1.0:
                raise ValueError("theta must lie in (0, 1)")
        if self.ghat_fraction < 0:
            raise ValueError("ghat_fraction must be non-negative")
        table3_params(self.family)
        if self.linearization not in ("l1", "gradient"):
            raise ValueError("linearization must be 'l1' or 'gradient'")

    def tradeoff(self, problem) -> TradeoffConfig:
        f = self.ghat_fraction
        return TradeoffConfig(self.theta1, self.theta2, f * problem.g1_ref, f * problem.g2_ref)


@dataclass
class Sweep:
    variable: str
    values: Sequence[float]

    def validate(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ValueError(f"unknown sweep variable {self.variable!r}")
        v = list(self.values)
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("sweep values must be strictly increasing")


@dataclass
class ExperimentSpec:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    uncertainty: UncertaintyModel = field(default_factory=UncertaintyModel)
    tradeoff: Optional[ChanceSettings] = None
    mode: str = "nominal"
    num_drops: int = 25
    sweep: Optional[Sweep] = None
    master_seed: int = 0
    solver: SolverOptions = field(default_factory=SolverOptions)

    def points(self) -> list:
        """``(sweep value, spec)`` for each sweep point; one point without a sweep."""
        if self.sweep is None:
            return [(math.nan, self)]
        return [(float(v), self.at(v)) for v in self.sweep.values]

    def at(self, value) -> "ExperimentSpec":
        """Copy of the spec with the sweep variable set to ``value``."""
        var = self.sweep.variable
        key = SWEEP_VARIABLES[var]
        out = ExperimentSpec(
            self.scenario, self.uncertainty, self.tradeoff, self.mode,
            self.num_drops, None, self.master_seed, self.solver,
        )
        if key is not None:
            val = int(value) if key == "num_d2d_pairs" else float(value)
            out.scenario = self.scenario.replace(**{key: val})
        elif var == "theta":
            t = self.tradeoff or ChanceSettings()
            out.tradeoff = ChanceSettings(float(value), float(value), t.ghat_fraction, t.family, t.linearization)
        else:
            m = self.uncertainty
            out.uncertainty = UncertaintyModel(
                psi1=float(value), psi2=float(value), upsilon=float(value),
                m1=m.m1, m2=m.m2, m_i=m.m_i, norm_order_alpha=m.norm_order_alpha,
                linearize=m.linearize,
            )
        return out

    def validate(self) -> None:
        """Raise ``ValueError`` on any configuration problem, before running."""
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.num_drops < 1:
            raise ValueError("num_drops must be >= 1")
        if self.sweep is not None:
            self.sweep.validate()
            if self.sweep.variable == "theta" and self.mode != "chance":
                raise ValueError("a theta sweep needs mode 'chance'")
            if self.sweep.variable == "psi" and self.mode not in ("robust", "chance"):
                raise ValueError("a psi sweep needs mode 'robust' or 'chance'")
        for _, sp in self.points():
            sp.scenario.validate()
            if sp.tradeoff is not None:
                sp.tradeoff.validate()
            if sp.mode == "oracle":
                per_relay = math.ceil((sp.scenario.num_cues + sp.scenario.num_d2d_pairs) / sp.scenario.num_relays)
                if sp.scenario.num_rbs > ORACLE_MAX_RBS or per_relay > ORACLE_MAX_UES:
                    raise ValueError(
                        f"oracle mode needs at most {ORACLE_MAX_RBS} RBs and {ORACLE_MAX_UES} UEs per relay"
                    )


@dataclass
class DropResult:
    """Raw outcome of one drop under one mode."""

    drop_index: int
    sum_rate: float
    ue_rates: list
    d2d_rates: list
    reference_d2d_rates: list
    nominal_sum_rate: float
    iterations: list
    feasible: bool

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunMetrics:
    """Aggregates over the drops of one sweep point.

    ``rate_gain_pct`` compares the mode's mean D2D rate with the direct
    underlay reference on the same drops. ``r_delta`` is the mean sum-rate
    lost against the nominal solve of the same drop.
    """

    sweep_variable: str
    sweep_value: float
    mode: str
    num_drops: int
    mean_rate_per_ue: float
    mean_d2d_rate: float
    rate_gain_pct: float
    rate_gain_undefined: bool
    sum_rate: float
    r_delta: float
    iters_median: float
    iters_mean: float
    iters_p90: float
    iters_max: float
    infeasible_drops: int
    drops: list = field(default_factory=list, repr=False)


COLUMNS = [f.name for f in fields(RunMetrics) if f.name != "drops"]


def _provider(spec: ExperimentSpec, problem):
    if spec.mode == "robust":
        return robust_provider(spec.uncertainty, problem)
    if spec.mode == "chance":
        t = spec.tradeoff or ChanceSettings()
        return chance_provider(
            t.tradeoff(problem), table3_params(t.family), spec.uncertainty, problem, t.linearization
        )
    return None


def run_drop(spec: ExperimentSpec, k: int) -> DropResult:
    """Solve every relay of drop ``k`` under ``spec.mode``.

    Relays are solved in index order. The reference scheme is always run too
    so the rate gain is paired.
    """
    drop = make_drop(spec.scenario, spec.master_seed, k)
    topo = drop.topology
    ref = solve_reference(drop, spec.solver)
    ref_d2d = [float(d.rate_bps) for d in ref.d2d_direct]

    if spec.mode == "reference":
        ue_rates = {}
        iters = []
        feasible = True
        for l, (pb, sol) in sorted(ref.cue_alloc.items()):
            iters.append(sol.iterations)
            feasible &= sol.feasible
            for i, u in enumerate(pb.ue_ids):
                ue_rates[u] = float(sol.rate[i])
        for d in ref.d2d_direct:
            ue_rates[d.pair_tx] = float(d.rate_bps)
        total = float(sum(ue_rates.values()))
        rates = [ue_rates[u] for u in sorted(ue_rates)]
        return DropResult(k, total, rates, ref_d2d, ref_d2d, math.nan, iters, bool(feasible))

    ue_rates = {}
    iters = []
    feasible = True
    nominal_total = 0.0
    for l in range(topo.num_relays):
        pb = relay_problem(drop, l)
        if pb.num_ues == 0:
            continue
        prot = _provider(spec, pb)
        if spec.mode == "oracle":
            res = oracle_solve(pb, prot)
            if res.feasible:
                sol = res.solution
            else:
                sol = solve(pb, prot, spec.solver)
                sol.feasible = False
            iters.append(0)
        else:
            sol = solve(pb, prot, spec.solver)
            iters.append(sol.iterations)
        feasible &= sol.feasible
        for i, u in enumerate(pb.ue_ids):
            ue_rates[u] = float(sol.rate[i])
        if spec.mode in ("robust", "chance"):
            nominal_total += solve(pb, None, spec.solver).sum_rate
        else:
            nominal_total += sol.sum_rate
    tx = [u for u in range(len(topo.ue_records)) if topo.ue_records[u].kind == D2D_TX]
    d2d = [ue_rates.get(u, 0.0) for u in tx]
    total = float(sum(ue_rates.values()))
    rates = [ue_rates[u] for u in sorted(ue_rates)]
    return DropResult(k, total, rates, d2d, ref_d2d, float(nominal_total), iters, bool(feasible))


def _run_point(args):
    spec, k = args
    return run_drop(spec, k)


def _aggregate(var: str, value: float, spec: ExperimentSpec, drops: list) -> RunMetrics:
    ue = [r for d in drops for r in d.ue_rates]
    d2d = [r for d in drops for r in d.d2d_rates]
    ref = [r for d in drops for r in d.reference_d2d_rates]
    mean_d2d = float(np.mean(d2d)) if d2d else 0.0
    mean_ref = float(np.mean(ref)) if ref else 0.0
    gain = rate_gain(mean_d2d, mean_ref)
    if spec.mode == "reference":
        gain = rate_gain(mean_ref, mean_ref)
    it = np.array([i for d in drops for i in d.iterations], dtype=float)
    if it.size == 0:
        it = np.zeros(1)
    sums = np.array([d.sum_rate for d in drops])
    if spec.mode in ("robust", "chance"):
        r_delta = float(np.mean([d.nominal_sum_rate - d.sum_rate for d in drops]))
    else:
        r_delta = 0.0
    return RunMetrics(
        sweep_variable=var,
        sweep_value=value,
        mode=spec.mode,
        num_drops=len(drops),
        mean_rate_per_ue=float(np.mean(ue)) if ue else 0.0,
        mean_d2d_rate=mean_d2d,
        rate_gain_pct=float(gain.percent),
        rate_gain_undefined=gain.undefined,
        sum_rate=float(sums.mean()),
        r_delta=r_delta,
        iters_median=float(np.median(it)),
        iters_mean=float(it.mean()),
        iters_p90=float(np.percentile(it, 90)),
        iters_max=float(it.max()),
        infeasible_drops=int(sum(not d.feasible for d in drops)),
        drops=drops,
    )


def run_experiment(spec: ExperimentSpec, workers: int = 1) -> list:
    """One :class:`RunMetrics` per sweep value, in sweep order.

    Parameters
    ----------
    spec : ExperimentSpec
    workers : int
        Worker processes for the drops. Results are ordered by
        ``(sweep value, drop index)`` whatever the worker count.
    """
    spec.validate()
    var = spec.sweep.variable if spec.sweep is not None else ""
    points = spec.points()
    jobs = [(sp, k) for _, sp in points for k in range(spec.num_drops)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_point, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_run_point(j) for j in jobs]
    out = []
    for i, (value, sp) in enumerate(points):
        drops = results[i * spec.num_drops:(i + 1) * spec.num_drops]
        m = _aggregate(var, value, sp, drops)
        log.info("%s=%s: sum-rate %.4g b/s, %d infeasible", var or "point", value, m.sum_rate, m.infeasible_drops)
        out.append(m)
    return out


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isnan(v):
        return ""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6g}"


def _json_value(v):
    if isinstance(v, (bool, str)) or v is None:
        return v
    if isinstance(v, (int, np.integer)):
        return int(v)
    v = float(v)
    if math.isnan(v) or math.isinf(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return float(f"{v:.6g}")


def format_results(metrics: Sequence[RunMetrics], fmt: str = "csv") -> str:
    """Render metrics as CSV (header plus one row per sweep value) or JSON.

    The JSON document is ``{"schema": ..., "columns": [...], "rows": [...]}``
    with one object per sweep value; NaN becomes ``null`` and infinities the
    strings ``"inf"`` / ``"-inf"``.
    """
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for m in metrics:
            w.writerow([_fmt(getattr(m, c)) for c in COLUMNS])
        return buf.getvalue()
    if fmt == "json":
        rows = [{c: _json_value(getattr(m, c)) for c in COLUMNS} for m in metrics]
        return json.dumps({"schema": RESULTS_SCHEMA, "columns": COLUMNS, "rows": rows}, indent=2) + "\n"
    raise ValueError("format must be 'csv' or 'json'")


def emit_results(metrics: Sequence[RunMetrics], path, fmt: str = "csv") -> None:
    """Write :func:`format_results` output to ``path`` (``OSError`` if unwritable)."""
    text = format_results(metrics, fmt)
    with open(path, "w", newline="") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# spec files


def spec_from_mapping(cfg: dict) -> tuple:
    """Build an :class:`ExperimentSpec` from a parsed spec file.

    Top-level keys are ``mode``, ``num_drops``, ``master_seed``, ``workers``
    and any :class:`~d2drelay.topology.ScenarioConfig` field. Blocks
    ``[uncertainty]`` (psi1, psi2, upsilon, alpha), ``[chance]`` (theta or
    theta1/theta2, ghat_fraction, family, linearization), ``[solver]``
    (:class:`~d2drelay.allocator.SolverOptions` fields) and ``[sweep]``
    (variable, values) are optional.

    Returns
    -------
    (ExperimentSpec, workers)
    """
    cfg = dict(cfg)
    blocks = {k: cfg.pop(k) for k in list(cfg) if isinstance(cfg[k], dict)}
    unknown_blocks = set(blocks) - {"uncertainty", "chance", "solver", "sweep"}
    if unknown_blocks:
        raise KeyError(f"unknown blocks: {sorted(unknown_blocks)}")
    mode = str(cfg.pop("mode", "nominal"))
    num_drops = int(cfg.pop("num_drops", 25))
    seed = int(cfg.pop("master_seed", 0))
    workers = int(cfg.pop("workers", 1))
    scenario = ScenarioConfig.from_mapping(cfg)

    u = {k.replace("-", "_"): v for k, v in blocks.get("uncertainty", {}).items()}
    psi = u.pop("psi", None)
    model = UncertaintyModel(
        psi1=float(u.pop("psi1", psi or 0.0)),
        psi2=float(u.pop("psi2", psi or 0.0)),
        upsilon=float(u.pop("upsilon", psi or 0.0)),
        norm_order_alpha=float(u.pop("alpha", 2.0)),
        linearize=bool(u.pop("linearize", True)),
    )
    if u:
        raise KeyError(f"unknown uncertainty keys: {sorted(u)}")

    tradeoff = None
    if "chance" in blocks or mode == "chance":
        c = {k.replace("-", "_"): v for k, v in blocks.get("chance", {}).items()}
        th = float(c.pop("theta", 0.2))
        tradeoff = ChanceSettings(
            theta1=float(c.pop("theta1", th)),
            theta2=float(c.pop("theta2", th)),
            ghat_fraction=float(c.pop("ghat_fraction", 0.5)),
            family=str(c.pop("distribution_family", c.pop("family", "unimodal-symmetric"))),
            linearization=str(c.pop("linearization", "l1")),
        )
        if c:
            raise KeyError(f"unknown chance keys: {sorted(c)}")

    s = dict(blocks.get("solver", {}))
    known = {f.name for f in fields(SolverOptions)}
    if set(s) - known:
        raise KeyError(f"unknown solver keys: {sorted(set(s) - known)}")
    solver = SolverOptions(**s)

    sweep = None
    if "sweep" in blocks:
        sw = blocks["sweep"]
        values = sw.get("values", [])
        if isinstance(values, (int, float)):
            values = [values]
        sweep = Sweep(str(sw["variable"]), [float(v) for v in values])

    spec = ExperimentSpec(scenario, model, tradeoff, mode, num_drops, sweep, seed, solver)
    spec.validate()
    return spec, workers


def load_spec(path) -> tuple:
    """Read a spec file (see :func:`spec_from_mapping`)."""
    return spec_from_mapping(load_config(path))

