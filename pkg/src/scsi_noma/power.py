"""Max-min fair NOMA power allocation.

The rate target ``t`` is found by bisection. For each probe a minimal-power
problem is solved with the quadratic transform: for fixed auxiliaries ``y``
the per-user rate constraint

    2 y_u sqrt(g_u P_u) - y_u^2 eta_u(P) >= 2^rho - 1

reads ``P >= J(P)`` with ``J`` a monotone quadratic map, so its least fixed
point is the componentwise-minimal feasible power vector. The SIC conditions
are linear in the inter-group powers and are only enforced explicitly when
that least point violates them.

Users are indexed 0..K-1 throughout; power vectors are length-K arrays.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .beamforming import egt_vector
from .grouping import GroupingResult

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SinrModel:
    """Effective gains plus the SIC decoding order they induce.

    ``order[g]`` lists group g's members strongest first; a user decodes and
    cancels every member ranked after it and is interfered by those ranked
    before it.
    """

    gains: np.ndarray
    grouping: GroupingResult
    sigma2: float = 1.0
    order: tuple[tuple[int, ...], ...] = field(init=False)
    group_of: np.ndarray = field(init=False, repr=False)
    own: np.ndarray = field(init=False, repr=False)
    coupling: np.ndarray = field(init=False, repr=False)
    sic_rows: np.ndarray = field(init=False, repr=False)
    sic_rhs: np.ndarray = field(init=False, repr=False)
    sic_pairs: tuple[tuple[int, int, int], ...] = field(init=False, repr=False)

    def __post_init__(self):
        gains = np.asarray(self.gains, dtype=float)
        K, G = gains.shape
        if G != self.grouping.n_groups or K != self.grouping.n_users:
            raise ValueError("gain table does not match grouping")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        group_of = self.grouping.group_of()
        order = tuple(
            tuple(sorted(members, key=lambda u: (-gains[u, gi], u)))
            for gi, members in enumerate(self.grouping.groups)
        )
        own = gains[np.arange(K), group_of]

        # eta = coupling @ P + sigma2
        M = gains[:, group_of].copy()
        same = group_of[:, None] == group_of[None, :]
        M[same] = 0.0
        for ranked in order:
            for pos, u in enumerate(ranked):
                M[u, list(ranked[:pos])] = own[u]

        # SIC for decoder u ranked before target r, in cross-multiplied form:
        # g_u (I_r + s2) >= g_r (I_u + s2)  <=>  rows @ P >= rhs
        rows, rhs, pairs = [], [], []
        inter = gains[:, group_of] * ~same
        for gi, ranked in enumerate(order):
            for a, u in enumerate(ranked):
                for r in ranked[a + 1 :]:
                    rows.append(own[u] * inter[r] - own[r] * inter[u])
                    rhs.append((own[r] - own[u]) * self.sigma2)
                    pairs.append((gi, u, r))
        set_ = object.__setattr__
        set_(self, "gains", gains)
        set_(self, "order", order)
        set_(self, "group_of", group_of)
        set_(self, "own", own)
        set_(self, "coupling", M)
        set_(self, "sic_rows", np.array(rows, dtype=float).reshape(-1, K))
        set_(self, "sic_rhs", np.array(rhs, dtype=float))
        set_(self, "sic_pairs", tuple(pairs))

    @property
    def n_users(self) -> int:
        return self.gains.shape[0]

    def eta(self, P: np.ndarray) -> np.ndarray:
        return self.coupling @ P + self.sigma2

    def rank_of(self, u: int) -> int:
        return self.order[self.group_of[u]].index(u)


@dataclass
class ProbeRecord:
    t: float
    phase: str  # "floor", "ceiling" or "bisect"
    feasible: bool
    total_power: float
    t_min: float
    t_max: float
    inner_iterations: int
    powers: np.ndarray | None = None


@dataclass
class AllocationResult:
    powers: np.ndarray
    rates: np.ndarray
    t_star: float
    feasible: bool
    outer_iterations: int
    inner_iterations: int
    bracket: tuple[float, float]
    trace: list[ProbeRecord] = field(default_factory=list)
    message: str = ""

    @property
    def min_rate(self) -> float:
        return float(self.rates.min()) if self.rates.size else 0.0


def rate_target(t: float, r_min: float) -> float:
    """SINR target 2^max(R_min, t) - 1."""
    return 2.0 ** max(r_min, t) - 1.0


def sinr_all(model: SinrModel, P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    return model.own * P / model.eta(P)


def sinr(model: SinrModel, P: np.ndarray, u: int) -> float:
    """SINR of user u decoding its own signal after SIC."""
    P = np.asarray(P, dtype=float)
    return float(model.own[u] * P[u] / (model.coupling[u] @ P + model.sigma2))


def rates(model: SinrModel, P: np.ndarray) -> np.ndarray:
    return np.log2(1.0 + sinr_all(model, P))


def cross_sinr(model: SinrModel, P: np.ndarray, u: int, r: int) -> float:
    """SINR at user u when decoding the signal of user r (same group, r ranked at or after u)."""
    g = model.group_of[u]
    if model.group_of[r] != g:
        raise ValueError("u and r must share a group")
    ranked = model.order[g]
    pu, pr = ranked.index(u), ranked.index(r)
    if pu > pr:
        raise ValueError("decoder must be ranked before (stronger than) the target")
    P = np.asarray(P, dtype=float)
    intra = model.own[u] * P[list(ranked[:pr])].sum()
    inter = model.gains[u, model.group_of] @ np.where(model.group_of != g, P, 0.0)
    return float(model.own[u] * P[r] / (intra + inter + model.sigma2))


def sic_margins(model: SinrModel, P: np.ndarray) -> np.ndarray:
    """Cross-multiplied SIC margins g_u(I_r + s2) - g_r(I_u + s2), one per (u, r) pair."""
    return model.sic_rows @ np.asarray(P, dtype=float) - model.sic_rhs


def sic_constraints_satisfied(model: SinrModel, P: np.ndarray, tol: float = 1e-8) -> tuple[bool, list[tuple[int, int, int, float]]]:
    """Check SINR_{u->r} >= SINR_r - tol for every in-group pair u ranked before r.

    Returns the flag and a list of violations (group, u, r, shortfall).
    """
    P = np.asarray(P, dtype=float)
    violations = []
    for g, u, r in model.sic_pairs:
        gap = cross_sinr(model, P, u, r) - sinr(model, P, r)
        if gap < -tol:
            violations.append((g, u, r, float(-gap)))
    return not violations, violations


def qt_update(model: SinrModel, P: np.ndarray) -> np.ndarray:
    """Optimal quadratic-transform auxiliaries y = sqrt(g P) / eta(P)."""
    P = np.maximum(np.asarray(P, dtype=float), 0.0)
    return np.sqrt(model.own * P) / model.eta(P)


def qt_value(model: SinrModel, P: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Left-hand side 2 y sqrt(g P) - y^2 eta(P) of the transformed rate constraints."""
    P = np.maximum(np.asarray(P, dtype=float), 0.0)
    return 2 * y * np.sqrt(model.own * P) - y**2 * model.eta(P)


def _qt_map(model: SinrModel, y: np.ndarray, gamma: float):
    """Coefficients of J(P) = (a + b * (M P))^2, or None if some constraint is unsatisfiable."""
    y = np.asarray(y, dtype=float)
    active = (y > 0) & (model.own > 0)
    if gamma > 0 and not np.all(active):
        return None
    root = np.sqrt(np.where(active, model.own, 1.0))
    ysafe = np.where(active, y, 1.0)
    a = np.where(active, (gamma + y**2 * model.sigma2) / (2 * ysafe * root), 0.0)
    b = np.where(active, y / (2 * root), 0.0)
    return a, b


def _least_fixed_point(M: np.ndarray, a: np.ndarray, b: np.ndarray, budget: float | None, max_iter: int = 100):
    """Newton iteration from 0 for the least solution of P = (a + b * (M P))^2.

    For this monotone quadratic system Newton's sequence increases towards the
    least fixed point; a decreasing step or an exhausted budget means there is
    no solution within reach.
    """
    K = a.size
    P = np.zeros(K)
    eye = np.eye(K)
    for _ in range(max_iter):
        s = a + b * (M @ P)
        resid = s * s - P
        jac = (2 * b * s)[:, None] * M
        try:
            step = np.linalg.solve(eye - jac, resid)
        except np.linalg.LinAlgError:
            return None
        scale = max(P.max(), (a * a).max(), 1e-300)
        if step.min() < -1e-9 * scale or not np.all(np.isfinite(step)):
            return None
        P = P + np.maximum(step, 0.0)
        if budget is not None and P.sum() > budget * (1 + 1e-9):
            return None
        if np.abs(step).max() <= 1e-14 * max(P.max(), 1e-300):
            return P
    s = a + b * (M @ P)
    if np.abs(s * s - P).max() <= 1e-10 * max(P.max(), 1e-300):
        return P
    return None


def qt_inner_solve(
    model: SinrModel,
    t: float,
    y: np.ndarray,
    r_min: float = 0.0,
    budget: float | None = None,
    P_init: np.ndarray | None = None,
) -> np.ndarray | None:
    """Minimal total power under the transformed rate constraints (fixed y) and SIC.

    Returns None when the subproblem is infeasible, or when its minimum
    provably exceeds ``budget``.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    gamma = rate_target(t, r_min)
    coeffs = _qt_map(model, y, gamma)
    if coeffs is None:
        return None
    a, b = coeffs
    M = model.coupling
    P = _least_fixed_point(M, a, b, budget)
    if P is None:
        return None
    if not model.sic_pairs or sic_margins(model, P).min() >= -1e-12 * max(1.0, np.abs(model.sic_rhs).max()):
        return P
    return _qt_with_sic(model, a, b, P, P_init, budget)


def _qt_with_sic(model, a, b, P_least, P_init, budget):
    # SIC binds: solve the small convex program explicitly
    M = model.coupling
    start = P_least if P_init is None else np.maximum(np.asarray(P_init, dtype=float), P_least)
    scale = max(start.max(), 1e-12)
    rows = model.sic_rows * scale
    rhs = model.sic_rhs
    margin = 1e-10 * max(1.0, np.abs(rhs).max())

    def qt_slack(x):
        P = x * scale
        s = a + b * (M @ P)
        return (P - s * s) / scale

    def qt_slack_jac(x):
        P = x * scale
        s = a + b * (M @ P)
        return np.eye(x.size) - (2 * b * s)[:, None] * M

    cons = [
        {"type": "ineq", "fun": qt_slack, "jac": qt_slack_jac},
        {"type": "ineq", "fun": lambda x: rows @ x - rhs - margin, "jac": lambda x: rows},
    ]
    res = minimize(
        lambda x: x.sum(),
        start / scale,
        jac=lambda x: np.ones_like(x),
        bounds=[(0.0, None)] * start.size,
        constraints=cons,
        method="SLSQP",
        options={"ftol": 1e-14, "maxiter": 500},
    )
    P = np.maximum(res.x, 0.0) * scale
    s = a + b * (M @ P)
    ok_qt = np.all(P - s * s >= -1e-10 * max(P.max(), 1e-300))
    ok_sic = sic_margins(model, P).min() >= -1e-12 * max(1.0, np.abs(rhs).max())
    if not (ok_qt and ok_sic):
        return None
    if budget is not None and P.sum() > budget * (1 + 1e-9):
        return None
    return P


def rate_floor_point(model: SinrModel, gamma: float) -> np.ndarray | None:
    """Exact least power meeting SINR_u >= gamma for all users (SIC ignored).

    Solves (I - gamma D^{-1} M) P = gamma sigma2 / g directly; a valid least
    point exists iff the nonnegative matrix gamma D^{-1} M has spectral radius < 1.
    """
    if np.any(model.own <= 0):
        return None if gamma > 0 else np.zeros(model.n_users)
    B = gamma * model.coupling / model.own[:, None]
    if B.any() and np.max(np.abs(np.linalg.eigvals(B))) >= 1.0:
        return None
    P = np.linalg.solve(np.eye(model.n_users) - B, gamma * model.sigma2 / model.own)
    return P if np.all(P >= 0) else None


def oracle_min_power(
    model: SinrModel,
    t: float,
    r_min: float = 0.0,
    p_max: float | None = None,
    max_iter: int = 10_000,
) -> np.ndarray | None:
    """Independent check of the per-probe minimal power.

    Standard-interference fixed point P <- gamma * eta(P) / g from P = 0,
    which climbs monotonically to the componentwise-minimal point meeting all
    rate targets. Divergence past 10 * p_max or the iteration cap means
    infeasible; a minimal point violating SIC is also reported infeasible.
    """
    gamma = rate_target(t, r_min)
    if np.any(model.own <= 0):
        return None
    P = np.zeros(model.n_users)
    limit = None if p_max is None else 10 * p_max
    for _ in range(max_iter):
        P_new = gamma * model.eta(P) / model.own
        if limit is not None and P_new.sum() > limit:
            return None
        done = np.abs(P_new - P).max() <= 1e-15 * max(P_new.max(), 1e-300)
        P = P_new
        if done:
            break
    else:
        return None
    if model.sic_pairs and sic_margins(model, P).min() < -1e-12 * max(1.0, np.abs(model.sic_rhs).max()):
        return None
    return P


def bisection_bounds(covariances, p_max: float, sigma2: float, r_min: float) -> tuple[float, float]:
    """Initial bracket [R_min, t_max] for the min-rate bisection.

    t_max puts all power on an EGT beam toward the user with the largest
    covariance trace: log2(1 + p_max |f^H R f| / sigma2).
    """
    if len(covariances) == 0:
        raise ValueError("need at least one user")
    i = int(np.argmax([np.trace(R).real for R in covariances]))
    R = covariances[i]
    f = egt_vector(R)
    gain = abs(np.vdot(f, R @ f))
    return r_min, max(r_min, float(np.log2(1.0 + p_max * gain / sigma2)))


def allocate_max_min(
    model: SinrModel,
    p_max: float,
    r_min: float,
    tau: float = 1e-5,
    bounds: tuple[float, float] | None = None,
    inner_tol: float = 1e-8,
    max_inner: int = 200,
    keep_powers: bool = False,
) -> AllocationResult:
    """Bisection on the common rate t with a quadratic-transform inner loop.

    Each probe alternates qt_update / qt_inner_solve until the powers settle
    and declares t feasible when the total power fits within ``p_max``.
    The inner loop is warm-started from the last feasible powers; if that
    start cannot reach the target it restarts from the exact rate-floor point.
    If the upper end of ``bounds`` turns out feasible the bracket is widened.
    """
    if p_max <= 0 or tau <= 0:
        raise ValueError("p_max and tau must be positive")
    K = model.n_users
    if bounds is None:
        bounds = (r_min, float(np.log2(1.0 + p_max * model.own.max() / model.sigma2)))
    t_lo, t_hi = bounds
    trace: list[ProbeRecord] = []
    total_inner = 0

    def probe(t: float, warm: np.ndarray | None):
        nonlocal total_inner
        gamma = rate_target(t, r_min)
        starts = [warm] if warm is not None else []
        starts.append(None)
        iters = 0
        for start in starts:
            if start is None:
                start = rate_floor_point(model, gamma)
                if start is None or start.sum() > p_max * (1 + 1e-9):
                    break
            P = start
            ok = True
            for _ in range(max_inner):
                iters += 1
                P_new = qt_inner_solve(model, t, qt_update(model, P), r_min, budget=p_max, P_init=P)
                if P_new is None:
                    ok = False
                    break
                moved = np.abs(P_new - P).max() / max(1.0, np.abs(P).max())
                P = P_new
                if moved < inner_tol:
                    break
            if ok and _acceptable(model, P, p_max, gamma):
                total_inner += iters
                return P, iters
        total_inner += iters
        return None, iters

    def record(t, phase, P, iters):
        trace.append(
            ProbeRecord(
                t, phase, P is not None, float(P.sum()) if P is not None else float("nan"),
                t_lo, t_hi, iters, P.copy() if keep_powers and P is not None else None,
            )
        )

    P_best, it = probe(r_min, None)
    record(r_min, "floor", P_best, it)
    if P_best is None:
        zeros = np.zeros(K)
        return AllocationResult(
            zeros, zeros.copy(), 0.0, False, 0, total_inner, (t_lo, t_hi), trace,
            "QoS floor R_min cannot be met within P_max",
        )
    t_lo = max(t_lo, r_min)

    for _ in range(64):
        P, it = probe(t_hi, P_best)
        record(t_hi, "ceiling", P, it)
        if P is None:
            break
        log.debug("upper bound %.6g feasible; widening bracket", t_hi)
        t_lo, P_best = t_hi, P
        t_hi = 2 * t_hi + 1.0
    outer = 0
    while t_hi - t_lo >= tau:
        outer += 1
        t = 0.5 * (t_lo + t_hi)
        P, it = probe(t, P_best)
        if P is not None:
            t_lo, P_best = t, P
        else:
            t_hi = t
        record(t, "bisect", P, it)
    r = rates(model, P_best)
    return AllocationResult(P_best, r, float(r.min()), True, outer, total_inner, (t_lo, t_hi), trace)


def _acceptable(model: SinrModel, P: np.ndarray, p_max: float, gamma: float) -> bool:
    if P.sum() > p_max * (1 + 1e-12):
        return False
    if np.any(sinr_all(model, P) < gamma * (1 - 1e-9)):
        return False
    return sic_constraints_satisfied(model, P, tol=1e-9)[0]
