"""
Error-growth bounds for coupled rollouts and a linear testbed to check them.

For a simulator with Lipschitz constant ``L_F`` and single-step error ``eps_sim``
the rollout error obeys ``e_{t+1} <= L_F e_t + eps_sim``; with a corrector of
Lipschitz constant ``L_C`` and residual error ``eps_corr`` the corrected error obeys
``e_{t+1} <= lam e_t + eps_corr`` with ``lam = L_C * L_F``. On the linear testbed every
constant is exact, so measured rollouts can be compared against both closed forms.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import svdvals
from scipy.stats import ortho_group

from src.coupled_rollout import StateLayout, rollout
from src.engines import BoundaryRequest, EngineSpec, LinearEngine, TimeTag

logger = logging.getLogger(__name__)

DENSE_JACOBIAN_LIMIT = 256
VIOLATION_RTOL = 1e-9
VIOLATION_ATOL = 1e-12


class TheoryError(ValueError):
    """Base class for theory and testbed errors."""


class ZeroDistancePairError(TheoryError):
    pass


@dataclass(frozen=True)
class TheoryParams:
    l_f: float
    l_c: float
    eps_sim: float
    eps_corr: float
    horizon: int

    def __post_init__(self):
        if min(self.l_f, self.l_c, self.eps_sim, self.eps_corr) < 0:
            raise TheoryError("Lipschitz constants and error bounds must be non-negative")
        if self.horizon < 0:
            raise TheoryError("horizon must be >= 0")

    @property
    def lam(self) -> float:
        return self.l_c * self.l_f


# --- bounds ----------------------------------------------------------------------

def bound_uncorrected(l_f: float, eps_sim: float, horizon: int) -> float:
    """``eps_sim * (L_F**T - 1) / (L_F - 1)``, or ``eps_sim * T`` at ``L_F == 1``."""
    if horizon < 0:
        raise TheoryError(f"horizon must be >= 0, got {horizon}")
    if l_f < 0 or eps_sim < 0:
        raise TheoryError("l_f and eps_sim must be non-negative")
    if horizon == 0 or eps_sim == 0:
        return 0.0
    if l_f == 1.0:
        return eps_sim * horizon
    if l_f == 0.0:
        return eps_sim
    try:
        growth = math.expm1(horizon * math.log1p(l_f - 1.0)) / (l_f - 1.0)
    except OverflowError:
        return math.inf
    return eps_sim * growth


@dataclass(frozen=True)
class CorrectedBound:
    """Finite-horizon and uniform bounds; both ``None`` when ``lam >= 1``."""
    finite: Optional[float]
    asymptotic: Optional[float]

    @property
    def diverges(self) -> bool:
        return self.asymptotic is None


def bound_corrected(lam: float, eps_corr: float, horizon: Optional[int] = None) -> CorrectedBound:
    if lam < 0 or eps_corr < 0:
        raise TheoryError("lam and eps_corr must be non-negative")
    if lam >= 1.0:
        return CorrectedBound(finite=None, asymptotic=None)
    asymptotic = eps_corr / (1.0 - lam)
    if horizon is None:
        return CorrectedBound(finite=None, asymptotic=asymptotic)
    if horizon < 0:
        raise TheoryError(f"horizon must be >= 0, got {horizon}")
    finite = 0.0 if horizon == 0 else eps_corr * (1.0 - lam ** horizon) / (1.0 - lam)
    return CorrectedBound(finite=finite, asymptotic=asymptotic)


def iterate_recurrence(rate: float, eps: float, steps: int, e0: float = 0.0) -> np.ndarray:
    """``e_{t+1} = rate * e_t + eps`` from ``e_0``, returned for ``t = 0..steps``."""
    e = np.empty(steps + 1)
    e[0] = e0
    for t in range(steps):
        e[t + 1] = rate * e[t] + eps
    return e


# --- lipschitz estimation ------------------------------------------------------------

Operator = Callable[[np.ndarray], np.ndarray]


def _secant_ratio(operator: Operator, a: np.ndarray, b: np.ndarray) -> float:
    dist = np.linalg.norm((a - b).ravel())
    if dist == 0:
        raise ZeroDistancePairError("Sample pair has zero distance")
    return float(np.linalg.norm((np.asarray(operator(a)) - np.asarray(operator(b))).ravel()) / dist)


def _jvp(operator: Operator, x: np.ndarray, v: np.ndarray, h: float) -> np.ndarray:
    return (np.asarray(operator(x + h * v), dtype=np.float64) - np.asarray(operator(x - h * v), dtype=np.float64)).ravel() / (2 * h)


def _top_direction(operator: Operator, x: np.ndarray, rng: np.random.Generator, iterations: int, h: float) -> Optional[np.ndarray]:
    """Leading right singular direction of the finite-difference Jacobian at ``x``."""
    n = x.size
    if n <= DENSE_JACOBIAN_LIMIT:
        eye = np.eye(n)
        jac = np.stack([_jvp(operator, x, eye[i].reshape(x.shape), h) for i in range(n)], axis=1)
        gram = jac.T @ jac
        v = rng.standard_normal(n)
        sigma = 0.0
        for _ in range(max(iterations, 1000)):
            w = gram @ v
            norm = np.linalg.norm(w)
            if norm == 0:
                return None
            v = w / norm
            if abs(norm - sigma) <= 1e-14 * norm:
                break
            sigma = norm
        return v.reshape(x.shape)
    v = rng.standard_normal(x.shape)
    v /= np.linalg.norm(v)
    for _ in range(iterations):
        w = _jvp(operator, x, v, h)
        if w.size != v.size:
            logger.warning("⚠️ operator is not square, skipping Jacobian power iteration")
            return None
        norm = np.linalg.norm(w)
        if norm == 0:
            return None
        v = w.reshape(x.shape) / norm
    return v


def estimate_lipschitz(
    operator: Operator,
    shape: Optional[Tuple[int, ...]] = None,
    n_samples: int = 1024,
    seed: int = 0,
    points: Optional[Sequence[np.ndarray]] = None,
    perturbation: float = 1.0,
    power_iterations: int = 8,
    jacobian_points: int = 2,
    fd_step: float = 1e-4,
) -> float:
    """Largest observed ``||f(x) - f(y)|| / ||x - y||``: a lower bound on the Lipschitz constant.

    Sample pairs are ``(x, x + perturbation * noise)`` with ``x`` drawn from ``points``
    (or standard normal of ``shape``), plus secants along the leading Jacobian
    direction found by power iteration at ``jacobian_points`` random points. Exact for
    linear operators; for nonlinear ones only ever an underestimate.
    """
    if n_samples < 1:
        raise TheoryError("n_samples must be >= 1")
    if points is None and shape is None:
        raise TheoryError("estimate_lipschitz needs either a state shape or sample points")
    rng = np.random.default_rng(seed)

    def draw() -> np.ndarray:
        if points is not None:
            return np.asarray(points[rng.integers(len(points))], dtype=np.float64)
        return rng.standard_normal(shape)

    best = 0.0
    for _ in range(n_samples):
        x = draw()
        y = x + perturbation * rng.standard_normal(x.shape)
        best = max(best, _secant_ratio(operator, x, y))
    for _ in range(jacobian_points if power_iterations > 0 else 0):
        x = draw()
        v = _top_direction(operator, x, rng, power_iterations, fd_step)
        if v is not None:
            best = max(best, _secant_ratio(operator, x + perturbation * v, x))
    return best


# --- linear testbed ------------------------------------------------------------------

def _plane_rotation(u1: np.ndarray, u2: np.ndarray, theta: float) -> np.ndarray:
    n = u1.size
    if theta == 0.0:
        return np.eye(n)
    plane = np.outer(u1, u1) + np.outer(u2, u2)
    return np.eye(n) + (math.cos(theta) - 1.0) * plane + math.sin(theta) * (np.outer(u2, u1) - np.outer(u1, u2))


def _angle_for(eps: float, scale: float, reach: float) -> float:
    """Rotation angle with ``scale * 2 sin(theta / 2) * reach == eps``."""
    if eps == 0:
        return 0.0
    ratio = eps / (2.0 * scale * reach)
    if not 0 < ratio <= 1:
        raise TheoryError(f"Cannot realize error {eps} with scale {scale} on this trajectory")
    return 2.0 * math.asin(ratio)


@dataclass
class LinearTestbed:
    """Linear dynamics with exactly known constants, split into spheres.

    The joint state is the stacked ``[V, h, w]`` field flattened channel-major.
    ``truth`` is the real dynamics, ``engine`` the imperfect simulator and
    ``corrector`` an optional linear correction.
    """
    truth: np.ndarray
    engine: np.ndarray
    x0: np.ndarray
    layout: Tuple[Tuple[str, int], ...]
    grid: Tuple[int, int]
    corrector: Optional[np.ndarray] = None

    @classmethod
    def build(
        cls,
        l_f: float,
        eps_sim: float,
        horizon: int,
        layout: Sequence[Tuple[str, int]] = (("A", 2), ("B", 3)),
        grid: Tuple[int, int] = (2, 2),
        seed: int = 0,
        corrector_lambda: Optional[float] = None,
        eps_corr: float = 0.05,
    ) -> "LinearTestbed":
        """Testbed with ``||engine|| == l_f``.

        Without a corrector the truth is ``l_f Q`` (``Q`` orthogonal) and the engine is
        ``l_f Q R`` with ``R`` a plane rotation sized so the largest single-step error
        along the true trajectory equals ``eps_sim``. With ``corrector_lambda`` the
        truth contracts at that rate, the engine is ``l_f Q`` and the corrector
        ``(lam / l_f) Q S Q^T`` brings the engine back to the truth up to ``eps_corr``.
        """
        layout = tuple((str(name), int(n)) for name, n in layout)
        n = sum(c for _, c in layout) * grid[0] * grid[1]
        if n < 2:
            raise TheoryError("Testbed needs a state dimension of at least 2")
        rng = np.random.default_rng(seed)
        q = ortho_group.rvs(n, random_state=rng)
        basis = ortho_group.rvs(n, random_state=rng)
        u1, u2 = basis[:, 0], basis[:, 1]
        x0 = rng.standard_normal(n)
        x0 /= np.linalg.norm(x0)

        rate = l_f if corrector_lambda is None else corrector_lambda
        truth = rate * q
        trajectory = [x0]
        for _ in range(max(horizon - 1, 0)):
            trajectory.append(truth @ trajectory[-1])
        reach = max(math.hypot(u1 @ x, u2 @ x) for x in trajectory)

        if corrector_lambda is None:
            theta = _angle_for(eps_sim, l_f, reach)
            engine = truth.copy() if theta == 0 else truth @ _plane_rotation(u1, u2, theta)
            return cls(truth=truth, engine=engine, x0=x0, layout=layout, grid=grid)

        if l_f <= 0:
            raise TheoryError("A corrected testbed needs l_f > 0")
        engine = l_f * q
        theta = _angle_for(eps_corr, corrector_lambda, reach)
        corrector = (corrector_lambda / l_f) * (q @ _plane_rotation(u1, u2, theta) @ q.T)
        return cls(truth=truth, engine=engine, x0=x0, layout=layout, grid=grid, corrector=corrector)

    @property
    def n(self) -> int:
        return self.truth.shape[0]

    @property
    def l_f(self) -> float:
        return float(svdvals(self.engine)[0])

    @property
    def l_c(self) -> float:
        return float(svdvals(self.corrector)[0]) if self.corrector is not None else 1.0

    @property
    def lam(self) -> float:
        return self.l_c * self.l_f

    def truth_trajectory(self, horizon: int) -> np.ndarray:
        """Exact trajectory ``[T + 1, V, h, w]``, stepped through the same routing as the engines."""
        trace = rollout(self.initial_state(), horizon, self.specs(), self.engines(self.truth),
                        divergence_threshold=math.inf)
        return trace.states

    def eps_sim(self, horizon: int) -> float:
        xs = self.truth_trajectory(horizon).reshape(horizon + 1, -1)
        return max((float(np.linalg.norm(self.engine @ xs[t] - xs[t + 1])) for t in range(horizon)), default=0.0)

    def eps_corr(self, horizon: int) -> float:
        if self.corrector is None:
            raise TheoryError("Testbed has no corrector")
        xs = self.truth_trajectory(horizon).reshape(horizon + 1, -1)
        ce = self.corrector @ self.engine
        return max((float(np.linalg.norm(ce @ xs[t] - xs[t + 1])) for t in range(horizon)), default=0.0)

    def state_layout(self) -> StateLayout:
        return StateLayout.from_counts(self.layout)

    def initial_state(self):
        h, w = self.grid
        return self.state_layout().state(self.x0.reshape(-1, h, w), 0)

    def specs(self) -> List[EngineSpec]:
        layout = self.state_layout()
        specs = []
        for name, names in layout.variables:
            boundary = tuple(
                BoundaryRequest(other, var, TimeTag.NOW)
                for other, other_names in layout.variables if other != name
                for var in other_names
            )
            specs.append(EngineSpec(sphere=name, variables=names, boundary=boundary))
        return specs

    def _blocks(self) -> Dict[str, np.ndarray]:
        cells = self.grid[0] * self.grid[1]
        out, start = {}, 0
        for name, c in self.layout:
            out[name] = np.arange(start, start + c * cells)
            start += c * cells
        return out

    def engines(self, matrix: Optional[np.ndarray] = None) -> Dict[str, LinearEngine]:
        """Per-sphere engines cut from a joint matrix (the imperfect engine by default)."""
        matrix = self.engine if matrix is None else matrix
        blocks = self._blocks()
        total = sum(c for _, c in self.layout)
        engines = {}
        for name, c in self.layout:
            cols = np.concatenate([blocks[name]] + [blocks[o] for o, _ in self.layout if o != name])
            engines[name] = LinearEngine(matrix[np.ix_(blocks[name], cols)], total, c, self.grid)
        return engines

    def corrector_engine(self) -> Optional[LinearEngine]:
        if self.corrector is None:
            return None
        total = sum(c for _, c in self.layout)
        return LinearEngine(self.corrector, total, total, self.grid)


# --- bound validation ---------------------------------------------------------------

@dataclass
class BoundReport:
    label: str
    params: TheoryParams
    with_corrector: bool
    measured: np.ndarray
    bound: np.ndarray
    violations: List[int] = field(default_factory=list)

    @property
    def growth_ratio(self) -> float:
        """Average per-step growth of the measured error after the first step."""
        m = self.measured
        if len(m) < 3 or m[1] <= 0:
            return float("nan")
        return float((m[-1] / m[1]) ** (1.0 / (len(m) - 2)))

    def sup_after(self, step: int) -> float:
        return float(np.max(self.measured[step:])) if len(self.measured) > step else float("nan")

    def to_dict(self) -> Dict:
        return {
            "label": self.label,
            "params": asdict(self.params),
            "lambda": self.params.lam,
            "with_corrector": self.with_corrector,
            "measured": self.measured.tolist(),
            "bound": [b if math.isfinite(b) else None for b in self.bound.tolist()],
            "violations": self.violations,
            "violation_count": len(self.violations),
            "growth_ratio": self.growth_ratio,
        }


def validate_bounds(testbed: LinearTestbed, horizon: int, with_corrector: bool = False, label: str = "") -> BoundReport:
    """Roll the testbed out and compare the measured error with the closed-form bound at every step."""
    if horizon < 1:
        raise TheoryError(f"horizon must be >= 1, got {horizon}")
    if with_corrector and testbed.corrector is None:
        raise TheoryError("Testbed has no corrector")
    truth = testbed.truth_trajectory(horizon)
    trace = rollout(
        testbed.initial_state(),
        horizon,
        testbed.specs(),
        testbed.engines(),
        corrector=testbed.corrector_engine() if with_corrector else None,
        truth=truth,
        divergence_threshold=math.inf,
    )
    measured = trace.errors["joint"]
    l_f = testbed.l_f
    eps_sim = testbed.eps_sim(horizon)
    if with_corrector:
        eps_corr = testbed.eps_corr(horizon)
        params = TheoryParams(l_f, testbed.l_c, eps_sim, eps_corr, horizon)
        bounds = [bound_corrected(params.lam, eps_corr, t).finite for t in range(horizon + 1)]
        bound = np.array([math.inf if b is None else b for b in bounds])
    else:
        params = TheoryParams(l_f, 1.0, eps_sim, 0.0, horizon)
        bound = np.array([bound_uncorrected(l_f, eps_sim, t) for t in range(horizon + 1)])
    norms = np.linalg.norm(truth.reshape(len(truth), -1), axis=1)
    slack = bound * (1.0 + VIOLATION_RTOL) + VIOLATION_ATOL * np.maximum(1.0, norms[: len(measured)])
    violations = [int(t) for t in np.nonzero(measured > slack[: len(measured)])[0]]
    report = BoundReport(label or f"L_F={l_f:.3g} eps={eps_sim:.3g}", params, with_corrector, measured, bound, violations)
    if violations:
        logger.warning(f"🚨 bound violated at steps {violations[:5]} for {report.label}")
    return report


def testbed_matrix(
    l_fs: Sequence[float] = (0.9, 1.0, 1.2, 1.5),
    eps_sims: Sequence[float] = (0.0, 0.01, 0.1),
    horizon: int = 50,
    seed: int = 0,
) -> List[BoundReport]:
    reports = []
    for l_f in l_fs:
        for eps in eps_sims:
            testbed = LinearTestbed.build(l_f, eps, horizon, seed=seed)
            reports.append(validate_bounds(testbed, horizon, label=f"uncorrected L_F={l_f} eps_sim={eps}"))
    return reports


def theory_report(
    horizon: int = 50,
    seed: int = 0,
    corrector_lambda: float = 0.8,
    eps_corr: float = 0.05,
    corrector_l_f: float = 1.2,
    neural: Optional[Dict] = None,
) -> Dict:
    """Testbed sweep, the contraction-corrector case and (optionally) neural estimates."""
    reports = testbed_matrix(horizon=horizon, seed=seed)
    corrected_bed = LinearTestbed.build(corrector_l_f, 0.0, horizon, seed=seed,
                                        corrector_lambda=corrector_lambda, eps_corr=eps_corr)
    reports.append(validate_bounds(corrected_bed, horizon, with_corrector=True,
                                   label=f"corrected L_F={corrector_l_f} lambda={corrector_lambda}"))
    total = sum(len(r.violations) for r in reports)
    logger.info(f"✅ theory check: {len(reports)} configurations, {total} violations")
    report = {"horizon": horizon, "seed": seed, "configs": [r.to_dict() for r in reports], "violation_count": total}
    if neural is not None:
        report["neural"] = neural
    return report


def neural_lambda(
    coupled_operator: Operator,
    corrector_operator: Operator,
    points: Sequence[np.ndarray],
    n_samples: int = 1024,
    power_iterations: int = 8,
    perturbation: float = 1e-2,
    seed: int = 0,
) -> Dict:
    """Heuristic ``lam_hat = L_C_hat * L_F_hat`` for trained networks; reported, never asserted."""
    l_f = estimate_lipschitz(coupled_operator, n_samples=n_samples, seed=seed, points=points,
                             perturbation=perturbation, power_iterations=power_iterations)
    l_c = estimate_lipschitz(corrector_operator, n_samples=n_samples, seed=seed + 1, points=points,
                             perturbation=perturbation, power_iterations=power_iterations)
    logger.info(f"📐 neural estimates: L_F >= {l_f:.3f}, L_C >= {l_c:.3f}, lambda_hat = {l_f * l_c:.3f}")
    return {"l_f_hat": l_f, "l_c_hat": l_c, "lambda_hat": l_f * l_c, "n_samples": n_samples,
            "power_iterations": power_iterations, "note": "lower-bound estimates"}
