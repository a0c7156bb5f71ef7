"""Sparse factor graph: variables, Gaussian factors, dogleg MAP, marginals.

Pose variables live on SE(3) and are updated by right retraction
T <- T * exp(xi); vector variables live in R^n.  Factor Jacobians follow the
same right-perturbation convention.  Linearization is whitened, the normal
equations are solved with a sparse LU factorization after Jacobi scaling, and
joint covariances are recovered by solving against unit right-hand sides.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from . import se3
from .se3 import Pose


class ConfigurationError(ValueError):
    """Invalid graph setup (e.g. non-SPD noise covariance)."""


class UnderConstrainedGraphError(RuntimeError):
    def __init__(self, variable: "VariableKey", message: str = ""):
        self.variable = variable
        super().__init__(
            message or f"graph is under-constrained; null-space witness variable {variable}"
        )


class NumericalFailureError(RuntimeError):
    pass


@dataclass(frozen=True)
class VariableKey:
    kind: str  # "pose" or "vector"
    index: int
    dim: int
    label: str = field(default="", compare=False)

    def __repr__(self):
        tag = self.label or f"{self.kind}{self.index}"
        return f"<{tag}:{self.dim}>"


class Values:
    """Container mapping variable keys to Pose or ndarray estimates."""

    def __init__(self, data: dict | None = None):
        self._data: dict[VariableKey, object] = dict(data or {})

    def __contains__(self, key):
        return key in self._data

    def __getitem__(self, key: VariableKey):
        return self._data[key]

    def __setitem__(self, key: VariableKey, value):
        if key.kind == "pose":
            if not isinstance(value, Pose):
                raise ConfigurationError(f"{key} expects a Pose")
        else:
            value = np.asarray(value, dtype=float)
            if value.shape != (key.dim,):
                raise ConfigurationError(f"{key} expects shape ({key.dim},)")
        self._data[key] = value

    def keys(self):
        return self._data.keys()

    def copy(self) -> "Values":
        return Values({k: (v.copy() if isinstance(v, (Pose, np.ndarray)) else v) for k, v in self._data.items()})

    def retracted(self, delta: np.ndarray, offsets: dict[VariableKey, int]) -> "Values":
        out = Values()
        pose_keys = []
        for key, value in self._data.items():
            if key not in offsets:
                out._data[key] = value
            elif key.kind == "pose":
                pose_keys.append(key)
            else:
                start = offsets[key]
                out._data[key] = value + delta[start : start + key.dim]
        if pose_keys:
            # one batched exponential + composition for every pose variable
            rot = np.stack([self._data[k].rotation for k in pose_keys])
            tr = np.stack([self._data[k].translation for k in pose_keys])
            d = np.stack([delta[offsets[k] : offsets[k] + 6] for k in pose_keys])
            steps = se3.exp_se3(d)
            new_rot = rot @ steps.rotation
            new_rot = new_rot @ (
                1.5 * np.eye(3) - 0.5 * (np.swapaxes(new_rot, -1, -2) @ new_rot)
            )
            new_tr = (rot @ steps.translation[..., None])[..., 0] + tr
            for i, key in enumerate(pose_keys):
                out._data[key] = Pose(new_rot[i], new_tr[i])
        return out


_SQRT_INFO_CACHE: dict[bytes, np.ndarray] = {}


def sqrt_information(covariance: np.ndarray) -> np.ndarray:
    """W with W^T W = Sigma^-1, i.e. whitened residual = W @ raw residual."""
    covariance = np.asarray(covariance, dtype=float)
    if covariance.ndim == 1:
        covariance = np.diag(covariance)
    key = covariance.tobytes()
    cached = _SQRT_INFO_CACHE.get(key)
    if cached is not None:
        return cached
    try:
        chol = scipy.linalg.cholesky(covariance, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise ConfigurationError(f"noise covariance is not SPD: {exc}") from exc
    out = scipy.linalg.solve_triangular(chol, np.eye(covariance.shape[0]), lower=True)
    if len(_SQRT_INFO_CACHE) < 4096:
        _SQRT_INFO_CACHE[key] = out
    return out


class Factor:
    """Gaussian residual factor with analytic Jacobians.

    Subclasses implement raw_error and raw_error_and_jacobians; Jacobians are
    returned per key w.r.t. the right tangent perturbation of that variable.
    """

    def __init__(self, keys: Sequence[VariableKey], covariance: np.ndarray):
        self.keys = tuple(keys)
        self.sqrt_info = sqrt_information(covariance)
        self.dim = self.sqrt_info.shape[0]

    def raw_error(self, values: Values) -> np.ndarray:
        raise NotImplementedError

    def raw_error_and_jacobians(self, values: Values) -> tuple[np.ndarray, list[np.ndarray]]:
        raise NotImplementedError

    def whitened_error(self, values: Values) -> np.ndarray:
        return self.sqrt_info @ self.raw_error(values)


# Registry of vectorized linearizers: type -> (residual_fn, linearize_fn).
# residual_fn(factors, values) -> (B, r) raw residuals for the stacked group;
# linearize_fn(factors, values) -> ((B, r) residuals, list of (B, r, d) blocks).
BATCH_KERNELS: dict[type, tuple[Callable, Callable]] = {}


def register_batch_kernel(factor_type: type, residual_fn: Callable, linearize_fn: Callable):
    BATCH_KERNELS[factor_type] = (residual_fn, linearize_fn)


@dataclass
class LinearSystem:
    offsets: dict[VariableKey, int]
    total_dim: int
    jacobian: scipy.sparse.csr_matrix
    residual: np.ndarray
    cost: float

    _normal: scipy.sparse.csc_matrix | None = None
    _gradient: np.ndarray | None = None

    @property
    def normal_matrix(self) -> scipy.sparse.csc_matrix:
        if self._normal is None:
            self._normal = (self.jacobian.T @ self.jacobian).tocsc()
        return self._normal

    @property
    def gradient(self) -> np.ndarray:
        if self._gradient is None:
            self._gradient = self.jacobian.T @ self.residual
        return self._gradient


class _ScaledFactorization:
    """LU of the Jacobi-scaled normal matrix with a singularity check."""

    def __init__(self, normal: scipy.sparse.csc_matrix, offsets, pivot_rtol=1e-12):
        diag = normal.diagonal().copy()
        max_diag = diag.max() if diag.size else 0.0
        if max_diag <= 0.0 or not np.isfinite(max_diag):
            raise UnderConstrainedGraphError(_witness(offsets, int(np.argmin(diag))))
        bad = np.where(diag <= pivot_rtol * max_diag)[0]
        if bad.size:
            raise UnderConstrainedGraphError(_witness(offsets, int(bad[0])))
        self.scale = 1.0 / np.sqrt(diag)
        d = scipy.sparse.diags(self.scale)
        scaled = (d @ normal @ d).tocsc()
        try:
            self.lu = scipy.sparse.linalg.splu(scaled)
        except RuntimeError as exc:
            raise UnderConstrainedGraphError(
                _witness(offsets, 0), f"sparse factorization failed: {exc}"
            ) from exc
        pivots = np.abs(self.lu.U.diagonal())
        # Structural rank loss only: legitimate graphs mix boundary weights of
        # 1e16 with ~1 N force priors, so the scaled spectrum can bottom out
        # near 1e-15 while remaining solvable.  Free variables are caught by
        # the raw-diagonal check above.
        if pivots.min() <= 1e-18 * max(pivots.max(), 1.0):
            col = int(self.lu.perm_c[int(np.argmin(pivots))])
            raise UnderConstrainedGraphError(_witness(offsets, col))
        self._scaled = scaled

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        one_dim = rhs.ndim == 1
        b = self.scale * rhs if one_dim else self.scale[:, None] * rhs
        x = self.lu.solve(b)
        # one pass of iterative refinement recovers accuracy lost to the
        # wide dynamic range of the stacked noise models
        x = x + self.lu.solve(b - self._scaled @ x)
        if not np.all(np.isfinite(x)):
            raise NumericalFailureError("linear solve produced non-finite values")
        return self.scale * x if one_dim else self.scale[:, None] * x


def _witness(offsets: dict[VariableKey, int], column: int) -> VariableKey:
    owner = None
    for key, start in offsets.items():
        if start <= column < start + key.dim:
            owner = key
            break
    return owner if owner is not None else next(iter(offsets))


class FactorGraph:
    def __init__(self):
        self.factors: list[Factor] = []
        self.variables: dict[VariableKey, None] = {}
        self.initial_values = Values()
        self._counters = {"pose": 0, "vector": 0}
        self._offsets: dict[VariableKey, int] | None = None
        self._total_dim = 0

    # -- construction -----------------------------------------------------
    def add_pose_variable(self, label: str = "") -> VariableKey:
        key = VariableKey("pose", self._counters["pose"], 6, label)
        self._counters["pose"] += 1
        self.variables[key] = None
        self._offsets = None
        return key

    def add_vector_variable(self, dim: int, label: str = "") -> VariableKey:
        key = VariableKey("vector", self._counters["vector"], dim, label)
        self._counters["vector"] += 1
        self.variables[key] = None
        self._offsets = None
        return key

    def add_factor(self, factor: Factor):
        for key in factor.keys:
            if key not in self.variables:
                raise ConfigurationError(f"factor references unknown variable {key}")
        self.factors.append(factor)

    # -- evaluation --------------------------------------------------------
    @property
    def offsets(self) -> dict[VariableKey, int]:
        if self._offsets is None:
            self._offsets = {}
            total = 0
            for key in self.variables:
                self._offsets[key] = total
                total += key.dim
            self._total_dim = total
        return self._offsets

    @property
    def total_dim(self) -> int:
        _ = self.offsets
        return self._total_dim

    def _grouped(self) -> list[tuple[type | None, list[int]]]:
        groups: dict[type | None, list[int]] = {}
        for i, f in enumerate(self.factors):
            tag = type(f) if type(f) in BATCH_KERNELS and getattr(f, "batchable", True) else None
            groups.setdefault(tag, []).append(i)
        return list(groups.items())

    def cost(self, values: Values) -> float:
        total = 0.0
        for tag, idx in self._grouped():
            if tag is None:
                for i in idx:
                    f = self.factors[i]
                    r = f.sqrt_info @ f.raw_error(values)
                    total += float(r @ r)
            else:
                residual_fn, _ = BATCH_KERNELS[tag]
                group = [self.factors[i] for i in idx]
                raw = residual_fn(group, values)
                white = np.einsum("bij,bj->bi", np.stack([f.sqrt_info for f in group]), raw)
                total += float(np.sum(white * white))
        if not np.isfinite(total):
            raise NumericalFailureError("cost is not finite")
        return 0.5 * total

    def linearize(self, values: Values) -> LinearSystem:
        offsets = self.offsets
        row_starts = np.zeros(len(self.factors), dtype=int)
        total_rows = 0
        for i, f in enumerate(self.factors):
            row_starts[i] = total_rows
            total_rows += f.dim

        residual = np.zeros(total_rows)
        data_parts: list[np.ndarray] = []
        row_parts: list[np.ndarray] = []
        col_parts: list[np.ndarray] = []

        for tag, idx in self._grouped():
            if tag is None:
                for i in idx:
                    f = self.factors[i]
                    raw, jacs = f.raw_error_and_jacobians(values)
                    w = f.sqrt_info
                    residual[row_starts[i] : row_starts[i] + f.dim] = w @ raw
                    rows = np.arange(row_starts[i], row_starts[i] + f.dim)
                    for key, jac in zip(f.keys, jacs):
                        block = w @ jac
                        cols = np.arange(offsets[key], offsets[key] + key.dim)
                        row_parts.append(np.repeat(rows, key.dim))
                        col_parts.append(np.tile(cols, f.dim))
                        data_parts.append(block.ravel())
            else:
                _, linearize_fn = BATCH_KERNELS[tag]
                group = [self.factors[i] for i in idx]
                raw, blocks = linearize_fn(group, values)
                sqrt_infos = np.stack([f.sqrt_info for f in group])
                white = np.einsum("bij,bj->bi", sqrt_infos, raw)
                starts = row_starts[idx]
                rdim = group[0].dim
                for k in range(white.shape[0]):
                    residual[starts[k] : starts[k] + rdim] = white[k]
                for key_pos, block in enumerate(blocks):
                    wb = sqrt_infos @ block
                    key_dim = wb.shape[2]
                    col0 = np.array([offsets[f.keys[key_pos]] for f in group])
                    rows = (starts[:, None, None] + np.arange(rdim)[None, :, None])
                    cols = (col0[:, None, None] + np.arange(key_dim)[None, None, :])
                    row_parts.append(np.broadcast_to(rows, wb.shape).ravel())
                    col_parts.append(np.broadcast_to(cols, wb.shape).ravel())
                    data_parts.append(wb.ravel())

        jac = scipy.sparse.coo_matrix(
            (np.concatenate(data_parts), (np.concatenate(row_parts), np.concatenate(col_parts))),
            shape=(total_rows, self.total_dim),
        ).tocsr()
        cost = 0.5 * float(residual @ residual)
        if not np.isfinite(cost):
            raise NumericalFailureError("cost is not finite at linearization point")
        return LinearSystem(offsets, self.total_dim, jac, residual, cost)


@dataclass
class SolveOptions:
    max_iterations: int = 100
    rel_cost_tol: float = 1e-10
    grad_inf_tol: float = 1e-10
    step_tol: float = 1e-12  # tangent-norm floor; below this the state cannot move
    initial_trust_radius: float = 1.0
    verbose: bool = False


@dataclass
class MapSolution:
    values: Values
    final_cost: float
    iterations: int
    converged: bool
    gradient_inf_norm: float
    status: str = ""
    system: LinearSystem | None = None


def _dogleg_step(h_gn, g, normal, trust_radius):
    """Classic dogleg blend of the Gauss-Newton and Cauchy steps."""
    gn_norm = np.linalg.norm(h_gn)
    if gn_norm <= trust_radius:
        return h_gn, True
    g_norm2 = float(g @ g)
    curvature = float(g @ (normal @ g))
    alpha = g_norm2 / max(curvature, 1e-300)
    h_sd = -alpha * g
    sd_norm = np.linalg.norm(h_sd)
    if sd_norm >= trust_radius:
        return h_sd * (trust_radius / sd_norm), False
    diff = h_gn - h_sd
    a = float(diff @ diff)
    b = 2.0 * float(h_sd @ diff)
    c = float(h_sd @ h_sd) - trust_radius**2
    tau = (-b + np.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)
    return h_sd + tau * diff, False


def solve_map(
    graph: FactorGraph,
    initial_values: Values | None = None,
    options: SolveOptions | None = None,
) -> MapSolution:
    """Dogleg trust-region MAP optimization over the graph manifold."""
    opts = options or SolveOptions()
    values = (initial_values or graph.initial_values).copy()
    system = graph.linearize(values)
    cost = system.cost
    trust_radius = opts.initial_trust_radius
    factorization: _ScaledFactorization | None = None
    h_gn: np.ndarray | None = None
    converged = False
    status = "max iterations reached"
    iterations = 0
    grad_inf = float(np.abs(system.gradient).max()) if system.total_dim else 0.0

    for iterations in range(1, opts.max_iterations + 1):
        g = system.gradient
        grad_inf = float(np.abs(g).max())
        if grad_inf < opts.grad_inf_tol:
            converged, status = True, "gradient tolerance"
            iterations -= 1
            break
        if factorization is None:
            factorization = _ScaledFactorization(system.normal_matrix, system.offsets)
            h_gn = -factorization.solve(g)
            if not np.all(np.isfinite(h_gn)):
                raise NumericalFailureError("Gauss-Newton step is not finite")
        step, full_newton = _dogleg_step(h_gn, g, system.normal_matrix, trust_radius)
        if np.linalg.norm(step) < opts.step_tol:
            converged, status = True, "step tolerance"
            iterations -= 1
            break
        predicted = -(float(g @ step) + 0.5 * float(step @ (system.normal_matrix @ step)))
        if predicted <= opts.rel_cost_tol * max(cost, 1e-300):
            # The quadratic model has no decrease left worth taking.
            converged, status = True, "model decrease tolerance"
            iterations -= 1
            break
        trial = values.retracted(step, system.offsets)
        try:
            trial_cost = graph.cost(trial)
        except se3.BranchCutError:
            trial_cost = np.inf
        if not np.isfinite(trial_cost):
            gain = -1.0
        else:
            gain = (cost - trial_cost) / max(predicted, 1e-300)
        if gain > 0 and trial_cost < cost:
            rel_decrease = (cost - trial_cost) / max(cost, 1e-300)
            values, cost = trial, trial_cost
            system = graph.linearize(values)
            factorization, h_gn = None, None
            if gain > 0.75 and not full_newton:
                trust_radius *= 2.0
            elif gain < 0.25:
                trust_radius *= 0.25
            if rel_decrease < opts.rel_cost_tol:
                converged, status = True, "relative cost tolerance"
                grad_inf = float(np.abs(system.gradient).max())
                break
        else:
            trust_radius *= 0.25
            if trust_radius < 1e-14:
                status = "trust region collapsed"
                break
        if opts.verbose:
            print(f"  iter {iterations:3d} cost {cost:.6e} trust {trust_radius:.2e}")

    return MapSolution(values, cost, iterations, converged, grad_inf, status, system)


@dataclass
class JointMarginal:
    keys: tuple[VariableKey, ...]
    covariance: np.ndarray
    offsets: dict[VariableKey, int]

    def block(self, key_a: VariableKey, key_b: VariableKey | None = None) -> np.ndarray:
        key_b = key_b or key_a
        a0, b0 = self.offsets[key_a], self.offsets[key_b]
        return self.covariance[a0 : a0 + key_a.dim, b0 : b0 + key_b.dim]


def joint_marginal(
    graph: FactorGraph, solution: MapSolution, keys: Sequence[VariableKey]
) -> JointMarginal:
    """Laplace-approximation joint covariance block over the given keys."""
    if not solution.converged:
        raise NumericalFailureError("joint_marginal requires a converged MAP solution")
    for key in keys:
        if key not in graph.variables:
            raise KeyError(f"variable {key} is not in the graph")
    system = solution.system or graph.linearize(solution.values)
    factorization = _ScaledFactorization(system.normal_matrix, system.offsets)
    cols: list[int] = []
    local_offsets: dict[VariableKey, int] = {}
    for key in keys:
        local_offsets[key] = len(cols)
        start = system.offsets[key]
        cols.extend(range(start, start + key.dim))
    rhs = np.zeros((system.total_dim, len(cols)))
    rhs[cols, np.arange(len(cols))] = 1.0
    solved = factorization.solve(rhs)
    cov = solved[cols, :]
    cov = 0.5 * (cov + cov.T)
    return JointMarginal(tuple(keys), cov, local_offsets)


def warm_start(previous: MapSolution | Values, graph: FactorGraph) -> Values:
    """Initial values for a new graph seeded from a previous solution.

    Variables present in the previous solution keep their estimates; new
    variables fall back to the graph's builder-provided cold start.
    """
    prev_values = previous.values if isinstance(previous, MapSolution) else previous
    out = graph.initial_values.copy()
    for key in graph.variables:
        if key in prev_values:
            out[key] = prev_values[key]
    return out


# -- generic prior factors -------------------------------------------------


class VectorPriorFactor(Factor):
    """e = x - mean with identity Jacobian."""

    def __init__(self, key: VariableKey, mean: np.ndarray, covariance: np.ndarray):
        super().__init__([key], covariance)
        self.mean = np.asarray(mean, dtype=float)
        self._eye = np.eye(key.dim)

    def raw_error(self, values: Values) -> np.ndarray:
        return values[self.keys[0]] - self.mean

    def raw_error_and_jacobians(self, values: Values):
        return self.raw_error(values), [self._eye]


class PosePriorFactor(Factor):
    """e = log(mean^-1 T); anchors a pose in the spatial frame."""

    def __init__(self, key: VariableKey, mean: Pose, covariance: np.ndarray):
        super().__init__([key], covariance)
        self.mean_inverse = mean.inverse()

    def raw_error(self, values: Values) -> np.ndarray:
        return se3.log_se3(self.mean_inverse.compose(values[self.keys[0]]))

    def raw_error_and_jacobians(self, values: Values):
        err = self.raw_error(values)
        return err, [se3.right_jacobian_inv(err)]


class LinearFactor(Factor):
    """e = A x - b over one or more vector variables (for tests and plumbing)."""

    def __init__(self, keys, matrices, rhs, covariance):
        super().__init__(keys, covariance)
        self.matrices = [np.asarray(m, dtype=float) for m in matrices]
        self.rhs = np.asarray(rhs, dtype=float)

    def raw_error(self, values: Values) -> np.ndarray:
        out = -self.rhs.copy()
        for key, mat in zip(self.keys, self.matrices):
            out = out + mat @ values[key]
        return out

    def raw_error_and_jacobians(self, values: Values):
        return self.raw_error(values), list(self.matrices)
