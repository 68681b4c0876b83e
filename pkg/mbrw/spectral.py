"""Discretised transfer operators and boundary-case calibration.

The operator P_s acts on functions of the direction x by

    (P_s phi)(x) = E N * sum_j q_j exp(s * sigma(lambda A_j, x)) phi(lambda A_j . x)

which is exact in the atoms; functions are represented by their values on a
``DirectionGrid`` and evaluated between nodes by piecewise-linear
interpolation.  Everything downstream (tilted kernels, the drift correction
ell_alpha, the variance sigma_alpha^2) is computed from the resulting sparse
matrices.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse

from mbrw import cone
from mbrw.errors import (
    CalibrationError,
    ConfigError,
    ConvergenceError,
    InvariantViolation,
)
from mbrw.model import ModelSpec, model_hash

logger = logging.getLogger(__name__)

DEFAULT_GRID_2D = 512
DEFAULT_GRID_3D = 64
DEFAULT_TOL = 1e-12
MAX_ITER = 100_000
RESIDUAL_TOL = 1e-8
DERIVATIVE_STEP = 1e-4
SECOND_DERIVATIVE_STEP = 1e-3
ALPHA_BRACKET = (0.05, 8.0)
ALPHA_SCAN_POINTS = 200
M_TOL = 1e-8
M_PRIME_TOL = 1e-6
NODE_SUM_TOL = 1e-10
# Off-grid kernel normalisation is limited by interpolation error, not by the
# eigen solve, so sampled directions get a looser bound than grid nodes.
KERNEL_TOL = 1e-6
CENTERING_TOL = 1e-6
DEGENERATE_SIGMA2 = 1e-10
SUPERCRITICAL_MARGIN = 1e-6


# ------------------------------------------------------------------
# Direction grid
# ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DirectionGrid:
    """Nodes on the simplex with piecewise-linear interpolation.

    d = 2 uses ``size`` midpoint nodes t_i = (i + 1/2) / size on the first
    coordinate; d = 3 uses the barycentric lattice with ``size``
    subdivisions per edge.
    """

    d: int
    size: int
    nodes: np.ndarray = field(repr=False)
    _lattice: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def build(cls, d: int, size: int | None = None) -> DirectionGrid:
        if d == 2:
            size = size or DEFAULT_GRID_2D
            t = (np.arange(size) + 0.5) / size
            nodes = np.column_stack([t, 1.0 - t])
            return cls(d=2, size=size, nodes=nodes)
        if d == 3:
            size = size or DEFAULT_GRID_3D
            lattice = np.full((size + 1, size + 1), -1, dtype=np.int64)
            pts = []
            for i in range(size + 1):
                for j in range(size + 1 - i):
                    lattice[i, j] = len(pts)
                    pts.append((i / size, j / size, (size - i - j) / size))
            return cls(d=3, size=size, nodes=np.asarray(pts), _lattice=lattice)
        raise ConfigError(
            f"spectral grids support d in {{2, 3}}, got d={d}; use Monte Carlo only workflows"
        )

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    def interp(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Node indices and nonnegative weights (summing to 1) for each point."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.d == 2:
            u = points[:, 0] * self.size - 0.5
            u = np.clip(u, 0.0, self.size - 1.0)
            i0 = np.minimum(np.floor(u).astype(np.int64), self.size - 2)
            frac = u - i0
            idx = np.column_stack([i0, i0 + 1])
            wts = np.column_stack([1.0 - frac, frac])
            return idx, wts
        assert self._lattice is not None
        n = self.size
        u = np.clip(points[:, 0], 0.0, 1.0) * n
        v = np.clip(points[:, 1], 0.0, 1.0) * n
        i = np.minimum(np.floor(u).astype(np.int64), n - 1)
        j = np.minimum(np.floor(v).astype(np.int64), n - 1 - i)
        j = np.maximum(j, 0)
        fu = np.clip(u - i, 0.0, 1.0)
        fv = np.clip(v - j, 0.0, 1.0)
        upper = (fu + fv > 1.0) & (i + j + 2 <= n)
        over = (fu + fv > 1.0) & ~upper
        scale = np.where(over, fu + fv, 1.0)
        fu, fv = fu / scale, fv / scale
        lat = self._lattice
        idx = np.empty((points.shape[0], 3), dtype=np.int64)
        wts = np.empty((points.shape[0], 3))
        low = ~upper
        idx[low, 0] = lat[i[low], j[low]]
        idx[low, 1] = lat[i[low] + 1, j[low]]
        idx[low, 2] = lat[i[low], j[low] + 1]
        wts[low, 0] = 1.0 - fu[low] - fv[low]
        wts[low, 1] = fu[low]
        wts[low, 2] = fv[low]
        idx[upper, 0] = lat[i[upper] + 1, j[upper] + 1]
        idx[upper, 1] = lat[i[upper], j[upper] + 1]
        idx[upper, 2] = lat[i[upper] + 1, j[upper]]
        wts[upper, 0] = fu[upper] + fv[upper] - 1.0
        wts[upper, 1] = 1.0 - fu[upper]
        wts[upper, 2] = 1.0 - fv[upper]
        return idx, np.clip(wts, 0.0, 1.0)

    def interp_matrix(self, points: np.ndarray) -> sparse.csr_matrix:
        idx, wts = self.interp(points)
        rows = np.repeat(np.arange(idx.shape[0]), idx.shape[1])
        return sparse.csr_matrix(
            (wts.ravel(), (rows, idx.ravel())), shape=(idx.shape[0], self.n_nodes)
        )

    def evaluate(self, values: np.ndarray, points: np.ndarray) -> np.ndarray:
        idx, wts = self.interp(points)
        return np.sum(np.asarray(values)[idx] * wts, axis=1)


# ------------------------------------------------------------------
# Transfer operator
# ------------------------------------------------------------------


class TransferOperator:
    """Sparse matrices of P_s on a grid, assembled per atom and reweighted per s."""

    def __init__(self, spec: ModelSpec, grid: DirectionGrid) -> None:
        if grid.d != spec.d:
            raise ConfigError(f"grid dimension {grid.d} does not match model d={spec.d}")
        self.spec = spec
        self.grid = grid
        self.masses = spec.offspring_mean * spec.weight_array
        self.cocycles: list[np.ndarray] = []
        self.moves: list[sparse.csr_matrix] = []
        for g in spec.scaled_atoms:
            images, coc = cone.act_batch(g, grid.nodes)
            self.cocycles.append(coc)
            self.moves.append(grid.interp_matrix(images))
        self._cache: dict[float, sparse.csr_matrix] = {}

    def matrix(self, s: float) -> sparse.csr_matrix:
        cached = self._cache.get(s)
        if cached is not None:
            return cached
        total = sparse.csr_matrix((self.grid.n_nodes, self.grid.n_nodes))
        for mass, coc, move in zip(self.masses, self.cocycles, self.moves, strict=True):
            if mass == 0:
                continue
            total = total + sparse.diags(mass * np.exp(s * coc)) @ move
        total = total.tocsr()
        if len(self._cache) > 16:
            self._cache.clear()
        self._cache[s] = total
        return total

    def apply(self, s: float, phi: np.ndarray) -> np.ndarray:
        return self.matrix(s) @ np.asarray(phi, dtype=float)


def apply_Ps(
    spec: ModelSpec, s: float, phi: np.ndarray, grid: DirectionGrid
) -> np.ndarray:
    return TransferOperator(spec, grid).apply(s, phi)


# ------------------------------------------------------------------
# Eigen data
# ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SpectralData:
    s: float
    m_s: float
    r: np.ndarray = field(repr=False)
    nu: np.ndarray = field(repr=False)
    pi: np.ndarray = field(repr=False)
    residual: float
    iterations: int
    grid: DirectionGrid = field(repr=False)
    dual: bool = False

    def r_at(self, points: np.ndarray) -> np.ndarray:
        return self.grid.evaluate(self.r, points)

    def to_dict(self) -> dict:
        return {
            "s": self.s,
            "m_s": self.m_s,
            "r": self.r.tolist(),
            "nu": self.nu.tolist(),
            "pi": self.pi.tolist(),
            "residual": self.residual,
            "iterations": self.iterations,
            "grid": {"d": self.grid.d, "size": self.grid.size},
            "dual": self.dual,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> SpectralData:
        grid = DirectionGrid.build(doc["grid"]["d"], doc["grid"]["size"])
        return cls(
            s=float(doc["s"]),
            m_s=float(doc["m_s"]),
            r=np.asarray(doc["r"], dtype=float),
            nu=np.asarray(doc["nu"], dtype=float),
            pi=np.asarray(doc["pi"], dtype=float),
            residual=float(doc["residual"]),
            iterations=int(doc["iterations"]),
            grid=grid,
            dual=bool(doc.get("dual", False)),
        )


def _right_vector(
    mat: sparse.csr_matrix, tol: float, max_iter: int
) -> tuple[float, np.ndarray, int, float]:
    v = np.ones(mat.shape[0])
    m_prev = math.nan
    residual = math.inf
    for it in range(1, max_iter + 1):
        w = mat @ v
        m = float(w.max())
        if not m > 0:
            raise InvariantViolation("power iteration: eigenvalue estimate", m, 0.0)
        v = w / m
        if abs(m - m_prev) < tol * m:
            residual = float(np.max(np.abs(mat @ v - m * v))) / m
            if residual <= RESIDUAL_TOL:
                return m, v, it, residual
        m_prev = m
    raise ConvergenceError("right eigenvector", max_iter, residual)


def _left_vector(mat: sparse.csr_matrix, tol: float, max_iter: int) -> np.ndarray:
    mat_t = mat.T.tocsr()
    u = np.full(mat.shape[0], 1.0 / mat.shape[0])
    delta = math.inf
    for _ in range(max_iter):
        w = mat_t @ u
        w /= w.sum()
        delta = float(np.abs(w - u).sum())
        u = w
        if delta < tol:
            return u
    raise ConvergenceError("left eigenvector", max_iter, delta)


def dominant_eigen(
    spec: ModelSpec,
    s: float,
    grid: DirectionGrid,
    tol: float = DEFAULT_TOL,
    max_iter: int = MAX_ITER,
    operator: TransferOperator | None = None,
) -> SpectralData:
    """Perron eigen-triple of P_s on ``grid`` by power iteration.

    r is normalised to sup r = 1; nu and pi = r * nu / <r, nu> are
    probability vectors.
    """
    op = operator or TransferOperator(spec, grid)
    mat = op.matrix(s)
    m, r, iterations, residual = _right_vector(mat, tol, max_iter)
    if np.any(r <= 0):
        raise InvariantViolation("eigenfunction positivity", float(r.min()), 0.0)
    nu = _left_vector(mat, tol, max_iter)
    pi = r * nu
    pi /= pi.sum()
    logger.debug(
        "eigen solve converged",
        extra={"s": s, "m_s": m, "iterations": iterations, "residual": residual},
    )
    return SpectralData(
        s=float(s),
        m_s=m,
        r=r,
        nu=nu,
        pi=pi,
        residual=residual,
        iterations=iterations,
        grid=grid,
    )


def _richardson_error(spec: ModelSpec, s: float, grid: DirectionGrid, tol: float) -> float:
    coarse = DirectionGrid.build(grid.d, max(grid.size // 2, 8))
    fine = dominant_eigen(spec, s, grid, tol).m_s
    return abs(fine - dominant_eigen(spec, s, coarse, tol).m_s) / 3.0


def dominant_eigen_dual(
    spec: ModelSpec,
    s: float,
    grid: DirectionGrid,
    tol: float = DEFAULT_TOL,
    primal: SpectralData | None = None,
) -> SpectralData:
    """Eigen data of P_s* (transposed atoms), cross-checked against the primal.

    The two discretisations differ by interpolation error, so the
    mismatch bound adds a Richardson estimate of that error when the plain
    2 * tol bound is not met.
    """
    dual_spec = spec.transposed()
    dual = dominant_eigen(dual_spec, s, grid, tol)
    primal = primal or dominant_eigen(spec, s, grid, tol)
    gap = abs(dual.m_s - primal.m_s)
    bound = 2 * tol * primal.m_s
    if gap > bound:
        bound += 2 * (
            _richardson_error(spec, s, grid, tol) + _richardson_error(dual_spec, s, grid, tol)
        )
        if gap > bound:
            raise InvariantViolation("primal/dual eigenvalue mismatch", gap, bound)
    return SpectralData(
        s=dual.s,
        m_s=dual.m_s,
        r=dual.r,
        nu=dual.nu,
        pi=dual.pi,
        residual=dual.residual,
        iterations=dual.iterations,
        grid=grid,
        dual=True,
    )


def eigen_residual(spec: ModelSpec, data: SpectralData) -> float:
    """Re-evaluate ||P_s r - m r||_sup / m for stored eigen data."""
    target = spec.transposed() if data.dual else spec
    pr = apply_Ps(target, data.s, data.r, data.grid)
    return float(np.max(np.abs(pr - data.m_s * data.r))) / data.m_s


def log_m(
    spec: ModelSpec,
    s: float,
    grid: DirectionGrid,
    tol: float = DEFAULT_TOL,
    operator: TransferOperator | None = None,
) -> float:
    return math.log(dominant_eigen(spec, s, grid, tol, operator=operator).m_s)


def big_M(
    spec: ModelSpec,
    s: float,
    grid: DirectionGrid,
    tol: float = DEFAULT_TOL,
    operator: TransferOperator | None = None,
    h: float = DERIVATIVE_STEP,
) -> tuple[float, float]:
    """(M(s), M'(s)) with M = log m and M' by central difference."""
    op = operator or TransferOperator(spec, grid)
    value = log_m(spec, s, grid, tol, op)
    slope = (log_m(spec, s + h, grid, tol, op) - log_m(spec, s - h, grid, tol, op)) / (2 * h)
    return value, slope


def lyapunov_drift(spec: ModelSpec, s: float, grid: DirectionGrid) -> float:
    """Almost sure limit of S_n / n under the chain tilted at s, i.e. -M'(s)."""
    return -big_M(spec, s, grid)[1]


def convexity_scan(
    spec: ModelSpec, s_values: list[float], grid: DirectionGrid
) -> list[float]:
    """Second differences of M over an increasing, evenly spaced s-grid."""
    op = TransferOperator(spec, grid)
    values = [log_m(spec, s, grid, operator=op) for s in s_values]
    return [values[i - 1] - 2 * values[i] + values[i + 1] for i in range(1, len(values) - 1)]


def grid_refinement_errors(
    spec: ModelSpec, s: float, sizes: list[int], exact: float
) -> list[float]:
    """Relative error of m(s) against ``exact`` for each grid size."""
    errors = []
    for size in sizes:
        grid = DirectionGrid.build(spec.d, size)
        errors.append(abs(dominant_eigen(spec, s, grid).m_s - exact) / exact)
    return errors


# ------------------------------------------------------------------
# Tilted kernels
# ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TiltedKernel:
    """One step of the chain tilted at s from a batch of directions.

    ``weights[n, j]`` is the probability of atom j from ``points[n]``;
    ``images[j, n]`` and ``cocycles[j, n]`` are the moved direction and
    sigma(lambda A_j, points[n]).  ``normalisation`` is the raw mass
    sum_j E N q_j e^{s sigma} r(image) divided by m(s) r(x).
    """

    weights: np.ndarray
    images: np.ndarray
    cocycles: np.ndarray
    normalisation: np.ndarray


def kernel_tolerance(grid: DirectionGrid) -> float:
    """Allowed |normalisation - 1| off the grid; interpolation error is O(size^-2)."""
    if grid.d == 2:
        return KERNEL_TOL * max(1.0, (DEFAULT_GRID_2D / grid.size) ** 2)
    return 1e-2 * max(1.0, (DEFAULT_GRID_3D / grid.size) ** 2)


def tilted_weights(
    spec: ModelSpec, data: SpectralData, points: np.ndarray
) -> TiltedKernel:
    points = np.atleast_2d(points)
    masses = spec.offspring_mean * spec.weight_array
    atoms = spec.scaled_atoms
    images = np.empty((spec.n_atoms, points.shape[0], spec.d))
    cocycles = np.empty((spec.n_atoms, points.shape[0]))
    raw = np.empty((points.shape[0], spec.n_atoms))
    for j, g in enumerate(atoms):
        images[j], cocycles[j] = cone.act_batch(g, points)
        raw[:, j] = masses[j] * np.exp(data.s * cocycles[j]) * data.r_at(images[j])
    total = raw.sum(axis=1)
    norm = total / (data.m_s * data.r_at(points))
    return TiltedKernel(
        weights=raw / total[:, None],
        images=images,
        cocycles=cocycles,
        normalisation=norm,
    )


def _node_kernel(
    spec: ModelSpec, data: SpectralData, operator: TransferOperator
) -> tuple[np.ndarray, np.ndarray, sparse.csr_matrix]:
    """Per-node atom weights w_j(x_i), cocycles and the node-to-node matrix Q."""
    r = data.r
    w = np.column_stack(
        [
            mass * np.exp(data.s * coc) * (move @ r) / (data.m_s * r)
            for mass, coc, move in zip(
                operator.masses, operator.cocycles, operator.moves, strict=True
            )
        ]
    )
    sums = w.sum(axis=1)
    dev = float(np.max(np.abs(sums - 1.0)))
    if dev > NODE_SUM_TOL:
        raise InvariantViolation("kernel weights at grid nodes sum to 1", dev, NODE_SUM_TOL)
    q = sparse.diags(1.0 / r) @ operator.matrix(data.s) @ sparse.diags(r) / data.m_s
    return w, np.column_stack(operator.cocycles), q.tocsr()


# ------------------------------------------------------------------
# Boundary case
# ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BoundaryData:
    alpha: float
    scale_lambda: float
    offspring_mean: float
    ell: np.ndarray = field(repr=False)
    sigma2: float
    M_prime: float
    M_value: float
    spectral: SpectralData = field(repr=False)
    dual: SpectralData = field(repr=False)
    poisson_residual: float = 0.0
    model_hash: str = ""

    @property
    def grid(self) -> DirectionGrid:
        return self.spectral.grid

    def ell_at(self, points: np.ndarray) -> np.ndarray:
        return self.grid.evaluate(self.ell, points)

    def r_at(self, points: np.ndarray) -> np.ndarray:
        return self.spectral.r_at(points)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "scale_lambda": self.scale_lambda,
            "offspring_mean": self.offspring_mean,
            "ell": self.ell.tolist(),
            "sigma2": self.sigma2,
            "M_prime": self.M_prime,
            "M_value": self.M_value,
            "spectral": self.spectral.to_dict(),
            "dual": self.dual.to_dict(),
            "poisson_residual": self.poisson_residual,
            "model_hash": self.model_hash,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> BoundaryData:
        return cls(
            alpha=float(doc["alpha"]),
            scale_lambda=float(doc["scale_lambda"]),
            offspring_mean=float(doc["offspring_mean"]),
            ell=np.asarray(doc["ell"], dtype=float),
            sigma2=float(doc["sigma2"]),
            M_prime=float(doc["M_prime"]),
            M_value=float(doc["M_value"]),
            spectral=SpectralData.from_dict(doc["spectral"]),
            dual=SpectralData.from_dict(doc["dual"]),
            poisson_residual=float(doc.get("poisson_residual", 0.0)),
            model_hash=str(doc.get("model_hash", "")),
        )


def _is_calibrated(value: float, slope: float) -> bool:
    return abs(value) <= M_TOL and abs(slope) <= M_PRIME_TOL


def _solve_alpha(spec: ModelSpec, grid: DirectionGrid, tol: float) -> float:
    op = TransferOperator(spec, grid)

    def h(s: float) -> float:
        value, slope = big_M(spec, s, grid, tol, op)
        return value - s * slope

    scan = np.geomspace(*ALPHA_BRACKET, ALPHA_SCAN_POINTS)
    prev_s, prev_h = float(scan[0]), h(float(scan[0]))
    for s in scan[1:]:
        cur = h(float(s))
        if prev_h > M_TOL and cur <= 0:
            return float(optimize.brentq(h, prev_s, float(s), xtol=1e-13))
        prev_s, prev_h = float(s), cur
    raise CalibrationError("no boundary parameter in range")


def calibrate_boundary(
    spec: ModelSpec,
    mode: str = "solve_alpha",
    alpha: float | None = None,
    grid: DirectionGrid | None = None,
    tol: float = DEFAULT_TOL,
) -> tuple[ModelSpec, BoundaryData]:
    """Adjust the model so that M(alpha) = M'(alpha) = 0.

    ``solve_alpha`` finds the root of M(s) - s M'(s) and rescales lambda;
    ``fix_alpha`` keeps ``alpha`` and rescales both lambda and E N.
    """
    grid = grid or DirectionGrid.build(spec.d)
    if mode == "solve_alpha":
        target = _solve_alpha(spec, grid, tol)
        value, slope = big_M(spec, target, grid, tol)
        calibrated = spec
        if not _is_calibrated(value, slope):
            calibrated = spec.with_scale(spec.scale_lambda * math.exp(-slope))
    elif mode == "fix_alpha":
        if alpha is None or not alpha > 0:
            raise ConfigError(f"fix_alpha needs a positive alpha, got: {alpha!r}")
        target = float(alpha)
        value, slope = big_M(spec, target, grid, tol)
        calibrated = spec
        if not _is_calibrated(value, slope):
            log_mean = math.log(spec.offspring_mean)
            # M with E N = 1; scaling E N shifts M by a constant.
            nu_value = value - log_mean
            new_mean = math.exp(-(nu_value - target * slope))
            if new_mean <= 1.0 + SUPERCRITICAL_MARGIN:
                raise CalibrationError("calibrated model not supercritical")
            calibrated = spec.with_scale(spec.scale_lambda * math.exp(-slope)).with_offspring(
                spec.offspring.with_mean(new_mean)
            )
    else:
        raise ConfigError(f"unknown calibration mode {mode!r}")

    if calibrated.offspring_mean <= 1.0 + SUPERCRITICAL_MARGIN:
        raise CalibrationError("calibrated model not supercritical")
    data = boundary_data(calibrated, target, grid, tol)
    logger.info(
        "boundary calibrated",
        extra={
            "mode": mode,
            "alpha": target,
            "scale_lambda": calibrated.scale_lambda,
            "offspring_mean": calibrated.offspring_mean,
            "sigma2": data.sigma2,
        },
    )
    return calibrated, data


def boundary_data(
    spec: ModelSpec, alpha: float, grid: DirectionGrid, tol: float = DEFAULT_TOL
) -> BoundaryData:
    """Assemble and verify boundary data for an already calibrated model."""
    op = TransferOperator(spec, grid)
    value, slope = big_M(spec, alpha, grid, tol, op)
    if not _is_calibrated(value, slope):
        raise CalibrationError(
            f"model not at boundary: M(alpha)={value:.3e}, M'(alpha)={slope:.3e}"
        )
    primal = dominant_eigen(spec, alpha, grid, tol, operator=op)
    dual = dominant_eigen_dual(spec, alpha, grid, tol, primal=primal)
    ell, residual = _ell(spec, primal, op, tol)
    sigma2 = sigma2_alpha(spec, alpha, grid, tol, op)
    return BoundaryData(
        alpha=float(alpha),
        scale_lambda=spec.scale_lambda,
        offspring_mean=spec.offspring_mean,
        ell=ell,
        sigma2=sigma2,
        M_prime=slope,
        M_value=value,
        spectral=primal,
        dual=dual,
        poisson_residual=residual,
        model_hash=model_hash(spec),
    )


def _ell(
    spec: ModelSpec,
    data: SpectralData,
    op: TransferOperator,
    tol: float,
    max_terms: int = MAX_ITER,
) -> tuple[np.ndarray, float]:
    w, coc, q = _node_kernel(spec, data, op)
    psi = np.sum(w * (-coc), axis=1)
    mean = float(data.pi @ psi)
    if abs(mean) > CENTERING_TOL:
        raise CalibrationError(f"model not at boundary: pi(psi) = {mean:.3e}")
    centred = psi - mean
    ell = centred.copy()
    term = centred
    for n in range(1, max_terms + 1):
        term = q @ term
        ell += term
        if float(np.max(np.abs(term))) < tol:
            residual = float(np.max(np.abs(ell - centred - q @ ell)))
            logger.debug("drift correction converged", extra={"terms": n, "residual": residual})
            return ell, residual
    raise ConvergenceError("Neumann series for ell_alpha", max_terms, float(np.max(np.abs(term))))


def ell_alpha(
    spec: ModelSpec, data: SpectralData, grid: DirectionGrid, tol: float = DEFAULT_TOL
) -> np.ndarray:
    """Drift correction ell_alpha on the grid nodes.

    Solves ell - Q ell = psi - pi(psi) by the Neumann series, where psi(x)
    is the one-step mean increment of S under the tilted chain; pi(ell) = 0.
    """
    return _ell(spec, data, TransferOperator(spec, grid), tol)[0]


def derivative_identity_gap(
    spec: ModelSpec, boundary: BoundaryData
) -> np.ndarray:
    """Per-node gap between E_x sum_u (S_u + ell(X_u)) e^{-alpha S_u} r(X_u) and r(x) ell(x)."""
    grid = boundary.grid
    r = boundary.spectral.r
    masses = spec.offspring_mean * spec.weight_array
    lhs = np.zeros(grid.n_nodes)
    for mass, g in zip(masses, spec.scaled_atoms, strict=True):
        images, coc = cone.act_batch(g, grid.nodes)
        # r ell is interpolated as one function, matching the discrete Poisson equation.
        tilt = mass * np.exp(boundary.alpha * coc)
        r_img = grid.evaluate(r, images)
        lhs += tilt * (-coc * r_img + grid.evaluate(r * boundary.ell, images))
    return np.abs(lhs - r * boundary.ell)


def sigma2_alpha(
    spec: ModelSpec,
    alpha: float,
    grid: DirectionGrid,
    tol: float = DEFAULT_TOL,
    operator: TransferOperator | None = None,
    h: float = SECOND_DERIVATIVE_STEP,
) -> float:
    """Asymptotic variance of S_n / sqrt(n) under the tilted chain.

    With Lambda(t) = log m(alpha - t) - log m(alpha) the log eigenvalue of the
    t-tilted kernel, sigma^2 = Lambda''(0) by a central second difference.
    Models whose positively weighted atoms coincide have deterministic
    increments and are rejected outright.
    """
    live = [a for a, w in zip(spec.scaled_atoms, spec.weights, strict=True) if w > 0]
    if all(np.array_equal(live[0], a) for a in live[1:]):
        raise CalibrationError("arithmetic/degenerate model: sigma^2 = 0")
    op = operator or TransferOperator(spec, grid)
    centre = log_m(spec, alpha, grid, tol, op)
    up = log_m(spec, alpha + h, grid, tol, op)
    down = log_m(spec, alpha - h, grid, tol, op)
    sigma2 = (up - 2 * centre + down) / (h * h)
    if sigma2 <= DEGENERATE_SIGMA2:
        raise CalibrationError(f"arithmetic/degenerate model: sigma^2 = {sigma2:.3e}")
    return sigma2
