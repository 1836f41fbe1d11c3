"""Truncated Q-Wiener process on a sine eigenbasis and control paths.

The covariance is diagonal on the modes e_k(x) = sqrt(2) sin(k pi x) with
Cartesian directions e_j, eigenvalues lambda_k = k**(-alpha). With alpha > 3
the H1-weighted trace sum_k lambda_k * (1 + (k pi)^2) converges, so the noise
stays H1-regular. Control paths live in the same coordinates: the coefficient
c_{k,j}(t) is the component of h(t) along the unit vector sqrt(lambda_k) e_k e_j
of the Cameron-Martin space, which makes the H0 cost a plain sum of squares.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .field import Grid1D, VectorField

__all__ = [
    "CovarianceSpec",
    "WienerIncrement",
    "ControlPath",
    "make_covariance",
    "sample_increment",
    "noise_field",
    "control_field",
    "project_to_ball",
    "zero_control",
    "single_mode_control",
    "write_control_csv",
    "read_control_coefficients",
    "stream_rng",
]


@dataclass(frozen=True)
class CovarianceSpec:
    """Per-mode noise amplitudes sqrt(lambda_k), lambda_k = k**(-decay_exponent).

    ``amplitude_scale`` multiplies every mode; setting it to 0 switches the
    noise off entirely (useful for degeneration experiments).
    """

    mode_count: int
    decay_exponent: float
    amplitude_scale: float = 1.0

    @property
    def amplitudes(self) -> np.ndarray:
        k = np.arange(1, self.mode_count + 1, dtype=float)
        return self.amplitude_scale * k ** (-0.5 * self.decay_exponent)

    @property
    def h1_trace(self) -> float:
        """Partial sum of the H1 trace over the retained modes (3 directions)."""
        k = np.arange(1, self.mode_count + 1, dtype=float)
        lam = self.amplitude_scale**2 * k ** (-self.decay_exponent)
        return float(np.sum(3.0 * lam * (1.0 + (k * math.pi) ** 2)))


def make_covariance(mode_count: int, decay_exponent: float = 4.0) -> CovarianceSpec:
    if mode_count < 1:
        raise ValueError(f"mode_count must be >= 1, got {mode_count}")
    if decay_exponent <= 3.0:
        raise ValueError(
            "decay_exponent must exceed 3 so the H1 trace of the covariance "
            f"stays finite as modes are added, got {decay_exponent}"
        )
    return CovarianceSpec(int(mode_count), float(decay_exponent))


@dataclass(frozen=True, eq=False)
class WienerIncrement:
    """Raw Gaussian mode coefficients over one step, entry (k, j) ~ N(0, dt)."""

    coefficients: np.ndarray
    dt: float


@dataclass(frozen=True, eq=False)
class ControlPath:
    """Piecewise-constant control in Cameron-Martin coordinates, shape (N, K, 3)."""

    coefficients: np.ndarray
    dt: float

    def __post_init__(self):
        coeffs = np.asarray(self.coefficients, dtype=float)
        if coeffs.ndim != 3 or coeffs.shape[2] != 3:
            raise ValueError(f"coefficients must have shape (N, K, 3), got {coeffs.shape}")
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "coefficients", coeffs)

    @property
    def steps(self) -> int:
        return self.coefficients.shape[0]

    @property
    def mode_count(self) -> int:
        return self.coefficients.shape[1]

    def h0_cost(self) -> float:
        """Half the squared H0 path norm: 0.5 * sum_n dt * sum_{k,j} c^2."""
        return 0.5 * self.dt * float(np.vdot(self.coefficients, self.coefficients))


def zero_control(steps: int, mode_count: int, dt: float) -> ControlPath:
    return ControlPath(np.zeros((steps, mode_count, 3)), dt)


def single_mode_control(
    steps: int,
    mode_count: int,
    dt: float,
    mode: int,
    component: int,
    coefficient: float,
) -> ControlPath:
    """Constant-in-time control in one (mode, component) slot; 1-based indices."""
    if not 1 <= mode <= mode_count:
        raise ValueError(f"mode must be in 1..{mode_count}, got {mode}")
    if component not in (1, 2, 3):
        raise ValueError(f"component must be 1, 2 or 3, got {component}")
    coeffs = np.zeros((steps, mode_count, 3))
    coeffs[:, mode - 1, component - 1] = coefficient
    return ControlPath(coeffs, dt)


@lru_cache(maxsize=None)
def _sine_basis(grid: Grid1D, mode_count: int) -> np.ndarray:
    """(n, K) matrix of sqrt(2) sin(k pi x_i); cached, treat as read-only."""
    x = grid.nodes
    k = np.arange(1, mode_count + 1)
    basis = math.sqrt(2.0) * np.sin(math.pi * np.outer(x, k))
    basis.setflags(write=False)
    return basis


@lru_cache(maxsize=None)
def mode_matrix(spec: CovarianceSpec, grid: Grid1D) -> np.ndarray:
    """(n, K) synthesis matrix sqrt(lambda_k) * sqrt(2) sin(k pi x_i)."""
    mat = _sine_basis(grid, spec.mode_count) * spec.amplitudes
    mat.setflags(write=False)
    return mat


def sample_increment(spec: CovarianceSpec, dt: float, rng: np.random.Generator) -> WienerIncrement:
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    coeffs = rng.normal(0.0, math.sqrt(dt), size=(spec.mode_count, 3))
    return WienerIncrement(coeffs, float(dt))


def noise_field(spec: CovarianceSpec, incr: WienerIncrement, grid: Grid1D) -> VectorField:
    """Synthesize the increment field sum_{k,j} sqrt(lambda_k) dW_{k,j} e_k e_j."""
    if incr.coefficients.shape != (spec.mode_count, 3):
        raise ValueError(
            f"increment shape {incr.coefficients.shape} does not match "
            f"mode count {spec.mode_count}"
        )
    return VectorField(grid, mode_matrix(spec, grid) @ incr.coefficients)


def control_field(spec: CovarianceSpec, ctrl: ControlPath, step: int, grid: Grid1D) -> VectorField:
    """Synthesize h(t_step) as a field in H (coordinates scaled by sqrt(lambda_k))."""
    if ctrl.mode_count != spec.mode_count:
        raise ValueError(
            f"control has {ctrl.mode_count} modes, covariance has {spec.mode_count}"
        )
    if not 0 <= step < ctrl.steps:
        raise IndexError(f"step {step} out of range 0..{ctrl.steps - 1}")
    return VectorField(grid, mode_matrix(spec, grid) @ ctrl.coefficients[step])


def project_to_ball(ctrl: ControlPath, radius: float) -> ControlPath:
    """Scale the control so the H0 path integral sum dt * ||h||^2 is <= radius."""
    if radius <= 0.0:
        raise ValueError(f"radius must be positive, got {radius}")
    integral = 2.0 * ctrl.h0_cost()
    if integral <= radius:
        return ctrl
    return ControlPath(ctrl.coefficients * math.sqrt(radius / integral), ctrl.dt)


def write_control_csv(ctrl: ControlPath, path) -> None:
    """Persist as CSV with columns (step, k, j, coefficient); k, j are 1-based."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "k", "j", "coefficient"])
        coeffs = ctrl.coefficients
        for n in range(coeffs.shape[0]):
            for k in range(coeffs.shape[1]):
                for j in range(3):
                    writer.writerow([n, k + 1, j + 1, repr(float(coeffs[n, k, j]))])


def read_control_coefficients(path) -> np.ndarray:
    """Read (step, k, j, coefficient) rows back into an (N, K, 3) array.

    Missing (step, k, j) combinations are zero. The time step is not stored in
    the file; pair the coefficients with a dt from the run configuration.
    """
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header[:4]] != ["step", "k", "j", "coefficient"]:
            raise ValueError(f"{path}: expected header 'step,k,j,coefficient'")
        for row in reader:
            if not row:
                continue
            n, k, j = int(row[0]), int(row[1]), int(row[2])
            if n < 0 or k < 1 or j not in (1, 2, 3):
                raise ValueError(f"{path}: bad index row {row}")
            entries.append((n, k, j, float(row[3])))
    if not entries:
        raise ValueError(f"{path}: no coefficient rows")
    steps = max(e[0] for e in entries) + 1
    modes = max(e[1] for e in entries)
    coeffs = np.zeros((steps, modes, 3))
    for n, k, j, value in entries:
        coeffs[n, k - 1, j - 1] = value
    return coeffs


def stream_rng(base_seed: int, *key: int) -> np.random.Generator:
    """Counter-based stream: same (base_seed, key) always yields the same stream."""
    seq = np.random.SeedSequence(int(base_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(seq)
