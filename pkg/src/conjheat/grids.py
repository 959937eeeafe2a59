"""Grids, scalar fields and orthonormal-frame tensor fields.

Two grid families: uniform periodic grids for flat tori, and a half-offset
colatitude grid theta_j = (j + 1/2) * pi / N for sphere-type backends so that
no node sits on a pole. Stencils on the colatitude grid close with the even
reflection implied by rotational symmetry; because the reflected ghost value
equals the true function value exactly, all stencils stay second order up to
the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PeriodicGrid1D",
    "PeriodicGrid2D",
    "ColatitudeGrid",
    "ScalarField",
    "FrameTensorField",
    "GridMismatchError",
]


class GridMismatchError(ValueError):
    """A field was handed to an operator on a different grid."""


@dataclass(frozen=True)
class PeriodicGrid1D:
    length: float
    size: int

    def __post_init__(self):
        if not (self.length > 0.0 and np.isfinite(self.length)):
            raise ValueError(f"grid length must be positive and finite, got {self.length}")
        if self.size < 16:
            raise ValueError(f"grid size must be >= 16, got {self.size}")

    @property
    def h(self) -> float:
        return self.length / self.size

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.size) * self.h

    @property
    def shape(self) -> tuple:
        return (self.size,)


@dataclass(frozen=True)
class PeriodicGrid2D:
    lengths: tuple
    sizes: tuple

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(float(v) for v in self.lengths))
        object.__setattr__(self, "sizes", tuple(int(v) for v in self.sizes))
        if len(self.lengths) != 2 or len(self.sizes) != 2:
            raise ValueError("a 2-d periodic grid needs two lengths and two sizes")
        if any(not (v > 0.0 and np.isfinite(v)) for v in self.lengths):
            raise ValueError(f"grid lengths must be positive and finite, got {self.lengths}")
        if any(s < 16 for s in self.sizes):
            raise ValueError(f"grid sizes must be >= 16, got {self.sizes}")

    @property
    def hs(self) -> tuple:
        return (self.lengths[0] / self.sizes[0], self.lengths[1] / self.sizes[1])

    @property
    def shape(self) -> tuple:
        return self.sizes

    def nodes(self, axis: int) -> np.ndarray:
        return np.arange(self.sizes[axis]) * self.hs[axis]


@dataclass(frozen=True)
class ColatitudeGrid:
    size: int

    def __post_init__(self):
        if self.size < 16:
            raise ValueError(f"grid size must be >= 16, got {self.size}")

    @property
    def h(self) -> float:
        return np.pi / self.size

    @property
    def nodes(self) -> np.ndarray:
        return (np.arange(self.size) + 0.5) * self.h

    @property
    def shape(self) -> tuple:
        return (self.size,)


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real values on a grid's nodes at one time."""

    grid: object
    values: np.ndarray
    time: float = 0.0
    allow_nan: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.shape != self.grid.shape:
            raise GridMismatchError(
                f"field shape {values.shape} does not match grid shape {self.grid.shape}"
            )
        if not self.allow_nan and not np.all(np.isfinite(values)):
            raise ValueError("scalar field contains non-finite values")

    def same_grid(self, other) -> bool:
        return self.grid == other.grid

    def with_values(self, values, allow_nan: bool | None = None) -> "ScalarField":
        if allow_nan is None:
            allow_nan = self.allow_nan
        return ScalarField(self.grid, values, self.time, allow_nan)


@dataclass(frozen=True, eq=False)
class FrameTensorField:
    """Symmetric 2-tensor in a per-node orthonormal frame.

    One stored component (h11) on 1-d grids; (h11, h22, h12) otherwise, with
    h12 stored once.  On sphere backends of dimension n the second frame
    direction carries multiplicity n - 1 and h12 is identically zero for
    rotationally symmetric data; traces and norms account for that through
    the owning snapshot's frame multiplicities.
    """

    grid: object
    comps: np.ndarray  # shape (*grid.shape, 1) or (*grid.shape, 3)
    time: float = 0.0
    allow_nan: bool = False

    def __post_init__(self):
        comps = np.asarray(self.comps, dtype=float)
        object.__setattr__(self, "comps", comps)
        if comps.shape[:-1] != self.grid.shape or comps.shape[-1] not in (1, 3):
            raise GridMismatchError(
                f"tensor components shape {comps.shape} invalid for grid {self.grid.shape}"
            )
        if not self.allow_nan and not np.all(np.isfinite(comps)):
            raise ValueError("tensor field contains non-finite values")

    @property
    def ncomp(self) -> int:
        return self.comps.shape[-1]

    @property
    def h11(self) -> np.ndarray:
        return self.comps[..., 0]

    @property
    def h22(self) -> np.ndarray:
        if self.ncomp == 1:
            raise ValueError("1-component tensor has no h22")
        return self.comps[..., 1]

    @property
    def h12(self) -> np.ndarray:
        if self.ncomp == 1:
            raise ValueError("1-component tensor has no h12")
        return self.comps[..., 2]

    def with_comps(self, comps, allow_nan: bool | None = None) -> "FrameTensorField":
        if allow_nan is None:
            allow_nan = self.allow_nan
        return FrameTensorField(self.grid, comps, self.time, allow_nan)


# ---------------------------------------------------------------------------
# stencils
# ---------------------------------------------------------------------------

def periodic_d1(values: np.ndarray, h: float, axis: int = 0) -> np.ndarray:
    """Second-order central first derivative on a periodic axis."""
    return (np.roll(values, -1, axis) - np.roll(values, 1, axis)) / (2.0 * h)


def periodic_d2(values: np.ndarray, h: float, axis: int = 0) -> np.ndarray:
    """Second-order central second derivative on a periodic axis."""
    return (np.roll(values, -1, axis) - 2.0 * values + np.roll(values, 1, axis)) / (h * h)


def _reflect_pad(values: np.ndarray) -> np.ndarray:
    # even reflection across both poles: ghost(-1) = u(0), ghost(N) = u(N-1)
    return np.concatenate([values[:1], values, values[-1:]])


def colat_d1(values: np.ndarray, h: float) -> np.ndarray:
    """Central first derivative on the half-offset colatitude grid."""
    padded = _reflect_pad(values)
    return (padded[2:] - padded[:-2]) / (2.0 * h)


def colat_d2(values: np.ndarray, h: float) -> np.ndarray:
    """Central second derivative on the half-offset colatitude grid."""
    padded = _reflect_pad(values)
    return (padded[2:] - 2.0 * padded[1:-1] + padded[:-2]) / (h * h)


def colat_flux_laplacian(values: np.ndarray, h: float, sin_power: int) -> np.ndarray:
    """Conservative form of u'' + sin_power * cot(theta) * u'.

    Flux points sit at integer multiples of h, so the weights sin(0) and
    sin(pi) vanish and the pole fluxes are exactly zero; the weighted sum of
    the output over the grid telescopes to zero, which is what makes the
    solver's discrete mass conservation exact on homogeneous backends.
    """
    n = values.size
    theta_flux = np.arange(n + 1) * h
    weights = np.sin(theta_flux) ** sin_power
    padded = _reflect_pad(values)
    flux = weights * (padded[1:] - padded[:-1]) / h
    theta = (np.arange(n) + 0.5) * h
    return (flux[1:] - flux[:-1]) / h / (np.sin(theta) ** sin_power)
