"""Refinement-study helpers: nested resolutions and order fitting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["fit_order", "Resolution", "nested_resolutions"]


def fit_order(hs, errors) -> float:
    """Least-squares slope of log(error) against log(h)."""
    hs = np.asarray(hs, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if hs.size < 2 or hs.size != errors.size:
        raise ValueError("order fitting needs matching h and error sequences, length >= 2")
    if np.any(errors <= 0.0):
        raise ValueError("order fitting needs positive errors")
    return float(np.polyfit(np.log(hs), np.log(errors), 1)[0])


@dataclass(frozen=True)
class Resolution:
    """One refinement level: spatial size(s) and the two time discretizations."""

    level: int
    grid_size: object  # int or (int, int)
    time_steps: int
    flow_time_steps: int | None = None  # rotsym metric integrator
    store_every: int | None = None

    @property
    def h_label(self) -> float:
        size = self.grid_size[0] if isinstance(self.grid_size, tuple) else self.grid_size
        return 1.0 / float(size)


def nested_resolutions(
    base_grid,
    base_steps: int,
    levels: int,
    time_factor: int,
    flow_steps: int | None = None,
    store_every: int | None = None,
) -> list:
    """Geometrically nested levels: grids double; solver steps scale by
    ``time_factor`` (4 keeps a dt ~ h^2 matching, 2 a dt ~ h one); the
    metric-flow integrator always scales by 4 with store_every doubling so
    the stored snapshot spacing halves while the explicit step stays inside
    its stability region.
    """
    if levels < 3:
        raise ValueError(f"a refinement study needs at least 3 levels, got {levels}")
    if time_factor not in (2, 4):
        raise ValueError(f"time refinement factor must be 2 or 4, got {time_factor}")
    out = []
    for lev in range(levels):
        if isinstance(base_grid, (tuple, list)):
            grid = tuple(g * 2 ** lev for g in base_grid)
        else:
            grid = base_grid * 2 ** lev
        out.append(
            Resolution(
                level=lev,
                grid_size=grid,
                time_steps=base_steps * time_factor ** lev,
                flow_time_steps=None if flow_steps is None else flow_steps * 4 ** lev,
                store_every=None if store_every is None else store_every * 2 ** lev,
            )
        )
    return out
