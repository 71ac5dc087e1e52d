"""Global-to-local density-ratio response maps.

For each neighboring-scale pair, the local ratio field evaluates the
reconstructed density ratio between every lower position and each upper
position whose window covers it. Starting from a map of ones at the top
scale, responses are pushed down one pair at a time: a lower position sums
the responses of its covering upper elements weighted by the local ratio.

The recursion runs on each pair's own lower grid (which may carry padding
and sit at a pooled resolution); the emitted per-layer map is re-indexed
onto the layer's feature grid by dropping padding cells and giving every
feature cell the value of the pooled cell containing it. Negative
reconstructed ratios are kept in the arithmetic and only clipped when
rendering (percentile windowing).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .network import ScaleGeometry, window_map
from .spectrum import SpectrumResult, density_ratio, normalize_features

__all__ = [
    "TelescopeError",
    "ResponseMap",
    "LocalRatioField",
    "local_ratio_field",
    "propagate",
    "write_response_csv",
    "write_response_pgm",
]


class TelescopeError(ValueError):
    pass


@dataclass
class ResponseMap:
    """Per-layer spatial grid of global-to-local responses."""

    layer: int
    grid: np.ndarray
    source_id: int = 0
    vmin: float = 0.0
    vmax: float = 0.0

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if not np.isfinite(self.grid).all():
            raise TelescopeError(f"non-finite response at layer {self.layer}")


@dataclass
class LocalRatioField:
    """Ratio values for the mapped (lower, upper) pairs of one scale pair.

    ``values[(i, j)]`` is a dict over the covering upper positions of lower
    position (i, j); pairs outside the window relationship are absent, not
    zero.
    """

    scale: int
    lower_dims: tuple[int, int]
    upper_dims: tuple[int, int]
    values: dict = field(default_factory=dict)


def _feature_rows(z: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    """(K, H, W) single-image map -> ((H*W, K) position rows, (H, W))."""
    if z.ndim == 4:
        if z.shape[0] != 1:
            raise TelescopeError("expected a single image")
        z = z[0]
    if z.ndim != 3:
        raise TelescopeError(f"expected (K, H, W) feature map, got shape {z.shape}")
    k, h, w = z.shape
    return z.transpose(1, 2, 0).reshape(h * w, k), (h, w)


def local_ratio_field(
    z_lower: np.ndarray,
    z_upper: np.ndarray,
    spec_result: SpectrumResult,
    geom: ScaleGeometry,
    s: int,
    include_constant: bool = False,
) -> LocalRatioField:
    """Reconstructed ratios for every mapped (lower, upper) position pair."""
    lower_rows, (hl, wl) = _feature_rows(np.asarray(z_lower, dtype=np.float64))
    upper_rows, (hu, wu) = _feature_rows(np.asarray(z_upper, dtype=np.float64))
    if s not in geom.window:
        raise TelescopeError(f"no neighboring pair at scale {s}")
    if (hl, wl) != geom.lower_dims[s] or (hu, wu) != geom.dims[s + 1]:
        raise TelescopeError(
            f"maps {hl}x{wl}/{hu}x{wu} do not match geometry "
            f"{geom.lower_dims[s]}/{geom.dims[s + 1]} at scale {s}"
        )
    if spec_result.width != lower_rows.shape[1]:
        raise TelescopeError("spectrum width does not match the feature maps")
    phi = normalize_features(lower_rows, spec_result.w_phi, spec_result.u_rot)
    psi = normalize_features(upper_rows, spec_result.w_psi, spec_result.v_rot)
    field_vals: dict = {}
    for i in range(hl):
        for j in range(wl):
            (r0, r1), (c0, c1) = window_map(geom, s, i, j, "up")
            row = {}
            for iu in range(r0, r1 + 1):
                for ju in range(c0, c1 + 1):
                    row[(iu, ju)] = float(
                        density_ratio(
                            phi[i * wl + j],
                            psi[iu * wu + ju],
                            spec_result.sigma,
                            include_constant=include_constant,
                        )
                    )
            field_vals[(i, j)] = row
    return LocalRatioField(
        scale=s, lower_dims=(hl, wl), upper_dims=(hu, wu), values=field_vals
    )


def propagate(
    fields: dict[int, LocalRatioField],
    geom: ScaleGeometry,
    source_id: int = 0,
) -> list[ResponseMap]:
    """Top-down response recursion; returns maps for scales 1..S on the
    layers' feature grids (the top map is identically 1)."""
    scales = geom.scales
    for s in range(1, scales):
        if s not in fields:
            raise TelescopeError(f"missing local ratio field for scale pair {s}")
    maps: dict[int, np.ndarray] = {scales: np.ones(geom.dims[scales])}
    for s in range(scales - 1, 0, -1):
        fld = fields[s]
        hl, wl = fld.lower_dims
        upper = maps[s + 1]
        on_lower_grid = np.zeros((hl, wl))
        for (i, j), row in fld.values.items():
            acc = 0.0
            for (iu, ju), ratio in row.items():
                acc += upper[iu, ju] * ratio
            on_lower_grid[i, j] = acc
        pad = geom.pre_pad[s]
        pool = geom.pre_pool[s]
        h, w = geom.dims[s]
        rows = pad + np.arange(h) // pool
        cols = pad + np.arange(w) // pool
        maps[s] = on_lower_grid[np.ix_(rows, cols)]
    out = []
    for s in range(1, scales + 1):
        grid = maps[s]
        out.append(
            ResponseMap(
                layer=s,
                grid=grid,
                source_id=source_id,
                vmin=float(grid.min()),
                vmax=float(grid.max()),
            )
        )
    return out


def write_response_csv(path, rmap: ResponseMap) -> None:
    """Raw-float sidecar: one ``i,j,value`` row per cell."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "value"])
        h, w = rmap.grid.shape
        for i in range(h):
            for j in range(w):
                writer.writerow([i, j, f"{rmap.grid[i, j]:.17g}"])


def write_response_pgm(path, rmap: ResponseMap) -> None:
    """Binary P5 (maxval 255) rendering after 1-99 percentile windowing."""
    grid = rmap.grid
    lo, hi = np.percentile(grid, [1.0, 99.0])
    if hi <= lo:
        pixels = np.zeros_like(grid)
    else:
        pixels = np.clip((grid - lo) / (hi - lo), 0.0, 1.0)
    data = np.round(pixels * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
