"""Synthetic survey generation from prevalence rasters.

Sites are either given explicitly or drawn uniformly over the valid cells
of a truth raster; each site's prevalence is looked up by nearest cell,
optionally perturbed by logit-scale Gaussian noise (the overdispersion
study), and the positive count drawn binomially. Everything is
deterministic under the configured seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .geodata import Location, Raster, SurveyRecord, raster_sample

LOGIT_CLAMP = 36.7  # double-precision saturation of the inverse logit


def logit(p):
    """log(p / (1-p)) clamped to +-36.7 so p = 0 and 1 stay finite."""
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.log(p) - np.log1p(-p)
    out = np.clip(out, -LOGIT_CLAMP, LOGIT_CLAMP)
    if out.ndim == 0:
        return float(out)
    return out


def inv_logit(x):
    x = np.asarray(x, dtype=float)
    out = expit(x)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass
class SimConfig:
    raster: Raster
    locations: list = None  # explicit sites; None -> uniform sampling
    uniform_count: int = None
    tests_per_site: object = 85  # int or per-site sequence
    noise_sd: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if (self.locations is None) == (self.uniform_count is None):
            raise ValueError("provide exactly one of locations or uniform_count")
        if self.uniform_count is not None and self.uniform_count < 1:
            raise ValueError("uniform_count must be >= 1")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")


@dataclass
class SimResult:
    records: list
    n_dropped: int  # sites excluded for falling on nodata cells


def sample_uniform_locations(r: Raster, count: int, seed: int) -> list[Location]:
    """Uniform locations over the valid (non-nodata) area of the raster."""
    if count < 1:
        raise ValueError("count must be >= 1")
    valid_rows, valid_cols = np.nonzero(r.mask)
    if len(valid_rows) == 0:
        raise ValueError("raster has no valid cells")
    rng = np.random.default_rng(seed)
    pick = rng.integers(0, len(valid_rows), size=count)
    u = rng.uniform(0.0, 1.0, size=(count, 2))
    lon = r.origin.lon + (valid_cols[pick] + u[:, 0]) * r.cell_size
    lat = r.origin.lat + (valid_rows[pick] + u[:, 1]) * r.cell_size
    return [Location(float(a), float(b)) for a, b in zip(lon, lat)]


def simulate(cfg: SimConfig) -> SimResult:
    """Binomial survey draws from the truth raster at the configured sites.

    Sites on nodata cells are dropped (counted in the result). With
    noise_sd > 0, each site's prevalence is jittered on the logit scale
    before the binomial draw.
    """
    if cfg.locations is not None:
        sites = list(cfg.locations)
    else:
        sites = sample_uniform_locations(cfg.raster, cfg.uniform_count, cfg.rng_seed)
    # noise and binomial draws are independent across noise levels (the
    # sites stay shared); the stream is derived from (seed, noise_sd)
    rng = np.random.default_rng(
        np.random.SeedSequence(
            entropy=(int(cfg.rng_seed), int(round(cfg.noise_sd * 1e6)))
        )
    )

    kept = []
    p_vals = []
    n_dropped = 0
    for loc in sites:
        val = raster_sample(cfg.raster, loc)
        if val is None:
            n_dropped += 1
            continue
        if not (0.0 <= val <= 1.0):
            raise ValueError(f"raster value {val} at ({loc.lon}, {loc.lat}) outside [0, 1]")
        kept.append(loc)
        p_vals.append(val)
    p_vals = np.array(p_vals)

    if np.isscalar(cfg.tests_per_site):
        n_tests = np.full(len(kept), int(cfg.tests_per_site))
    else:
        n_tests = np.asarray(cfg.tests_per_site, dtype=int)
        if len(n_tests) != len(sites):
            raise ValueError("tests_per_site length must match the number of sites")
        keep_mask = np.ones(len(sites), dtype=bool)
        # re-derive which sites survived to align counts
        keep_mask = np.array(
            [raster_sample(cfg.raster, loc) is not None for loc in sites]
        )
        n_tests = n_tests[keep_mask]

    if cfg.noise_sd > 0:
        z = rng.standard_normal(len(kept))
        p_vals = inv_logit(logit(p_vals) + cfg.noise_sd * z)
    h = rng.binomial(n_tests, p_vals)
    records = [
        SurveyRecord(loc, int(n), int(k)) for loc, n, k in zip(kept, n_tests, h)
    ]
    return SimResult(records=records, n_dropped=n_dropped)


def two_bump_raster(bbox, cell_size: float, base: float = 0.05,
                    bumps=((0.3, 0.65, 0.55, 0.16), (0.72, 0.3, 0.4, 0.12))) -> Raster:
    """Smooth synthetic prevalence surface: a low base plus Gaussian bumps.

    Bumps are (fx, fy, amplitude, width-fraction) in bbox-relative units;
    values are clipped to [0, 0.95]. Useful as a simulation truth surface.
    """
    from .geodata import build_grid

    grid = build_grid(bbox, cell_size)
    sw, ne = bbox
    span_x = ne.lon - sw.lon
    span_y = ne.lat - sw.lat
    rows = np.arange(grid.n_rows)
    cols = np.arange(grid.n_cols)
    lon = sw.lon + (cols + 0.5) * cell_size
    lat = sw.lat + (rows + 0.5) * cell_size
    gx, gy = np.meshgrid(lon, lat)
    vals = np.full(gx.shape, base)
    for fx, fy, amp, wfrac in bumps:
        cx = sw.lon + fx * span_x
        cy = sw.lat + fy * span_y
        w = wfrac * max(span_x, span_y)
        vals = vals + amp * np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * w * w))
    grid.values[:, :] = np.clip(vals, 0.0, 0.95)
    return grid
