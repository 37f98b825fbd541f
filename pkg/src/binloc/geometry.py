"""Spherical sector partition, DOA <-> sector mapping and target encoding.

Azimuth is measured counter-clockwise from the front (90 deg = left ear),
elevation is positive above the horizontal plane. The sphere is cut into
``M`` equal azimuth wedges and ``N`` equal elevation bands spanning
[-75, 75] degrees.

Boundary conventions:

* azimuth wedges are half-open ``[lo, hi)``; 360 wraps to wedge 0;
* an elevation exactly on an interior band boundary belongs to the LOWER
  band, so for ``N = 3`` the bands are ``[-75, -25]``, ``(-25, 25]``,
  ``(25, 75]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np


class ElevationOutOfRange(ValueError):
    pass


class SectorMismatch(ValueError):
    pass


class SectorCollision(ValueError):
    pass


@dataclass(frozen=True)
class Doa:
    """A direction of arrival in degrees."""

    azimuth_deg: float
    elevation_deg: float

    def __post_init__(self):
        az = float(self.azimuth_deg) % 360.0
        if az >= 360.0:  # -1e-17 % 360 == 360.0
            az = 0.0
        object.__setattr__(self, "azimuth_deg", az)
        el = float(self.elevation_deg)
        if not -90.0 <= el <= 90.0:
            raise ElevationOutOfRange(f"elevation {el} outside [-90, 90]")
        object.__setattr__(self, "elevation_deg", el)

    def unit_vector(self) -> np.ndarray:
        az, el = math.radians(self.azimuth_deg), math.radians(self.elevation_deg)
        return np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])


class SectorIndex(NamedTuple):
    coarse: int
    fine: int

    def flat(self, n_elevation: int) -> int:
        return self.coarse * n_elevation + self.fine


@dataclass(frozen=True)
class SectorGrid:
    m_azimuth: int = 8
    n_elevation: int = 3
    elevation_min_deg: float = -75.0
    elevation_max_deg: float = 75.0

    def __post_init__(self):
        if self.m_azimuth < 1 or self.n_elevation < 1:
            raise ValueError("grid needs at least one sector per axis")

    @property
    def azimuth_width(self) -> float:
        return 360.0 / self.m_azimuth

    @property
    def elevation_width(self) -> float:
        return (self.elevation_max_deg - self.elevation_min_deg) / self.n_elevation

    @property
    def n_sectors(self) -> int:
        return self.m_azimuth * self.n_elevation

    @property
    def output_shape(self) -> tuple[int, int]:
        return (self.m_azimuth, 3 * self.n_elevation + 1)

    def unflat(self, flat: int) -> SectorIndex:
        if not 0 <= flat < self.n_sectors:
            raise IndexError(flat)
        return SectorIndex(*divmod(flat, self.n_elevation))

    def indices(self):
        for i in range(self.m_azimuth):
            for j in range(self.n_elevation):
                yield SectorIndex(i, j)

    def to_dict(self) -> dict:
        return {"m_azimuth": self.m_azimuth, "n_elevation": self.n_elevation}

    @classmethod
    def from_dict(cls, d: dict) -> "SectorGrid":
        return cls(int(d.get("m_azimuth", 8)), int(d.get("n_elevation", 3)))


def sector_of(grid: SectorGrid, doa: Doa) -> SectorIndex:
    el = doa.elevation_deg
    if not grid.elevation_min_deg <= el <= grid.elevation_max_deg:
        raise ElevationOutOfRange(
            f"elevation {el} outside [{grid.elevation_min_deg}, {grid.elevation_max_deg}]"
        )
    coarse = int(math.floor(doa.azimuth_deg / grid.azimuth_width)) % grid.m_azimuth
    # ceil(.) - 1 puts points sitting on an interior boundary into the lower band
    fine = math.ceil((el - grid.elevation_min_deg) / grid.elevation_width) - 1
    fine = min(max(fine, 0), grid.n_elevation - 1)
    return SectorIndex(coarse, fine)


def sector_bounds(grid: SectorGrid, idx: SectorIndex) -> tuple[float, float, float, float]:
    """Return ``(azi_lo, azi_hi, ele_lo, ele_hi)`` in degrees."""
    _check_index(grid, idx)
    aw, ew = grid.azimuth_width, grid.elevation_width
    return (
        idx.coarse * aw,
        (idx.coarse + 1) * aw,
        grid.elevation_min_deg + idx.fine * ew,
        grid.elevation_min_deg + (idx.fine + 1) * ew,
    )


def _check_index(grid: SectorGrid, idx: SectorIndex):
    if not (0 <= idx.coarse < grid.m_azimuth and 0 <= idx.fine < grid.n_elevation):
        raise IndexError(f"{idx} not valid for a {grid.m_azimuth}x{grid.n_elevation} grid")


def normalize_in_sector(grid: SectorGrid, doa: Doa, idx: SectorIndex) -> tuple[float, float]:
    """Map a DOA to ``[0, 1]^2`` coordinates relative to sector ``idx``.

    Membership is checked against the closed sector, so a point on a shared
    boundary can be expressed relative to either neighbour.
    """
    azi_lo, azi_hi, ele_lo, ele_hi = sector_bounds(grid, idx)
    az = doa.azimuth_deg
    if az < azi_lo and math.isclose(az + 360.0, azi_hi):
        az += 360.0
    tol = 1e-9
    if not (azi_lo - tol <= az <= azi_hi + tol and ele_lo - tol <= doa.elevation_deg <= ele_hi + tol):
        raise SectorMismatch(f"{doa} is not inside sector {tuple(idx)}")
    u_azi = (az - azi_lo) / grid.azimuth_width
    u_ele = (doa.elevation_deg - ele_lo) / grid.elevation_width
    return min(max(u_azi, 0.0), 1.0), min(max(u_ele, 0.0), 1.0)


def denormalize_in_sector(grid: SectorGrid, idx: SectorIndex, u_azi: float, u_ele: float) -> Doa:
    azi_lo, _, ele_lo, _ = sector_bounds(grid, idx)
    return Doa(azi_lo + u_azi * grid.azimuth_width, ele_lo + u_ele * grid.elevation_width)


@dataclass
class TargetGrid:
    """Per-sector training targets for one scene.

    ``azi_norm`` / ``ele_norm`` hold sector-relative angles where
    ``valid_mask`` is set and 0 elsewhere.
    """

    coarse_det: np.ndarray
    fine_det: np.ndarray
    azi_norm: np.ndarray
    ele_norm: np.ndarray
    valid_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        self.valid_mask = self.fine_det.copy()

    @classmethod
    def empty(cls, grid: SectorGrid) -> "TargetGrid":
        m, n = grid.m_azimuth, grid.n_elevation
        return cls(np.zeros(m), np.zeros((m, n)), np.zeros((m, n)), np.zeros((m, n)))

    def to_array(self) -> np.ndarray:
        """Pack into the ``(M, 3N+1)`` prediction layout."""
        m, n = self.fine_det.shape
        out = np.zeros((m, 3 * n + 1))
        out[:, 0] = self.coarse_det
        out[:, 1::3] = self.fine_det
        out[:, 2::3] = self.azi_norm
        out[:, 3::3] = self.ele_norm
        return out

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "TargetGrid":
        arr = np.asarray(arr, dtype=float)
        return cls(arr[:, 0].copy(), arr[:, 1::3].copy(), arr[:, 2::3].copy(), arr[:, 3::3].copy())

    def to_dict(self) -> dict:
        return {
            "coarse_det": self.coarse_det.astype(int).tolist(),
            "fine_det": self.fine_det.astype(int).tolist(),
            "azi_norm": self.azi_norm.tolist(),
            "ele_norm": self.ele_norm.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TargetGrid":
        return cls(
            np.asarray(d["coarse_det"], dtype=float),
            np.asarray(d["fine_det"], dtype=float),
            np.asarray(d["azi_norm"], dtype=float),
            np.asarray(d["ele_norm"], dtype=float),
        )

    def __eq__(self, other):
        if not isinstance(other, TargetGrid):
            return NotImplemented
        return np.array_equal(self.to_array(), other.to_array())


def encode_targets(grid: SectorGrid, sources: Sequence[Doa]) -> TargetGrid:
    tg = TargetGrid.empty(grid)
    for doa in sources:
        idx = sector_of(grid, doa)
        if tg.fine_det[idx]:
            raise SectorCollision(f"two sources fall in sector {tuple(idx)}")
        tg.fine_det[idx] = 1.0
        tg.azi_norm[idx], tg.ele_norm[idx] = normalize_in_sector(grid, doa, idx)
    tg.coarse_det = tg.fine_det.max(axis=1)
    tg.valid_mask = tg.fine_det.copy()
    return tg


class Detection(NamedTuple):
    sector: SectorIndex
    doa: Doa
    prob: float


def split_prediction(pred: np.ndarray):
    """Split ``(..., M, 3N+1)`` into coarse, det, azi, ele arrays."""
    pred = np.asarray(pred)
    return pred[..., 0], pred[..., 1::3], pred[..., 2::3], pred[..., 3::3]


def decode_predictions(grid: SectorGrid, pred: np.ndarray, threshold: float = 0.5) -> list[Detection]:
    pred = np.asarray(pred, dtype=float)
    if pred.shape != grid.output_shape:
        raise ValueError(f"prediction shape {pred.shape} != {grid.output_shape}")
    _, det, azi, ele = split_prediction(pred)
    out = []
    for idx in grid.indices():
        p = float(det[idx])
        if p >= threshold:
            u_a = min(max(float(azi[idx]), 0.0), 1.0)
            u_e = min(max(float(ele[idx]), 0.0), 1.0)
            out.append(Detection(idx, denormalize_in_sector(grid, idx, u_a, u_e), p))
    return out


def synthesis_doa_grid(step: float = 5.0, el_lo: float = -65.0, el_hi: float = 75.0) -> list[Doa]:
    """The 5-degree direction grid used for dataset synthesis (2,088 points)."""
    azs = np.arange(0.0, 360.0, step)
    els = np.arange(el_lo, el_hi + step / 2, step)
    return [Doa(a, e) for a in azs for e in els]


def azimuth_separation(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)
