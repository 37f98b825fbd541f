import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from binloc.geometry import (
    Doa,
    ElevationOutOfRange,
    SectorCollision,
    SectorGrid,
    SectorIndex,
    SectorMismatch,
    TargetGrid,
    azimuth_separation,
    decode_predictions,
    denormalize_in_sector,
    encode_targets,
    normalize_in_sector,
    sector_bounds,
    sector_of,
    synthesis_doa_grid,
)

G = SectorGrid()
azimuths = st.floats(-720, 720, allow_nan=False)
elevations = st.floats(-75, 75, allow_nan=False)


def test_doa_canonicalizes_azimuth():
    assert Doa(-90, 0).azimuth_deg == 270
    assert Doa(360, 0).azimuth_deg == 0
    assert Doa(725, 10).azimuth_deg == 5
    with pytest.raises(ElevationOutOfRange):
        Doa(0, 91)


def test_grid_widths():
    assert G.azimuth_width == 45 and G.elevation_width == 50
    assert G.n_sectors == 24 and G.output_shape == (8, 10)
    g = SectorGrid(7, 4)
    assert g.azimuth_width == 360 / 7 and g.elevation_width == 150 / 4


@pytest.mark.parametrize(
    "doa, idx",
    [((0, 0), (0, 1)), ((50, -65), (1, 0)), ((359, 75), (7, 2)), ((45, 25), (1, 1)), ((44.999, -25), (0, 0)), ((360, -75), (0, 0))],
)
def test_sector_of_examples(doa, idx):
    assert sector_of(G, Doa(*doa)) == SectorIndex(*idx)


def test_sector_of_rejects_polar_caps():
    with pytest.raises(ElevationOutOfRange):
        sector_of(G, Doa(0, 80))


@pytest.mark.parametrize(
    "idx, bounds",
    [((0, 1), (0, 45, -25, 25)), ((7, 0), (315, 360, -75, -25)), ((4, 2), (180, 225, 25, 75))],
)
def test_sector_bounds_examples(idx, bounds):
    assert sector_bounds(G, SectorIndex(*idx)) == bounds


def test_sector_bounds_bad_index():
    with pytest.raises(IndexError):
        sector_bounds(G, SectorIndex(8, 0))


def test_normalize_examples():
    assert normalize_in_sector(G, Doa(22.5, 0), SectorIndex(0, 1)) == (0.5, 0.5)
    assert normalize_in_sector(G, Doa(0, -25), SectorIndex(0, 1)) == (0.0, 0.0)
    d = denormalize_in_sector(G, SectorIndex(0, 1), 0.5, 0.5)
    assert (d.azimuth_deg, d.elevation_deg) == (22.5, 0.0)
    with pytest.raises(SectorMismatch):
        normalize_in_sector(G, Doa(100, 0), SectorIndex(0, 1))


def test_normalize_wrap_edge():
    # 0 deg sits on the closed upper edge of the last wedge
    assert normalize_in_sector(G, Doa(0, 0), SectorIndex(7, 1)) == (1.0, 0.5)


@given(azimuths, elevations)
def test_sector_membership_and_roundtrip(az, el):
    doa = Doa(az, el)
    idx = sector_of(G, doa)
    lo, hi, elo, ehi = sector_bounds(G, idx)
    assert lo <= doa.azimuth_deg < hi
    assert elo <= el <= ehi
    u = normalize_in_sector(G, doa, idx)
    assert all(0 <= x <= 1 for x in u)
    back = denormalize_in_sector(G, idx, *u)
    assert azimuth_separation(back.azimuth_deg, doa.azimuth_deg) < 1e-9
    assert abs(back.elevation_deg - el) < 1e-9


@given(st.integers(1, 12), st.integers(1, 6), azimuths, elevations)
def test_sector_of_any_grid(m, n, az, el):
    g = SectorGrid(m, n)
    idx = sector_of(g, Doa(az, el))
    assert 0 <= idx.coarse < m and 0 <= idx.fine < n
    assert g.unflat(idx.flat(n)) == idx


def test_encode_examples():
    empty = encode_targets(G, [])
    assert not empty.to_array().any()
    tg = encode_targets(G, [Doa(22.5, 0)])
    assert tg.fine_det[0, 1] == 1 and tg.coarse_det[0] == 1
    assert tg.azi_norm[0, 1] == 0.5 and tg.ele_norm[0, 1] == 0.5
    assert tg.fine_det.sum() == 1
    with pytest.raises(SectorCollision):
        encode_targets(G, [Doa(10, 0), Doa(20, 0)])


@given(st.lists(st.tuples(azimuths, elevations), max_size=6))
def test_encode_invariants(points):
    doas = [Doa(*p) for p in points]
    sectors = [sector_of(G, d) for d in doas]
    assume(len(set(sectors)) == len(sectors))
    tg = encode_targets(G, doas)
    np.testing.assert_array_equal(tg.coarse_det, tg.fine_det.max(axis=1))
    np.testing.assert_array_equal(tg.valid_mask, tg.fine_det)
    off = tg.fine_det == 0
    assert not tg.azi_norm[off].any() and not tg.ele_norm[off].any()
    assert TargetGrid.from_array(tg.to_array()) == tg
    assert TargetGrid.from_dict(tg.to_dict()) == tg
    # decode(encode) recovers each source
    dets = decode_predictions(G, tg.to_array(), 0.5)
    assert len(dets) == len(doas)
    for d in dets:
        src = doas[sectors.index(d.sector)]
        assert azimuth_separation(d.doa.azimuth_deg, src.azimuth_deg) < 1e-9
        assert abs(d.doa.elevation_deg - src.elevation_deg) < 1e-9


def test_decode_examples():
    pred = np.zeros(G.output_shape)
    assert decode_predictions(G, pred) == []
    pred[0, 4], pred[0, 5], pred[0, 6] = 0.9, 0.5, 0.5  # columns of fine sector (0, 1)
    (det,) = decode_predictions(G, pred)
    assert det.sector == (0, 1) and det.prob == 0.9
    assert (det.doa.azimuth_deg, det.doa.elevation_deg) == (22.5, 0.0)
    assert decode_predictions(G, np.full(G.output_shape, 0.99), threshold=1.0) == []
    assert len(decode_predictions(G, np.zeros(G.output_shape), threshold=0.0)) == 24
    with pytest.raises(ValueError):
        decode_predictions(G, np.zeros((8, 9)))


def test_synthesis_grid_size():
    doas = synthesis_doa_grid()
    assert len(doas) == 72 * 29
    assert min(d.elevation_deg for d in doas) == -65 and max(d.elevation_deg for d in doas) == 75


@given(st.floats(0, 360), st.floats(0, 360))
def test_azimuth_separation(a, b):
    s = azimuth_separation(a, b)
    assert 0 <= s <= 180
    assert math.isclose(s, azimuth_separation(b, a))
