import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from binloc.acoustics import (
    HRIR_MODELS,
    ROOMS,
    HrirStore,
    MissingHrir,
    PositionOutOfRoom,
    Room,
    SceneSpec,
    SeparationViolation,
    SilentNoise,
    apply_room,
    image_method_rir,
    interaural_polar,
    mix_at_snr,
    render_binaural,
    sabine_reflection_coeff,
    schroeder_t60,
    signal_power,
    synthesize_scene,
    synthetic_hrir,
    synthetic_speech,
)
from binloc.dsp import SAMPLE_RATE, gcc_phat
from binloc.geometry import Doa, SectorGrid

FS = SAMPLE_RATE


@pytest.fixture(scope="module")
def hrirs():
    return HrirStore.synthetic()


def test_sabine_beta_monotone_in_t60():
    betas = [sabine_reflection_coeff(Room((5, 5, 3), t)) for t in (0.2, 0.3, 0.6, 1.2, 5.0)]
    assert all(0 <= b < 1 for b in betas)
    assert all(a < b for a, b in zip(betas, betas[1:]))
    assert sabine_reflection_coeff(Room((5, 5, 3), 0.0)) == 0.0


def test_room_5x5x3_t60():
    room = Room((5, 5, 3), 0.3)
    rir = image_method_rir(room, [2.0, 3.1, 1.4], [3.2, 2.0, 1.6])
    assert abs(schroeder_t60(rir) - 0.3) / 0.3 <= 0.25


def test_free_field_is_direct_path_only():
    room = Room((5, 5, 3), 0.0)
    rir = image_method_rir(room, [1.0, 1.0, 1.0], [2.0, 1.0, 1.0], max_order=10)
    assert np.count_nonzero(rir) == 1
    assert np.argmax(rir) == 47 and rir[47] == pytest.approx(1 / (4 * math.pi))


def test_order_zero_and_distance_law():
    room = Room((6, 6, 4), 0.4)
    mic = np.array([3.0, 3.0, 2.0])
    r1 = image_method_rir(room, mic + [1, 0, 0], mic, max_order=0)
    r2 = image_method_rir(room, mic + [2, 0, 0], mic, max_order=0)
    assert np.flatnonzero(r1)[0] == round(FS / 343) == 47
    assert np.count_nonzero(r1) == 1 and np.count_nonzero(r2) == 1
    assert r2.max() == pytest.approx(r1.max() / 2)


def test_positions_must_be_inside():
    with pytest.raises(PositionOutOfRoom):
        image_method_rir(Room((5, 5, 3), 0.3), [6.0, 1.0, 1.0], [1.0, 1.0, 1.0])


@given(st.integers(0, 2**31))
def test_direct_delay_property(seed):
    rng = np.random.default_rng(seed)
    room = ROOMS[sorted(ROOMS)[seed % len(ROOMS)]]
    dims = np.array(room.dims)
    src, mic = rng.uniform(0.3, dims - 0.3), rng.uniform(0.3, dims - 0.3)
    d = np.linalg.norm(src - mic)
    rir = image_method_rir(room, src, mic, max_order=3)
    k = round(d * FS / 343.0)
    assert np.flatnonzero(rir)[0] == k
    assert rir[k] >= 1 / (4 * np.pi * d) * (1 - 1e-12)


def test_render_identity_delay_and_zero():
    x = np.random.default_rng(0).standard_normal(FS)
    imp = np.zeros(16)
    imp[0] = 1
    out = render_binaural(x, (imp, imp))
    np.testing.assert_array_equal(out[0], x)
    np.testing.assert_array_equal(out[1], x)
    late = np.zeros(16)
    late[5] = 1
    out = render_binaural(x, (imp, late))
    assert np.argmax(gcc_phat(out[0], out[1])) - 16 == 5
    assert not render_binaural(np.zeros(FS), (imp, late)).any()


def test_apply_room_examples():
    x = np.random.default_rng(1).standard_normal((2, 1000))
    np.testing.assert_array_equal(apply_room(x, [1.0]), x)
    np.testing.assert_allclose(apply_room(x, [0.5]), 0.5 * x)
    k = np.zeros(8)
    k[7] = 1
    y = apply_room(x, k)
    np.testing.assert_allclose(y[:, 7:], x[:, :-7], atol=1e-12)
    assert np.allclose(y[:, :7], 0)


def test_mix_at_snr_gain_examples():
    s = np.ones((2, 100))
    n = -np.ones((2, 100))
    assert mix_at_snr(s, n, 0)[1] == pytest.approx(1.0)
    assert mix_at_snr(s, n, 20)[1] == pytest.approx(0.1)
    with pytest.raises(SilentNoise):
        mix_at_snr(s, np.zeros((2, 100)), 10)
    np.testing.assert_array_equal(mix_at_snr(s, n, math.inf)[0], s)


@given(st.floats(-10, 40), st.integers(0, 2**31))
def test_mix_at_snr_measured(snr, seed):
    rng = np.random.default_rng(seed)
    s, n = rng.standard_normal((2, 4000)), rng.standard_normal((2, 4000))
    mix, g = mix_at_snr(s, n, snr)
    measured = 10 * np.log10(signal_power(s) / signal_power(mix - s))
    assert abs(measured - snr) < 1e-6


def test_interaural_polar():
    assert interaural_polar(Doa(90, 0)) == pytest.approx((90, 0), abs=1e-9)
    lat, pol = interaural_polar(Doa(180, 0))
    assert lat == pytest.approx(0, abs=1e-9) and pol == pytest.approx(180)
    assert interaural_polar(Doa(0, 60))[1] == pytest.approx(60)


@pytest.mark.parametrize("model", HRIR_MODELS)
def test_hrir_itd_points_to_near_ear(model):
    x = np.random.default_rng(2).standard_normal(FS)
    left_src = render_binaural(x, synthetic_hrir(Doa(90, 0), model=model))
    right_src = render_binaural(x, synthetic_hrir(Doa(270, 0), model=model))
    # positive lag = right delayed = left ear leads
    assert np.argmax(gcc_phat(*left_src)) - 16 > 0
    assert np.argmax(gcc_phat(*right_src)) - 16 < 0
    assert signal_power(left_src[0]) > signal_power(left_src[1])


def test_structural_hrir_front_back_differ():
    # same lateral angle, mirrored across the interaural axis
    f, b = synthetic_hrir(Doa(30, 0)), synthetic_hrir(Doa(150, 0))
    assert np.max(np.abs(f[0] - b[0])) > 1e-2
    up, down = synthetic_hrir(Doa(0, 45)), synthetic_hrir(Doa(0, -45))
    assert np.max(np.abs(up[0] - down[0])) > 1e-2
    with pytest.raises(ValueError):
        synthetic_hrir(Doa(0, 0), model="cardioid")


def test_hrir_store(hrirs, tmp_path):
    assert Doa(5, 10) in hrirs and Doa(2.5, 0) not in hrirs
    with pytest.raises(MissingHrir):
        hrirs.get(Doa(2.5, 0))
    small = HrirStore({(0, 0): hrirs.get(Doa(0, 0)), (90, 10): hrirs.get(Doa(90, 10))})
    small.save(tmp_path)
    back = HrirStore.load(tmp_path / "hrirs.txt")
    assert len(back) == 2
    np.testing.assert_allclose(back.get(Doa(90, 10))[1], small.get(Doa(90, 10))[1], atol=1e-7)


def test_synthetic_speech_deterministic():
    a, b = synthetic_speech("x/1"), synthetic_speech("x/1")
    np.testing.assert_array_equal(a, b)
    assert a.shape == (FS,) and np.all(np.isfinite(a)) and signal_power(a) > 0
    assert not np.array_equal(a, synthetic_speech("x/2"))


def test_scene_dry_single_source(hrirs):
    spec = SceneSpec([("a", Doa(40, 10))])
    clip, tg = synthesize_scene(spec, hrirs)
    ref = render_binaural(synthetic_speech("a"), hrirs.get(Doa(40, 10)))
    np.testing.assert_array_equal(clip.stereo, ref)
    assert tg.fine_det.sum() == 1 and tg.fine_det[0, 1] == 1


def test_scene_separation_and_determinism(hrirs):
    with pytest.raises(SeparationViolation):
        synthesize_scene(SceneSpec([("a", Doa(0, 0)), ("b", Doa(30, 0))]), hrirs)
    spec = SceneSpec([("a", Doa(0, 0)), ("b", Doa(180, 30))], snr_db=10, room=ROOMS["small-a"], seed=5)
    c1, t1 = synthesize_scene(spec, hrirs, SectorGrid())
    c2, t2 = synthesize_scene(spec, hrirs, SectorGrid())
    np.testing.assert_array_equal(c1.stereo, c2.stereo)
    assert t1 == t2
    assert SceneSpec.from_dict(spec.to_dict()) == spec
