"""Phantom synthesis, windowing, and binary volume/image IO."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpct.volcore import (BadMagicError, CtVolume, DimOverflowError, DrrImage,
                          Ellipsoid, FormatError, PhantomSpec, TruncatedError,
                          View, load_drr, load_volume, make_phantom,
                          normalize_window, random_spec, save_drr, save_volume,
                          to_pgm_bytes)


def test_random_spec_rejects_zero_ellipsoids():
    with pytest.raises(ValueError):
        random_spec(16, 0, seed=1)


def test_random_spec_rejects_tiny_volume():
    with pytest.raises(ValueError):
        random_spec(3, 1, seed=1)


def test_same_spec_twice_gives_bitwise_equal_volumes():
    spec = random_spec(16, 3, seed=7)
    a = make_phantom(spec)
    b = make_phantom(spec)
    assert a.data.tobytes() == b.data.tobytes()


def test_phantom_values_match_scalar_falloff_oracle():
    # scalar re-evaluation of the additive-free max-combined falloff:
    # each ellipsoid contributes intensity * max(0, 1 - rho^2) with rho
    # the normalized distance from the center at the voxel center.
    spec = random_spec(16, 3, seed=7)
    vol = make_phantom(spec).data
    rng = np.random.default_rng(123)
    for _ in range(20):
        i, j, k = (int(v) for v in rng.integers(0, 16, size=3))
        want = 0.0
        for e in spec.ellipsoids:
            rho2 = (((i + 0.5) - e.center[0]) / e.semi_axes[0]) ** 2 \
                 + (((j + 0.5) - e.center[1]) / e.semi_axes[1]) ** 2 \
                 + (((k + 0.5) - e.center[2]) / e.semi_axes[2]) ** 2
            want = max(want, e.intensity * max(0.0, 1.0 - rho2))
        want = min(want, 1.0)
        assert abs(vol[i, j, k] - want) < 1e-6


def test_phantom_range_and_dtype():
    vol = make_phantom(random_spec(16, 5, seed=3))
    assert vol.data.dtype == np.float32
    assert vol.data.min() >= 0.0 and vol.data.max() <= 1.0


def test_normalize_window_endpoints_and_midpoint():
    lo, hi = 0.25, 0.75
    vol = CtVolume(np.array([[[lo, hi, (lo + hi) / 2]]], dtype=np.float32))
    out = normalize_window(vol, lo, hi)
    assert np.allclose(out.data.ravel(), [0.0, 1.0, 0.5], atol=1e-7)


def test_normalize_window_clips_outside_values():
    vol = CtVolume(np.array([[[-1.0, 2.0]]], dtype=np.float32))
    out = normalize_window(vol, 0.0, 1.0)
    assert np.allclose(out.data.ravel(), [0.0, 1.0])


def test_normalize_window_rejects_empty_window():
    vol = CtVolume(np.zeros((2, 2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        normalize_window(vol, 1.0, 1.0)


def test_volume_roundtrip_zeros(tmp_path):
    path = tmp_path / "z.ctvol"
    vol = CtVolume(np.zeros((4, 4, 4), dtype=np.float32))
    save_volume(vol, path)
    back = load_volume(path)
    assert back.data.shape == (4, 4, 4)
    assert back.data.tobytes() == vol.data.tobytes()


def test_volume_roundtrip_phantom_bitwise(tmp_path):
    path = tmp_path / "p.ctvol"
    vol = make_phantom(random_spec(16, 3, seed=7))
    save_volume(vol, path)
    assert load_volume(path).data.tobytes() == vol.data.tobytes()


def test_volume_roundtrip_nonuniform_dims(tmp_path):
    path = tmp_path / "r.ctvol"
    rng = np.random.default_rng(0)
    vol = CtVolume(rng.random((3, 5, 7)).astype(np.float32))
    save_volume(vol, path)
    back = load_volume(path)
    assert back.data.shape == (3, 5, 7)
    assert np.array_equal(back.data, vol.data)


def test_drr_roundtrip_keeps_view_tag(tmp_path):
    rng = np.random.default_rng(1)
    for view in (View.FRONTAL, View.LATERAL):
        img = DrrImage(rng.random((4, 6)).astype(np.float32), view)
        path = tmp_path / f"{view.name}.drr"
        save_drr(img, path)
        back = load_drr(path)
        assert back.view is view
        assert np.array_equal(back.data, img.data)


def test_wrong_magic_is_rejected(tmp_path):
    path = tmp_path / "bad.ctvol"
    path.write_bytes(b"NOTAVOL0" + b"\x00" * 64)
    with pytest.raises(BadMagicError):
        load_volume(path)
    with pytest.raises(BadMagicError):
        load_drr(path)


def test_truncated_payload_is_rejected(tmp_path):
    path = tmp_path / "t.ctvol"
    vol = CtVolume(np.zeros((4, 4, 4), dtype=np.float32))
    save_volume(vol, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-10])
    with pytest.raises(TruncatedError):
        load_volume(path)


def test_trailing_bytes_are_rejected(tmp_path):
    path = tmp_path / "x.ctvol"
    save_volume(CtVolume(np.zeros((4, 4, 4), dtype=np.float32)), path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        load_volume(path)


def test_oversized_header_dims_are_rejected(tmp_path):
    import struct
    path = tmp_path / "huge.ctvol"
    path.write_bytes(b"CTVOL1\x00\x00" + struct.pack("<III", 1 << 30, 4, 4))
    with pytest.raises(DimOverflowError):
        load_volume(path)


def test_zero_dim_header_is_rejected(tmp_path):
    import struct
    path = tmp_path / "zero.ctvol"
    path.write_bytes(b"CTVOL1\x00\x00" + struct.pack("<III", 0, 4, 4))
    with pytest.raises(DimOverflowError):
        load_volume(path)


def test_volume_type_validation():
    with pytest.raises((TypeError, ValueError)):
        CtVolume(np.zeros((4, 4), dtype=np.float32))
    with pytest.raises((TypeError, ValueError)):
        DrrImage(np.zeros((4, 4, 4), dtype=np.float32), View.FRONTAL)


def test_ellipsoid_validation():
    with pytest.raises(ValueError):
        Ellipsoid(center=(1.0, 1.0, 1.0), semi_axes=(0.0, 1.0, 1.0), intensity=0.5)
    with pytest.raises(ValueError):
        Ellipsoid(center=(1.0, 1.0, 1.0), semi_axes=(1.0, 1.0, 1.0), intensity=-0.1)


def test_pgm_bytes_header_and_payload():
    img = np.array([[0.0, 0.5], [1.0, 0.25]])
    blob = to_pgm_bytes(img)
    assert blob.startswith(b"P5\n2 2\n255\n")
    assert blob[-4:] == bytes([0, 128, 255, 64])


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 12), st.integers(4, 12), st.integers(4, 12), st.integers(0, 10_000))
def test_volume_roundtrip_property(tmp_path_factory, d, h, w, seed):
    rng = np.random.default_rng(seed)
    vol = CtVolume(rng.random((d, h, w)).astype(np.float32))
    path = tmp_path_factory.mktemp("vols") / "v.ctvol"
    save_volume(vol, path)
    assert load_volume(path).data.tobytes() == vol.data.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_phantom_always_in_unit_range(seed):
    vol = make_phantom(random_spec(8, 4, seed))
    assert vol.data.min() >= 0.0 and vol.data.max() <= 1.0
