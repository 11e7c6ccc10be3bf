import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vcfseq.phantom import PhantomSpec, generate_series
from vcfseq.volume import (
    HU_MAX,
    HU_MIN,
    Volume,
    VolumeDataLengthError,
    VolumeFormatError,
    WindowSpec,
    apply_window,
    decode_volume,
    encode_volume,
    load_volume,
    save_volume,
)


def header_bytes(nz, ny, nx, spacing=(1.0, 1.0, 1.0)):
    sz, sy, sx = spacing
    return f"magic=VSQ1\nnz={nz}\nny={ny}\nnx={nx}\nsz_mm={sz!r}\nsy_mm={sy!r}\nsx_mm={sx!r}\n\n".encode()


def test_zero_volume_roundtrip(tmp_path):
    v = Volume(np.zeros((2, 2, 2), np.int16), (1.0, 1.0, 1.0))
    save_volume(v, tmp_path / "z.vsq")
    assert load_volume(tmp_path / "z.vsq") == v


def test_file_size_is_header_plus_payload(tmp_path):
    v = Volume(np.zeros((3, 4, 5), np.int16), (2.5, 0.7, 0.7))
    save_volume(v, tmp_path / "z.vsq")
    size = (tmp_path / "z.vsq").stat().st_size
    assert size == len(header_bytes(3, 4, 5, (2.5, 0.7, 0.7))) + 2 * 3 * 4 * 5


def test_save_load_save_is_byte_identical(tmp_path):
    rng = np.random.default_rng(3)
    v = Volume(rng.integers(HU_MIN, HU_MAX + 1, size=(4, 3, 5)).astype(np.int16), (1.25, 0.8, 0.8))
    save_volume(v, tmp_path / "a.vsq")
    save_volume(load_volume(tmp_path / "a.vsq"), tmp_path / "b.vsq")
    assert (tmp_path / "a.vsq").read_bytes() == (tmp_path / "b.vsq").read_bytes()


def test_payload_encoding_of_3071():
    v = Volume(np.full((2, 2, 2), 3071, np.int16), (1.0, 1.0, 1.0))
    raw = encode_volume(v)
    payload = raw[raw.index(b"\n\n") + 2 :]
    # 3071 = 0x0BFF, little endian
    assert payload == b"\xff\x0b" * 8


def test_payload_is_z_major():
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    raw = encode_volume(Volume(data, (1.0, 1.0, 1.0)))
    payload = np.frombuffer(raw[raw.index(b"\n\n") + 2 :], dtype="<i2")
    assert payload.tolist() == list(range(24))


def test_data_length_error(tmp_path):
    path = tmp_path / "bad.vsq"
    path.write_bytes(header_bytes(10, 10, 10) + b"\x00\x00" * 999)
    with pytest.raises(VolumeDataLengthError):
        load_volume(path)


def test_malformed_header_is_a_distinct_error():
    with pytest.raises(VolumeFormatError) as info:
        decode_volume(b"magic=VSQ2\nnz=1\nny=1\nnx=1\nsz_mm=1\nsy_mm=1\nsx_mm=1\n\n\x00\x00")
    assert not isinstance(info.value, VolumeDataLengthError)
    with pytest.raises(VolumeFormatError):
        decode_volume(b"no blank line")
    with pytest.raises(VolumeFormatError):
        decode_volume(b"magic=VSQ1\nnz=1\nny=1\n\n\x00\x00")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nope.vsq")


def test_invariants_rejected():
    with pytest.raises(ValueError):
        Volume(np.full((1, 1, 1), 4000), (1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        Volume(np.zeros((1, 1, 1), np.int16), (1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        WindowSpec(370, 0)


def test_phantom_max_hu_is_bone(tmp_path):
    spec = PhantomSpec(noise_sigma_hu=0.0, n_vertebrae=3)
    v, _ = generate_series(spec)
    save_volume(v, tmp_path / "p.vsq")
    assert int(load_volume(tmp_path / "p.vsq").data.max()) == spec.bone_hu


@pytest.mark.parametrize("hu,expected", [(-50, 0.0), (790, 1.0), (370, 0.5), (160, 0.25), (-1024, 0.0), (3071, 1.0)])
def test_window_values(hu, expected):
    out = apply_window(np.array([hu], dtype=np.int16), WindowSpec(370, 840))
    assert out[0] == pytest.approx(expected, abs=1e-15)


volumes = hnp.arrays(np.int16, hnp.array_shapes(min_dims=3, max_dims=3, max_side=5),
                     elements=st.integers(HU_MIN, HU_MAX))
spacings = st.tuples(*[st.floats(0.01, 10.0, allow_nan=False) for _ in range(3)])


@settings(max_examples=60, deadline=None)
@given(volumes, spacings)
def test_roundtrip_property(data, spacing):
    v = Volume(data, spacing)
    w = decode_volume(encode_volume(v))
    assert w == v
    assert w.spacing == v.spacing
    assert encode_volume(w) == encode_volume(v)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(HU_MIN, HU_MAX), min_size=2, max_size=50),
       st.floats(-500, 1500), st.floats(1, 3000))
def test_window_range_and_monotone(values, center, width):
    hu = np.sort(np.array(values))
    out = apply_window(hu, WindowSpec(center, width))
    assert np.all((out >= 0) & (out <= 1))
    assert np.all(np.diff(out) >= 0)
