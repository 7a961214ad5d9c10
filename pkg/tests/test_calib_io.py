import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csrkv.calib_io import (
    BadMagic,
    Block,
    CaptureDataset,
    CaptureHeader,
    GaussianMixture,
    IndexOutOfRange,
    InvalidCapture,
    Kind,
    LayerDrift,
    MissingBlock,
    PlantedDictionary,
    SyntheticSpec,
    Truncated,
    UnsupportedVersion,
    capture_from_bytes,
    capture_to_bytes,
    generate_synthetic,
    read_capture,
    sample_vectors,
    write_capture,
)
from csrkv.layer_merge import layer_pair_jsd


def header(**kw):
    base = dict(model_name="m", num_layers=2, num_heads=2, head_dim=4)
    base.update(kw)
    return CaptureHeader(**base)


def test_empty_dataset_round_trip():
    d = CaptureDataset(header())
    data = capture_to_bytes(d)
    back = capture_from_bytes(data)
    assert back == d and len(back) == 0


def test_single_block_round_trip_via_stream():
    d = CaptureDataset(header(), [Block(0, 0, np.arange(8, dtype=np.float32).reshape(2, 4))])
    buf = io.BytesIO()
    n = write_capture(d, buf)
    assert n == len(buf.getvalue())
    buf.seek(0)
    assert read_capture(buf) == d


def test_f16_exact_value_round_trip():
    d = CaptureDataset(header(dtype="f16"), [Block(1, 1, np.ones((3, 4)))])
    back = capture_from_bytes(capture_to_bytes(d))
    assert back == d
    assert back.block(1, 1).vectors.tobytes() == np.ones((3, 4), np.float32).tobytes()


def test_f16_narrowing_happens_on_construction():
    x = np.full((1, 4), 0.1)
    d = CaptureDataset(header(dtype="f16"), [Block(0, 0, x)])
    assert d.block(0, 0).vectors[0, 0] == np.float32(np.float16(0.1))
    assert capture_from_bytes(capture_to_bytes(d)) == d


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 6), st.sampled_from(["f32", "f16"]),
       st.integers(0, 2**31))
def test_round_trip_property(layers, heads, dim, dtype, seed):
    rng = np.random.default_rng(seed)
    h = header(num_layers=layers, num_heads=heads, head_dim=dim, dtype=dtype)
    blocks = [Block(l, k, rng.standard_normal((int(rng.integers(0, 5)), dim)))
              for l in range(layers) for k in range(heads) if rng.random() < 0.7]
    d = CaptureDataset(h, blocks)
    data = capture_to_bytes(d)
    back = capture_from_bytes(data)
    assert back == d
    assert capture_to_bytes(back) == data


def test_bad_magic():
    data = b"XXXX" + capture_to_bytes(CaptureDataset(header()))[4:]
    with pytest.raises(BadMagic):
        capture_from_bytes(data)


def test_unsupported_version():
    data = bytearray(capture_to_bytes(CaptureDataset(header())))
    data[4] = 9
    with pytest.raises(UnsupportedVersion):
        capture_from_bytes(bytes(data))


def test_truncated_mid_block_names_block():
    d = CaptureDataset(header(), [Block(0, 0, np.ones((2, 4))), Block(0, 1, np.ones((2, 4)))])
    data = capture_to_bytes(d)
    with pytest.raises(Truncated) as exc:
        capture_from_bytes(data[:-3])
    assert exc.value.block == 1
    assert "block 1" in str(exc.value)


def test_block_outside_geometry():
    with pytest.raises(IndexOutOfRange):
        CaptureDataset(header(), [Block(2, 0, np.ones((1, 4)))])


def test_wrong_width_and_non_finite_rejected():
    with pytest.raises(InvalidCapture):
        CaptureDataset(header(), [Block(0, 0, np.ones((1, 3)))])
    with pytest.raises(InvalidCapture):
        CaptureDataset(header(), [Block(0, 0, np.full((1, 4), np.nan))])


def test_value_capture_cannot_be_pre_rope():
    with pytest.raises(InvalidCapture):
        header(kind=Kind.VALUE, pre_rope=True)
    assert header(kind=Kind.VALUE, pre_rope=False).kind is Kind.VALUE


def test_missing_block_lookup():
    with pytest.raises(MissingBlock):
        CaptureDataset(header()).block(0, 0)


# -- synthetic data ----------------------------------------------------------


def test_planted_noiseless_one_sparse_vectors_are_scaled_atoms():
    spec = SyntheticSpec(1, 1, 8, 200, PlantedDictionary(6, 1, 0.0), seed=3)
    X = generate_synthetic(spec).block(0, 0).vectors.astype(np.float64)
    U = X / np.linalg.norm(X, axis=1, keepdims=True)
    # each direction appears many times: the distinct directions are the atoms
    atoms = np.unique(np.round(U, 5), axis=0)
    assert atoms.shape[0] <= 6
    cos = np.abs(U @ (atoms / np.linalg.norm(atoms, axis=1, keepdims=True)).T).max(axis=1)
    assert np.all(1.0 - cos <= 1e-5)


@pytest.mark.parametrize("gen", [PlantedDictionary(8, 2, 0.1), GaussianMixture(4, 0.1),
                                 LayerDrift(0.3, breaks=(2,))])
def test_generation_is_deterministic(gen):
    spec = SyntheticSpec(3, 2, 8, 50, gen, seed=11)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a == b
    assert capture_to_bytes(a) == capture_to_bytes(b)
    assert generate_synthetic(SyntheticSpec(3, 2, 8, 50, gen, seed=12)) != a


def test_invalid_spec_names_field():
    with pytest.raises(InvalidCapture, match="num_layers"):
        generate_synthetic(SyntheticSpec(0, 1, 4, 10, PlantedDictionary(4, 1)))
    with pytest.raises(InvalidCapture, match="divisible"):
        generate_synthetic(SyntheticSpec(1, 1, 6, 10, PlantedDictionary(4, 1, chunks=4)))


def test_drift_zero_layers_below_noise_baseline():
    spec = SyntheticSpec(3, 1, 16, 10_000, LayerDrift(0.0), seed=0)
    d = generate_synthetic(spec)
    for a, b in [(0, 1), (0, 2), (1, 2)]:
        assert layer_pair_jsd(d, a, b, sample_cap=10_000) < 0.05


def test_value_kind_synthetic_header():
    d = generate_synthetic(SyntheticSpec(1, 1, 4, 5, GaussianMixture(2, 0.1), kind=Kind.VALUE))
    assert d.header.kind is Kind.VALUE and not d.header.pre_rope


# -- sampling ----------------------------------------------------------------


def sample_set():
    return generate_synthetic(SyntheticSpec(2, 1, 4, 100, GaussianMixture(3, 0.5), seed=1))


def test_sample_no_op_keeps_order():
    d = sample_set()
    np.testing.assert_array_equal(sample_vectors(d, {0}, 0, 1000), d.block(0, 0).vectors)


def test_sample_concatenates_layer_zero_first():
    d = sample_set()
    got = sample_vectors(d, {1, 0}, 0, 200)
    np.testing.assert_array_equal(got[:100], d.block(0, 0).vectors)
    np.testing.assert_array_equal(got[100:], d.block(1, 0).vectors)


def test_sample_single_row_is_member():
    d = sample_set()
    row = sample_vectors(d, {0}, 0, 1, seed=5)
    assert row.shape == (1, 4)
    assert any(np.array_equal(row[0], v) for v in d.block(0, 0).vectors)


def test_sample_deterministic_and_missing_block():
    d = sample_set()
    np.testing.assert_array_equal(sample_vectors(d, {0, 1}, 0, 50, seed=2),
                                  sample_vectors(d, {0, 1}, 0, 50, seed=2))
    with pytest.raises(MissingBlock):
        sample_vectors(d, {0}, 3, 10)
