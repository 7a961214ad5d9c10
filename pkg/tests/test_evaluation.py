import csv
import io

import numpy as np
import pytest
from scipy.special import softmax
from scipy.stats import ortho_group

from csrkv.calib_io import Block, CaptureDataset, CaptureHeader
from csrkv.codec import CodecConfig, Dictionary, encode_batch
from csrkv.evaluation import (
    ABLATIONS,
    Csr,
    FidelityReport,
    Fp16,
    Geometry,
    KBit,
    attention,
    attention_fidelity,
    compression_ratio,
    footprint_csv,
    footprint_curve,
    method_bytes,
    reconstruction_metrics,
    sweep_s,
)


def hand_dict():
    return Dictionary(np.array([[1.0, 0.6], [0.0, 0.8]]))


def test_metrics_hand_example():
    cfg = CodecConfig(2, 1, 2)
    X = np.array([[1.0, 1.0]])
    m = reconstruction_metrics(X, encode_batch(X, hand_dict(), cfg), hand_dict(), cfg)
    assert m.mse == pytest.approx(0.0144, abs=1e-6)
    assert m.outlier_fraction == 0.0


def test_metrics_exact_and_all_outliers():
    cfg = CodecConfig(2, 1, 2)
    X = np.array([[3.0, 4.0], [0.0, 0.0], [-1.0, 2.0]])
    m = reconstruction_metrics(X, encode_batch(X, Dictionary(np.eye(2)), cfg), Dictionary(np.eye(2)), cfg)
    assert (m.mse, m.mean_cosine, m.outlier_fraction) == (0.0, 1.0, 0.0)
    cfg0 = CodecConfig(1, 1, 2, outlier_threshold=0.0)
    Y = np.array([[1.0, 1.0], [2.0, -3.0]])
    m = reconstruction_metrics(Y, encode_batch(Y, hand_dict(), cfg0), hand_dict(), cfg0)
    assert (m.mse, m.mean_cosine, m.outlier_fraction) == (0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        reconstruction_metrics(Y, [], hand_dict(), cfg0)


def test_attention_reference_matches_scipy_softmax():
    rng = np.random.default_rng(0)
    Q, K, V = rng.standard_normal((5, 8)), rng.standard_normal((12, 8)), rng.standard_normal((12, 8))
    ref = softmax(Q @ K.T / np.sqrt(8), axis=1) @ V
    np.testing.assert_allclose(attention(Q, K, V), ref, atol=1e-5)


def test_causal_mask_last_positions():
    rng = np.random.default_rng(1)
    Q, K, V = rng.standard_normal((3, 4)), rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    out = attention(Q, K, V, causal=True)
    # the first query sits at position 3 and sees keys 0..3 only
    ref = softmax(Q[0] @ K[:4].T / 2.0) @ V[:4]
    np.testing.assert_allclose(out[0], ref, atol=1e-5)
    np.testing.assert_allclose(out[2], attention(Q[2:], K, V)[0], atol=1e-6)


def test_lossless_attention():
    rng = np.random.default_rng(2)
    d = 16
    Qd = Dictionary(ortho_group.rvs(d, random_state=rng))
    K, V, Q = (rng.standard_normal((64, d)) for _ in range(3))
    cos, err = attention_fidelity(K, V, Q[:8], CodecConfig(d, 1, d), Qd)
    assert err < 1e-4 and cos == pytest.approx(1.0, abs=1e-6)


def test_zero_values_give_cosine_one():
    rng = np.random.default_rng(3)
    K, Q = rng.standard_normal((10, 4)), rng.standard_normal((3, 4))
    cos, err = attention_fidelity(K, np.zeros((10, 4)), Q, CodecConfig(1, 1, 4), Dictionary(np.eye(4)))
    assert cos == 1.0 and err == 0.0


def test_budget_direction_and_shape_errors():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((16, 48))
    D = Dictionary(A / np.linalg.norm(A, axis=0))
    K, V, Q = rng.standard_normal((32, 16)), rng.standard_normal((32, 16)), rng.standard_normal((8, 16))
    lo, _ = attention_fidelity(K, V, Q, CodecConfig(1, 1, 16), D)
    hi, _ = attention_fidelity(K, V, Q, CodecConfig(16, 1, 16), D)
    assert lo <= hi
    with pytest.raises(ValueError):
        attention_fidelity(K, V[:5], Q, CodecConfig(1, 1, 16), D)


def one_block_dataset(X):
    h = CaptureHeader("m", 1, 1, X.shape[1])
    return CaptureDataset(h, [Block(0, 0, X)])


def test_sweep_rows_and_monotone_mse():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((8, 24))
    D = Dictionary(A / np.linalg.norm(A, axis=0))
    ds = one_block_dataset(rng.standard_normal((100, 8)))
    rep = sweep_s(ds, D, [8, 2, 4], CodecConfig(8, 1, 8))
    assert [r["s"] for r in rep.rows] == [2, 4, 8]
    mses = [r["mse"] for r in rep.rows]
    assert all(b <= a + 1e-12 for a, b in zip(mses, mses[1:]))
    assert all(-1 <= r["mean_cosine"] <= 1 and -1 <= r["attn_cosine"] <= 1 for r in rep.rows)
    assert len(sweep_s(ds, D, [3], CodecConfig(3, 1, 8)).rows) == 1


def test_sweep_complete_orthonormal_is_lossless():
    rng = np.random.default_rng(6)
    D = Dictionary(ortho_group.rvs(8, random_state=rng))
    rep = sweep_s(one_block_dataset(rng.standard_normal((50, 8))), D, [8], CodecConfig(8, 1, 8))
    assert rep.rows[0]["mse"] < 1e-10


def test_sweep_csv_header():
    text = FidelityReport(rows=[{"s": 2, "s_n": 1, "mse": 0.5, "mean_cosine": 0.9, "outlier_fraction": 0.0,
                                 "attn_cosine": 0.99, "attn_max_abs": 0.1}]).to_csv()
    assert text.splitlines()[0] == "s,s_n,mse,mean_cosine,outlier_fraction,attn_cosine,attn_max_abs"
    assert FidelityReport().to_json()["schema_version"] == 1


# -- footprint -------------------------------------------------------------------


GEO = Geometry(num_layers=32, num_heads=32, head_dim=128, batch=4)


def test_fp16_hand_arithmetic_and_linearity():
    assert method_bytes(Fp16(), 1000, GEO) == 2 * 128 * 32 * 32 * 1000 * 4
    assert method_bytes(Fp16(), 2000, GEO) == 2 * method_bytes(Fp16(), 1000, GEO)
    assert method_bytes(KBit(2), 1000, GEO) == method_bytes(Fp16(), 1000, GEO) / 8


def test_csr_starts_at_overhead():
    m = Csr(8, 1, online_size=256, offline_atoms=256)
    rows = footprint_curve([0], GEO, [Fp16(), m])
    assert rows[0]["bytes"] == 0
    overhead = 128 * 128 * 2 * 32 * 32 * 4 + 256 * 128 * 2 * 32 * 32
    assert rows[1]["bytes"] == overhead


def test_csr8_asymptotic_ratio():
    assert compression_ratio(Csr(8, 1), 4096, GEO, overhead=False) == 8.0
    assert compression_ratio(Csr(4, 1), 4096, GEO, overhead=False) == 16.0
    r = [compression_ratio(Csr(8, 1, 256, 256), n, GEO) for n in (1024, 8192, 1 << 20)]
    assert r[0] < r[1] < r[2] < 8.0


def test_footprint_csv():
    rows = footprint_curve([0, 16], Geometry(2, 2, 8), [Fp16(), Csr(2), KBit(4)])
    assert len(rows) == 6
    parsed = list(csv.DictReader(io.StringIO(footprint_csv(rows))))
    assert list(parsed[0]) == ["seq_len", "method", "bytes"]
    assert parsed[3] == {"seq_len": "16", "method": "fp16", "bytes": str(2 * 8 * 4 * 16)}
    with pytest.raises(ValueError):
        footprint_curve([-1], GEO, [Fp16()])


def test_four_named_ablations():
    names = [fn.__name__ for fn in ABLATIONS]
    assert names == ["ablate_dictionary_size", "ablate_chunking", "ablate_diversity", "ablate_online"]
