import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import transport_lp
from t2dist.core import T2Distribution, dense_grid, inference_grid
from t2dist.errors import ParameterError
from t2dist.metrics import (
    EvalRecord,
    evaluate,
    mse,
    mwf,
    mwf_mask,
    paired_t_test_one_sided,
    records_to_csv,
    student_t_sf,
    wasserstein1,
)
from t2dist.phantom import SimConfig, generate_1d_dataset

G = inference_grid()


def test_mse_basic():
    p = T2Distribution.delta(G, 3)
    q = T2Distribution.delta(G, 10)
    assert mse(p, p) == 0
    assert mse(p, q) == pytest.approx(2 / 60, abs=1e-15)


def test_mse_direct_summation(rng):
    p = T2Distribution.from_masses(G, rng.random(60))
    q = T2Distribution.from_masses(G, rng.random(60))
    direct = 0.0
    for a, b in zip(p.weights, q.weights):
        direct += (a - b) ** 2
    assert mse(p, q) == pytest.approx(direct / 60, rel=1e-12)


def test_grid_mismatch():
    with pytest.raises(ParameterError):
        mse(T2Distribution.uniform(G), T2Distribution.uniform(dense_grid()))


def test_w1_deltas():
    assert wasserstein1(T2Distribution.delta(G, 0), T2Distribution.delta(G, 59)) == pytest.approx(1.0)
    assert wasserstein1(T2Distribution.delta(G, 4), T2Distribution.delta(G, 13)) == pytest.approx(9 / 59)
    assert wasserstein1(T2Distribution.uniform(G), T2Distribution.uniform(G)) == 0


def test_w1_rejects_unnormalised():
    with pytest.raises(ParameterError):
        wasserstein1(np.ones(6), np.ones(6) / 6)


def test_w1_matches_transport_lp():
    r = np.random.default_rng(11)
    for _ in range(200):
        p = r.random(6)
        q = r.random(6)
        p /= p.sum()
        q /= q.sum()
        assert abs(wasserstein1(p, q) - transport_lp(p, q)) < 1e-9


def test_w1_metric_axioms():
    r = np.random.default_rng(12)
    for _ in range(1000):
        p, q, s = (x / x.sum() for x in r.random((3, 60)))
        assert wasserstein1(p, q) == pytest.approx(wasserstein1(q, p), abs=1e-15)
        assert wasserstein1(p, p) <= 1e-12
        assert wasserstein1(p, q) > 0
        assert wasserstein1(p, s) <= wasserstein1(p, q) + wasserstein1(q, s) + 1e-12


def test_mwf_examples():
    i20 = int(np.argmin(np.abs(G.values - 20)))
    i80 = int(np.argmin(np.abs(G.values - 80)))
    assert mwf(T2Distribution.delta(G, i20)) == 1.0
    assert mwf(T2Distribution.delta(G, i80)) == 0.0
    w = np.zeros(60)
    w[i20], w[i80] = 0.3, 0.7
    assert mwf(T2Distribution(G, w)) == pytest.approx(0.3)
    assert mwf(T2Distribution.uniform(G)) == pytest.approx(mwf_mask(G).sum() / 60)
    # the 10 ms grid point sits on the inclusive window edge
    assert mwf(T2Distribution.delta(G, 0)) == 1.0


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1), min_size=60, max_size=60))
def test_mwf_in_unit_interval(ws):
    w = np.array(ws)
    if w.sum() == 0:
        return
    assert 0 <= mwf(w / w.sum()) <= 1 + 1e-12


def test_t_test_symmetric_differences():
    a = np.array([1.0, -1.0, 1.0, -1.0])
    res = paired_t_test_one_sided(a, np.zeros(4))
    assert res.t_statistic == 0 and res.p_value == pytest.approx(0.5)


def test_t_test_degenerate():
    res = paired_t_test_one_sided([1, 2, 3], [1, 2, 3])
    assert res.degenerate


def test_t_test_fixture():
    # reference values from scipy.stats.ttest_rel(alternative="greater"), frozen
    a = [0.52, 0.61, 0.47, 0.55, 0.66, 0.49, 0.58, 0.63, 0.51, 0.60]
    b = [0.50, 0.55, 0.48, 0.49, 0.60, 0.47, 0.57, 0.55, 0.52, 0.54]
    t, p = paired_t_test_one_sided(a, b)
    assert t == pytest.approx(3.380069594893165, abs=1e-10)
    assert p == pytest.approx(0.004063039466554832, abs=1e-8)


@pytest.mark.parametrize("t,df,ref", [
    (2.5, 7, 0.020496109292876437),
    (-1.3, 30, 0.8982495207309416),
    (8.0, 4999, 7.670254513605447e-16),
    (0.7, 1, 0.3055998877857853),
])
def test_student_tail_reference(t, df, ref):
    assert abs(student_t_sf(t, df) - ref) < 1e-10


def _clean_testset(n=70, seed=3):
    return generate_1d_dataset(SimConfig(n_samples=n, fixed_te=12, fixed_snr=float("inf"), seed=seed))


class _Oracle:
    n_echoes = 20

    def __init__(self, refs):
        self.refs = refs

    def predict(self, signals, te, alpha):
        return self.refs / self.refs.sum(axis=1, keepdims=True)


class _Uniform:
    n_echoes = 20

    def predict(self, signals, te, alpha):
        return np.full((len(signals), 60), 1 / 60)


def test_evaluate_perfect_and_uniform(tmp_path):
    ts = _clean_testset()
    recs = evaluate({"oracle": _Oracle(ts.refs), "uniform": _Uniform()}, ts, [10, 80], seed=1)
    assert len(recs) == 4
    for r in recs:
        if r.model_id == "oracle":
            assert max(r.mse) < 1e-20 and max(r.w1) < 1e-12 and max(r.mwf_error) < 1e-12
        else:
            assert min(r.w1) > 0
    line = recs[0].to_json()
    back = EvalRecord.from_json(line)
    assert back.mse == recs[0].mse
    s = back.summary["mse"]
    assert s["mean"] == pytest.approx(np.mean(back.mse))
    assert s["median"] == pytest.approx(np.median(back.mse))
    records_to_csv(recs, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().count("\n") == 5


def test_evaluate_echo_mismatch():
    ts = _clean_testset(7)

    class Bad(_Uniform):
        n_echoes = 32

    with pytest.raises(ParameterError):
        evaluate({"bad": Bad()}, ts, [10])
