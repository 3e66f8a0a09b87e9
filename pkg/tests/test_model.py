import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fingat import autodiff as ad
from fingat.autodiff import GradTape
from fingat.market import DataError, InstanceWindow, SectorCatalog
from fingat.model import (ATTENTION_HEADER, BASELINES, GRAPH_VARIANTS, VARIANTS, FinGAT, ModelConfig,
                          attention_summary, capture_attention, forward, forward_nt)
from fingat.training import objective_terms

import straight_line

T, D, F = 3, 5, 15


def make_day(n, seed=0, date=dt.date(2021, 3, 1), feats=None, F_=F):
    rng = np.random.default_rng(seed)
    ids = tuple(f"S{i:02d}" for i in range(n))
    x = rng.standard_normal((n, T * D, F_)) if feats is None else feats
    return InstanceWindow(date, ids, x, 0.02 * rng.standard_normal(n))


def catalog_for(inst, n_sectors):
    return SectorCatalog({s: f"c{i % n_sectors}" for i, s in enumerate(inst.stock_ids)})


def zero_model(variant="full", **kw):
    m = FinGAT(ModelConfig(variant=variant, **kw))
    for t in m.parameters():
        t.data[...] = 0.0
    return m


def test_zero_model_gives_bias_outputs():
    m = zero_model()
    m.b1.data[:] = 0.3
    m.b2.data[:] = -0.7
    inst = make_day(1, feats=np.zeros((1, T * D, F)))
    b = forward(m, inst, catalog_for(inst, 1))
    assert b.pred_return.tolist() == [0.3]
    np.testing.assert_allclose(b.pred_move, 1 / (1 + np.exp(0.7)), atol=1e-15)


@pytest.mark.parametrize("variant", VARIANTS)
def test_identical_stocks_identical_predictions(variant):
    feats = np.repeat(np.random.default_rng(1).standard_normal((1, T * D, F)), 2, axis=0)
    inst = make_day(2, feats=feats)
    m = FinGAT(ModelConfig(variant=variant, seed=3))
    b = m.forward(inst, catalog_for(inst, 1)).batch
    assert b.pred_return[0] == b.pred_return[1]
    assert b.pred_move[0] == b.pred_move[1]


@pytest.mark.parametrize("variant", GRAPH_VARIANTS)
def test_matches_straight_line_oracle(variant):
    inst = make_day(6, seed=2)
    cat = catalog_for(inst, 2)
    m = FinGAT(ModelConfig(variant=variant, seed=5))
    b = m.forward(inst, cat).batch
    ret, move = straight_line.predict(m.state_dict(), variant, inst, cat.sector_of, T, D)
    np.testing.assert_allclose(b.pred_return, ret, rtol=1e-11, atol=1e-13)
    np.testing.assert_allclose(b.pred_move, move, rtol=1e-11, atol=1e-13)


def test_forward_nt_ten_stocks_and_single_stock():
    m = FinGAT(ModelConfig(variant="nt", seed=1))
    inst = make_day(10, seed=3)
    b = forward_nt(m, inst)
    ret, _ = straight_line.predict(m.state_dict(), "nt", inst, {s: "x" for s in inst.stock_ids}, T, D)
    np.testing.assert_allclose(b.pred_return, ret, rtol=1e-11, atol=1e-13)
    one = forward_nt(m, make_day(1, seed=4))
    assert np.isfinite(one.pred_return).all()
    assert one.intra["week1/all"][2].tolist() == [[1.0]]
    with pytest.raises(ValueError):
        forward_nt(FinGAT(ModelConfig()), inst)


@pytest.mark.parametrize("variant", VARIANTS)
def test_batched_days_equal_single_days(variant):
    days = [make_day(n, seed=n, date=dt.date(2021, 3, n)) for n in (4, 6, 5)]
    cat = SectorCatalog({f"S{i:02d}": f"c{i % 3}" for i in range(6)})
    m = FinGAT(ModelConfig(variant=variant, seed=2))
    together = m.forward_days(days, cat, capture=True)
    for day, b in zip(days, together.batches):
        alone = m.forward(day, cat).batch
        np.testing.assert_allclose(b.pred_return, alone.pred_return, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(b.pred_move, alone.pred_move, rtol=1e-12, atol=1e-15)
        for level in ("temporal", "intra", "inter"):
            got, want = getattr(b, level), getattr(alone, level)
            assert got.keys() == want.keys()
            for k in got:
                np.testing.assert_allclose(got[k][2], want[k][2], atol=1e-13)


@pytest.mark.parametrize("variant", VARIANTS)
def test_cross_section_permutation_equivariance(variant):
    inst = make_day(7, seed=8)
    cat = catalog_for(inst, 3)
    m = FinGAT(ModelConfig(variant=variant, seed=4))
    base = m.forward(inst, cat).batch
    perm = np.random.default_rng(0).permutation(7)
    b = m.forward(inst.subset(perm), cat).batch
    np.testing.assert_allclose(b.pred_return, base.pred_return[perm], atol=1e-13)


@given(st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_no_inter_sector_isolation(seed):
    rng = np.random.default_rng(seed)
    inst = make_day(9, seed=seed)
    cat = catalog_for(inst, 3)
    m = FinGAT(ModelConfig(variant="no_inter", seed=seed % 7))
    base = m.forward(inst, cat).batch.pred_return
    in_a = np.array([cat.sector_of[s] == "c0" for s in inst.stock_ids])
    feats = inst.features.copy()
    feats[in_a] += rng.standard_normal(feats[in_a].shape)
    moved = m.forward(InstanceWindow(inst.prediction_date, inst.stock_ids, feats, inst.target_return),
                      cat).batch.pred_return
    assert np.max(np.abs(moved[~in_a] - base[~in_a])) <= 1e-10
    assert np.max(np.abs(moved[in_a] - base[in_a])) > 0


def test_full_model_couples_sectors():
    inst = make_day(9, seed=1)
    cat = catalog_for(inst, 3)
    m = FinGAT(ModelConfig(variant="full", seed=1))
    base = m.forward(inst, cat).batch.pred_return
    feats = inst.features.copy()
    feats[0] += 3.0
    moved = m.forward(InstanceWindow(inst.prediction_date, inst.stock_ids, feats, inst.target_return),
                      cat).batch.pred_return
    assert np.abs(moved - base)[[1, 2, 4, 5]].max() > 0


@pytest.mark.parametrize("variant", VARIANTS)
def test_every_parameter_gets_gradient(variant):
    days = [make_day(5, seed=s, date=dt.date(2021, 3, 1 + s)) for s in range(2)]
    cat = catalog_for(days[0], 2)
    m = FinGAT(ModelConfig(variant=variant, seed=6))
    with GradTape() as tape:
        out = m.forward_days(days, cat)
        loss, _, _ = objective_terms(m, out, days, 0.3)
    tape.backward(loss)
    missing = [n for n, t in m.named_parameters() if t.grad is None]
    assert not missing


@pytest.mark.parametrize("variant", VARIANTS)
def test_move_probabilities_strictly_inside(variant):
    inst = make_day(6, seed=9)
    b = FinGAT(ModelConfig(variant=variant)).forward(inst, catalog_for(inst, 2)).batch
    assert ((b.pred_move > 0) & (b.pred_move < 1)).all()


def test_variant_stream_layout():
    widths = {v: FinGAT(ModelConfig(variant=v)).w_f.shape[0] for v in GRAPH_VARIANTS}
    assert widths == {"full": 48, "nt": 32, "no_intra": 32, "no_inter": 32, "no_mtl": 48, "mse": 48}
    assert FinGAT(ModelConfig(variant="no_mtl")).e2 is None
    assert not any("bias" in n or n.endswith(".b_f") for n, _ in FinGAT(ModelConfig()).named_parameters()
                   if n.startswith("fusion"))


def test_missing_stock_in_catalog():
    inst = make_day(3)
    with pytest.raises(DataError):
        FinGAT(ModelConfig()).forward(inst, SectorCatalog({"S00": "c0", "S01": "c0"}))
    with pytest.raises(DataError):
        FinGAT(ModelConfig()).forward(inst, None)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_is_reported_with_layer_name():
    m = FinGAT(ModelConfig())
    m.long_a_gru.u_n.data[0, 0] = np.inf
    inst = make_day(3)
    with pytest.raises(ad.NumericError, match=r"^\[long_term_a\]"):
        m.forward(inst, catalog_for(inst, 1))


def test_state_dict_round_trip():
    a, b = FinGAT(ModelConfig(seed=1)), FinGAT(ModelConfig(seed=2))
    b.load_state_dict(a.state_dict())
    for (n1, t1), (n2, t2) in zip(a.named_parameters(), b.named_parameters()):
        assert n1 == n2 and t1.data.tobytes() == t2.data.tobytes()
    with pytest.raises(ValueError):
        FinGAT(ModelConfig(variant="nt")).load_state_dict(a.state_dict())


# --- attention capture ----------------------------------------------------

def test_capture_rows_sum_to_one_and_shapes():
    inst = make_day(8, seed=5)
    cat = catalog_for(inst, 3)
    b = FinGAT(ModelConfig()).forward(inst, cat).batch
    rows = capture_attention(b)
    assert len(ATTENTION_HEADER) == len(rows[0])
    sums = {}
    for date, level, ctx, src, dst, w in rows:
        sums[(level, ctx, src)] = sums.get((level, ctx, src), 0.0) + w
    assert all(abs(s - 1) <= 1e-9 for s in sums.values())
    names, cols, mat = b.inter["sectors"]
    assert mat.shape == (3, 3) and names == ["c0", "c1", "c2"]


def test_single_node_capture():
    inst = make_day(1)
    b = FinGAT(ModelConfig()).forward(inst, catalog_for(inst, 1)).batch
    inter = [r for r in capture_attention(b) if r[1] == "inter"]
    assert len(inter) == 1 and inter[0][5] == 1.0


def test_attention_summary_matches_rows():
    inst = make_day(6, seed=4)
    b = FinGAT(ModelConfig()).forward(inst, catalog_for(inst, 2)).batch
    rows = capture_attention(b)
    summary = attention_summary(rows)
    for level in ("temporal", "intra", "inter"):
        ws = np.array([r[5] for r in rows if r[1] == level])
        assert summary[level]["count"] == len(ws)
        assert summary[level]["mean"] == pytest.approx(ws.mean(), abs=1e-15)
        assert summary[level]["variance"] == pytest.approx(ws.var(), abs=1e-15)
        assert summary[level]["variance"] >= 0


@pytest.mark.parametrize("variant", BASELINES)
def test_baselines_run(variant):
    inst = make_day(4)
    b = FinGAT(ModelConfig(variant=variant)).forward(inst, None).batch
    assert b.pred_return.shape == (4,)
