import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sonostate.augment import AugmentConfig
from sonostate.data import Dataset, Trial
from sonostate.errors import InvalidArgument, InvalidConfiguration, InvalidData, NumericFailure
from sonostate.harness import (
    EarlyStopper, EvalReport, Fold, Normalizer, TrainConfig, accuracy, check_folds, early_stop_trace,
    mae, make_folds, make_pairs, pair_indices, run_cv, run_fold, select_checkpoints, smape,
)
from sonostate.model import ConvBlock, NetworkSpec
from sonostate.synth import simulate_labels


def naive_smape(est, truth):
    total = 0.0
    for a, b in zip(est, truth):
        den = (abs(a) + abs(b)) / 2
        total += 0.0 if den == 0 else abs(a - b) / den
    return 100.0 * total / len(est)


# ---------------------------------------------------------------- metrics

def test_smape_examples():
    y = np.array([1.0, -2.0, 0.0, 5.0])
    assert smape(y, y) == 0 and accuracy(y, y) == 100
    assert smape(np.zeros(4), np.array([1.0, -3.0, 2.0, 0.1])) == 200
    assert accuracy(np.zeros(3), np.ones(3)) == -100
    assert smape([2.0], [1.0]) == pytest.approx(200 / 3, abs=1e-9)
    assert accuracy([2.0], [1.0]) == pytest.approx(100 / 3, abs=1e-9)
    assert smape([0.0, 1.0], [0.0, 1.0]) == 0   # 0/0 term counts as 0


def test_smape_matches_naive():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = rng.integers(1, 40)
        est = rng.normal(0, 3, n) * (rng.random(n) > 0.2)
        tru = rng.normal(0, 3, n) * (rng.random(n) > 0.2)
        assert abs(smape(est, tru) - naive_smape(est, tru)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6)), min_size=1, max_size=30))
def test_metric_bounds(pairs):
    est, tru = np.array(pairs).T
    s = smape(est, tru)
    assert 0 <= s <= 200 + 1e-9 and -100 - 1e-9 <= accuracy(est, tru) <= 100
    assert mae(est, tru) >= 0


def test_mae_examples():
    assert mae([1, 2, 3], [1, 2, 3]) == 0
    assert mae([1, 3], [0, 0]) == 2
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=20), rng.normal(size=20)
    perm = rng.permutation(20)
    assert mae(a[perm], b[perm]) == pytest.approx(mae(a, b), abs=1e-15)


@pytest.mark.parametrize("fn", [smape, mae, accuracy])
def test_metric_length_mismatch(fn):
    with pytest.raises(InvalidArgument):
        fn([1.0, 2.0], [1.0])


# ---------------------------------------------------------------- pairs

def toy_trial(n=12, participant="p00", name="combined", seed=0):
    rng = np.random.default_rng(seed)
    gm = rng.integers(0, 255, (n, 128, 256), dtype=np.uint8)
    so = rng.integers(0, 255, (n, 128, 256), dtype=np.uint8)
    return Trial(participant, name, gm, so, rng.normal(0, 3, (n, 4)))


def test_self_pair_zero_difference():
    tr = toy_trial()
    p = make_pairs(tr, "canonical")[0]
    assert p.ref_index == p.test_index == 0
    assert np.all(p.diff_label == 0)


def test_swap_antisymmetry():
    tr = toy_trial()
    pairs = make_pairs(tr, "sampled", 5, swap=True, rng=np.random.default_rng(0))
    assert len(pairs) == 10
    for a, b in zip(pairs[:5], pairs[5:]):
        assert (a.ref_index, a.test_index) == (b.test_index, b.ref_index)
        assert np.array_equal(b.diff_label, -a.diff_label)
        assert np.array_equal(b.gm, a.gm[::-1])
        s = a.swapped()
        assert np.array_equal(s.diff_label, b.diff_label)
        np.testing.assert_allclose(s.ref_label, b.ref_label, rtol=0, atol=1e-12)


def test_canonical_pair_counts():
    assert len(pair_indices(4750, "canonical")) == 4750
    assert len(pair_indices(4750, "canonical", swap=True)) == 9500
    idx = pair_indices(4750)
    assert np.all(idx[:, 0] == 0) and np.array_equal(idx[:, 1], np.arange(4750))


def test_sampled_pairs_in_range():
    idx = pair_indices(30, "sampled", 1000, rng=np.random.default_rng(2))
    assert idx.shape == (1000, 2) and idx.min() >= 0 and idx.max() < 30


def test_pairs_reject_empty_and_unknown():
    with pytest.raises(InvalidArgument):
        pair_indices(0)
    with pytest.raises(InvalidArgument):
        pair_indices(5, "all")


# ---------------------------------------------------------------- normalizer

def test_normalizer_unit_std_and_round_trip():
    d = np.random.default_rng(0).normal(0, [2, 3, 10, 4], (500, 4))
    n = Normalizer.fit(d)
    np.testing.assert_allclose(n.apply(d).std(0), 1, atol=1e-6)
    np.testing.assert_allclose(n.invert(n.apply(d)), d, atol=1e-9)


def test_normalizer_rejects_zero_variance():
    d = np.random.default_rng(0).normal(size=(50, 4))
    d[:, 1] = 3.0
    with pytest.raises(InvalidData):
        Normalizer.fit(d)
    with pytest.raises(InvalidData):
        Normalizer.fit(d[:1])


def test_normalizer_train_only_differs_from_whole_cohort():
    diffs = []
    for k in range(4):
        lab = simulate_labels(3, k, "combined", duration=60, rate=5).labels
        diffs.append(lab - lab[0])
    train = Normalizer.fit(np.concatenate(diffs[:2]))
    whole = Normalizer.fit(np.concatenate(diffs))
    assert not np.array_equal(train.std, whole.std)


# ---------------------------------------------------------------- early stopping

def test_early_stopper_decreasing_never_stops():
    errs = list(np.linspace(10, 1, 40))
    assert early_stop_trace(errs, errs) == (None, [39, 39])


def test_early_stopper_rule_trace():
    errs = [5, 4, 4, 4, 4, 4, 4, 4, 4, 4]
    stop, best = early_stop_trace(errs, errs, patience=8)
    assert stop == 9 and best == [1, 1]


def test_early_stopper_patience_zero():
    stop, best = early_stop_trace([3, 2, 2.5, 1], [3, 2, 2.5, 1], patience=0)
    assert stop == 2 and best == [1, 1]


def test_early_stopper_needs_both_streams():
    val = [5, 4, 4, 4, 4, 4]
    test = [5, 4, 3, 2, 1, 0]
    assert early_stop_trace(val, test, patience=2)[0] is None
    s = EarlyStopper(2)
    for v, t in [(5, 5), (4, 4), (4, 4), (4, 3), (4, 3), (4, 3)]:
        stopped = s.update(v, t)
    assert stopped and s.best_index == [1, 3]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=40), st.integers(0, 10))
def test_early_stopper_best_not_above_earlier(errs, patience):
    stop, best = early_stop_trace(errs, errs, patience=patience)
    end = len(errs) if stop is None else stop + 1
    b = best[0]
    assert errs[b] == min(errs[:end]) and all(errs[b] < e for e in errs[:b])


def test_checkpoint_selection_trace():
    assert select_checkpoints([3, 2, 4], [5, 1, 6]) == (1, 1)
    assert select_checkpoints([1, 2, 4], [5, 6, 0]) == (0, 2)


# ---------------------------------------------------------------- folds

def test_default_folds_cover_everyone():
    ps = [f"p{i:02d}" for i in range(32)]
    folds = make_folds(ps)
    assert len(folds) == 16
    held = sorted(p for f in folds for p in f.held_out)
    assert held == ps
    for f in folds:
        assert f.test != f.validation and not set(f.held_out) & set(f.training)
        assert len(f.training) == 30
    assert (folds[3].test, folds[3].validation) == ("p06", "p07")


def test_fold_coverage_violations():
    ps = [f"p{i:02d}" for i in range(8)]
    folds = make_folds(ps)
    with pytest.raises(InvalidConfiguration):
        check_folds(folds[:-1], ps)
    bad = Fold(0, "p00", "p00", tuple(ps[1:]))
    with pytest.raises(InvalidConfiguration):
        check_folds([bad] + folds[1:], ps)
    leaky = Fold(0, "p00", "p01", tuple(ps))
    with pytest.raises(InvalidConfiguration):
        check_folds([leaky] + folds[1:], ps)


def test_custom_pairing():
    ps = ["a", "b", "c", "d"]
    folds = make_folds(ps, [("a", "c"), ("b", "d")])
    assert folds[0].training == ("b", "d")
    with pytest.raises(InvalidConfiguration):
        make_folds(ps, [("a", "c"), ("a", "d")])


# ---------------------------------------------------------------- training

TINY = NetworkSpec(blocks=(ConvBlock(4, (5, 5), stride=4, pool=(2, 2)), ConvBlock(8, (3, 3), pool=(2, 2))),
                   fc_width=16, dropout=(0.0, 0.0, 0.0))


def blob_trial(participant, task, seed, duration=40.0, rate=2.0, gain=1.0):
    """Regions with a bright blob whose position encodes the labels."""
    k = int(participant[1:])
    lab = simulate_labels(seed, k, task, duration, rate)
    yy, xx = np.mgrid[0:128, 0:256].astype(float)

    def blob(cx, cy):
        return 40 + 180 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * 12.0 ** 2))

    gm, so = [], []
    for act, ang in zip(lab.activity, lab.angle):
        gm.append(blob(128 + 6 * gain * ang, 30 + 70 * act[0]))
        so.append(blob(128 + 6 * gain * ang, 30 + 70 * act[1]))
    return Trial(participant, task, np.clip(np.rint(gm), 0, 255).astype(np.uint8),
                 np.clip(np.rint(so), 0, 255).astype(np.uint8), lab.labels)


def blob_dataset(n=4, seed=0, tasks=("combined", "isometric")):
    ds = Dataset()
    for k in range(n):
        for task in tasks:
            ds.add(blob_trial(f"p{k:02d}", task, seed))
    return ds


def tiny_config(**kw):
    base = dict(network=TINY, augment=AugmentConfig(rot_range=1.0, trans_range=2.0), lr=3e-3, batch_size=8,
                eval_every=50, max_steps=300, pair_budget=2000, patience=8)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def blob_fold():
    ds = blob_dataset()
    fold = make_folds(ds.participants)[0]
    return ds, fold, run_fold(fold, ds, tiny_config())


def test_run_fold_learns_trivial_phantom(blob_fold):
    _, fold, res = blob_fold
    assert {r.participant for r in res.report.rows} == set(fold.held_out)
    for r in res.report.rows:
        assert r.accuracy > 0, r
    assert res.touched == set(fold.training)
    assert len(res.history) == res.steps // 50


def test_run_fold_checkpoints_follow_opposite_streams(blob_fold):
    _, _, res = blob_fold
    val = [h[2] for h in res.history]
    test = [h[3] for h in res.history]
    i_test, i_val = select_checkpoints(val, test)
    assert i_test == int(np.argmin(val)) and i_val == int(np.argmin(test))


def test_run_fold_deterministic(blob_fold):
    ds, fold, res = blob_fold
    again = run_fold(fold, ds, tiny_config())
    assert again.report.detail_table() == res.report.detail_table()
    for k, v in res.final_params.named_arrays().items():
        assert v.tobytes() == again.final_params.named_arrays()[k].tobytes()


def test_held_out_data_cannot_influence_weights_or_normalizer(blob_fold):
    ds, fold, res = blob_fold
    # scramble every held-out image and label
    other = Dataset()
    rng = np.random.default_rng(9)
    for p in ds.participants:
        for tr in ds.of(p):
            if p in fold.held_out:
                tr = Trial(p, tr.name, rng.permutation(tr.gm), rng.permutation(tr.so),
                           rng.permutation(tr.labels) * 3)
            other.add(tr)
    alt = run_fold(fold, other, tiny_config())
    assert alt.normalizer.std.tobytes() == res.normalizer.std.tobytes()
    for k, v in res.final_params.named_arrays().items():
        assert v.tobytes() == alt.final_params.named_arrays()[k].tobytes()


def test_run_fold_nan_aborts():
    ds = blob_dataset(n=4, tasks=("combined",))
    tr = ds.of("p02")[0]
    gm = tr.gm.astype(np.float64)
    gm[:] = np.nan
    ds.trials["p02"] = [Trial("p02", tr.name, gm, tr.so, tr.labels)]
    with pytest.raises(NumericFailure):
        run_fold(make_folds(ds.participants)[0], ds, tiny_config(max_steps=5))


def test_run_cv_reports_each_participant_once():
    ds = blob_dataset(n=4, tasks=("combined",))
    folds = make_folds(ds.participants)
    res = run_cv(ds, folds, tiny_config(max_steps=20, eval_every=10))
    assert res.report.participants() == ds.participants
    agg = res.report.aggregate()
    for sig, a in agg.items():
        vals = [r.accuracy for r in res.report.rows if r.signal == sig]
        assert a["accuracy"]["mean"] == pytest.approx(np.mean(vals), abs=1e-9)
        assert a["participants"] == 4
    with pytest.raises(InvalidConfiguration):
        run_cv(ds, folds[:1], tiny_config(max_steps=5))


def test_report_tables():
    rows = EvalReport.from_predictions([]).rows
    assert rows == []
    ds = blob_dataset(n=2, tasks=("combined",))
    from sonostate.harness import TrialPrediction
    tr = ds.of("p00")[0]
    pred = TrialPrediction("p00", "combined", tr.frames, tr.labels, tr.labels + 1.0)
    rep = EvalReport.from_predictions([pred])
    assert len(rep.rows) == 4
    assert all(r.mae == pytest.approx(1.0) for r in rep.rows)
    assert rep.summary_table().splitlines()[0].startswith("signal\t")
    assert len(rep.detail_table().splitlines()) == 5


def test_train_config_validation():
    with pytest.raises(InvalidConfiguration):
        tiny_config(batch_size=0).validate()
    with pytest.raises(InvalidConfiguration):
        tiny_config(lr=0.0).validate()
    with pytest.raises(InvalidConfiguration):
        tiny_config(lr_schedule="step").validate()


def test_cosine_schedule_anneals_to_zero():
    cfg = tiny_config(lr=1e-3, max_steps=100, lr_schedule="cosine")
    assert cfg.lr_at(0) == 1e-3
    assert np.isclose(cfg.lr_at(50), 5e-4)
    assert abs(cfg.lr_at(100)) < 1e-18
    assert all(cfg.lr_at(k) >= cfg.lr_at(k + 1) for k in range(100))
    assert tiny_config(lr=1e-3).lr_at(99) == 1e-3


def test_symmetric_pair_output_antisymmetric():
    from sonostate.harness import Conditioned, pair_output
    from sonostate.model import build_network
    ds = blob_dataset(n=1, tasks=("combined",))
    tr = ds.of("p00")[0]
    params = build_network(TINY, np.random.default_rng(3))
    params.label_std = np.ones(4)
    gm, so = Conditioned(ds).get(tr)
    for r, t in [(0, 5), (7, 2), (3, 3)]:
        a = pair_output(params, gm, so, r, t, symmetric=True)
        b = pair_output(params, gm, so, t, r, symmetric=True)
        assert np.array_equal(a, -b)
    assert np.array_equal(pair_output(params, gm, so, 4, 4), np.zeros(4))
    assert not np.array_equal(pair_output(params, gm, so, 0, 5), pair_output(params, gm, so, 0, 5, symmetric=True))
