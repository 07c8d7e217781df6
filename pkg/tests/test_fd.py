import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feddistill.data import DeviceDataset
from feddistill.fd import (
    DeviceState,
    FdConfig,
    LocalReport,
    ProtocolError,
    global_ensembling_phase,
    initial_weights,
    local_training_phase,
    run_fd,
)
from feddistill.metrics import CostLedger
from feddistill.nn import Sample, fd_loss_gradient, forward, sgd_step, softmax
from feddistill.seeding import stream
from feddistill.training import local_sgd


def report(device_id, per_label, L=2):
    return LocalReport(device_id, 0, L, {k: np.asarray(v, dtype=float) for k, v in per_label.items()})


def brute_force_teacher(reports, device_id, label):
    others = [r.per_label[label] for r in reports if r.device_id != device_id and label in r.per_label]
    if not others:
        return None
    total = np.zeros_like(others[0])
    for v in others:
        total = total + v
    return total / len(others)


def test_two_devices_swap():
    out = global_ensembling_phase([report(1, {0: [0.2, 0.8]}), report(2, {0: [0.6, 0.4]})])
    np.testing.assert_allclose(out[1][0], [0.6, 0.4])
    np.testing.assert_allclose(out[2][0], [0.2, 0.8])


def test_three_devices_mean_of_others():
    out = global_ensembling_phase([
        report(1, {0: [0.2, 0.8]}), report(2, {0: [0.4, 0.6]}), report(3, {0: [0.6, 0.4]}),
    ])
    np.testing.assert_allclose(out[1][0], [0.5, 0.5], atol=1e-15)


def test_label_reported_by_one_device():
    v = [0.3, 0.7]
    out = global_ensembling_phase([report(1, {}), report(2, {}), report(3, {1: v})])
    assert out[3][1] is None
    np.testing.assert_allclose(out[1][1], v)
    np.testing.assert_allclose(out[2][1], v)
    assert out[1][0] is None


def test_fewer_than_two_reports_is_protocol_error():
    with pytest.raises(ProtocolError):
        global_ensembling_phase([report(1, {0: [0.5, 0.5]})])
    with pytest.raises(ProtocolError):
        global_ensembling_phase([report(1, {}), report(1, {})])


@st.composite
def report_sets(draw):
    m = draw(st.integers(2, 6))
    L = draw(st.integers(2, 6))
    seed = draw(st.integers(0, 2**32 - 1))
    full = draw(st.booleans())
    rng = np.random.default_rng(seed)
    reports = []
    for i in range(m):
        labels = range(L) if full else [ell for ell in range(L) if rng.random() < 0.6]
        reports.append(LocalReport(i, 0, L, {ell: softmax(rng.normal(size=L) * 3) for ell in labels}))
    return reports


@settings(max_examples=150, deadline=None)
@given(report_sets())
def test_leave_one_out_matches_brute_force(reports):
    out = global_ensembling_phase(reports)
    for r in reports:
        for ell in range(r.num_labels):
            want = brute_force_teacher(reports, r.device_id, ell)
            got = out[r.device_id][ell]
            if want is None:
                assert got is None
            else:
                np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)
                assert abs(got.sum() - 1) <= 1e-6 and got.min() >= 0


@settings(max_examples=50, deadline=None)
@given(report_sets(), st.integers(0, 2**32 - 1))
def test_teacher_ignores_own_report(reports, seed):
    before = global_ensembling_phase(reports)
    rng = np.random.default_rng(seed)
    victim = reports[0]
    L = victim.num_labels
    changed = LocalReport(victim.device_id, 0, L, {ell: softmax(rng.normal(size=L)) for ell in victim.per_label})
    after = global_ensembling_phase([changed, *reports[1:]])
    for ell in range(L):
        a, b = before[victim.device_id][ell], after[victim.device_id][ell]
        assert (a is None) == (b is None)
        if a is not None:
            np.testing.assert_allclose(a, b, atol=1e-12)


def test_ensembling_independent_of_report_order():
    rng = np.random.default_rng(0)
    reports = [LocalReport(i, 0, 3, {ell: softmax(rng.normal(size=3)) for ell in range(3)}) for i in range(5)]
    a = global_ensembling_phase(reports)
    b = global_ensembling_phase(reports[::-1])
    for i in a:
        for ell in a[i]:
            assert a[i][ell].tobytes() == b[i][ell].tobytes()


def _dataset(rng, n=30, L=4, d=5, labels=None, device_id=0):
    y = rng.integers(0, L, size=n) if labels is None else np.asarray(labels)
    return DeviceDataset(device_id, rng.random((len(y), d)), y, L)


def test_single_step_report_replays_by_hand(rng):
    ds = DeviceDataset(0, rng.random((1, 5)), np.array([2]), 4)
    cfg = FdConfig(local_steps=1, batch_size=1, eta=0.1, gamma=1.0, seed=3)
    state = DeviceState.fresh(0, initial_weights(5, 4, cfg, 0))
    new_state, rep = local_training_phase(state, ds, cfg)
    assert list(rep.per_label) == [2]
    w1 = sgd_step(state.weights, fd_loss_gradient(state.weights, Sample(ds.features[0], 2)), 0.1)
    np.testing.assert_allclose(rep.per_label[2], forward(w1, ds.features[0]), atol=1e-15)
    assert new_state.counts.tolist() == [0, 0, 1, 0]


def test_gamma_zero_matches_plain_sgd(rng):
    ds = _dataset(rng)
    cfg = FdConfig(local_steps=7, batch_size=4, eta=0.05, gamma=0.0, seed=1)
    w0 = initial_weights(5, 4, cfg, 0)
    state = DeviceState.fresh(0, w0)
    state.global_avgs = {ell: softmax(rng.normal(size=4)) for ell in range(4)}
    new_state, _ = local_training_phase(state, ds, cfg, round_=2)
    plain = local_sgd(w0, ds, 7, 4, 0.05, stream(1, "fd-batches", 0, 2))
    for a, b in zip(new_state.weights.arrays(), plain.arrays()):
        assert a.tobytes() == b.tobytes()


def test_missing_label_not_reported(rng):
    ds = _dataset(rng, labels=[0, 1, 2, 4] * 5, L=6)
    cfg = FdConfig(local_steps=10, batch_size=5, seed=0)
    _, rep = local_training_phase(DeviceState.fresh(0, initial_weights(5, 6, cfg, 0)), ds, cfg)
    assert set(rep.per_label) == {0, 1, 2, 4}


def test_accumulator_matches_recorded_outputs(rng):
    ds = _dataset(rng, n=25)
    cfg = FdConfig(local_steps=6, batch_size=8, seed=2)
    state = DeviceState.fresh(0, initial_weights(5, 4, cfg, 0))
    state.global_avgs = {ell: softmax(rng.normal(size=4)) for ell in range(3)}
    trace = []
    new_state, rep = local_training_phase(state, ds, cfg, trace=trace)
    assert len(trace) == 48
    for ell in range(4):
        outs = [p for y, p in trace if y == ell]
        assert new_state.counts[ell] == len(outs)
        if outs:
            np.testing.assert_allclose(rep.per_label[ell], np.mean(outs, axis=0), atol=1e-14)
            np.testing.assert_allclose(new_state.logit_acc[ell].sum(), len(outs), rtol=1e-6)
            assert abs(rep.per_label[ell].sum() - 1) < 1e-6


def test_accumulators_reset_each_phase(rng):
    ds = _dataset(rng)
    cfg = FdConfig(local_steps=3, batch_size=4, seed=0)
    s, _ = local_training_phase(DeviceState.fresh(0, initial_weights(5, 4, cfg, 0)), ds, cfg)
    s2, _ = local_training_phase(s, ds, cfg, round_=1)
    assert s2.counts.sum() == 12


def _devices(rng, m=3):
    return [_dataset(rng, n=40, L=10, device_id=i) for i in range(m)]


def test_run_fd_cost_per_device(rng):
    devices = _devices(rng, m=3)
    cfg = FdConfig(local_steps=10, global_rounds=16, batch_size=8, seed=0)
    ledger = CostLedger()
    log = run_fd(devices, cfg, ledger)
    for i in range(3):
        assert log.device_ledgers[i].logit_scalars == 16 * (10 + 10) * 10 == 3200
    assert ledger.logit_scalars == 3 * 3200
    assert [r["cumulative_logit_scalars"] for r in log.records if r["device_id"] == 0][-1] == 3200


def test_run_fd_zero_rounds(rng):
    ledger = CostLedger()
    log = run_fd(_devices(rng), FdConfig(global_rounds=0), ledger)
    assert log.records == []
    assert ledger.total_bits == 0


def test_run_fd_needs_two_devices(rng):
    with pytest.raises(ProtocolError):
        run_fd(_devices(rng, m=1), FdConfig())


def test_run_fd_deterministic_and_worker_independent(rng, small_split, small_devices):
    _, test = small_split
    cfg = FdConfig(local_steps=5, global_rounds=3, batch_size=8, seed=4)
    a = run_fd(small_devices, cfg, test=test)
    b = run_fd(small_devices, cfg, test=test, workers=3)
    assert a.to_jsonl() == b.to_jsonl()
    assert len(a.records) == 9


def test_run_fd_replays_exactly(rng, small_split):
    _, test = small_split
    base = _dataset(rng, n=30, L=10, d=16)
    twins = [DeviceDataset(i, base.features, base.labels, 10) for i in range(2)]
    cfg = FdConfig(local_steps=4, global_rounds=3, batch_size=5, seed=0)
    assert run_fd(twins, cfg, test=test).records == run_fd(twins, cfg, test=test).records
