import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nmnist_snn.network import NetworkConfig, NetworkState, present_pattern
from nmnist_snn.plasticity import (
    DegeneratePsth,
    EmptyLog,
    FixedPost,
    PlasticityParams,
    PsthStdp,
    TraceState,
    TraceStdp,
    TStarOutOfRange,
    calibrate_psth_stdp,
    estimate_tstar,
    fixed_post_update,
    h_from_csv,
    h_to_csv,
    psth_update,
    psth_xpre,
    reference_mean_abs_dw,
    stdp_update,
    trace_at,
    update_trace,
)
from nmnist_snn.preprocess import Pattern, PsthTable


def test_trace_decay_examples():
    tr = TraceState(np.array([1.0]))
    update_trace(tr, 105.0, [], PlasticityParams(tau_xpre=215.0))
    assert tr.x_pre[0] == pytest.approx(math.exp(-105 / 215), rel=1e-12)
    assert tr.x_pre[0] == pytest.approx(0.61362, abs=1e-5)
    tr = TraceState(np.array([1.0]))
    update_trace(tr, 105.0, [], PlasticityParams(tau_xpre=20.0))
    assert tr.x_pre[0] == pytest.approx(0.00525, abs=1e-5)


def test_trace_without_decay_counts_spikes():
    tr = TraceState.zeros(2)
    p = PlasticityParams(tau_xpre=math.inf, delta_xpre=1.0)
    for _ in range(17):
        update_trace(tr, 1.0, [1], p)
    assert tr.x_pre.tolist() == [0.0, 17.0]


def test_trace_multiset_increments():
    tr = TraceState.zeros(3)
    update_trace(tr, 1.0, [2, 2, 0], PlasticityParams(delta_xpre=0.5))
    assert tr.x_pre.tolist() == [0.5, 0.0, 1.0]


@given(st.lists(st.integers(0, 104), min_size=1, max_size=30), st.floats(5.0, 500.0))
@settings(max_examples=200, deadline=None)
def test_recursive_trace_matches_sum_of_exponentials(times, tau):
    p = PlasticityParams(tau_xpre=tau, delta_xpre=0.7)
    tr = TraceState.zeros(1)
    for n in range(105):
        update_trace(tr, 1.0, [0] * times.count(n), p)
    brute = sum(0.7 * math.exp(-(104 - t) / tau) for t in times)
    assert tr.x_pre[0] == pytest.approx(brute, rel=1e-9)
    assert trace_at(Pattern([0] * len(times), times), 104, p)[0] == pytest.approx(brute, rel=1e-12)


def test_stdp_update_examples():
    p = PlasticityParams(eta=0.01, x_tar=0.4, w_max=1.0, mu=1.0)
    assert stdp_update(0.2, 0.5, p) - 0.2 == pytest.approx(0.0008)
    assert stdp_update(0.7, 0.4, p) == 0.7
    assert stdp_update(1.0, 5.0, p) == 1.0


@given(st.floats(0, 1), st.floats(0, 50), st.floats(1e-4, 2.0), st.floats(0, 3))
def test_updates_stay_in_bounds(w, x, eta, mu):
    p = PlasticityParams(eta=eta, mu=mu)
    for new in (stdp_update(w, x, p), psth_update(w, x, p), psth_update(w, -x, p), stdp_update(w, -x, p)):
        assert 0.0 <= new <= 1.0


def test_fixed_post_coincides_with_trace_rule():
    p = PlasticityParams(eta=0.05, tau_xpre=20.0)
    pat = Pattern([0, 0, 1], [10, 40, 41])
    w = np.full(1156, 0.3)
    x = trace_at(pat, 60, p)
    assert np.array_equal(fixed_post_update(w, TraceState(x), p), stdp_update(w, x, p))


def test_fixed_post_zero_trace_depresses_everything():
    p = PlasticityParams(eta=0.05, x_tar=0.4)
    w = np.array([0.0, 0.5, 1.0])
    new = fixed_post_update(w, TraceState(np.zeros(3)), p)
    assert new == pytest.approx(np.clip(w - 0.05 * 0.4 * (1 - w), 0, 1))


def test_fixed_post_sees_only_history_before_tstar():
    # one pixel, spikes at 10, 20 and 90 ms; t* = 50
    p = PlasticityParams(eta=0.05, tau_xpre=20.0)
    pat = Pattern([7, 7, 7], [10, 20, 90])
    at_tstar = trace_at(pat, 50, p)[7]
    assert at_tstar == pytest.approx(math.exp(-40 / 20) + math.exp(-30 / 20))
    at_end = trace_at(pat, 104, p)[7]
    assert at_end == pytest.approx(math.exp(-94 / 20) + math.exp(-84 / 20) + math.exp(-14 / 20))
    late = Pattern([7], [80])
    assert trace_at(late, 50, p)[7] == 0.0


def test_fixed_post_learner_uses_tstar_samples():
    cfg = NetworkConfig(n_exc=2).validate()
    p = PlasticityParams(eta=0.05, tau_xpre=20.0)
    rng = np.random.default_rng(0)
    pix = rng.choice(1156, 300)
    times = np.clip(rng.normal(60, 15, 300).astype(int), 0, 104)
    pat = Pattern(pix, times)
    state = NetworkState.initial(cfg, seed=0)
    w0 = state.weights.copy()
    res = present_pattern(state, pat, FixedPost(30.0, p).learner(cfg.n_input, cfg.dt))
    j = res.winner
    want = stdp_update(w0[j], trace_at(pat, 30.0, p), p)
    assert state.weights[j] == pytest.approx(want, rel=1e-12)
    other = 1 - j
    assert np.array_equal(state.weights[other], w0[other])


def test_trace_learner_updates_at_spike_time():
    cfg = NetworkConfig(n_exc=2).validate()
    p = PlasticityParams(eta=0.05, tau_xpre=215.0)
    rng = np.random.default_rng(1)
    pat = Pattern(rng.choice(1156, 300), np.clip(rng.normal(60, 15, 300).astype(int), 0, 104))
    state = NetworkState.initial(cfg, seed=0)
    w0 = state.weights.copy()
    res = present_pattern(state, pat, TraceStdp(p).learner(cfg.n_input, cfg.dt))
    assert len(res.post_spikes) == 1
    t, j = res.post_spikes[0]
    assert state.weights[j] == pytest.approx(stdp_update(w0[j], trace_at(pat, t, p), p), rel=1e-12)


def test_tstar_range_checked():
    with pytest.raises(TStarOutOfRange):
        FixedPost(105.0)
    with pytest.raises(TStarOutOfRange):
        FixedPost(-1.0)


def test_estimate_tstar():
    assert estimate_tstar([100, 100, 100]) == 100
    assert estimate_tstar([90, 110]) == 100
    assert estimate_tstar([60, 61]) == 61  # 60.5 rounds up
    with pytest.raises(EmptyLog):
        estimate_tstar([])


def test_psth_xpre_examples():
    h = np.zeros(105)
    h[3], h[50] = 0.2, -0.1
    pat = Pattern([0, 0, 1, 1], [3, 50, 3, 3])
    x = psth_xpre(pat, h, x_tar=0.4)
    assert x[0] == pytest.approx(0.1)
    assert x[1] == pytest.approx(0.4)  # two spikes in one bin sum
    assert x[2] == -0.4


def test_psth_update_examples():
    p = PlasticityParams(eta=0.05, x_tar=0.4, mu=1.0, w_max=1.0)
    assert psth_update(0.3, 0.0, p) == 0.3
    assert psth_update(0.5, -0.4, p) - 0.5 == pytest.approx(-0.01)
    assert psth_update(1.0, 3.0, p) == 1.0


# --- calibration -------------------------------------------------------------------

def calib_patterns(n=20, seed=0):
    rng = np.random.default_rng(seed)
    return [Pattern(rng.choice(1156, 200), np.clip(rng.normal(50, 15, 200).astype(int), 0, 104))
            for _ in range(n)]


def test_flat_psth_gives_negative_constant():
    pats = calib_patterns()
    p = PlasticityParams()
    w = np.full(1156, 0.15)
    ref = reference_mean_abs_dw(pats, w, p)
    cal = calibrate_psth_stdp(np.full(105, 2.0), pats, ref, w, p)
    assert cal.a == 0.0
    assert np.all(cal.h < 0) and np.all(cal.h == cal.h[0])
    assert cal.h.sum() < 0


def test_single_peak_gives_ltp_centre_ltd_tails():
    t = np.arange(105)
    H = 8 * np.exp(-((t - 50) / 12.0) ** 2)
    pats = calib_patterns()
    p = PlasticityParams()
    w = np.full(1156, 0.15)
    cal = calibrate_psth_stdp(H, pats, reference_mean_abs_dw(pats, w, p), w, p, rho=0.1)
    assert cal.h[50] > 0 and cal.h[0] < 0 and cal.h[104] < 0
    ltp, ltd = cal.h[cal.h > 0].sum(), -cal.h[cal.h < 0].sum()
    assert ltd > ltp
    assert cal.h.sum() == pytest.approx(-0.1 * np.abs(cal.h).sum(), rel=1e-9)
    assert cal.ratio == pytest.approx(1.0, rel=1e-9)


def test_doubling_H_halves_a_two_bin_case():
    # two bins H = (1, 3): with h = a*(H + c), sum(h) = -rho*sum|h| at rho = 0.1 gives
    # (1 + c) < 0 < (3 + c) and 4 + 2c = -0.1 * ((3 + c) - (1 + c)) = -0.2  ->  c = -2.1,
    # so h = a*(-1.1, 0.9). Doubling H gives c = -4.2 and h = a'*(-2.2, 1.8): a' = a / 2.
    pats = [Pattern([0, 1], [0, 1], duration=2, width=2, height=1)]
    p = PlasticityParams()
    w = np.zeros(2)
    H = np.array([1.0, 3.0])
    ref = 0.05
    one = calibrate_psth_stdp(H, pats, ref, w, p)
    two = calibrate_psth_stdp(2 * H, pats, ref, w, p)
    assert one.b / one.a == pytest.approx(-2.1, rel=1e-12)
    assert one.h == pytest.approx(one.a * np.array([-1.1, 0.9]), rel=1e-12)
    assert two.a == pytest.approx(one.a / 2, rel=1e-12)
    assert two.h == pytest.approx(one.h, rel=1e-12)


@given(st.lists(st.floats(0, 50), min_size=105, max_size=105).filter(lambda v: max(v) - min(v) > 1e-6),
       st.floats(0.01, 0.9))
@settings(max_examples=60, deadline=None)
def test_calibrated_h_always_has_net_depression(values, rho):
    pats = calib_patterns(3)
    p = PlasticityParams()
    w = np.full(1156, 0.15)
    ref = reference_mean_abs_dw(pats, w, p)
    cal = calibrate_psth_stdp(np.array(values), pats, ref, w, p, rho=rho)
    assert cal.h.sum() < 0
    assert abs(cal.ratio - 1.0) < 0.1


def test_degenerate_psth_rejected():
    pats = calib_patterns(2)
    with pytest.raises(DegeneratePsth):
        calibrate_psth_stdp(np.zeros(105), pats, 0.01, np.zeros(1156), PlasticityParams())


def test_psth_learner_applies_at_end_of_pattern():
    cfg = NetworkConfig(n_exc=2).validate()
    p = PlasticityParams(eta=0.05)
    h = np.linspace(-0.2, 0.3, 105)
    rng = np.random.default_rng(2)
    pat = Pattern(rng.choice(1156, 300), np.clip(rng.normal(60, 15, 300).astype(int), 0, 104))
    state = NetworkState.initial(cfg, seed=0)
    w0 = state.weights.copy()
    res = present_pattern(state, pat, PsthStdp(h, 1.0, 0.0, p).learner(cfg.n_input, cfg.dt))
    j = res.winner
    assert state.weights[j] == pytest.approx(psth_update(w0[j], psth_xpre(pat, h, p.x_tar), p), rel=1e-12)


def test_h_csv_round_trip():
    h = np.linspace(-1, 1, 105) / 7
    text = h_to_csv(h)
    assert text.startswith("t_ms,h\n")
    assert np.array_equal(h_from_csv(text), h)
