import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from errornav.controller import (ConstantPredictor, MPPIConfig, NavConfig, NetworkPredictor,
                                 Outcome, RewardConfig, ZeroPredictor, goal_reward,
                                 initial_nominal, mppi_step, navigate, normalized_goal_reward,
                                 sample_sequences, softmax_weights, total_reward,
                                 traversability_reward)
from errornav.labeling import align, extract_samples, LabelConfig
from errornav.network import ArchConfig, init_params
from maps import open_field, paint

CFG = RewardConfig()
HIST = np.zeros((2, 3, 32, 32), np.float32)
STRAIGHT = np.tile([0.8, 0.0], (20, 1))


def test_eta():
    assert CFG.eta == pytest.approx(0.625)


def test_goal_reward_examples():
    assert goal_reward((0, 0, 0), STRAIGHT, (100, 0)) == pytest.approx(1.6, abs=1e-12)
    assert goal_reward((0, 0, 0), np.zeros((20, 2)), (100, 0)) == 0.0
    assert goal_reward((0, 0, np.pi), STRAIGHT, (100, 0)) == pytest.approx(-1.6, abs=1e-12)


def test_goal_reward_stops_at_goal():
    # the rollout passes exactly over the goal at step 5 and keeps going
    g = (0.4, 0.0)
    r = goal_reward((0, 0, 0), STRAIGHT, g)
    assert r == pytest.approx(0.4, abs=1e-12)


def test_normalized_goal_reward_examples():
    assert normalized_goal_reward((0, 0, 0), STRAIGHT, (100, 0)) == pytest.approx(1.0, abs=1e-9)
    assert normalized_goal_reward((0, 0, 0), STRAIGHT / 2, (100, 0)) == pytest.approx(0.5)
    assert normalized_goal_reward((0, 0, np.pi), STRAIGHT, (100, 0)) == 0.0


def test_traversability_examples():
    assert traversability_reward(0.08) == 0.0
    assert traversability_reward(0.1 / CFG.eta) == 0.0
    assert traversability_reward(0.2 / CFG.eta) == pytest.approx(-(np.e - 1), abs=1e-12)
    # the printed form jumps to -2 just above the bias
    verbatim = RewardConfig(verbatim_penalty=True)
    assert traversability_reward(0.1 / CFG.eta + 1e-12, verbatim) == pytest.approx(-2.0)
    # huge predictions are capped rather than overflowing
    assert traversability_reward(1e6) == pytest.approx(-(np.exp(50) - 1))


@settings(max_examples=80, deadline=None)
@given(a=st.floats(-5, 50), b=st.floats(-5, 50))
def test_traversability_monotone_nonpositive(a, b):
    lo, hi = sorted((a, b))
    assert traversability_reward(hi) <= traversability_reward(lo) <= 0.0


def test_total_reward_examples():
    assert total_reward((0, 0, 0), HIST, STRAIGHT, (100, 0), ZeroPredictor()) == pytest.approx(1.0)
    tau = 0.2 / CFG.eta
    assert total_reward((0, 0, 0), HIST, STRAIGHT, (100, 0), ConstantPredictor(tau)) == \
        pytest.approx(1 - (np.e - 1), abs=1e-12)
    assert total_reward((0, 0, 0), HIST, np.zeros((20, 2)), (100, 0), ConstantPredictor(0.05)) == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        RewardConfig(v_max=0)
    with pytest.raises(ValueError):
        MPPIConfig(sampling_cov=((1, 0.5), (0, 1)))
    with pytest.raises(ValueError):
        MPPIConfig(sampling_cov=((1, 0), (0, -1)))
    MPPIConfig(sampling_cov=((0, 0), (0, 0)))


# ---------------------------------------------------------------- sampling / MPPI

def test_sampling_respects_bounds():
    seqs = sample_sequences(np.tile([0.7, 1.4], (20, 1)), MPPIConfig(sampling_cov=((4, 0), (0, 4))),
                            0.8, np.random.default_rng(0))
    assert seqs.shape == (128, 20, 2)
    assert seqs[..., 0].min() >= 0 and seqs[..., 0].max() <= 0.8
    assert np.abs(seqs[..., 1]).max() <= 1.5


def test_sampling_filter_definition():
    """Zero noise: the samples are the first-order filtered nominal."""
    rng = np.random.default_rng(0)
    nominal = rng.uniform([0, -1], [0.8, 1], (20, 2))
    cfg = MPPIConfig(sampling_cov=((0, 0), (0, 0)), num_samples=3)
    seqs = sample_sequences(nominal, cfg, 0.8, rng)
    expected = np.empty_like(nominal)
    prev = nominal[0]
    for t in range(20):
        prev = 0.5 * nominal[t] + 0.5 * prev
        expected[t] = prev
    for s in seqs:
        np.testing.assert_array_equal(s, expected)


def test_weights_shift_invariant():
    r = np.random.default_rng(1).normal(size=128)
    np.testing.assert_allclose(softmax_weights(r + 123.0, 50), softmax_weights(r, 50), rtol=1e-12)
    assert softmax_weights(r, 50).sum() == pytest.approx(1.0)


def test_equal_rewards_average_the_samples():
    nominal = np.tile([0.4, 0.0], (20, 1))
    # goal far behind: every clipped goal reward is 0 and the predictor adds nothing
    _, _, diag = mppi_step(nominal, (0, 0, 0), HIST, (-100, 0), ZeroPredictor(), CFG,
                           MPPIConfig(), np.random.default_rng(2), keep_samples=True)
    assert np.all(diag.rewards == 0)
    np.testing.assert_allclose(diag.plan, diag.samples.mean(axis=0), atol=1e-9)


def test_sharp_weights_pick_the_best_sample():
    nominal = np.tile([0.4, 0.0], (20, 1))
    _, _, diag = mppi_step(nominal, (0, 0, 0.3), HIST, (5, 2), ConstantPredictor(0.0), CFG,
                           MPPIConfig(reward_weight=1e6), np.random.default_rng(3),
                           keep_samples=True)
    best = diag.samples[np.argmax(diag.rewards)]
    assert np.abs(diag.plan - best).max() <= 1e-6


def test_zero_covariance_is_exact():
    nominal = np.tile([0.6, 0.2], (20, 1))
    executed, shifted, diag = mppi_step(nominal, (0, 0, 0), HIST, (5, 5), ZeroPredictor(), CFG,
                                        MPPIConfig(sampling_cov=((0, 0), (0, 0))),
                                        np.random.default_rng(4))
    np.testing.assert_array_equal(diag.plan, nominal)
    assert executed == (0.6, 0.2)
    np.testing.assert_array_equal(shifted, nominal)


def test_shift_repeats_last_action():
    rng = np.random.default_rng(5)
    nominal = rng.uniform([0, -1], [0.8, 1], (20, 2))
    executed, shifted, diag = mppi_step(nominal, (0, 0, 0), HIST, (5, 5), ZeroPredictor(), CFG,
                                        MPPIConfig(), rng)
    np.testing.assert_array_equal(shifted[:-1], diag.plan[1:])
    np.testing.assert_array_equal(shifted[-1], diag.plan[-1])
    assert executed == tuple(diag.plan[0])
    assert 0 <= executed[0] <= 0.8 and abs(executed[1]) <= 1.5


def test_mppi_deterministic_given_seed():
    params = init_params(ArchConfig(), 0)
    pred = NetworkPredictor(params, ArchConfig())
    nominal = np.tile([0.4, 0.0], (20, 1))
    outs = [mppi_step(nominal, (1, 1, 0), HIST, (5, 5), pred, CFG, MPPIConfig(),
                      np.random.default_rng(9))[0] for _ in range(2)]
    assert outs[0] == outs[1]


def test_predictor_penalty_steers_the_plan():
    """A predictor that penalises turning left pushes the plan to the right."""
    class LeftIsBad:
        def __call__(self, history, seqs):
            return 2.0 * np.clip(seqs[..., 1].mean(axis=-1), 0, None)

    nominal = np.zeros((20, 2))
    nominal[:, 0] = 0.5
    _, _, free = mppi_step(nominal, (0, 0, 0), HIST, (10, 0), ZeroPredictor(), CFG, MPPIConfig(),
                           np.random.default_rng(6))
    _, _, steer = mppi_step(nominal, (0, 0, 0), HIST, (10, 0), LeftIsBad(), CFG, MPPIConfig(),
                            np.random.default_rng(6))
    assert steer.plan[:, 1].mean() < free.plan[:, 1].mean()


def test_initial_nominal_turns_toward_goal():
    left = initial_nominal((0, 0, 0), (3, 5), CFG, MPPIConfig())
    behind = initial_nominal((0, 0, 0), (-5, -0.1), CFG, MPPIConfig())
    assert left[0, 1] > 0 and behind[0, 1] == -1.5 and behind[0, 0] < left[0, 0]


# ---------------------------------------------------------------- navigation

def test_goal_at_start():
    res = navigate((5, 5, 0), (5, 5), open_field(10), ZeroPredictor())
    assert res.outcome is Outcome.REACHED and res.steps == 0
    assert len(res.log.states) == 1


def test_reaches_goal_in_open_field():
    res = navigate((5, 15, 0), (15, 15), open_field(30), ZeroPredictor(),
                   mppi_cfg=MPPIConfig(seed=1))
    assert res.outcome is Outcome.REACHED
    assert res.steps <= 200
    assert np.hypot(*(np.asarray(res.sim.robot[:2]) - (15, 15))) <= 0.5


def test_goal_behind_is_reached():
    res = navigate((15, 15, 0), (10, 15), open_field(30), ZeroPredictor(),
                   mppi_cfg=MPPIConfig(seed=2))
    assert res.outcome is Outcome.REACHED


def test_walled_in_never_reaches():
    tmap = paint(open_field(20), "Tree", 8, 12, 8, 12)
    tmap = paint(tmap, "Free", 9.4, 10.6, 9.4, 10.6)
    res = navigate((10, 10, 0), (16, 10), tmap, ZeroPredictor(),
                   nav_cfg=NavConfig(max_steps=60))
    assert res.outcome in (Outcome.COLLISION, Outcome.TIMEOUT)


def test_collision_log_is_labelable():
    tmap = paint(open_field(20), "Shrub", 12, 20, 0, 20)
    res = navigate((5, 10, 0), (16, 10), tmap, ZeroPredictor(), nav_cfg=NavConfig(max_steps=300))
    assert res.outcome is Outcome.COLLISION
    log = res.log
    assert log.stuck_time is not None and log.outcome == "Collision"
    assert len(log.states) == len(log.controls) == len(log.observations) == res.steps + 1
    # the tail keeps commanding so windows ending in the pinned stretch exist
    samples = extract_samples(align(log), LabelConfig(stride=1))
    assert max(s.tau for s in samples) > 0.5
