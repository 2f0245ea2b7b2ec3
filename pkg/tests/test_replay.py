import math

import numpy as np
import pytest

from ebcharge.env import EnvState
from ebcharge.replay import (Encoded, HindsightStager, LowTransition, ReplayBuffer, ReplayContractError,
                             delete_option_transitions, her_store, sample_minibatch)


def _s(soc, tau=2, B=1):
    return EnvState(soc, B, tau, (0.02,) * 5, 0, 0)


def _enc(tr):
    goal = -1.0 if math.isnan(tr.option) else tr.option
    f = np.array([tr.state.soc, goal])
    return Encoded(f, tr.action_index, tr.reward, np.array([tr.next_state.soc, goal]), tr.done, np.ones(3, bool))


def _buf(capacity=100):
    return ReplayBuffer(capacity, 2, 3, _enc)


def _tr(i, ep=0, inst=0, done=False, option=200.0, reward=-0.1, penalty=0.0):
    return LowTransition(_s(100.0 + i), option, 1, reward + penalty, _s(110.0 + i, B=0 if done else 1), done, ep,
                         inst, cost=reward, target_penalty=penalty)


def test_push_to_empty():
    b = _buf()
    b.push(_tr(0))
    assert len(b) == 1


def test_fifo_eviction():
    b = _buf(2)
    for i in range(3):
        b.push(_tr(i))
    socs = [r.state.soc for r in b.live_records()]
    assert socs == [101.0, 102.0]


def test_eviction_order_is_deterministic():
    def run():
        b = _buf(5)
        for i in range(12):
            b.push(_tr(i))
        return [r.state.soc for r in b.live_records()]
    assert run() == run()


def _stage_period(b, stager, n, prescribed, achieved, ep=0, inst=0):
    stager.begin(ep, inst)
    for i in range(n):
        done = i == n - 1
        pen = -0.005 * (prescribed - achieved) ** 2 if done else 0.0
        tr = _tr(i, ep, inst, done, prescribed, -0.1, pen)
        b.push(tr)
        stager.stage(tr)
    return her_store(b, stager, achieved, prescribed)


def test_hindsight_copies_take_the_achieved_goal():
    b, st = _buf(), HindsightStager()
    assert _stage_period(b, st, 3, 200.0, 180.0) == 3
    copies = [r for r in b.live_records() if r.hindsight]
    assert len(copies) == 3
    assert all(r.option == 180.0 for r in copies)
    assert copies[-1].done and copies[-1].target_penalty == 0.0 and copies[-1].reward == pytest.approx(-0.1)
    originals = [r for r in b.live_records() if not r.hindsight]
    assert originals[-1].reward == pytest.approx(-0.1 - 2.0)
    assert [r.reward for r in copies[:-1]] == [r.reward for r in originals[:-1]]
    assert b.feat[3:6, 1].tolist() == [180.0] * 3 and b.next_feat[5, 1] == 180.0


def test_realised_target_adds_no_copies():
    b, st = _buf(), HindsightStager()
    assert _stage_period(b, st, 3, 200.0, 200.0) == 0
    assert len(b) == 3 and not st.active


def test_finalise_without_staging_is_a_contract_error():
    with pytest.raises(ReplayContractError):
        her_store(_buf(), HindsightStager(), 1.0, 2.0)


def test_scoped_delete_removes_originals_and_copies():
    b, st = _buf(), HindsightStager()
    _stage_period(b, st, 4, 200.0, 180.0, ep=1, inst=7)
    _stage_period(b, st, 2, 150.0, 140.0, ep=1, inst=8)
    st.begin(1, 9)
    st.stage(_tr(0, 1, 9))
    assert delete_option_transitions(b, 1, 7, st) == 8
    assert len(b) == 4
    assert all(r.option_instance_id == 8 for r in b.live_records())
    assert delete_option_transitions(b, 1, 7) == 0
    # staging of a different instance is untouched
    assert st.active
    assert delete_option_transitions(b, 1, 9, st) == 0 and not st.active


def test_deleted_records_are_never_sampled():
    b = _buf(200)
    for i in range(150):
        b.push(_tr(i, ep=0, inst=i % 3))
    b.delete_option_transitions(0, 1)
    rng = np.random.default_rng(0)
    for _ in range(200):
        idx = b.sample_indices(20, rng)
        assert np.all(b.alive[idx]) and len(set(idx.tolist())) == 20
        assert np.all(b.instance[idx] != 1)


def test_deletion_survives_wraparound():
    b = _buf(10)
    for i in range(25):
        b.push(_tr(i, ep=i // 5, inst=0))
    assert b.delete_option_transitions(4, 0) == 5
    assert b.delete_option_transitions(2, 0) == 0  # already evicted
    assert len(b) == 5


def test_exhaustive_sample_is_a_permutation():
    b = _buf(64)
    for i in range(64):
        b.push(_tr(i))
    mb = sample_minibatch(b, 64, np.random.default_rng(1))
    assert sorted(mb.features[:, 0].tolist()) == [100.0 + i for i in range(64)]


def test_small_buffer_signals_skip():
    b = _buf()
    b.push(_tr(0))
    assert sample_minibatch(b, 2, np.random.default_rng(0)) is None


def test_fixed_seed_sampling_is_reproducible():
    b = _buf(500)
    for i in range(300):
        b.push(_tr(i))
    a = [b.sample_indices(32, np.random.default_rng(9)).tolist() for _ in range(3)]
    assert a[0] == a[1] == a[2]


def test_dump_writes_header_and_rows(tmp_path):
    b = _buf()
    for i in range(3):
        b.push(_tr(i))
    assert b.dump(tmp_path / "d.csv") == 3
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0].startswith("state,option,action_index,reward,next_state,done,episode_id,option_instance_id")
    assert len(lines) == 4
