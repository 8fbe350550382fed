import numpy as np
import pytest

from vlrl.replay import NotEnoughData, ReplayBuffer, Transition


def make_tr(episode, step, terminal=False, reward=None, d=3):
    """Observation encodes (episode, step) so segments can be checked by value."""
    obs = np.array([episode, step, 0.0][:d])
    nxt = np.array([episode, step + 1, 0.0][:d])
    r = float(step) if reward is None else reward
    return Transition(obs, step % 5, r, terminal, episode, step, nxt)


def fill_interleaved(buf, rng, n_pushes, n_streams=4, term_p=0.05):
    """Several episodes advance in an interleaved order; returns the push log."""
    log = []
    live = {i: 0 for i in range(n_streams)}
    next_ep = n_streams
    for _ in range(n_pushes):
        ep = int(rng.choice(list(live)))
        step = live[ep]
        term = rng.random() < term_p
        tr = make_tr(ep, step, terminal=term)
        buf.push(tr)
        log.append(tr)
        if term or rng.random() < 0.01:  # terminal or truncation
            del live[ep]
            live[next_ep] = 0
            next_ep += 1
        else:
            live[ep] = step + 1
    return log


def check_segment(obs, terminals, k):
    """Independent validity oracle using only the returned values."""
    eps = obs[:, 0]
    steps = obs[:, 1]
    assert np.all(eps == eps[0]), "segment crosses episodes"
    assert np.array_equal(steps, steps[0] + np.arange(k + 1)), "segment not contiguous"
    if k > 1:
        assert not terminals[:-1].any(), "terminal inside segment"


def test_push_then_sample_single():
    buf = ReplayBuffer(10, 3)
    tr = make_tr(0, 0)
    buf.push(tr)
    b = buf.sample_rl_batch(1, 1, 0.99, np.random.default_rng(0))
    assert np.array_equal(b.obs[0], tr.obs) and b.actions[0] == tr.action
    assert np.array_equal(b.next_obs[0], tr.next_obs) and b.returns[0] == tr.reward


def test_ring_eviction():
    buf = ReplayBuffer(5, 3)
    for s in range(6):
        buf.push(make_tr(0, s))
    assert len(buf) == 5
    assert 0 not in buf.steps[: buf.size].tolist()
    assert sorted(buf.steps.tolist()) == [1, 2, 3, 4, 5]


def test_single_episode_only_window():
    buf = ReplayBuffer(10, 3)
    for s in range(3):
        buf.push(make_tr(0, s, terminal=s == 2))
    assert buf.all_valid_segment_starts(2).tolist() == [0, 1]
    assert buf.all_valid_segment_starts(3).tolist() == [0]
    seg = buf.sample_segments(4, 3, np.random.default_rng(0))
    assert np.all(seg.slots == 0)
    assert seg.obs[0, :, 1].tolist() == [0, 1, 2, 3]
    assert seg.terminals[0].tolist() == [False, False, True]


def test_k_zero_degenerates_to_observations():
    buf = ReplayBuffer(10, 3)
    for s in range(4):
        buf.push(make_tr(0, s))
    seg = buf.sample_segments(6, 0, np.random.default_rng(0))
    assert seg.obs.shape == (6, 1, 3) and seg.actions.shape == (6, 0) and seg.k == 0


def test_not_enough_data():
    buf = ReplayBuffer(10, 3)
    with pytest.raises(NotEnoughData):
        buf.sample_segments(2, 1, np.random.default_rng(0))
    buf.push(make_tr(0, 0, terminal=True))
    buf.push(make_tr(1, 0, terminal=True))
    with pytest.raises(NotEnoughData):
        buf.sample_segments(2, 2, np.random.default_rng(0))


def test_interleaved_episodes_never_crossed():
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(300, 3)
    fill_interleaved(buf, rng, 1000)
    for k in (1, 2, 6):
        seg = buf.sample_segments(256, k, rng)
        for i in range(len(seg)):
            check_segment(seg.obs[i], seg.terminals[i], k)


def test_thousand_pushes_fifty_episodes_k6():
    rng = np.random.default_rng(1)
    buf = ReplayBuffer(2000, 3)
    for ep in range(50):
        for s in range(20):
            buf.push(make_tr(ep, s, terminal=s == 19))
    seg = buf.sample_segments(500, 6, rng)
    for i in range(len(seg)):
        check_segment(seg.obs[i], seg.terminals[i], 6)
    # exhaustive: starts 0..14 of every episode (terminal may close a window)
    assert len(buf.all_valid_segment_starts(6)) == 50 * 15


def brute_force_valid_starts(log, k, size):
    """Reference scan over the push log (no successor links)."""
    by_key = {}
    for slot, tr in enumerate(log[-size:]):
        by_key[(tr.episode, tr.step)] = tr
    out = set()
    for tr in by_key.values():
        ok = True
        for j in range(k):
            nxt = by_key.get((tr.episode, tr.step + j))
            if nxt is None or (j < k - 1 and nxt.terminal):
                ok = False
                break
        if ok:
            out.add((tr.episode, tr.step))
    return out


@pytest.mark.parametrize("k", [1, 3, 6])
def test_valid_starts_match_brute_force(k):
    rng = np.random.default_rng(k)
    buf = ReplayBuffer(10_000, 3)
    log = fill_interleaved(buf, rng, 1500)
    got = {(int(buf.episodes[s]), int(buf.steps[s])) for s in buf.all_valid_segment_starts(k)}
    assert got == brute_force_valid_starts(log, k, len(buf))


def test_eviction_breaks_windows():
    buf = ReplayBuffer(4, 3)
    for s in range(6):
        buf.push(make_tr(0, s))
    # slots hold steps 4, 5, 2, 3 -> windows of 2 start at steps 2, 3, 4
    starts = buf.all_valid_segment_starts(2)
    assert sorted(int(buf.steps[s]) for s in starts) == [2, 3, 4]


def test_sampling_reproducible():
    buf = ReplayBuffer(500, 3)
    fill_interleaved(buf, np.random.default_rng(3), 400)
    a = buf.sample_segments(32, 4, np.random.default_rng(11))
    b = buf.sample_segments(32, 4, np.random.default_rng(11))
    assert np.array_equal(a.slots, b.slots) and np.array_equal(a.obs, b.obs)


def test_segment_sampling_is_uniform_over_valid_starts():
    buf = ReplayBuffer(100, 3)
    for ep in range(4):
        for s in range(10):
            buf.push(make_tr(ep, s, terminal=s == 9))
    valid = buf.all_valid_segment_starts(3)
    draws = buf.sample_segments(40_000, 3, np.random.default_rng(0)).slots
    counts = np.array([(draws == v).sum() for v in valid])
    expect = len(draws) / len(valid)
    assert set(draws.tolist()) <= set(valid.tolist())
    assert np.all(np.abs(counts - expect) < 5 * np.sqrt(expect))


# -- n-step targets -----------------------------------------------------------

def test_n_step_one_is_plain_transition():
    buf = ReplayBuffer(10, 3)
    for s in range(4):
        buf.push(make_tr(0, s, reward=float(s + 1)))
    b = buf.rl_batch_at(np.arange(4), 1, 0.9)
    assert b.returns.tolist() == [1, 2, 3, 4]
    assert np.allclose(b.discount, 0.9) and not b.done.any()
    assert np.array_equal(b.next_obs[:, 1], [1, 2, 3, 4])


def test_n_step_hand_loop():
    gamma = 0.99
    rewards = [0.5, -1.0, 2.0, 0.25, 3.0]
    buf = ReplayBuffer(10, 3)
    for s, r in enumerate(rewards):
        buf.push(make_tr(0, s, reward=r, terminal=s == 4))
    b = buf.rl_batch_at(np.arange(5), 3, gamma)
    for t in range(5):
        end = min(t + 3, 5)
        expect = 0.0
        for i in range(t, end):
            expect += gamma ** (i - t) * rewards[i]
        assert b.returns[t] == pytest.approx(expect, rel=1e-14)
        assert b.discount[t] == pytest.approx(gamma ** (end - t))
        assert b.done[t] == (1.0 if end == 5 else 0.0)
        assert b.next_obs[t, 1] == end


def test_terminal_inside_window_truncates():
    buf = ReplayBuffer(10, 3)
    buf.push(make_tr(0, 0, reward=1.0))
    buf.push(make_tr(0, 1, reward=2.0, terminal=True))
    buf.push(make_tr(1, 0, reward=100.0))
    b = buf.rl_batch_at(np.array([0]), 3, 0.5)
    assert b.returns[0] == 1.0 + 0.5 * 2.0 and b.done[0] == 1.0


def test_dump_load_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(200, 3)
    fill_interleaved(buf, rng, 150)
    buf.dump(tmp_path / "buf.ckpt")
    back = ReplayBuffer.load(tmp_path / "buf.ckpt")
    assert back.size == buf.size and back.ptr == buf.ptr
    assert np.array_equal(back.all_valid_segment_starts(3), buf.all_valid_segment_starts(3))
    tr = make_tr(0, 999)
    for b in (buf, back):
        b.push(tr)
    assert np.array_equal(back.succ[: back.size], buf.succ[: buf.size])
