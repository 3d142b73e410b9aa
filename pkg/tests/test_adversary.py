import dataclasses

import numpy as np
import pytest

from phenoauth import adversary as adv
from phenoauth.protocol import AbortReason
from phenoauth.puf_sim import EnvParams


@pytest.fixture
def ctx(fresh_group):
    return adv.OracleContext({n.label: n for n in fresh_group})


def test_launch_runs_honest_session(ctx):
    h = adv.launch(ctx, "dev0", "dev1")
    assert h.state == "done" and h.prover_outcome.ok and h.verifier_outcome.ok
    assert ctx.unmatched_accepts == 0 and ctx.session_clean(h)


def test_sessions_of_a_pair_are_queued(ctx):
    first = adv.launch(ctx, "dev0", "dev1", start=False)
    second = adv.launch(ctx, "dev1", "dev0")
    other = adv.launch(ctx, "dev0", "dev2")
    assert first.state == "live" and second.state == "queued"
    assert other.state == "done" and other.prover_outcome.ok
    with pytest.raises(RuntimeError):
        adv.complete(ctx, second)
    adv.complete(ctx, first)
    assert second.state == "live"
    adv.complete(ctx, second)
    assert first.prover_outcome.ok and second.prover_outcome.ok


def test_unenrolled_pair(ctx):
    del ctx.nodes["dev0"].nvm.peers["dev2"]
    h = adv.launch(ctx, "dev0", "dev2")
    assert h.state == "done" and h.prover_outcome.reason is AbortReason.UNKNOWN_PEER


def test_reveal_returns_copy_and_taints(ctx):
    h = adv.launch(ctx, "dev0", "dev1", start=False)
    state = adv.reveal_nvm(ctx, "dev0")
    assert state.peers["dev1"].delta == ctx.nodes["dev0"].nvm.peers["dev1"].delta
    assert state.model is not None and len(state.stable_map) > 0
    state.peers["dev1"].delta = bytes(32)
    assert ctx.nodes["dev0"].nvm.peers["dev1"].delta != bytes(32)
    assert not ctx.session_clean(h)
    adv.complete(ctx, h)
    assert h.prover_outcome.ok  # reveal is read-only


def test_corrupted_delta_aborts(ctx):
    """Flipping any bit of the verifier's stored helper value must break the next session."""
    rng = np.random.default_rng(4)
    v = ctx.nodes["dev1"]
    good = v.nvm.peers["dev0"].delta
    aborts = 0
    for _ in range(200):
        i = int(rng.integers(len(good) * 8))
        bad = bytearray(good)
        bad[i // 8] ^= 0x80 >> (i % 8)
        adv.corrupt_nvm(ctx, "dev1", lambda s, b=bytes(bad): setattr(s.peers["dev0"], "delta", b))
        h = adv.launch(ctx, "dev0", "dev1")
        aborts += not h.verifier_outcome.ok and h.prover_outcome.reason is AbortReason.TIMEOUT
        adv.corrupt_nvm(ctx, "dev1", lambda s: setattr(s.peers["dev0"], "delta", good))
    assert aborts == 200
    assert ctx.unmatched_accepts == 0


def test_identity_mutation_is_harmless(ctx):
    # relabelling the local record does not change any secret input
    adv.corrupt_nvm(ctx, "dev1", lambda s: setattr(s, "self_id", bytes(32)))
    assert adv.launch(ctx, "dev0", "dev1").verifier_outcome.ok


def test_replaced_peer_id_is_unknown(ctx):
    adv.corrupt_nvm(ctx, "dev1", lambda s: setattr(s.peers["dev0"], "peer_id", bytes(32)))
    h = adv.launch(ctx, "dev0", "dev1")
    assert h.verifier_outcome.reason is AbortReason.UNKNOWN_PEER


def test_issue_marks_device(ctx):
    node = ctx.nodes["dev0"]
    rec = node.nvm.peers["dev1"]
    noisy, stable = adv.issue_dpuf(ctx, "dev0", rec.challenge, EnvParams(40.0, 1.5),
                                   np.random.default_rng(0))
    assert stable.size == node.params.l and noisy.size == node.params.puf.region_len
    h = adv.launch(ctx, "dev0", "dev1")
    assert not ctx.session_clean(h)


def test_block_m1_and_m2(ctx):
    h1 = adv.launch(ctx, "dev0", "dev1", start=False)
    adv.block(ctx, h1, 1)
    adv.complete(ctx, h1)
    assert h1.verifier_outcome is None and h1.prover_outcome.reason is AbortReason.TIMEOUT
    assert h1.channel.transcript.events[0].delivered is None

    h2 = adv.launch(ctx, "dev0", "dev1", start=False)
    adv.block(ctx, h2, 2)
    adv.complete(ctx, h2)
    assert h2.verifier_outcome.ok and h2.prover_outcome.reason is AbortReason.TIMEOUT
    h3 = adv.launch(ctx, "dev0", "dev1")
    assert h3.verifier_outcome.reason is AbortReason.DESYNC
    with pytest.raises(ValueError):
        adv.block(ctx, h3, 3)


@pytest.mark.parametrize("name", ["replay", "bit-tamper", "nvm-clone", "random-forge"])
def test_mu_strategies_lose(ctx, name):
    res = adv.run_mu_game(ctx, adv.STRATEGIES[name](), 30, "dev0", "dev1", seed=1)
    assert res.wins == 0 and res.trials == 30


def test_whitebox_control_wins(ctx):
    before = ctx.nodes["dev1"].nvm.snapshot()
    res = adv.run_mu_game(ctx, adv.WhiteBox(), 20, "dev0", "dev1", seed=1)
    assert res.wins == 20 and res.clean_wins == 0
    assert ctx.nodes["dev1"].nvm.snapshot() == before  # restored after the game
    assert dataclasses.asdict(res)["game"] == "MU"


@pytest.mark.parametrize("name", ["byte-frequency", "repeated-field", "cross-session-id"])
def test_ind_distinguishers_near_chance(ctx, name):
    res = adv.run_ind_game(ctx, adv.DISTINGUISHERS[name](), 200, "dev0", "dev1", seed=2)
    assert abs(res.win_rate - 0.5) < 0.12


def test_ind_keyed_control(ctx):
    res = adv.run_ind_game(ctx, adv.KeyedControl(), 50, "dev0", "dev1", seed=2)
    assert res.wins == 50


def test_pseudonym_chain(fresh_group):
    ids = adv.pseudonym_chain(fresh_group[0], fresh_group[1], 10)
    assert len(ids) == 20 and len(set(ids)) == 20
