"""Oracle interface and security games, run as finite statistical trials.

The adversary controls the channel and may query four oracles between or
during sessions: reveal and corrupt NVM, issue raw PUF reads, and block
messages.  A session is *clean* when neither party's PUF was ever issued to
the adversary and its NVM was never read or written while the session was
live.  The MU game counts acceptances that have no honest matching partner;
the IND game asks distinguishers to tell a real transcript from random bytes.
"""

from __future__ import annotations

import copy
import json
from collections import deque
from collections.abc import Callable
from dataclasses import asdict, dataclass, field

import numpy as np

from .crypto import AUTH_REQ, aead_verify
from .errors import UnknownPeer
from .protocol import (AbortReason, Node, NvmState, PendingAuth, ProtocolParams, SessionOutcome,
                       Status)
from .puf_sim import Challenge, DpufDevice, EnvParams, read_stable, stable_challenge_for
from .transport import TO_PROVER, TO_VERIFIER, Channel, Event, Interposer, identity, run_session
from .wire import AuthMessage, RoleFlag


@dataclass
class SessionHandle:
    sid: int
    prover: str
    verifier: str
    interposer: Interposer = identity
    state: str = "queued"  # queued | live | done
    clean: bool = True
    blocked: set[int] = field(default_factory=set)
    pending: PendingAuth | None = None
    request: bytes | None = None
    prover_outcome: SessionOutcome | None = None
    verifier_outcome: SessionOutcome | None = None
    channel: Channel | None = None


@dataclass
class OracleContext:
    nodes: dict[str, Node]
    issued: set[str] = field(default_factory=set)
    log: list[tuple] = field(default_factory=list)
    sessions: list[SessionHandle] = field(default_factory=list)
    queues: dict[tuple[str, str], deque] = field(default_factory=dict)
    # Matching bookkeeping: live prover requests, and which request each verifier reply answered.
    live_requests: dict[bytes, PendingAuth] = field(default_factory=dict)
    replies: dict[bytes, bytes] = field(default_factory=dict)
    unmatched_accepts: int = 0

    def is_live(self, label: str) -> bool:
        return any(h.state == "live" and label in (h.prover, h.verifier) for h in self.sessions)

    def _taint_live(self, label: str) -> None:
        for h in self.sessions:
            if h.state == "live" and label in (h.prover, h.verifier):
                h.clean = False

    def session_clean(self, h: SessionHandle) -> bool:
        return h.clean and h.prover not in self.issued and h.verifier not in self.issued

    # Instrumented protocol calls: every acceptance is checked for a matching partner.

    def prover_start(self, prover: str, peer: str) -> tuple[bytes, PendingAuth]:
        m1, pending = self.nodes[prover].auth_initiate(peer)
        self.live_requests[m1] = pending
        return m1, pending

    def verifier_receive(self, verifier: str, m1: bytes) -> tuple[bytes | None, SessionOutcome]:
        m2, outcome = self.nodes[verifier].auth_respond(m1)
        if outcome.ok:
            pending = self.live_requests.get(m1)
            matched = pending is not None and not pending.closed and pending.peer_label == verifier
            self.unmatched_accepts += not matched
            self.replies[m2] = m1
        return m2, outcome

    def prover_receive(self, prover: str, pending: PendingAuth, m2: bytes | None) -> SessionOutcome:
        node = self.nodes[prover]
        outcome = node.auth_abort(pending) if m2 is None else node.auth_finalize(pending, m2)
        if outcome.ok:
            self.unmatched_accepts += self.replies.get(m2) != pending.request.encode()
        self.live_requests = {k: v for k, v in self.live_requests.items() if not v.closed}
        return outcome


def launch(ctx: OracleContext, prover: str, verifier: str, interposer: Interposer = identity,
           start: bool = True) -> SessionHandle:
    """New session; queued behind any live session of the same pair.

    With ``start=False`` the prover sends nothing yet; the session becomes live
    (M1 computed, held in volatile state) and :func:`complete` finishes it.
    """
    h = SessionHandle(len(ctx.sessions), prover, verifier, interposer)
    ctx.sessions.append(h)
    ctx.log.append(("launch", prover, verifier, h.sid))
    q = ctx.queues.setdefault(tuple(sorted((prover, verifier))), deque())
    q.append(h)
    if q[0] is h:
        _begin(ctx, h)
        if start:
            complete(ctx, h)
    return h


def _begin(ctx: OracleContext, h: SessionHandle) -> None:
    h.state = "live"
    try:
        h.request, h.pending = ctx.prover_start(h.prover, h.verifier)
    except UnknownPeer:
        h.prover_outcome = SessionOutcome(Status.ABORT, "prover", AbortReason.UNKNOWN_PEER, h.verifier)
        _finish(ctx, h)


def complete(ctx: OracleContext, h: SessionHandle) -> SessionHandle:
    if h.state == "queued":
        raise RuntimeError("session is queued behind a live session of the same pair")
    if h.state == "done":
        return h
    h.channel = Channel(h.interposer)
    m1 = h.channel.send(TO_VERIFIER, h.request) if 1 not in h.blocked else _blocked(h, TO_VERIFIER, h.request)
    m2 = None
    if m1 is not None:
        m2, h.verifier_outcome = ctx.verifier_receive(h.verifier, m1)
    if m2 is not None:
        m2 = h.channel.send(TO_PROVER, m2) if 2 not in h.blocked else _blocked(h, TO_PROVER, m2)
    h.prover_outcome = ctx.prover_receive(h.prover, h.pending, m2)
    _finish(ctx, h)
    return h


def _blocked(h: SessionHandle, direction: str, data: bytes) -> None:
    """Swallow a message: logged as sent, never delivered."""
    h.channel.step += 1
    h.channel.transcript.append(Event(h.channel.step, direction, data, None))
    return None


def _finish(ctx: OracleContext, h: SessionHandle) -> None:
    h.state = "done"
    q = ctx.queues.get(tuple(sorted((h.prover, h.verifier))))
    if q and q[0] is h:
        q.popleft()
        if q:
            _begin(ctx, q[0])


def reveal_nvm(ctx: OracleContext, label: str) -> NvmState:
    """Copy of the device's whole NVM state."""
    ctx.log.append(("reveal", label))
    ctx._taint_live(label)
    return copy.deepcopy(ctx.nodes[label].nvm)


def corrupt_nvm(ctx: OracleContext, label: str, mutation: Callable[[NvmState], None]) -> None:
    ctx.log.append(("corrupt", label))
    ctx._taint_live(label)
    mutation(ctx.nodes[label].nvm)


def issue_dpuf(ctx: OracleContext, label: str, challenge: Challenge, env: EnvParams,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Raw physical access: the noisy response and the stable response for ``challenge``."""
    ctx.log.append(("issue", label))
    ctx.issued.add(label)
    node = ctx.nodes[label]
    sc = stable_challenge_for(challenge, node.nvm.stable_map, node.params.l)
    return node.device.read(challenge, env, rng), read_stable(node.device, sc, env, rng)


def block(ctx: OracleContext, h: SessionHandle, message_index: int) -> None:
    if message_index not in (1, 2):
        raise ValueError("message_index is 1 (M1) or 2 (M2)")
    ctx.log.append(("block", h.sid, message_index))
    h.blocked.add(message_index)


# --- MU game -----------------------------------------------------------------

@dataclass
class GameResult:
    game: str
    strategy: str
    trials: int
    wins: int
    clean_trials: int
    clean_wins: int
    seed: int

    @property
    def win_rate(self) -> float:
        return self.wins / self.trials if self.trials else 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class MuStrategy:
    name = "base"

    def run(self, ctx: OracleContext, prover: str, verifier: str, rng: np.random.Generator) -> None:
        raise NotImplementedError


def _field_lengths(params: ProtocolParams) -> list[int]:
    k = params.l // 8
    return [32, k, k, params.puf.region_len // 8 - k, 1, 16]


def _random_message(role: RoleFlag, dev_id: bytes, params: ProtocolParams,
                    rng: np.random.Generator) -> bytes:
    lens = _field_lengths(params)
    return AuthMessage(role, dev_id, *[rng.bytes(n) for n in lens[1:]]).encode()


class Replay(MuStrategy):
    """Record an honest session, then replay its messages into later ones."""

    name = "replay"

    def run(self, ctx, prover, verifier, rng):
        old = launch(ctx, prover, verifier)
        old_m1 = old.channel.transcript.messages(TO_VERIFIER)[0]
        old_m2 = old.channel.transcript.messages(TO_PROVER)[0]
        m1, pending = ctx.prover_start(prover, verifier)
        ctx.verifier_receive(verifier, old_m1)
        ctx.verifier_receive(verifier, m1)  # honest delivery
        ctx.verifier_receive(verifier, m1)  # same M1 again after the verifier has moved on
        ctx.prover_receive(prover, pending, old_m2)


class BitTamper(MuStrategy):
    name = "bit-tamper"

    def run(self, ctx, prover, verifier, rng):
        def flip(data: bytes) -> bytes:
            b = bytearray(data)
            i = int(rng.integers(6, len(b)))
            b[i] ^= 1 << int(rng.integers(8))
            return bytes(b)

        m1, pending = ctx.prover_start(prover, verifier)
        ctx.verifier_receive(verifier, flip(m1))
        m2, _ = ctx.verifier_receive(verifier, m1)
        ctx.prover_receive(prover, pending, flip(m2) if m2 else None)


class NvmClone(MuStrategy):
    """Steal the prover's NVM between sessions and run it on a different PUF."""

    name = "nvm-clone"

    def run(self, ctx, prover, verifier, rng):
        stolen = reveal_nvm(ctx, prover)
        real = ctx.nodes[prover]
        fake_dev = DpufDevice(int(rng.integers(2**62)) | 1 << 62, real.device.config)
        clone = Node(fake_dev, prover, real.params, np.random.default_rng(rng.integers(2**63)))
        clone.nvm = stolen
        m1, _ = clone.auth_initiate(verifier)
        ctx.verifier_receive(verifier, m1)


class RandomForge(MuStrategy):
    name = "random-forge"

    def run(self, ctx, prover, verifier, rng):
        params = ctx.nodes[prover].params
        p_nvm, v_nvm = reveal_nvm(ctx, prover), reveal_nvm(ctx, verifier)
        forged_m1 = _random_message(RoleFlag.AUTH_REQ, p_nvm.peers[verifier].my_id, params, rng)
        ctx.verifier_receive(verifier, forged_m1)
        _, pending = ctx.prover_start(prover, verifier)
        forged_m2 = _random_message(RoleFlag.AUTH_OK, v_nvm.peers[prover].my_id, params, rng)
        ctx.prover_receive(prover, pending, forged_m2)


class WhiteBox(MuStrategy):
    """Control arm: with physical PUF access the adversary can impersonate.

    Every session it touches is non-clean, so its wins never count against
    the protocol, but they prove the harness does detect wins.
    """

    name = "whitebox"

    def run(self, ctx, prover, verifier, rng):
        real = ctx.nodes[prover]
        rec = real.nvm.peers[verifier]
        issue_dpuf(ctx, prover, rec.challenge, real.env, rng)
        clone = Node(real.device, prover, real.params, np.random.default_rng(rng.integers(2**63)))
        clone.nvm = reveal_nvm(ctx, prover)
        m1, _ = clone.auth_initiate(verifier)
        ctx.verifier_receive(verifier, m1)


STRATEGIES: dict[str, type[MuStrategy]] = {
    s.name: s for s in (Replay, BitTamper, NvmClone, RandomForge, WhiteBox)
}


def run_mu_game(ctx: OracleContext, strategy: MuStrategy, trials: int, prover: str, verifier: str,
                seed: int = 0) -> GameResult:
    """Each trial starts from the same NVM snapshot of both parties."""
    rng = np.random.default_rng(seed)
    saved = {lab: copy.deepcopy(ctx.nodes[lab].nvm) for lab in (prover, verifier)}
    wins = clean_trials = clean_wins = 0
    try:
        for _ in range(trials):
            for lab in saved:
                ctx.nodes[lab].nvm = copy.deepcopy(saved[lab])
                ctx.nodes[lab]._live.clear()
            ctx.issued.discard(prover)
            ctx.issued.discard(verifier)
            ctx.live_requests.clear()
            ctx.replies.clear()
            before = ctx.unmatched_accepts
            strategy.run(ctx, prover, verifier, rng)
            won = ctx.unmatched_accepts > before
            clean = prover not in ctx.issued and verifier not in ctx.issued
            wins += won
            clean_trials += clean
            clean_wins += won and clean
    finally:
        for lab in saved:
            ctx.nodes[lab].nvm = saved[lab]
            ctx.nodes[lab]._live.clear()
    return GameResult("MU", strategy.name, trials, wins, clean_trials, clean_wins, seed)


# --- IND game ----------------------------------------------------------------

@dataclass
class IndView:
    """What a distinguisher sees besides the challenge bytes."""

    previous: list[bytes]  # field payloads of earlier real transcripts
    lengths: list[int]
    session_key: bytes | None = None


class Distinguisher:
    """Return 0 to claim the challenge is the real transcript, 1 for random."""

    name = "base"
    needs_key = False

    def guess(self, candidate: bytes, view: IndView, rng: np.random.Generator) -> int:
        raise NotImplementedError


class ByteFrequency(Distinguisher):
    name = "byte-frequency"

    def guess(self, candidate, view, rng):
        counts = np.bincount(np.frombuffer(candidate, dtype=np.uint8), minlength=256)
        expected = len(candidate) / 256
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        return 0 if chi2 > 255 else 1


class RepeatedField(Distinguisher):
    """Looks for one field's contents repeated elsewhere in the transcript."""

    name = "repeated-field"

    def guess(self, candidate, view, rng):
        blocks = [candidate[i:i + 16] for i in range(0, len(candidate) - 15, 16)]
        if len(set(blocks)) < len(blocks):
            return 0
        return int(rng.integers(2))


class CrossSessionIdMatcher(Distinguisher):
    """Links the candidate to earlier sessions through a reused device ID."""

    name = "cross-session-id"

    def guess(self, candidate, view, rng):
        half = len(candidate) // 2
        ids = {candidate[:32], candidate[half:half + 32]}
        for prev in view.previous:
            h = len(prev) // 2
            if ids & {prev[:32], prev[h:h + 32]}:
                return 0
        return int(rng.integers(2))


class KeyedControl(Distinguisher):
    """Control arm holding the session key: checks the M1 tag."""

    name = "keyed-control"
    needs_key = True

    def guess(self, candidate, view, rng):
        lens = view.lengths
        fields, pos = [], 0
        for n in lens:
            fields.append(candidate[pos:pos + n])
            pos += n
        msg = AuthMessage(RoleFlag.AUTH_REQ, *fields)
        return 0 if aead_verify(view.session_key, 0, msg.associated_data(), bytes([AUTH_REQ]),
                                (msg.alpha, msg.tag)) else 1


DISTINGUISHERS: dict[str, type[Distinguisher]] = {
    d.name: d for d in (ByteFrequency, RepeatedField, CrossSessionIdMatcher, KeyedControl)
}


def run_ind_game(ctx: OracleContext, distinguisher: Distinguisher, trials: int, prover: str,
                 verifier: str, seed: int = 0) -> GameResult:
    """Each trial runs a fresh honest session and shows either its field payload
    (M1 then M2, no framing constants) or random bytes of equal length."""
    rng = np.random.default_rng(seed)
    lengths = _field_lengths(ctx.nodes[prover].params)
    history: list[bytes] = []
    wins = clean_trials = 0
    for _ in range(trials):
        report = run_session(ctx.nodes[prover], ctx.nodes[verifier], verifier)
        if not report.ok:
            continue
        m1 = AuthMessage.decode(report.transcript.messages(TO_VERIFIER)[0])
        m2 = AuthMessage.decode(report.transcript.messages(TO_PROVER)[0])
        real = m1.field_payload() + m2.field_payload()
        b = int(rng.integers(2))
        candidate = real if b == 0 else rng.bytes(len(real))
        view = IndView(list(history), lengths, report.prover.mk if distinguisher.needs_key else None)
        wins += distinguisher.guess(candidate, view, rng) == b
        clean_trials += not distinguisher.needs_key
        history.append(real)
    return GameResult("IND", distinguisher.name, trials, wins, clean_trials,
                      wins if not distinguisher.needs_key else 0, seed)


def pseudonym_chain(prover: Node, verifier: Node, sessions: int) -> list[bytes]:
    """Device IDs seen on the wire over ``sessions`` consecutive honest sessions."""
    ids = []
    for _ in range(sessions):
        report = run_session(prover, verifier, verifier.label)
        for direction in (TO_VERIFIER, TO_PROVER):
            for raw in report.transcript.messages(direction):
                ids.append(AuthMessage.decode(raw).dev_id)
    return ids
