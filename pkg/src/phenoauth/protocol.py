"""Enrollment and mutual-authentication state machines.

A :class:`Node` is one device: its simulated PUF, its non-volatile state and
the volatile bookkeeping of in-flight sessions.  Every protocol step takes and
returns wire bytes, so the same code runs over the in-process channel, the
socket transport and the adversary harness.

Mask algebra (all masks are built from the prover's current stable response
``SR_p_i``, which the verifier recovers as ``Delta_i xor SR_v_i``)::

    mk        = KDF(SR_p_i, 256, label || C_i, "mk")
    C_{i+1}   = next(C_i, mk)                      # hash chain
    stream    = R_{i+1} xor KDF(SR_p_i, |R|, label || C_i, "noisy-mask/<dir>")
    Delta1    = stream[:l],  noisy_payload = stream[l:]
    Delta2    = SR_p_i xor SR_{i+1}
"""

from __future__ import annotations

import base64
import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import authenticator as dpan
from .crypto import (AUTH_OK, AUTH_REQ, PROTOCOL_LABEL, NonceLedger, SymmetricKey, aead_encrypt,
                     aead_verify, digest, kdf)
from .errors import DecodeError, InsufficientData, PhaseError, SessionBusy, UnknownPeer
from .metrics import OpCounter
from .phenotype import LabeledDataset, generate_dataset, imgen, stable_cell_map
from .puf_sim import (Challenge, DpufDevice, EnvParams, PufConfig, derive_next_challenge,
                      random_challenge, read_stable, stable_challenge_for)
from .wire import AuthMessage, MsgType, RoleFlag, decode, decode_dataset, encode, encode_dataset

ID_SIZE = 32


class Status(str, enum.Enum):
    SUCCESS = "Success"
    ABORT = "Abort"


class AbortReason(str, enum.Enum):
    UNKNOWN_PEER = "UnknownPeer"
    TAG_MISMATCH = "TagMismatch"
    CLASSIFIER_REJECT = "ClassifierReject"
    LOW_CONFIDENCE = "LowConfidence"
    DESYNC = "Desync"
    TIMEOUT = "Timeout"
    MALFORMED = "Malformed"
    BUSY = "Busy"


@dataclass(frozen=True)
class ProtocolParams:
    puf: PufConfig = field(default_factory=PufConfig)
    l: int = 256
    r: int = 100
    t_e: float = 0.01
    enroll_challenges: int = 16
    reads_per_point: int = 2
    stable_votes: int = 7
    split_ratio: tuple[float, float, float] = (0.5, 0.25, 0.25)

    def validate(self) -> None:
        self.puf.validate()
        if self.l <= 0 or self.l % 8:
            raise ValueError("l must be a positive multiple of 8")
        if self.l > self.puf.region_len:
            raise ValueError("l cannot exceed the response length")
        if self.stable_votes < 1 or self.stable_votes % 2 == 0:
            raise ValueError("stable_votes must be a positive odd number")


@dataclass
class PeerRecord:
    peer_id: bytes
    my_id: bytes  # this device's pseudonym towards the peer
    label: str
    challenge: Challenge
    delta: bytes
    prev_peer_id: bytes | None = None


@dataclass
class NvmState:
    self_id: bytes
    label: str
    peers: dict[str, PeerRecord] = field(default_factory=dict)  # keyed by peer label
    model: dpan.DpanModel | None = None
    threshold: dpan.ConfidenceThreshold | None = None
    stable_map: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def find(self, peer_id: bytes) -> PeerRecord | None:
        for rec in self.peers.values():
            if rec.peer_id == peer_id:
                return rec
        return None

    def is_stale(self, peer_id: bytes) -> bool:
        return any(rec.prev_peer_id == peer_id for rec in self.peers.values())

    def to_dict(self, model_file: str | None = None) -> dict:
        b64 = lambda b: base64.b64encode(b).decode()  # noqa: E731
        model = None
        if self.model is not None:
            blob = dpan.model_to_bytes(self.model, self.threshold)
            model = {"file": model_file, "sha256": digest(blob).hex()}
        return {
            "version": 1,
            "self_id": b64(self.self_id),
            "label": self.label,
            "stable_map": b64(np.asarray(self.stable_map, dtype="<u4").tobytes()),
            "model": model,
            "peers": [{
                "label": rec.label,
                "peer_id": b64(rec.peer_id),
                "my_id": b64(rec.my_id),
                "challenge": b64(rec.challenge.to_bytes()),
                "delta": b64(rec.delta),
                "prev_peer_id": b64(rec.prev_peer_id) if rec.prev_peer_id else None,
            } for rec in sorted(self.peers.values(), key=lambda r: r.label)],
        }

    def snapshot(self) -> bytes:
        """Canonical byte image of the whole state; equal states give equal bytes."""
        return json.dumps(self.to_dict(), sort_keys=True).encode()

    @classmethod
    def from_dict(cls, d: dict) -> NvmState:
        unb64 = base64.b64decode
        peers = {}
        for p in d["peers"]:
            peers[p["label"]] = PeerRecord(
                peer_id=unb64(p["peer_id"]),
                my_id=unb64(p["my_id"]),
                label=p["label"],
                challenge=Challenge.from_bytes(unb64(p["challenge"])),
                delta=unb64(p["delta"]),
                prev_peer_id=unb64(p["prev_peer_id"]) if p.get("prev_peer_id") else None,
            )
        return cls(
            self_id=unb64(d["self_id"]),
            label=d["label"],
            peers=peers,
            stable_map=np.frombuffer(unb64(d["stable_map"]), dtype="<u4").astype(np.int64),
        )


def save_nvm(state: NvmState, path: str | Path) -> Path:
    """Write the JSON document and, next to it, the DPAN model it references."""
    path = Path(path)
    model_file = None
    if state.model is not None:
        model_file = path.with_suffix(".dpan").name
        dpan.save_model(state.model, state.threshold, path.parent / model_file)
    path.write_text(json.dumps(state.to_dict(model_file), indent=1, sort_keys=True))
    return path


def load_nvm(path: str | Path) -> NvmState:
    path = Path(path)
    d = json.loads(path.read_text())
    state = NvmState.from_dict(d)
    if d.get("model"):
        model_path = path.parent / d["model"]["file"]
        if digest(model_path.read_bytes()).hex() != d["model"]["sha256"]:
            raise DecodeError(f"model file {model_path} does not match its recorded digest")
        state.model, state.threshold = dpan.load_model(model_path)
    return state


@dataclass
class SessionOutcome:
    status: Status
    role: str
    reason: AbortReason | None = None
    peer_label: str | None = None
    mk: bytes | None = None
    confidence: float | None = None
    ops: OpCounter = field(default_factory=OpCounter)

    @property
    def ok(self) -> bool:
        return self.status is Status.SUCCESS


@dataclass
class PendingAuth:
    """Prover-side volatile state between M1 and M2."""

    peer_label: str
    mk: SymmetricKey
    sr_i: np.ndarray
    sr_next: np.ndarray
    c_next: Challenge
    ops: OpCounter
    request: AuthMessage
    closed: bool = False


@dataclass
class PendingEnroll:
    challenge: Challenge
    sr: np.ndarray


def _pack(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def _unpack(data: bytes, nbits: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:nbits]


def _xor(a: bytes, b: bytes) -> bytes:
    return (np.frombuffer(a, np.uint8) ^ np.frombuffer(b, np.uint8)).tobytes()


def _salt(challenge: Challenge) -> bytes:
    return PROTOCOL_LABEL + challenge.to_bytes()


class Node:
    """One device running the protocol."""

    def __init__(self, device: DpufDevice, label: str, params: ProtocolParams | None = None,
                 rng: np.random.Generator | None = None, self_id: bytes | None = None,
                 reference_images: list[np.ndarray] | None = None) -> None:
        self.params = params or ProtocolParams(puf=device.config)
        self.params.validate()
        if device.config != self.params.puf:
            raise ValueError("device geometry differs from protocol parameters")
        self.device = device
        self.rng = rng if rng is not None else np.random.default_rng(device.device_seed)
        self.trng = self.rng.spawn(1)[0]
        self.nvm = NvmState(self_id=self_id or self.trng.bytes(ID_SIZE), label=label)
        self.env: EnvParams = self.params.puf.nominal
        self.reference_images = list(reference_images or [])
        self.dataset: LabeledDataset | None = None
        self.peer_data: dict[str, LabeledDataset] = {}
        self.training: dpan.Trained | None = None
        self.secret_log: list[bytes] | None = None
        self.nonce_ledger: NonceLedger | None = None
        self._live: set[str] = set()
        self._enroll: dict[bytes, PendingEnroll] = {}

    @property
    def label(self) -> str:
        return self.nvm.label

    def _log(self, *secrets: bytes) -> None:
        if self.secret_log is not None:
            self.secret_log.extend(bytes(s) for s in secrets)

    # --- device characterization -------------------------------------------

    def provision(self) -> None:
        """Reliability analysis over the whole device plus the phenotype dataset."""
        p = self.params
        grid = p.puf.env_grid()
        self.nvm.stable_map = stable_cell_map(self.device, grid, p.r, p.t_e, self.rng).cell_indices
        challenges = [random_challenge(p.puf, self.trng) for _ in range(p.enroll_challenges)]
        self.dataset = generate_dataset({self.label: self.device}, challenges, grid,
                                        p.reads_per_point, self.rng)

    def _dpuf(self, ops: OpCounter | None, challenge: Challenge, noisy: bool = False):
        """One PUF invocation: stable response for ``challenge`` and, if asked, the noisy one."""
        def run():
            sc = stable_challenge_for(challenge, self.nvm.stable_map, self.params.l)
            sr = read_stable(self.device, sc, self.env, self.rng, self.params.stable_votes)
            r = self.device.read(challenge, self.env, self.rng) if noisy else None
            return r, sr
        if ops is None:
            return run()
        with ops.track("DPUF"):
            return run()

    # --- enrollment ----------------------------------------------------------

    def enroll_initiate(self) -> bytes:
        if self.dataset is None:
            self.provision()
        c = random_challenge(self.params.puf, self.trng)
        _, sr = self._dpuf(None, c)
        self._log(_pack(sr))
        self._enroll[c.to_bytes()] = PendingEnroll(c, sr)
        return encode(MsgType.ENROLL_REQ, RoleFlag.NONE, [
            self.nvm.self_id, self.label.encode(), c.to_bytes(), _pack(sr),
            encode_dataset(self.dataset)])

    def enroll_respond(self, data: bytes, train: bool = True) -> bytes:
        msg_type, _, f = decode(data)
        if msg_type is not MsgType.ENROLL_REQ:
            raise PhaseError(f"expected an enrollment request, got {msg_type.name}")
        if self.dataset is None:
            self.provision()
        peer_id, label, c = f[0], f[1].decode(), Challenge.from_bytes(f[2])
        if label == self.label or len(peer_id) != ID_SIZE:
            raise PhaseError("enrollment request carries an invalid identity")
        _, sr_v = self._dpuf(None, c)
        self._log(_pack(sr_v))
        delta = _xor(_pack(sr_v), f[3])
        self.nvm.peers[label] = PeerRecord(peer_id, self.nvm.self_id, label, c, delta)
        self.peer_data[label] = decode_dataset(f[4], label)
        if train:
            self.train_model()
        return encode(MsgType.ENROLL_RESP, RoleFlag.NONE, [
            self.nvm.self_id, self.label.encode(), _pack(sr_v), encode_dataset(self.dataset)])

    def enroll_finalize(self, data: bytes, challenge: Challenge | None = None,
                        train: bool = True) -> None:
        msg_type, _, f = decode(data)
        if msg_type is not MsgType.ENROLL_RESP:
            raise PhaseError(f"expected an enrollment response, got {msg_type.name}")
        if not self._enroll:
            raise PhaseError("no enrollment in progress")
        if challenge is None:
            if len(self._enroll) != 1:
                raise PhaseError("several enrollments pending; name the challenge")
            key = next(iter(self._enroll))
        else:
            key = challenge.to_bytes()
            if key not in self._enroll:
                raise PhaseError("no enrollment pending for that challenge")
        pending = self._enroll.pop(key)
        peer_id, label = f[0], f[1].decode()
        delta = _xor(_pack(pending.sr), f[2])
        self.nvm.peers[label] = PeerRecord(peer_id, self.nvm.self_id, label, pending.challenge, delta)
        self.peer_data[label] = decode_dataset(f[3], label)
        if train:
            self.train_model()

    def train_model(self) -> dpan.Trained:
        if self.dataset is None or not self.peer_data:
            raise InsufficientData("nothing to train on before enrollment")
        ds = self.dataset
        for label in sorted(self.peer_data):
            ds = ds + self.peer_data[label]
        self.training = dpan.train(ds, self.params.split_ratio, impostors=self.reference_images)
        self.nvm.model, self.nvm.threshold = self.training.model, self.training.threshold
        return self.training

    # --- authentication ------------------------------------------------------

    def _session_key(self, ops: OpCounter, sr: np.ndarray, c: Challenge) -> SymmetricKey:
        with ops.track("KDF"):
            return kdf(_pack(sr), 256, _salt(c), b"mk")

    def _advance(self, ops: OpCounter, c: Challenge, mk: SymmetricKey) -> Challenge:
        with ops.track("H"):
            return derive_next_challenge(c, mk, self.params.puf)

    def _keystream(self, sr_i: np.ndarray, c: Challenge, role: RoleFlag) -> bytes:
        ctx = b"noisy-mask/req" if role == RoleFlag.AUTH_REQ else b"noisy-mask/ok"
        return bytes(kdf(_pack(sr_i), self.params.puf.region_len, _salt(c), ctx))

    def _build(self, ops: OpCounter, role: RoleFlag, dev_id: bytes, r_next: np.ndarray,
               sr_i: np.ndarray, sr_next: np.ndarray, c_i: Challenge, mk: SymmetricKey,
               n: int) -> AuthMessage:
        stream = _xor(_pack(r_next), self._keystream(sr_i, c_i, role))
        k = self.params.l // 8
        msg = AuthMessage(role, dev_id, stream[:k], _pack(sr_i ^ sr_next), stream[k:], b"", b"")
        ad = msg.associated_data()
        m = bytes([AUTH_REQ if role == RoleFlag.AUTH_REQ else AUTH_OK])
        if self.nonce_ledger is not None:
            self.nonce_ledger.record(mk, n, ad, m)
        with ops.track("AEAD.Enc"):
            out = aead_encrypt(mk, n, ad, m)
        return replace(msg, alpha=out.ciphertext, tag=out.tag)

    def _verify(self, ops: OpCounter, msg: AuthMessage, mk: SymmetricKey, n: int) -> bool:
        m = bytes([AUTH_REQ if msg.role == RoleFlag.AUTH_REQ else AUTH_OK])
        with ops.track("AEAD.Enc"):
            return aead_verify(mk, n, msg.associated_data(), m, (msg.alpha, msg.tag))

    def _recover_noisy(self, msg: AuthMessage, sr_i: np.ndarray, c_i: Challenge) -> np.ndarray:
        stream = _xor(msg.delta1 + msg.noisy_payload, self._keystream(sr_i, c_i, msg.role))
        return np.unpackbits(np.frombuffer(stream, dtype=np.uint8))

    def _judge(self, ops: OpCounter, r: np.ndarray, expected: str):
        cfg = self.params.puf
        with ops.track("DPAN"):
            label, s = dpan.classify(self.nvm.model, imgen(r, cfg.width, cfg.height))
        if label != expected:
            return AbortReason.CLASSIFIER_REJECT, s
        if s < float(self.nvm.threshold):
            return AbortReason.LOW_CONFIDENCE, s
        return None, s

    def _well_formed(self, msg: AuthMessage) -> bool:
        k = self.params.l // 8
        return (len(msg.dev_id) == ID_SIZE and len(msg.delta1) == k and len(msg.delta2) == k
                and len(msg.delta1) + len(msg.noisy_payload) == self.params.puf.region_len // 8)

    def _commit(self, ops: OpCounter, rec: PeerRecord, c_next: Challenge, delta_next: bytes,
                mk: SymmetricKey) -> None:
        with ops.track("H"):
            my_id = digest(rec.my_id + bytes(mk))
        # Mirror of the peer's own update, so the next lookup by pseudonym succeeds.
        peer_id = digest(rec.peer_id + bytes(mk))
        self.nvm.peers[rec.label] = replace(rec, peer_id=peer_id, my_id=my_id, challenge=c_next,
                                            delta=delta_next, prev_peer_id=rec.peer_id)

    def auth_initiate(self, peer_label: str) -> tuple[bytes, PendingAuth]:
        rec = self.nvm.peers.get(peer_label)
        if rec is None:
            raise UnknownPeer(peer_label)
        if peer_label in self._live:
            raise SessionBusy(f"session with {peer_label} already live")
        ops = OpCounter()
        _, sr_i = self._dpuf(ops, rec.challenge)
        mk = self._session_key(ops, sr_i, rec.challenge)
        c_next = self._advance(ops, rec.challenge, mk)
        r_next, sr_next = self._dpuf(ops, c_next, noisy=True)
        msg = self._build(ops, RoleFlag.AUTH_REQ, rec.my_id, r_next, sr_i, sr_next,
                          rec.challenge, mk, n=0)
        self._log(_pack(sr_i), _pack(sr_next), _pack(r_next), bytes(mk))
        self._live.add(peer_label)
        return msg.encode(), PendingAuth(peer_label, mk, sr_i, sr_next, c_next, ops, msg)

    def auth_respond(self, data: bytes) -> tuple[bytes | None, SessionOutcome]:
        ops = OpCounter()

        def abort(reason, label=None, s=None):
            return None, SessionOutcome(Status.ABORT, "verifier", reason, label, confidence=s, ops=ops)

        try:
            msg = AuthMessage.decode(data)
        except DecodeError:
            return abort(AbortReason.MALFORMED)
        if msg.role != RoleFlag.AUTH_REQ or not self._well_formed(msg):
            return abort(AbortReason.MALFORMED)
        rec = self.nvm.find(msg.dev_id)
        if rec is None:
            return abort(AbortReason.DESYNC if self.nvm.is_stale(msg.dev_id) else AbortReason.UNKNOWN_PEER)
        if rec.label in self._live:
            return abort(AbortReason.BUSY, rec.label)
        _, sr_v = self._dpuf(ops, rec.challenge)
        sr_p = sr_v ^ _unpack(rec.delta, self.params.l)
        mk = self._session_key(ops, sr_p, rec.challenge)
        try:
            if not self._verify(ops, msg, mk, n=0):
                return abort(AbortReason.TAG_MISMATCH, rec.label)
            r_p_next = self._recover_noisy(msg, sr_p, rec.challenge)
            reason, s = self._judge(ops, r_p_next, rec.label)
            if reason is not None:
                return abort(reason, rec.label, s)
            sr_p_next = _unpack(msg.delta2, self.params.l) ^ sr_p
            c_next = self._advance(ops, rec.challenge, mk)
            r_v_next, sr_v_next = self._dpuf(ops, c_next, noisy=True)
            reply = self._build(ops, RoleFlag.AUTH_OK, rec.my_id, r_v_next, sr_p, sr_v_next,
                                rec.challenge, mk, n=1)
            self._log(_pack(sr_v), _pack(sr_v_next), _pack(r_v_next), bytes(mk))
            self._commit(ops, rec, c_next, _pack(sr_p_next ^ sr_v_next), mk)
            return reply.encode(), SessionOutcome(Status.SUCCESS, "verifier", None, rec.label,
                                                  bytes(mk), s, ops)
        finally:
            mk.wipe()

    def auth_finalize(self, pending: PendingAuth, data: bytes) -> SessionOutcome:
        if pending.closed:
            raise PhaseError("session already finished")
        ops = pending.ops

        def done(reason, s=None):
            mk = bytes(pending.mk) if reason is None else None
            pending.mk.wipe()
            pending.closed = True
            self._live.discard(pending.peer_label)
            status = Status.SUCCESS if reason is None else Status.ABORT
            return SessionOutcome(status, "prover", reason, pending.peer_label, mk, s, ops)

        try:
            msg = AuthMessage.decode(data)
        except DecodeError:
            return done(AbortReason.MALFORMED)
        if msg.role != RoleFlag.AUTH_OK or not self._well_formed(msg):
            return done(AbortReason.MALFORMED)
        rec = self.nvm.peers.get(pending.peer_label)
        if rec is None or msg.dev_id != rec.peer_id:
            return done(AbortReason.UNKNOWN_PEER)
        if not self._verify(ops, msg, pending.mk, n=1):
            return done(AbortReason.TAG_MISMATCH)
        r_v_next = self._recover_noisy(msg, pending.sr_i, rec.challenge)
        reason, s = self._judge(ops, r_v_next, rec.label)
        if reason is not None:
            return done(reason, s)
        sr_v_next = _unpack(msg.delta2, self.params.l) ^ pending.sr_i
        self._commit(ops, rec, pending.c_next, _pack(pending.sr_next ^ sr_v_next), pending.mk)
        return done(None, s)

    def auth_abort(self, pending: PendingAuth, reason: AbortReason = AbortReason.TIMEOUT) -> SessionOutcome:
        """End a pending session without a response (timeout or block)."""
        pending.mk.wipe()
        pending.closed = True
        self._live.discard(pending.peer_label)
        return SessionOutcome(Status.ABORT, "prover", reason, pending.peer_label, ops=pending.ops)


def enroll_pair(a: Node, b: Node, train: bool = True) -> None:
    """Enroll ``a`` (initiator) with ``b`` over the assumed-secure enrollment channel."""
    req = a.enroll_initiate()
    resp = b.enroll_respond(req, train=train)
    a.enroll_finalize(resp, train=train)


def enroll_group(nodes: list[Node]) -> None:
    """Pairwise enrollment of every pair, then one model per device covering every member."""
    if len(nodes) < 2:
        raise InsufficientData("a group needs at least two devices")
    if len({n.label for n in nodes}) != len(nodes):
        raise ValueError("device labels must be unique")
    for i, a in enumerate(nodes):
        for b in nodes[i + 1:]:
            enroll_pair(a, b, train=False)
    for n in nodes:
        n.train_model()


def reference_images(config: PufConfig, seeds: list[int], challenges: int,
                     rng: np.random.Generator) -> list[np.ndarray]:
    """Phenotypes of reference (never-enrolled) devices, used as impostors when tuning."""
    if not seeds:
        return []
    devices = {f"ref{s}": DpufDevice(int(s), config) for s in seeds}
    chs = [random_challenge(config, rng) for _ in range(challenges)]
    ds = generate_dataset(devices, chs, config.env_grid(), 1, rng)
    return [it.image for it in ds]
