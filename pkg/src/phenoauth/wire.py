"""Binary wire format.

``message = "PHA1" || msg_type u8 || role_flag u8 || fields``, where every
field is a u32 little-endian length followed by its bytes.  Decoding is
strict: wrong magic, unknown type, wrong field count or trailing bytes all
raise :class:`DecodeError`.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError
from .phenotype import DatasetItem, LabeledDataset
from .puf_sim import Challenge, EnvParams

MAGIC = b"PHA1"
MAX_FIELD = 1 << 28


class MsgType(enum.IntEnum):
    ENROLL_REQ = 0
    ENROLL_RESP = 1
    AUTH_REQ = 2
    AUTH_RESP = 3


class RoleFlag(enum.IntEnum):
    NONE = 0
    AUTH_REQ = 1
    AUTH_OK = 2


FIELD_COUNT = {
    MsgType.ENROLL_REQ: 5,
    MsgType.ENROLL_RESP: 4,
    MsgType.AUTH_REQ: 6,
    MsgType.AUTH_RESP: 6,
}


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def encode_fields(fields: list[bytes]) -> bytes:
    return b"".join(_u32(len(f)) + bytes(f) for f in fields)


def encode(msg_type: MsgType, role_flag: int, fields: list[bytes]) -> bytes:
    if len(fields) != FIELD_COUNT[msg_type]:
        raise ValueError(f"{msg_type.name} takes {FIELD_COUNT[msg_type]} fields")
    return MAGIC + bytes([int(msg_type), int(role_flag)]) + encode_fields(fields)


def decode(data: bytes) -> tuple[MsgType, int, list[bytes]]:
    data = bytes(data)
    if len(data) < 6 or data[:4] != MAGIC:
        raise DecodeError("bad magic")
    try:
        msg_type = MsgType(data[4])
    except ValueError:
        raise DecodeError(f"unknown message type {data[4]}") from None
    role_flag = data[5]
    fields, pos = [], 6
    while pos < len(data):
        if pos + 4 > len(data):
            raise DecodeError("truncated length prefix")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if n > MAX_FIELD or pos + n > len(data):
            raise DecodeError("field overruns message")
        fields.append(data[pos:pos + n])
        pos += n
    if len(fields) != FIELD_COUNT[msg_type]:
        raise DecodeError(f"{msg_type.name} needs {FIELD_COUNT[msg_type]} fields, got {len(fields)}")
    return msg_type, role_flag, fields


@dataclass(frozen=True)
class AuthMessage:
    """M1 (role AUTH_REQ) or M2 (role AUTH_OK)."""

    role: RoleFlag
    dev_id: bytes
    delta1: bytes
    delta2: bytes
    noisy_payload: bytes
    alpha: bytes
    tag: bytes

    @property
    def msg_type(self) -> MsgType:
        return MsgType.AUTH_REQ if self.role == RoleFlag.AUTH_REQ else MsgType.AUTH_RESP

    def associated_data(self) -> bytes:
        """Everything the tag covers: role flag then the four clear fields, length-prefixed."""
        return bytes([int(self.role)]) + encode_fields(
            [self.dev_id, self.delta1, self.delta2, self.noisy_payload])

    def field_payload(self) -> bytes:
        """Field contents with no framing constants."""
        return self.dev_id + self.delta1 + self.delta2 + self.noisy_payload + self.alpha + self.tag

    def encode(self) -> bytes:
        return encode(self.msg_type, self.role, [
            self.dev_id, self.delta1, self.delta2, self.noisy_payload, self.alpha, self.tag])

    @classmethod
    def decode(cls, data: bytes) -> AuthMessage:
        msg_type, role, f = decode(data)
        expected = {MsgType.AUTH_REQ: RoleFlag.AUTH_REQ, MsgType.AUTH_RESP: RoleFlag.AUTH_OK}
        if msg_type not in expected:
            raise DecodeError(f"{msg_type.name} is not an authentication message")
        if role != expected[msg_type]:
            raise DecodeError("role flag does not match message type")
        return cls(RoleFlag(role), *f)


_ITEM_HEAD = struct.Struct("<dd21sII")


def encode_dataset(ds: LabeledDataset) -> bytes:
    """Items of one device: u32 count, u16 w, u16 h, then per item the env,
    the challenge, its id, the read index and the raw w*h image bytes."""
    items = list(ds)
    if not items:
        return struct.pack("<IHH", 0, 0, 0)
    h, w = items[0].image.shape
    out = [struct.pack("<IHH", len(items), w, h)]
    for it in items:
        if it.image.shape != (h, w):
            raise ValueError("mixed image shapes")
        out.append(_ITEM_HEAD.pack(it.env.temperature, it.env.voltage, it.challenge.to_bytes(),
                                   it.challenge_id, it.k))
        out.append(np.ascontiguousarray(it.image, dtype=np.uint8).tobytes())
    return b"".join(out)


def decode_dataset(blob: bytes, label: str) -> LabeledDataset:
    try:
        count, w, h = struct.unpack_from("<IHH", blob, 0)
        pos, items = 8, []
        for _ in range(count):
            t, v, cb, cid, k = _ITEM_HEAD.unpack_from(blob, pos)
            pos += _ITEM_HEAD.size
            img = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()
            pos += w * h
            items.append(DatasetItem(img, label, EnvParams(t, v), Challenge.from_bytes(cb), cid, k))
    except (struct.error, ValueError) as exc:
        raise DecodeError(f"bad dataset blob: {exc}") from None
    if pos != len(blob):
        raise DecodeError("trailing bytes in dataset blob")
    return LabeledDataset(items)
