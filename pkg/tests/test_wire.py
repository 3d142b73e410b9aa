import pytest
from hypothesis import given, settings, strategies as st

from phenoauth.errors import DecodeError
from phenoauth.wire import (AuthMessage, MsgType, RoleFlag, decode, decode_dataset, encode,
                            encode_dataset)


def _msg(role=RoleFlag.AUTH_REQ):
    return AuthMessage(role, bytes(range(32)), b"\x11" * 32, b"\x22" * 32, b"\x33" * 100, b"\x01", b"\x44" * 16)


def test_layout_by_hand():
    m = _msg()
    raw = m.encode()
    expected = b"PHA1" + bytes([2, 1])
    for f in (m.dev_id, m.delta1, m.delta2, m.noisy_payload, m.alpha, m.tag):
        expected += len(f).to_bytes(4, "little") + f
    assert raw == expected


@pytest.mark.parametrize("role", [RoleFlag.AUTH_REQ, RoleFlag.AUTH_OK])
def test_round_trip(role):
    m = _msg(role)
    assert AuthMessage.decode(m.encode()) == m


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=300))
def test_decoder_never_crashes(data):
    try:
        decode(data)
    except DecodeError:
        pass


def test_strictness():
    raw = _msg().encode()
    for bad in (raw[:-1], raw + b"\x00", b"XHA1" + raw[4:], raw[:4] + b"\x09" + raw[5:]):
        with pytest.raises(DecodeError):
            AuthMessage.decode(bad)
    with pytest.raises(DecodeError):  # type and role flag disagree
        AuthMessage.decode(raw[:5] + b"\x02" + raw[6:])
    enroll = encode(MsgType.ENROLL_RESP, 0, [b"a", b"b", b"c", b"d"])
    with pytest.raises(DecodeError):
        AuthMessage.decode(enroll)


def test_associated_data_covers_clear_fields():
    m = _msg()
    ad = m.associated_data()
    assert ad[0] == 1
    for f in (m.dev_id, m.delta1, m.delta2, m.noisy_payload):
        assert f in ad
    assert m.tag not in ad


def test_dataset_blob_round_trip(enrolled_group):
    ds = enrolled_group[0].dataset
    back = decode_dataset(encode_dataset(ds), ds.items[0].label)
    assert [it.key() for it in back] == [it.key() for it in ds]
    with pytest.raises(DecodeError):
        decode_dataset(encode_dataset(ds)[:-1], "x")
