import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mamo_billing.authz import AB, AE, AWO, RO, AuthorizationMode, combined_validate, validate_edit
from mamo_billing.envelope import (
    HANDSET_SECTION,
    IN_SECTION,
    INVISIBLE,
    INVISIBLE_DIGITS,
    OwnerKey,
    SealedSegment,
    Source,
    apply_edit,
    compose_message,
    contains_invisible,
    decode_invisible,
    encode_invisible,
    open_rules,
    open_segment,
    parse_message,
    seal_segment,
    serialize_message,
)
from mamo_billing.errors import (
    EditRejected,
    InvalidAlphabet,
    InvalidText,
    MalformedFrame,
    MamoError,
    TamperDetected,
    WrongKey,
)
from mamo_billing.netsim import SimKeys, generate_calls, handset_emit, in_emit
from mamo_billing.rating import Tariff

KEY = OwnerKey.derive("IN", 1)
TTP = OwnerKey.derive("TTP", 1)
plain = st.text(alphabet=st.characters(blacklist_characters="".join(INVISIBLE_DIGITS)), max_size=40)


def corrupted_fails(sealed: SealedSegment, key: OwnerKey, bit: int) -> bool:
    raw = bytearray(sealed.to_text().encode("utf-8"))
    raw[bit // 8] ^= 1 << (bit % 8)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        return True
    try:
        open_segment(SealedSegment.from_text(text), key)
    except MamoError:
        return True
    return False


# -- codec


def test_encode_empty_and_zero():
    assert encode_invisible(b"") == ""
    assert encode_invisible(b"\x00") == INVISIBLE_DIGITS[0] * 4


@given(st.binary(min_size=64, max_size=64))
def test_codec_round_trip(blob):
    text = encode_invisible(blob)
    assert len(text) == 4 * len(blob)
    assert set(text) <= INVISIBLE
    assert decode_invisible(text) == blob


def test_decode_rejects_foreign_characters():
    with pytest.raises(InvalidAlphabet):
        decode_invisible(INVISIBLE_DIGITS[0] * 3 + "x")
    with pytest.raises(InvalidAlphabet):
        decode_invisible(INVISIBLE_DIGITS[1] * 3)


def test_digits_are_most_significant_first():
    assert encode_invisible(b"\x1b") == "".join(INVISIBLE_DIGITS[d] for d in (0, 1, 2, 3))


# -- segments


def test_seal_open_round_trip():
    sealed = seal_segment("abc", RO, KEY)
    assert open_segment(sealed, KEY) == ("abc", RO)
    assert not contains_invisible(sealed.body)


def test_empty_body_keeps_mode():
    sealed = seal_segment("", AE, KEY, 0)
    assert sealed.body == ""
    assert open_segment(sealed, KEY) == ("", AE)


def test_padding_changes_header_length_only():
    rng = random.Random(0)
    a = seal_segment("abc", AWO, KEY, 0, rng=rng)
    b = seal_segment("abc", AWO, KEY, 16, rng=rng)
    assert len(b.header) - len(a.header) == 16 * 4
    assert open_segment(a, KEY) == open_segment(b, KEY)


def test_seal_is_deterministic_for_equal_padding():
    a = seal_segment("abc", AB, KEY, 8, rng=random.Random(5))
    b = seal_segment("abc", AB, KEY, 8, rng=random.Random(5))
    assert a == b


def test_invisible_text_refused():
    with pytest.raises(InvalidText):
        seal_segment("a" + INVISIBLE_DIGITS[2], RO, KEY)


def test_appended_character_is_tamper():
    sealed = seal_segment("abc", AE, KEY)
    with pytest.raises(TamperDetected):
        open_segment(SealedSegment(sealed.header, sealed.body + "d"), KEY)


def test_wrong_key():
    sealed = seal_segment("abc", RO, KEY)
    with pytest.raises(WrongKey):
        open_segment(sealed, OwnerKey.derive("IN", 2))
    with pytest.raises(WrongKey):
        open_segment(sealed, TTP)


def test_exhaustive_bit_flips_small_segment():
    sealed = seal_segment("call=42", RO, KEY, 2, rng=random.Random(3))
    nbits = 8 * len(sealed.to_text().encode("utf-8"))
    assert all(corrupted_fails(sealed, KEY, bit) for bit in range(nbits))


def test_grants_recorded_in_header():
    sealed = seal_segment("x", RO, KEY, grants={"TTP": AB})
    rules = open_rules(sealed, KEY)
    assert rules.grants == (("TTP", AB),)
    assert rules.modes_for("TTP") == {AB}
    assert rules.modes_for("IN") == {RO}
    assert rules.modes_for("stranger") == {RO, AB}


@given(plain, st.sampled_from(list(AuthorizationMode)))
@settings(max_examples=50)
def test_round_trip_property(text, mode):
    assert open_segment(seal_segment(text, mode, KEY, 3, rng=random.Random(1)), KEY) == (text, mode)


# -- messages


def _message(corr=7, source=Source.BASE_STATION_IN):
    rng = random.Random(0)
    return compose_message(
        corr,
        source,
        [
            seal_segment("dur=60", RO, KEY, 4, grants={"TTP": AB}, rng=rng),
            seal_segment("snr=3", RO, KEY, 4, grants={"TTP": AE}, rng=rng),
            seal_segment("", AWO, KEY, 4, rng=rng),
        ],
    )


def test_frame_round_trip_is_byte_exact():
    msg = _message()
    frame = serialize_message(msg)
    assert frame[:4] == b"MAMO" and frame[4] == 1
    assert int.from_bytes(frame[5:13], "big") == 7
    assert frame[13] == Source.BASE_STATION_IN and frame[14] == 3
    again = parse_message(frame)
    assert again == msg
    assert serialize_message(again) == frame


def test_missing_section_is_malformed():
    msg = _message()
    frame = bytearray(serialize_message(msg))
    frame[14] = 2
    with pytest.raises(MalformedFrame):
        parse_message(bytes(frame))
    with pytest.raises(MalformedFrame):
        compose_message(1, Source.HANDSET, msg.sections[:2])


@pytest.mark.parametrize("cut", [3, 14, 20, -1])
def test_truncated_frame_is_malformed(cut):
    frame = serialize_message(_message())
    with pytest.raises(MalformedFrame):
        parse_message(frame[:cut])


def test_simulated_pair_parses_independently():
    keys = SimKeys.derive(0)
    (call,) = generate_calls(1, seed=4)
    a = parse_message(serialize_message(in_emit(call, keys, Tariff())))
    b = parse_message(serialize_message(handset_emit(call, keys)))
    assert a.correlation_id == b.correlation_id
    assert (a.source, b.source) == (Source.BASE_STATION_IN, Source.HANDSET)
    assert open_segment(a.sections[IN_SECTION], keys.in_key)[0] != open_segment(b.sections[HANDSET_SECTION], keys.handset_key)[0]


# -- edits


def test_third_party_may_prepend_to_in_section():
    msg = apply_edit(_message(), IN_SECTION, "rx=1\ndur=60", TTP, {"IN": KEY})
    assert open_segment(msg.sections[IN_SECTION], KEY) == ("rx=1\ndur=60", RO)


def test_overwrite_in_section_rejected():
    with pytest.raises(EditRejected) as err:
        apply_edit(_message(), IN_SECTION, "dur=61", TTP, {"IN": KEY})
    assert err.value.mode is AB


def test_third_party_may_append_to_handset_section():
    msg = apply_edit(_message(), HANDSET_SECTION, "snr=3\nrx=9", TTP, {"IN": KEY})
    assert open_segment(msg.sections[HANDSET_SECTION], KEY)[0] == "snr=3\nrx=9"


def test_append_to_in_section_rejected():
    with pytest.raises(EditRejected):
        apply_edit(_message(), IN_SECTION, "dur=60 extra", TTP, {"IN": KEY})


def test_edit_of_tampered_section_fails():
    msg = _message()
    bad = SealedSegment(msg.sections[IN_SECTION].header, "dur=99")
    msg = compose_message(msg.correlation_id, msg.source, (bad, *msg.sections[1:]))
    with pytest.raises(TamperDetected):
        apply_edit(msg, IN_SECTION, "x" + "dur=99", TTP, {"IN": KEY})


@given(st.text(alphabet="ab", max_size=5), st.text(alphabet="ab", max_size=7), st.sampled_from([RO, AB, AE, AWO]))
@settings(max_examples=150)
def test_apply_edit_matches_authz(original, proposed, mode):
    seg = seal_segment(original, mode, KEY, 0)
    msg = compose_message(1, Source.BASE_STATION_IN, (seg, seg, seg))
    expected = validate_edit(original, proposed, mode).accepted
    try:
        apply_edit(msg, 0, proposed, KEY)
        ok = True
    except EditRejected:
        ok = False
    assert ok is expected


@given(st.text(alphabet="ab", max_size=4), st.text(alphabet="ab", max_size=6))
@settings(max_examples=100)
def test_stranger_edit_needs_every_mode(original, proposed):
    seg = seal_segment(original, RO, KEY, 0, grants={"TTP": AB})
    msg = compose_message(1, Source.BASE_STATION_IN, (seg, seg, seg))
    stranger = OwnerKey.derive("X", 0)
    expected = combined_validate(original, proposed, {RO, AB}).accepted
    try:
        apply_edit(msg, 0, proposed, stranger, {"IN": KEY})
        ok = True
    except EditRejected:
        ok = False
    assert ok is expected
