"""Tamper-evident segments and the framed message format.

A sealed segment is a visible body preceded by a header written entirely
in zero-width characters.  The header holds the segment's authorization
rules and a SHA-256 digest of the body, encrypted and authenticated under
the owner's key, so an editor shows only the body while any change to
either part stops the segment from opening.

Frame layout (all integers big-endian)::

    "MAMO" | 0x01 | correlation_id:u64 | source:u8 | count:u8
    then per section: header_len:u32 | header (UTF-8) | body_len:u32 | body (UTF-8)
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import re
import secrets
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Protocol

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCMSIV

from . import authz
from .authz import AuthorizationMode
from .errors import (
    EditRejected,
    InvalidAlphabet,
    InvalidText,
    MalformedFrame,
    TamperDetected,
    WrongKey,
)

# Base-4 digits, most significant first.
INVISIBLE_DIGITS = ("\u200b", "\u200c", "\u200d", "\u2060")  # ZWSP, ZWNJ, ZWJ, WJ
INVISIBLE = frozenset(INVISIBLE_DIGITS)

# byte -> its four base-4 digits
_BYTE_TO_INVISIBLE = tuple(
    "".join(INVISIBLE_DIGITS[(b >> shift) & 3] for shift in (6, 4, 2, 0)) for b in range(256)
)
# every digit is 3 bytes of UTF-8 and its last byte tells them apart
_LAST_BYTE_TO_DIGIT = bytes.maketrans(
    bytes(ch.encode()[2] for ch in INVISIBLE_DIGITS), b"0123"
)
_ONLY_INVISIBLE = re.compile("[" + "".join(INVISIBLE_DIGITS) + "]*")


def encode_invisible(data: bytes) -> str:
    return "".join(map(_BYTE_TO_INVISIBLE.__getitem__, data))


def decode_invisible(text: str) -> bytes:
    if not _ONLY_INVISIBLE.fullmatch(text):
        bad = next(ch for ch in text if ch not in INVISIBLE)
        raise InvalidAlphabet(f"U+{ord(bad):04X} is not an invisible digit")
    if len(text) % 4:
        raise InvalidAlphabet(f"length {len(text)} is not a multiple of 4")
    if not text:
        return b""
    digits = text.encode()[2::3].translate(_LAST_BYTE_TO_DIGIT)
    return int(digits, 4).to_bytes(len(text) // 4, "big")


def contains_invisible(text: str) -> bool:
    return not INVISIBLE.isdisjoint(text)


# --------------------------------------------------------------------------
# keys and ciphers


@dataclass(frozen=True)
class OwnerKey:
    owner_id: str
    key_material: bytes = field(repr=False)

    def __post_init__(self):
        if len(self.key_material) != 32:
            raise ValueError("key_material must be exactly 32 bytes")
        if not 0 < len(self.owner_id.encode()) < 256:
            raise ValueError("owner_id must be 1..255 bytes of UTF-8")

    @classmethod
    def generate(cls, owner_id: str) -> "OwnerKey":
        return cls(owner_id, secrets.token_bytes(32))

    @classmethod
    def derive(cls, owner_id: str, seed: int) -> "OwnerKey":
        """Reproducible key for simulations. Not for production use."""
        material = hashlib.sha256(f"mamo-sim-key|{seed}|{owner_id}".encode()).digest()
        return cls(owner_id, material)

    @property
    def check_value(self) -> bytes:
        return _check_value(self.key_material)


@lru_cache(maxsize=256)
def _check_value(material: bytes) -> bytes:
    return hmac.new(material, b"mamo-kcv", hashlib.sha256).digest()[:4]


class SegmentCipher(Protocol):
    """Deterministic AEAD used to protect segment headers."""

    def seal(self, key: bytes, plaintext: bytes, aad: bytes) -> bytes: ...

    def open(self, key: bytes, sealed: bytes, aad: bytes) -> bytes: ...


class SyntheticNonceCipher:
    """AES-256-GCM-SIV with the nonce derived from (aad, plaintext).

    Identical inputs give identical output; distinct plaintexts get
    distinct nonces.  GCM-SIV stays safe even if a nonce repeats.
    """

    nonce_size = 12

    @staticmethod
    @lru_cache(maxsize=256)
    def _aead(key: bytes) -> AESGCMSIV:
        return AESGCMSIV(key)

    def seal(self, key, plaintext, aad):
        nonce = hmac.digest(key, b"nonce|" + aad + plaintext, "sha256")[: self.nonce_size]
        return nonce + self._aead(key).encrypt(nonce, plaintext, aad)

    def open(self, key, sealed, aad):
        nonce, ct = sealed[: self.nonce_size], sealed[self.nonce_size:]
        if len(nonce) != self.nonce_size:
            raise TamperDetected("header truncated")
        try:
            return self._aead(key).decrypt(nonce, ct, aad)
        except InvalidTag:
            raise TamperDetected("header failed authentication") from None


DEFAULT_CIPHER: SegmentCipher = SyntheticNonceCipher()

# --------------------------------------------------------------------------
# sealed segments

_HEADER_VERSION = 1
_MODE_BYTE = {m: m.value for m in AuthorizationMode}
_BYTE_MODE = {v: m for m, v in _MODE_BYTE.items()}


@dataclass(frozen=True)
class SegmentRules:
    """Decrypted header contents."""

    owner_id: str
    mode: AuthorizationMode
    grants: tuple[tuple[str, AuthorizationMode], ...] = ()
    digest: bytes = b""
    padding: bytes = b""

    @property
    def modes(self) -> frozenset[AuthorizationMode]:
        return frozenset([self.mode, *(m for _, m in self.grants)])

    def modes_for(self, principal: str) -> frozenset[AuthorizationMode]:
        """Modes an edit by `principal` must satisfy.

        The owner and each grantee act under their own mode; anybody else
        must satisfy every mode imposed on the segment.
        """
        if principal == self.owner_id:
            return frozenset([self.mode])
        for grantee, mode in self.grants:
            if grantee == principal:
                return frozenset([mode])
        return self.modes


@dataclass(frozen=True)
class SealedSegment:
    header: str
    body: str

    def to_text(self) -> str:
        """Header and body as one string, the way it sits in a document."""
        return self.header + self.body

    @classmethod
    def from_text(cls, text: str) -> "SealedSegment":
        i = 0
        while i < len(text) and text[i] in INVISIBLE:
            i += 1
        return cls(text[:i], text[i:])


def _pack_payload(rules: SegmentRules) -> bytes:
    out = bytearray([_MODE_BYTE[rules.mode], len(rules.grants)])
    for grantee, mode in rules.grants:
        raw = grantee.encode()
        out += bytes([len(raw)]) + raw + bytes([_MODE_BYTE[mode]])
    out += rules.digest
    out += struct.pack(">H", len(rules.padding)) + rules.padding
    return bytes(out)


def _unpack_payload(owner_id: str, payload: bytes) -> SegmentRules:
    try:
        mode = _BYTE_MODE[payload[0]]
        count = payload[1]
        pos = 2
        grants = []
        for _ in range(count):
            n = payload[pos]
            grantee = payload[pos + 1:pos + 1 + n].decode()
            grants.append((grantee, _BYTE_MODE[payload[pos + 1 + n]]))
            pos += n + 2
        digest = payload[pos:pos + 32]
        (pad_len,) = struct.unpack_from(">H", payload, pos + 32)
        padding = payload[pos + 34:pos + 34 + pad_len]
        if len(digest) != 32 or len(padding) != pad_len or pos + 34 + pad_len != len(payload):
            raise ValueError("length mismatch")
    except (IndexError, KeyError, ValueError, struct.error) as exc:
        raise TamperDetected(f"rule block unreadable: {exc}") from None
    return SegmentRules(owner_id, mode, tuple(grants), digest, padding)


def _body_digest(body: str) -> bytes:
    return hashlib.sha256(body.encode("utf-8")).digest()


def _seal_rules(rules: SegmentRules, key: OwnerKey, cipher: SegmentCipher) -> str:
    owner = rules.owner_id.encode()
    aad = bytes([_HEADER_VERSION, len(owner)]) + owner + key.check_value
    return encode_invisible(aad + cipher.seal(key.key_material, _pack_payload(rules), aad))


def seal_segment(
    text: str,
    mode: AuthorizationMode,
    key: OwnerKey,
    padding_len: int = 0,
    *,
    grants: Mapping[str, AuthorizationMode] | None = None,
    rng=None,
    cipher: SegmentCipher = DEFAULT_CIPHER,
) -> SealedSegment:
    """Seal `text` under `mode`, owned by `key.owner_id`.

    `grants` gives other principals their own mode on the segment (for
    example a third party allowed to prepend to a read-only section); the
    resulting mode set must be mutually compatible.  Padding bytes come
    from `rng` (anything with ``randbytes``) so seeded runs reproduce.
    """
    if contains_invisible(text):
        raise InvalidText("segment text contains invisible-alphabet characters")
    if not 0 <= padding_len <= 0xFFFF:
        raise ValueError("padding_len out of range")
    grant_items = tuple(sorted((grants or {}).items()))
    if grant_items:
        authz.check_mode_set([mode, *(m for _, m in grant_items)])
    padding = (rng.randbytes(padding_len) if rng is not None else secrets.token_bytes(padding_len))
    rules = SegmentRules(key.owner_id, mode, grant_items, _body_digest(text), padding)
    return SealedSegment(_seal_rules(rules, key, cipher), text)


def header_owner(sealed: SealedSegment) -> str:
    """Owner id from the authenticated (unencrypted) part of the header."""
    head = _decode_or_tamper(sealed.header[:8])
    if len(head) < 2 or head[0] != _HEADER_VERSION:
        raise TamperDetected("header prefix unreadable")
    raw = _decode_or_tamper(sealed.header[: 4 * (2 + head[1])])
    if len(raw) < 2 + raw[1]:
        raise TamperDetected("header prefix unreadable")
    try:
        return raw[2:2 + raw[1]].decode()
    except UnicodeDecodeError:
        raise TamperDetected("owner id is not UTF-8") from None


def _decode_or_tamper(header: str) -> bytes:
    try:
        return decode_invisible(header)
    except InvalidAlphabet as exc:
        raise TamperDetected(f"header distorted: {exc}") from None


def open_rules(
    sealed: SealedSegment, key: OwnerKey, cipher: SegmentCipher = DEFAULT_CIPHER
) -> SegmentRules:
    raw = _decode_or_tamper(sealed.header)
    if len(raw) < 2 or raw[0] != _HEADER_VERSION:
        raise TamperDetected("unknown header version")
    n = raw[1]
    aad_end = 2 + n + 4
    if len(raw) < aad_end:
        raise TamperDetected("header truncated")
    aad = raw[:aad_end]
    try:
        owner_id = raw[2:2 + n].decode()
    except UnicodeDecodeError:
        raise TamperDetected("owner id is not UTF-8") from None
    if raw[2 + n:aad_end] != key.check_value or owner_id != key.owner_id:
        raise WrongKey(f"segment owned by {owner_id!r} cannot be opened with this key")
    rules = _unpack_payload(owner_id, cipher.open(key.key_material, raw[aad_end:], aad))
    if contains_invisible(sealed.body):
        raise TamperDetected("body contains invisible characters")
    if not hmac.compare_digest(rules.digest, _body_digest(sealed.body)):
        raise TamperDetected("body does not match its sealed digest")
    return rules


def open_segment(
    sealed: SealedSegment, key: OwnerKey, cipher: SegmentCipher = DEFAULT_CIPHER
) -> tuple[str, AuthorizationMode]:
    rules = open_rules(sealed, key, cipher)
    return sealed.body, rules.mode


def open_segment_bytes(header: bytes, body: bytes, key: OwnerKey) -> tuple[str, AuthorizationMode]:
    """open_segment for raw section bytes as they appear on the wire."""
    try:
        sealed = SealedSegment(header.decode("utf-8"), body.decode("utf-8"))
    except UnicodeDecodeError:
        raise TamperDetected("section bytes are not valid UTF-8") from None
    return open_segment(sealed, key)


def reseal(
    sealed: SealedSegment,
    new_body: str,
    key: OwnerKey,
    cipher: SegmentCipher = DEFAULT_CIPHER,
    *,
    rules: SegmentRules | None = None,
) -> SealedSegment:
    """Re-seal with a new body, keeping rules and padding.

    Pass `rules` when the segment has just been opened to skip a second
    decryption.
    """
    if contains_invisible(new_body):
        raise InvalidText("segment text contains invisible-alphabet characters")
    if rules is None:
        rules = open_rules(sealed, key, cipher)
    updated = SegmentRules(rules.owner_id, rules.mode, rules.grants, _body_digest(new_body), rules.padding)
    return SealedSegment(_seal_rules(updated, key, cipher), new_body)


# --------------------------------------------------------------------------
# messages


class Source(enum.IntEnum):
    HANDSET = 0x01
    BASE_STATION_IN = 0x02
    SWITCH = 0x03


IN_SECTION = 0
HANDSET_SECTION = 1
HOUSEKEEPING_SECTION = 2
SECTION_COUNT = 3

MAGIC = b"MAMO"
FRAME_VERSION = 0x01
_FRAME_HEAD = struct.Struct(">4sBQBB")
_U32 = struct.Struct(">I")


@dataclass(frozen=True)
class MamoMessage:
    correlation_id: int
    source: Source
    sections: tuple[SealedSegment, ...]

    def to_bytes(self) -> bytes:
        return serialize_message(self)


def compose_message(correlation_id: int, source: Source, sections) -> MamoMessage:
    sections = tuple(sections)
    if len(sections) != SECTION_COUNT:
        raise MalformedFrame(f"expected {SECTION_COUNT} sections, got {len(sections)}")
    if not 0 <= correlation_id < 1 << 64:
        raise ValueError("correlation_id must fit in 64 bits")
    return MamoMessage(correlation_id, Source(source), sections)


def serialize_message(message: MamoMessage) -> bytes:
    parts = [
        _FRAME_HEAD.pack(MAGIC, FRAME_VERSION, message.correlation_id, message.source, len(message.sections))
    ]
    for seg in message.sections:
        header = seg.header.encode("utf-8")
        body = seg.body.encode("utf-8")
        parts += [_U32.pack(len(header)), header, _U32.pack(len(body)), body]
    return b"".join(parts)


def _take(frame: bytes, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(frame):
        raise MalformedFrame("frame truncated")
    return frame[pos:pos + n], pos + n


def parse_message(frame: bytes) -> MamoMessage:
    message, end = parse_message_prefix(frame, 0)
    if end != len(frame):
        raise MalformedFrame(f"{len(frame) - end} trailing bytes")
    return message


def parse_message_prefix(frame: bytes, pos: int = 0) -> tuple[MamoMessage, int]:
    """Parse one frame starting at `pos`; return it with the end offset."""
    head, pos = _take(frame, pos, _FRAME_HEAD.size)
    magic, version, corr, source, count = _FRAME_HEAD.unpack(head)
    if magic != MAGIC:
        raise MalformedFrame("bad magic")
    if version != FRAME_VERSION:
        raise MalformedFrame(f"unsupported frame version {version}")
    try:
        source = Source(source)
    except ValueError:
        raise MalformedFrame(f"unknown source tag {source:#04x}") from None
    if count != SECTION_COUNT:
        raise MalformedFrame(f"expected {SECTION_COUNT} sections, got {count}")
    sections = []
    for _ in range(count):
        raw, pos = _take(frame, pos, 4)
        header, pos = _take(frame, pos, _U32.unpack(raw)[0])
        raw, pos = _take(frame, pos, 4)
        body, pos = _take(frame, pos, _U32.unpack(raw)[0])
        try:
            sections.append(SealedSegment(header.decode("utf-8"), body.decode("utf-8")))
        except UnicodeDecodeError:
            raise MalformedFrame("section is not valid UTF-8") from None
    return MamoMessage(corr, source, tuple(sections)), pos


def apply_edit(
    message: MamoMessage,
    section_index: int,
    proposed: str,
    actor_key: OwnerKey,
    keyring: Mapping[str, OwnerKey] | None = None,
) -> MamoMessage:
    """Replace one section's text if the actor's modes allow it.

    The section is opened and re-sealed with its owner's key, looked up
    in `keyring` (the actor's own key is always available).
    """
    if not 0 <= section_index < len(message.sections):
        raise IndexError(f"no section {section_index}")
    sealed = message.sections[section_index]
    owner = header_owner(sealed)
    owner_key = actor_key if owner == actor_key.owner_id else (keyring or {}).get(owner, actor_key)
    rules = open_rules(sealed, owner_key)
    modes = rules.modes_for(actor_key.owner_id)
    if len(modes) == 1:
        (mode,) = modes
        result = authz.validate_edit(sealed.body, proposed, mode)
    else:
        result = authz.combined_validate(sealed.body, proposed, modes)
    if not result.accepted:
        raise EditRejected(result.mode, result.reason)
    sections = list(message.sections)
    sections[section_index] = reseal(sealed, proposed, owner_key, rules=rules)
    return MamoMessage(message.correlation_id, message.source, tuple(sections))
