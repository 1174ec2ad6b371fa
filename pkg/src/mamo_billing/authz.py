"""Authorization grammar for segment edits.

Each mode is a family of production rules over the segment's own text.
Segments are decomposed at character granularity, which turns every
rule family into a plain string relation:

    READ_ONLY          proposed == original
    ADD_BEGINNING      original is a suffix of proposed
    ADD_END            original is a prefix of proposed
    ADD_WITHOUT_ALTER  original is a subsequence of proposed
    ADD_WITH_ALTER     anything

Accepted verdicts carry a witness that `replay` turns back into the
proposed text.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from itertools import permutations
from typing import Iterable, Union

from .errors import IncompatibleModeSet, UndefinedDiagonal


class AuthorizationMode(enum.Enum):
    READ_ONLY = 1
    ADD_BEGINNING = 2
    ADD_END = 3
    ADD_WITHOUT_ALTER = 4
    ADD_WITH_ALTER = 5

    @property
    def label(self) -> str:
        return self.name.replace("_", " ")


RO = AuthorizationMode.READ_ONLY
AB = AuthorizationMode.ADD_BEGINNING
AE = AuthorizationMode.ADD_END
AWO = AuthorizationMode.ADD_WITHOUT_ALTER
AWA = AuthorizationMode.ADD_WITH_ALTER

# Row = mode already on the segment, column = mode being added.
# Transcribed cell for cell; the matrix is not symmetric (AB/AWA).
_TABLE = {
    RO: {AB: True, AE: True, AWO: False, AWA: False},
    AB: {RO: True, AE: True, AWO: True, AWA: False},
    AE: {RO: True, AB: True, AWO: True, AWA: False},
    AWO: {RO: False, AB: True, AE: True, AWA: False},
    AWA: {RO: False, AB: True, AE: True, AWO: False},
}

COMPATIBILITY: dict[tuple[AuthorizationMode, AuthorizationMode], bool] = {
    (row, col): cell for row, cols in _TABLE.items() for col, cell in cols.items()
}


class Verdict(enum.Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"


class Reason(str, enum.Enum):
    NOT_IDENTICAL = "not_identical"
    NOT_SUFFIX = "original_not_suffix"
    NOT_PREFIX = "original_not_prefix"
    NOT_SUBSEQUENCE = "original_not_subsequence"


@dataclass(frozen=True)
class Identity:
    pass


@dataclass(frozen=True)
class Prefix:
    text: str


@dataclass(frozen=True)
class Suffix:
    text: str


@dataclass(frozen=True)
class Insertions:
    # (position in original, inserted text); positions strictly ascending
    items: tuple[tuple[int, str], ...]


@dataclass(frozen=True)
class Rewrite:
    """Every original unit erased, then `text` inserted."""

    text: str


Witness = Union[Identity, Prefix, Suffix, Insertions, Rewrite]


@dataclass(frozen=True)
class ValidationResult:
    verdict: Verdict
    witness: Witness | None = None
    reason: Reason | None = None
    mode: AuthorizationMode | None = None

    @property
    def accepted(self) -> bool:
        return self.verdict is Verdict.ACCEPTED

    def __bool__(self) -> bool:
        return self.accepted


def _accept(mode, witness):
    return ValidationResult(Verdict.ACCEPTED, witness=witness, mode=mode)


def _reject(mode, reason):
    return ValidationResult(Verdict.REJECTED, reason=reason, mode=mode)


def leftmost_embedding(original: str, proposed: str) -> list[int] | None:
    """Greedy leftmost match of `original` inside `proposed`.

    Returns the matched index in `proposed` for every character of
    `original`, or None when `original` is not a subsequence.
    """
    matched = []
    j = 0
    for ch in original:
        j = proposed.find(ch, j)
        if j < 0:
            return None
        matched.append(j)
        j += 1
    return matched


def _insertions(original: str, proposed: str, matched: list[int]) -> Insertions:
    items = []
    prev = 0
    for pos, idx in enumerate(matched):
        if idx > prev:
            items.append((pos, proposed[prev:idx]))
        prev = idx + 1
    if prev < len(proposed):
        items.append((len(original), proposed[prev:]))
    return Insertions(tuple(items))


def validate_edit(original: str, proposed: str, mode: AuthorizationMode) -> ValidationResult:
    """Decide whether `proposed` is derivable from `original` under `mode`."""
    if mode is RO:
        if proposed == original:
            return _accept(mode, Identity())
        return _reject(mode, Reason.NOT_IDENTICAL)
    if mode is AB:
        if proposed.endswith(original):
            return _accept(mode, Prefix(proposed[: len(proposed) - len(original)]))
        return _reject(mode, Reason.NOT_SUFFIX)
    if mode is AE:
        if proposed.startswith(original):
            return _accept(mode, Suffix(proposed[len(original):]))
        return _reject(mode, Reason.NOT_PREFIX)
    if mode is AWO:
        matched = leftmost_embedding(original, proposed)
        if matched is None:
            return _reject(mode, Reason.NOT_SUBSEQUENCE)
        return _accept(mode, _insertions(original, proposed, matched))
    if mode is AWA:
        return _accept(mode, Rewrite(proposed))
    raise TypeError(f"not an AuthorizationMode: {mode!r}")


def replay(original: str, witness: Witness) -> str:
    """Apply a derivation witness to `original`."""
    if isinstance(witness, Identity):
        return original
    if isinstance(witness, Prefix):
        return witness.text + original
    if isinstance(witness, Suffix):
        return original + witness.text
    if isinstance(witness, Rewrite):
        return witness.text
    if isinstance(witness, Insertions):
        out = []
        prev = 0
        for pos, text in witness.items:
            out.append(original[prev:pos])
            out.append(text)
            prev = pos
        out.append(original[prev:])
        return "".join(out)
    raise TypeError(f"unknown witness {witness!r}")


def is_compatible(existing: AuthorizationMode, added: AuthorizationMode) -> bool:
    if existing is added:
        raise UndefinedDiagonal(f"{existing.label} against itself is undefined")
    return COMPATIBILITY[(existing, added)]


def check_mode_set(modes: Iterable[AuthorizationMode]) -> frozenset[AuthorizationMode]:
    """Validate a multi-owner mode set; every ordered pair must be compatible."""
    modes = frozenset(modes)
    if not modes:
        raise IncompatibleModeSet("mode set is empty")
    for a, b in permutations(modes, 2):
        if not COMPATIBILITY[(a, b)]:
            raise IncompatibleModeSet(f"{b.label} cannot be added to {a.label}")
    return modes


def combined_validate(
    original: str, proposed: str, modes: Iterable[AuthorizationMode]
) -> ValidationResult:
    """An edit on a multi-owner segment must satisfy every owner's mode.

    On acceptance the witness of the most restrictive mode is returned.
    """
    modes = check_mode_set(modes)
    results = [validate_edit(original, proposed, m) for m in sorted(modes, key=lambda m: m.value)]
    for r in results:
        if not r.accepted:
            return r
    return results[0]
