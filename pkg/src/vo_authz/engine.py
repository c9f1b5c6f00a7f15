"""Pure authorization decisions over rights tuples.

This is the pluggable decision library: no I/O, no clocks, no state.
It answers three questions — does a pattern cover a target, does a
rights set allow an <action, target> query, and which roles does a
rights set confer — plus the request-vs-granted filtering the issuance
service applies.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional, Sequence

from .lineformat import LineFormatError, split_fields
from .policy import (
    EXACT,
    WILDCARD,
    MatchMode,
    RightsTuple,
    sort_rights,
    validate_role_name,
)

GROUP_SERVICE_TYPE = "group"
MEMBER_ACTION = "member"

READ_ACTION = "read"
WRITE_ACTION = "write"
FILE_SERVICE_TYPE = "file"


class FilterDenied(Exception):
    """A requested right is not covered by any granted right."""

    def __init__(self, uncovered: Sequence[RightsTuple]):
        self.uncovered = tuple(uncovered)
        listing = "; ".join(
            "%s %s %s %s" % (t.service_type, t.action, t.target, t.match_mode)
            for t in self.uncovered
        )
        super().__init__("requested rights not granted: %s" % listing)


class FilterFileError(ValueError):
    """A rights-filter file failed to parse."""

    def __init__(self, line: int, reason: str):
        super().__init__("line %d: %s" % (line, reason))
        self.line = line


@dataclass(frozen=True)
class Decision:
    """Outcome of an authorization check.

    For :func:`check_right` results, ``allowed`` implies
    ``matched_tuple`` is present; layered checks elsewhere may allow
    vacuously with no matching tuple.
    """

    allowed: bool
    matched_tuple: Optional[RightsTuple]
    reason: str


@lru_cache(maxsize=1024)
def _wildcard_regex(pattern: str) -> re.Pattern[str]:
    # '*' matches any run of characters, '/' included; everything else
    # is literal and case-sensitive.
    return re.compile("(?s:%s)\\Z" % ".*".join(re.escape(p) for p in pattern.split("*")))


def match_target(pattern: str, match_mode: MatchMode, target: str) -> bool:
    """Does ``pattern`` cover ``target`` under the given mode?"""
    if match_mode == EXACT or "*" not in pattern:
        return pattern == target
    return _wildcard_regex(pattern).match(target) is not None


def check_right(
    rights: Iterable[RightsTuple], service_type: str, action: str, target: str
) -> Decision:
    """First-match query: is <service_type, action, target> allowed?"""
    for right in sort_rights(rights):
        if (
            right.service_type == service_type
            and right.action == action
            and match_target(right.target, right.match_mode, target)
        ):
            return Decision(True, right, "matched")
    return Decision(False, None, "no-matching-tuple")


def roles_in(
    rights: Iterable[RightsTuple], warnings: Optional[list[str]] = None
) -> list[str]:
    """Roles conferred by a rights set, sorted.

    Only exact-mode ``group member`` tuples count; a wildcard
    membership has no defined account mapping. Tuples whose target is
    not a two-level role name are skipped and, when ``warnings`` is
    given, reported there.
    """
    roles = set()
    for right in rights:
        if (
            right.service_type != GROUP_SERVICE_TYPE
            or right.action != MEMBER_ACTION
            or right.match_mode != EXACT
        ):
            continue
        try:
            roles.add(validate_role_name(right.target))
        except ValueError as exc:
            if warnings is not None:
                warnings.append("skipped malformed role target: %s" % exc)
    return sorted(roles)


def covers(granted: RightsTuple, requested: RightsTuple) -> bool:
    """Does one granted tuple cover one requested tuple?"""
    if granted.service_type != requested.service_type or granted.action != requested.action:
        return False
    if granted.match_mode == WILDCARD:
        return match_target(granted.target, WILDCARD, requested.target)
    return granted == requested


def filter_rights(
    granted: Iterable[RightsTuple], requested: Iterable[RightsTuple]
) -> tuple[RightsTuple, ...]:
    """Restrict an issuance to the requested rights.

    An empty request means "all my rights". Otherwise every requested
    tuple must be covered by some granted tuple; any uncovered tuple
    fails the whole request (no partial result).
    """
    granted_set = sort_rights(granted)
    requested_set = sort_rights(requested)
    if not requested_set:
        return granted_set
    uncovered = [
        req for req in requested_set if not any(covers(g, req) for g in granted_set)
    ]
    if uncovered:
        raise FilterDenied(uncovered)
    return requested_set


def parse_filter_file(text: str) -> list[RightsTuple]:
    """Parse a rights-filter file: one ``<servicetype> <action> <target>
    <exact|wildcard>`` tuple per line, ``#`` comments allowed."""
    tuples: list[RightsTuple] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        try:
            fields = split_fields(raw)
        except LineFormatError as exc:
            raise FilterFileError(lineno, str(exc)) from exc
        if not fields:
            continue
        if len(fields) != 4:
            raise FilterFileError(
                lineno, "expected <servicetype> <action> <target> <exact|wildcard>"
            )
        if fields[3] not in (EXACT, WILDCARD):
            raise FilterFileError(lineno, "bad match mode %r" % fields[3])
        try:
            tuples.append(RightsTuple(fields[0], fields[1], fields[2], fields[3]))
        except ValueError as exc:
            raise FilterFileError(lineno, str(exc)) from exc
    return tuples
