"""Policy database for a virtual organization.

The database knows four kinds of things: service types (a named set of
actions, e.g. ``group`` with action ``member``), target objects, member
subjects (distinguished names), and grants. A grant binds a subject to
one rights tuple <service_type, action, target, match_mode>. Roles and
groups are not special-cased anywhere in here: a role is simply an
object of service type ``group`` that subjects hold the ``member``
action on.

Stores are immutable values; every mutation returns a new store, which
gives bulk loads their atomicity for free and lets concurrent readers
hold a consistent snapshot.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Literal, Mapping

from .lineformat import LineFormatError, quote_field, split_fields

TOKEN_RE = re.compile(r"[a-z][a-z0-9_-]*\Z")
ROLE_PART_RE = re.compile(r"[a-zA-Z0-9][a-zA-Z0-9._-]*\Z")

MatchMode = Literal["exact", "wildcard"]
EXACT: MatchMode = "exact"
WILDCARD: MatchMode = "wildcard"


class PolicyError(Exception):
    """Base class for policy database errors."""


class UnregisteredError(PolicyError):
    """A grant referenced a subject, service type, action, or object
    that the store does not know."""


class CommandFileError(PolicyError):
    """A command file failed to load; nothing was applied."""

    def __init__(self, line: int, reason: str):
        super().__init__("line %d: %s" % (line, reason))
        self.line = line
        self.reason = reason


def validate_subject_dn(value: str) -> str:
    """Validate a slash-delimited distinguished name and return it."""
    if not value or value != value.strip():
        raise ValueError("DN must be non-empty with no surrounding whitespace")
    if not value.startswith("/"):
        raise ValueError("DN must begin with '/': %r" % value)
    if "=" not in value:
        raise ValueError("DN must contain at least one '=': %r" % value)
    if '"' in value or any(ord(c) < 0x20 for c in value):
        raise ValueError("DN contains unrepresentable characters: %r" % value)
    return value


def validate_role_name(value: str) -> str:
    """Validate a two-level role name of the form ``vo/name``."""
    parts = value.split("/")
    if len(parts) != 2 or not all(ROLE_PART_RE.match(p) for p in parts):
        raise ValueError("role name must be '<vo>/<name>': %r" % value)
    return value


def _validate_target(target: str) -> str:
    if not target:
        raise ValueError("target must be non-empty")
    if any(c.isspace() for c in target) or '"' in target:
        raise ValueError("target may not contain whitespace or quotes: %r" % target)
    return target


@dataclass(frozen=True, order=True)
class RightsTuple:
    """One authorization right: <service_type, action, target, match_mode>.

    A wildcard-mode tuple whose target contains no ``*`` is normalized
    to exact mode at construction; the two are indistinguishable to the
    matcher, and normalizing keeps role extraction and request
    filtering consistent.
    """

    service_type: str
    action: str
    target: str
    match_mode: MatchMode = EXACT

    def __post_init__(self):
        for tok in (self.service_type, self.action):
            if not TOKEN_RE.match(tok):
                raise ValueError("bad token %r" % tok)
        _validate_target(self.target)
        if self.match_mode not in (EXACT, WILDCARD):
            raise ValueError("bad match mode %r" % self.match_mode)
        if self.match_mode == WILDCARD and "*" not in self.target:
            object.__setattr__(self, "match_mode", EXACT)

    def as_dict(self) -> dict[str, object]:
        return {
            "service_type": self.service_type,
            "action": self.action,
            "target": self.target,
            "match_mode": self.match_mode,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "RightsTuple":
        if set(data) != {"service_type", "action", "target", "match_mode"}:
            raise ValueError("bad rights tuple fields: %r" % sorted(data))
        if not all(isinstance(v, str) for v in data.values()):
            raise ValueError("rights tuple fields must be strings")
        return cls(
            service_type=data["service_type"],  # type: ignore[arg-type]
            action=data["action"],  # type: ignore[arg-type]
            target=data["target"],  # type: ignore[arg-type]
            match_mode=data["match_mode"],  # type: ignore[arg-type]
        )


@dataclass(frozen=True)
class ServiceType:
    """A service type: a name plus the set of actions it defines."""

    name: str
    actions: frozenset[str]

    def __post_init__(self):
        if not TOKEN_RE.match(self.name):
            raise ValueError("bad service type name %r" % self.name)
        if not self.actions:
            raise ValueError("service type %r has no actions" % self.name)
        for action in self.actions:
            if not TOKEN_RE.match(action):
                raise ValueError("bad action %r" % action)
        object.__setattr__(self, "actions", frozenset(self.actions))


@dataclass(frozen=True)
class PolicyStore:
    """Immutable policy database value; mutations return a new store."""

    service_types: Mapping[str, ServiceType] = field(default_factory=dict)
    objects: frozenset[tuple[str, str]] = frozenset()
    subjects: frozenset[str] = frozenset()
    grants: frozenset[tuple[str, RightsTuple]] = frozenset()

    # -- registration -----------------------------------------------------

    def register_service_type(self, service_type: ServiceType) -> "PolicyStore":
        if service_type.name in self.service_types:
            raise PolicyError("duplicate service type %r" % service_type.name)
        for other in self.service_types.values():
            clash = other.actions & service_type.actions
            if clash:
                # Grant lines name only the action, so an action must
                # resolve to exactly one service type store-wide.
                raise PolicyError(
                    "action %r already belongs to service type %r"
                    % (sorted(clash)[0], other.name)
                )
        types = dict(self.service_types)
        types[service_type.name] = service_type
        return replace(self, service_types=types)

    def register_subject(self, subject: str) -> "PolicyStore":
        validate_subject_dn(subject)
        return replace(self, subjects=self.subjects | {subject})

    def register_object(self, service_type: str, target: str) -> "PolicyStore":
        if service_type not in self.service_types:
            raise UnregisteredError("unknown service type %r" % service_type)
        _validate_target(target)
        return replace(self, objects=self.objects | {(service_type, target)})

    # -- grants -----------------------------------------------------------

    def grant(self, subject: str, right: RightsTuple) -> "PolicyStore":
        if subject not in self.subjects:
            raise UnregisteredError("unregistered subject %r" % subject)
        st = self.service_types.get(right.service_type)
        if st is None:
            raise UnregisteredError("unknown service type %r" % right.service_type)
        if right.action not in st.actions:
            raise UnregisteredError(
                "service type %r has no action %r" % (right.service_type, right.action)
            )
        if right.match_mode == EXACT and (right.service_type, right.target) not in self.objects:
            raise UnregisteredError(
                "unregistered object %r of service type %r"
                % (right.target, right.service_type)
            )
        return replace(self, grants=self.grants | {(subject, right)})

    def rescind(self, subject: str, right: RightsTuple) -> "PolicyStore":
        return replace(self, grants=self.grants - {(subject, right)})

    def rights_of(self, subject: str) -> list[RightsTuple]:
        """All rights granted to a subject, deterministically ordered."""
        return sorted(right for holder, right in self.grants if holder == subject)

    def service_type_for_action(self, action: str) -> str:
        owners = [st.name for st in self.service_types.values() if action in st.actions]
        if not owners:
            raise UnregisteredError("no registered service type has action %r" % action)
        return owners[0]


# -- command files ---------------------------------------------------------
#
# servicetype <name> <action>[,<action>...]
# user <subject-dn>
# object <servicetype> <target>
# grant <subject-dn> <action> <target> [exact|wildcard]     (default exact)
# rescind <subject-dn> <action> <target> [exact|wildcard]


def apply_command_file(store: PolicyStore, text: str) -> tuple[PolicyStore, int]:
    """Apply a command file atomically.

    Returns the new store and the number of commands applied. Any error
    raises :class:`CommandFileError` naming the offending line, and the
    caller's store is untouched (stores are values).
    """
    applied = 0
    current = store
    for lineno, raw in enumerate(text.splitlines(), start=1):
        try:
            fields = split_fields(raw)
        except LineFormatError as exc:
            raise CommandFileError(lineno, str(exc)) from exc
        if not fields:
            continue
        try:
            current = _apply_command(current, fields)
        except (PolicyError, ValueError) as exc:
            raise CommandFileError(lineno, str(exc)) from exc
        applied += 1
    return current, applied


def _parse_mode(fields: list[str]) -> MatchMode:
    if len(fields) == 4:
        return EXACT
    mode = fields[4]
    if mode not in (EXACT, WILDCARD):
        raise ValueError("match mode must be 'exact' or 'wildcard', got %r" % mode)
    return mode  # type: ignore[return-value]


def _apply_command(store: PolicyStore, fields: list[str]) -> PolicyStore:
    verb = fields[0]
    if verb == "servicetype":
        if len(fields) != 3:
            raise ValueError("servicetype takes <name> <action>[,<action>...]")
        actions = [a for a in fields[2].split(",") if a]
        if len(actions) != len(set(actions)):
            raise ValueError("duplicate action in %r" % fields[2])
        return store.register_service_type(ServiceType(fields[1], frozenset(actions)))
    if verb == "user":
        if len(fields) != 2:
            raise ValueError("user takes <subject-dn>")
        return store.register_subject(fields[1])
    if verb == "object":
        if len(fields) != 3:
            raise ValueError("object takes <servicetype> <target>")
        return store.register_object(fields[1], fields[2])
    if verb in ("grant", "rescind"):
        if len(fields) not in (4, 5):
            raise ValueError("%s takes <subject-dn> <action> <target> [exact|wildcard]" % verb)
        subject = validate_subject_dn(fields[1])
        right = RightsTuple(
            service_type=store.service_type_for_action(fields[2]),
            action=fields[2],
            target=fields[3],
            match_mode=_parse_mode(fields),
        )
        if verb == "grant":
            return store.grant(subject, right)
        return store.rescind(subject, right)
    raise ValueError("unknown command %r" % verb)


def save_snapshot(store: PolicyStore) -> bytes:
    """Serialize a store as a replayable command file."""
    lines = ["# policy snapshot (replayable command file)"]
    for name in sorted(store.service_types):
        st = store.service_types[name]
        lines.append("servicetype %s %s" % (name, ",".join(sorted(st.actions))))
    for subject in sorted(store.subjects):
        lines.append("user %s" % quote_field(subject))
    for service_type, target in sorted(store.objects):
        lines.append("object %s %s" % (service_type, target))
    for subject, right in sorted(store.grants, key=lambda g: (g[0],) + _sort_key(g[1])):
        lines.append(
            "grant %s %s %s %s"
            % (quote_field(subject), right.action, right.target, right.match_mode)
        )
    return ("\n".join(lines) + "\n").encode("utf-8")


def _sort_key(right: RightsTuple) -> tuple[str, str, str, str]:
    return (right.service_type, right.action, right.target, right.match_mode)


def load_snapshot(data: bytes) -> PolicyStore:
    """Rebuild a store from :func:`save_snapshot` output."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CommandFileError(0, "snapshot is not UTF-8") from exc
    store, _ = apply_command_file(PolicyStore(), text)
    return store


def sort_rights(rights: Iterable[RightsTuple]) -> tuple[RightsTuple, ...]:
    """Deduplicate and sort rights into the canonical order."""
    return tuple(sorted(set(rights)))
