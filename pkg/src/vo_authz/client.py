"""Client-side workflow: sessions, tagged assertions, file commands.

The credential directory (default ``~/.vo-authz``, overridable with
``VO_AUTHZ_DIR``) holds the long-term identity keypair, one active
session credential, and one file per tagged assertion. A tag names
which assertion a command runs under, so a user can hold several
narrowed assertions side by side and pick per invocation.
"""

from __future__ import annotations

import io
import json
import os
import re
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Optional, Sequence

from . import wire
from .ca import load_identity_keypair, write_owner_only
from .credentials import (
    DEFAULT_LIFETIME_SECONDS,
    Assertion,
    Clock,
    CredentialError,
    MalformedCredential,
    SessionBundle,
    answer_challenge,
    assertion_from_doc,
    assertion_to_doc,
    delegate_session,
    format_timestamp,
    generate_keypair,
    private_key_from_pem,
    private_key_to_pem,
    session_from_doc,
    session_to_doc,
    utc_now,
)
from .engine import roles_in
from .policy import RightsTuple

TAG_RE = re.compile(r"[a-zA-Z][a-zA-Z0-9_-]*\Z")

ENV_DIR = "VO_AUTHZ_DIR"
DEFAULT_DIR = "~/.vo-authz"

IDENTITY_FILE = "identity.json"
SESSION_FILE = "session.json"
TAGS_DIR = "tags"


class ClientError(Exception):
    """A local precondition failed; nothing was sent."""


class ServiceError(Exception):
    """A server answered with a non-200 status."""

    def __init__(self, status: int, code: str, message: str, uncovered=None):
        super().__init__("%d %s: %s" % (status, code, message))
        self.status = status
        self.code = code
        self.reason = message
        self.uncovered = uncovered or []


def credential_dir(explicit: Optional[str] = None) -> str:
    path = explicit or os.environ.get(ENV_DIR) or os.path.expanduser(DEFAULT_DIR)
    return os.path.abspath(path)


def identity_path(directory: str) -> str:
    return os.path.join(directory, IDENTITY_FILE)


def _session_path(directory: str) -> str:
    return os.path.join(directory, SESSION_FILE)


def _tag_path(directory: str, tag: str) -> str:
    if not TAG_RE.match(tag):
        raise ClientError("bad tag name %r" % tag)
    return os.path.join(directory, TAGS_DIR, "%s.json" % tag)


# -- session lifecycle ---------------------------------------------------------


def identity_init(
    directory: str,
    passphrase: Optional[bytes] = None,
    lifetime_seconds: int = DEFAULT_LIFETIME_SECONDS,
    clock: Clock = utc_now,
) -> SessionBundle:
    """Mint and store a fresh session credential from the identity key."""
    path = identity_path(directory)
    if not os.path.exists(path):
        raise ClientError(
            "no identity at %s; create one with 'vo-ca issue-identity'" % path
        )
    identity, identity_key = load_identity_keypair(path, passphrase)
    now = clock()
    if now >= identity.not_after:
        raise ClientError(
            "identity expired at %s" % format_timestamp(identity.not_after)
        )
    session_private, session_public = generate_keypair()
    session = delegate_session(
        identity, identity_key, session_public, now + timedelta(seconds=lifetime_seconds)
    )
    bundle = SessionBundle(session, session_private)
    doc = {
        "kind": "session-bundle",
        "session": session_to_doc(session),
        "private_key_pem": private_key_to_pem(session_private),
    }
    write_owner_only(_session_path(directory), json.dumps(doc, indent=1).encode("utf-8"))
    return bundle


def load_session(directory: str, clock: Clock = utc_now) -> SessionBundle:
    path = _session_path(directory)
    if not os.path.exists(path):
        raise ClientError("no session credential; run 'vo identity-init' first")
    try:
        with open(path, "r", encoding="utf-8") as handle:
            doc = json.load(handle)
        if not isinstance(doc, dict) or doc.get("kind") != "session-bundle":
            raise MalformedCredential("not a session bundle")
        session = session_from_doc(doc["session"])
        private_key = private_key_from_pem(doc["private_key_pem"])
    except (KeyError, TypeError, json.JSONDecodeError, CredentialError) as exc:
        raise ClientError("unreadable session file %s: %s" % (path, exc))
    if clock() >= session.not_after:
        raise ClientError(
            "session expired at %s; run 'vo identity-init'"
            % format_timestamp(session.not_after)
        )
    return SessionBundle(session, private_key)


# -- tagged assertions -----------------------------------------------------------


@dataclass(frozen=True)
class TagInfo:
    tag: str
    subject: str
    roles: tuple[str, ...]
    not_after: datetime
    expired: bool


def store_tag(directory: str, tag: str, assertion: Assertion, clock: Clock = utc_now) -> bool:
    """Write a tag file atomically; returns whether a tag was replaced."""
    path = _tag_path(directory, tag)
    os.makedirs(os.path.dirname(path), mode=0o700, exist_ok=True)
    existed = os.path.exists(path)
    doc = {
        "created_at": format_timestamp(clock()),
        "assertion": assertion_to_doc(assertion),
    }
    data = json.dumps(doc, indent=1).encode("utf-8")
    tmp = "%s.tmp.%d" % (path, os.getpid())
    write_owner_only(tmp, data)
    os.replace(tmp, path)
    return existed


def load_tag(directory: str, tag: str) -> Assertion:
    path = _tag_path(directory, tag)
    if not os.path.exists(path):
        raise ClientError("no such tag: %s" % tag)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            doc = json.load(handle)
        return assertion_from_doc(doc["assertion"])
    except (KeyError, TypeError, json.JSONDecodeError, CredentialError) as exc:
        raise ClientError("unreadable tag %r: %s" % (tag, exc))


def load_unexpired_tag(directory: str, tag: str, clock: Clock = utc_now) -> Assertion:
    """Tag lookup with the friendly client-side expiry check."""
    assertion = load_tag(directory, tag)
    if clock() >= assertion.body.not_after:
        raise ClientError(
            "tag %r expired at %s; run 'vo cas-init %s' again"
            % (tag, format_timestamp(assertion.body.not_after), tag)
        )
    return assertion


def list_tags(directory: str, clock: Clock = utc_now) -> list[TagInfo]:
    tags_dir = os.path.join(directory, TAGS_DIR)
    if not os.path.isdir(tags_dir):
        return []
    now = clock()
    infos = []
    for name in sorted(os.listdir(tags_dir)):
        if not name.endswith(".json"):
            continue
        tag = name[: -len(".json")]
        try:
            assertion = load_tag(directory, tag)
        except ClientError:
            continue
        body = assertion.body
        infos.append(
            TagInfo(
                tag=tag,
                subject=body.subject,
                roles=tuple(roles_in(body.rights)),
                not_after=body.not_after,
                expired=now >= body.not_after,
            )
        )
    return infos


# -- issuance protocol client ------------------------------------------------------


def _expect_frame(channel: wire.Channel, expected_type: str) -> dict:
    frame = channel.recv_frame()
    if frame["type"] == "error":
        raise ServiceError(
            frame.get("status", 500),
            frame.get("code", "error"),
            frame.get("message", "unspecified error"),
        )
    if frame["type"] != expected_type:
        raise ServiceError(500, "protocol-error", "unexpected frame %r" % frame["type"])
    return frame


def _raise_for_status(frame: dict) -> dict:
    if frame.get("status") != 200:
        raise ServiceError(
            frame.get("status", 500),
            frame.get("code", "error"),
            frame.get("message", "unspecified error"),
            uncovered=frame.get("uncovered"),
        )
    return frame


def issue_assertion(
    address: tuple[str, int],
    bundle: SessionBundle,
    requested: Sequence[RightsTuple] = (),
    lifetime_seconds: Optional[int] = None,
    timeout: float = 10.0,
) -> Assertion:
    """Authenticate to the issuance service and obtain an assertion."""
    channel = wire.connect(address, timeout=timeout)
    try:
        answer_challenge(channel, bundle)
        request: dict = {"type": "issue_request"}
        if requested:
            request["rights"] = [t.as_dict() for t in requested]
        if lifetime_seconds is not None:
            request["lifetime_seconds"] = lifetime_seconds
        channel.send_frame(request)
        frame = _raise_for_status(_expect_frame(channel, "issue_response"))
        return assertion_from_doc(frame.get("assertion"))
    finally:
        channel.close()


def admin_load(
    address: tuple[str, int],
    bundle: SessionBundle,
    commands: str,
    timeout: float = 10.0,
) -> int:
    """Send a policy command file to the issuance service; returns count."""
    channel = wire.connect(address, timeout=timeout)
    try:
        answer_challenge(channel, bundle)
        channel.send_frame({"type": "admin_load", "commands": commands})
        frame = _raise_for_status(_expect_frame(channel, "admin_result"))
        return frame.get("applied", 0)
    finally:
        channel.close()


# -- resource protocol client -------------------------------------------------------


class ResourceSession:
    """One authenticated connection to the file service."""

    def __init__(
        self,
        address: tuple[str, int],
        bundle: SessionBundle,
        assertion: Optional[Assertion] = None,
        timeout: float = 10.0,
    ):
        self.account: Optional[str] = None
        self.via: Optional[str] = None
        self._channel = wire.connect(address, timeout=timeout)
        try:
            answer_challenge(self._channel, bundle)
            if assertion is not None:
                self._channel.send_frame(
                    {"type": "present_assertion", "assertion": assertion_to_doc(assertion)}
                )
                frame = _raise_for_status(_expect_frame(self._channel, "response"))
                self.account = frame.get("account")
                self.via = frame.get("via")
        except BaseException:
            self._channel.close()
            raise

    def __enter__(self) -> "ResourceSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def ls(self, path: str) -> list[str]:
        self._channel.send_frame({"type": "command", "op": "LIST", "path": path})
        frame = _raise_for_status(_expect_frame(self._channel, "response"))
        return list(frame.get("entries", []))

    def get(self, path: str, writer) -> int:
        """Download into ``writer.write``; returns the byte count."""
        self._channel.send_frame({"type": "command", "op": "GET", "path": path})
        _raise_for_status(_expect_frame(self._channel, "response"))
        header = _expect_frame(self._channel, "data_header")
        size = header["size"]
        self._channel.recv_bytes_to(size, writer)
        return size

    def get_bytes(self, path: str) -> bytes:
        sink = io.BytesIO()
        self.get(path, sink)
        return sink.getvalue()

    def put(self, path: str, data: bytes) -> None:
        self._channel.send_frame(
            {"type": "command", "op": "PUT", "path": path, "size": len(data)}
        )
        self._channel.send_bytes(data)
        _raise_for_status(_expect_frame(self._channel, "response"))

    def quit(self) -> None:
        self._channel.send_frame({"type": "command", "op": "QUIT"})
        _raise_for_status(_expect_frame(self._channel, "response"))

    def close(self) -> None:
        self._channel.close()
