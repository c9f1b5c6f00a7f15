"""File service that honors VO role assertions.

A session is: challenge-response handshake, an optional
``present_assertion`` frame, then a command loop (LIST, GET, PUT,
QUIT). The presented assertion is verified against the server's
trusted issuer set, its roles are mapped to a local account by walking
the role map in file order, and the grid map must authorize the
issuing service for the chosen account. Sessions without an assertion
fall back to the subject's personal grid-map account.

Accounts are simulated: a table maps each account to a home directory
and a writable flag under one export root; enforcement is the same
two-layer check the real service would make, without OS account
switching. Every file command writes one audit record before its
response; audit failures fail closed.
"""

from __future__ import annotations

import argparse
import json
import os
import posixpath
import re
import socketserver
import sys
import threading
from dataclasses import dataclass
from datetime import datetime
from typing import Mapping, Optional

from . import wire
from .credentials import (
    AuthenticatedPeer,
    BadSignature,
    Clock,
    CredentialError,
    Expired,
    HandshakeError,
    MalformedCredential,
    NotYetValid,
    UntrustedIssuer,
    VerifiedRights,
    assertion_from_doc,
    authenticate_peer,
    format_timestamp,
    identity_from_doc,
    public_key_from_pem,
    utc_now,
    verify_assertion,
)
from .engine import (
    FILE_SERVICE_TYPE,
    READ_ACTION,
    WRITE_ACTION,
    Decision,
    check_right,
    roles_in,
)
from .lineformat import (
    LineFormatError,
    parse_kv_config,
    split_fields,
    split_quoted_list,
)
from .policy import RightsTuple, validate_role_name, validate_subject_dn

ACCOUNT_RE = re.compile(r"[a-z_][a-z0-9_-]*\Z")
IO_TIMEOUT_SECONDS = 30.0
MAX_PUT_BYTES = 64 * 1024 * 1024
DEFAULT_PORT = 2813

_NO_VALUE = "-"  # audit column placeholder


class MapFileError(ValueError):
    """A role-map, grid-map, or account-table file failed to parse."""

    def __init__(self, line: int, reason: str):
        super().__init__("line %d: %s" % (line, reason))
        self.line = line


class MappingError(Exception):
    """No account mapping exists for this session."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class PathError(ValueError):
    """A client-supplied path is unusable (shape or confinement)."""


class AuditError(Exception):
    """The audit log could not be written; commands must fail closed."""


# -- mapping tables ----------------------------------------------------------


def _validate_account(token: str) -> str:
    if not ACCOUNT_RE.match(token):
        raise ValueError("bad account token %r" % token)
    return token


def parse_role_map(text: str) -> tuple[tuple[str, str], ...]:
    """Parse ``<vo>/<role> <account>`` lines; order is significant."""
    entries: list[tuple[str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        try:
            fields = split_fields(raw)
            if not fields:
                continue
            if len(fields) != 2:
                raise ValueError("expected <vo>/<role> <account>")
            entries.append((validate_role_name(fields[0]), _validate_account(fields[1])))
        except (LineFormatError, ValueError) as exc:
            raise MapFileError(lineno, str(exc)) from exc
    return tuple(entries)


def parse_grid_map(text: str) -> dict[str, tuple[str, ...]]:
    """Parse ``"<DN>" <account>[,<account>...]`` lines."""
    entries: dict[str, tuple[str, ...]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        try:
            fields = split_fields(raw)
            if not fields:
                continue
            if len(fields) != 2:
                raise ValueError('expected "<DN>" <account>[,<account>...]')
            dn = validate_subject_dn(fields[0])
            accounts = [_validate_account(a) for a in split_quoted_list(fields[1])]
            if not accounts:
                raise ValueError("empty account list")
            merged = entries.get(dn, ()) + tuple(accounts)
            entries[dn] = tuple(dict.fromkeys(merged))
        except (LineFormatError, ValueError) as exc:
            raise MapFileError(lineno, str(exc)) from exc
    return entries


@dataclass(frozen=True)
class AccountInfo:
    home: str
    writable: bool


def parse_account_table(text: str) -> dict[str, AccountInfo]:
    """Parse ``<account> <home-path> <ro|rw>`` lines."""
    table: dict[str, AccountInfo] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        try:
            fields = split_fields(raw)
            if not fields:
                continue
            if len(fields) != 3:
                raise ValueError("expected <account> <home-path> <ro|rw>")
            account = _validate_account(fields[0])
            if account in table:
                raise ValueError("duplicate account %r" % account)
            if fields[2] not in ("ro", "rw"):
                raise ValueError("mode must be 'ro' or 'rw', got %r" % fields[2])
            table[account] = AccountInfo(
                home=canonical_path(fields[1]), writable=fields[2] == "rw"
            )
        except (LineFormatError, ValueError) as exc:
            raise MapFileError(lineno, str(exc)) from exc
    return table


# -- account mapping -----------------------------------------------------------


@dataclass(frozen=True)
class AccountDecision:
    """Which local account a session runs as, and why."""

    account: str
    via: str  # "role:<vo>/<name>" or "personal"
    subject: str
    issuer: str


def map_to_account(
    verified: VerifiedRights,
    role_map: tuple[tuple[str, str], ...],
    grid_map: Mapping[str, tuple[str, ...]],
) -> AccountDecision:
    """Map verified rights to a local account.

    The role map is walked in file order and the first role the rights
    confer wins. The winning account must appear in the issuer's
    grid-map entry: that is the cross-VO check, and failing it is a
    hard error rather than a fallthrough. Only when no role matches at
    all does the subject's personal grid-map entry apply
    (lexicographically first account).
    """
    roles = set(roles_in(verified.rights))
    for role, account in role_map:
        if role not in roles:
            continue
        if account not in grid_map.get(verified.issuer, ()):
            raise MappingError(
                "issuer-not-authorized-for-account",
                "issuer %r may not map role %s to account %r"
                % (verified.issuer, role, account),
            )
        return AccountDecision(
            account=account,
            via="role:%s" % role,
            subject=verified.subject,
            issuer=verified.issuer,
        )
    personal = grid_map.get(verified.subject, ())
    if not personal:
        raise MappingError(
            "no-role-and-no-personal-mapping",
            "no role matched and %r has no personal account" % verified.subject,
        )
    return AccountDecision(
        account=sorted(personal)[0],
        via="personal",
        subject=verified.subject,
        issuer=verified.issuer,
    )


# -- path handling -------------------------------------------------------------


def canonical_path(path) -> str:
    """Normalize a client-supplied virtual path to an absolute form."""
    if not isinstance(path, str) or not path.startswith("/"):
        raise PathError("path must be an absolute string")
    if any(ord(c) < 0x20 for c in path):
        raise PathError("path contains control characters")
    return posixpath.normpath(path)


def _under(path: str, prefix: str) -> bool:
    return path == prefix or path.startswith(prefix.rstrip("/") + "/")


# -- the two-layer authorization check ------------------------------------------


def authorize_file_op(
    rights: tuple[RightsTuple, ...],
    decision: AccountDecision,
    op: str,
    path: str,
    account_table: Mapping[str, AccountInfo],
    server_name: str,
    public_root: Optional[str] = None,
) -> Decision:
    """Authorize one LIST/GET/PUT against a canonical virtual path.

    Layer 1 applies the assertion's ``file`` tuples to the operation's
    URL, and passes vacuously when the assertion carries none
    (role-only sessions defer wholly to account permissions). Layer 2
    is the account's local permissions: reads under the home or the
    public root, writes under a writable home. Both must allow.
    """
    action = WRITE_ACTION if op == "PUT" else READ_ACTION
    file_tuples = [r for r in rights if r.service_type == FILE_SERVICE_TYPE]
    matched = None
    if file_tuples:
        url = "ftp://%s%s" % (server_name, path)
        layer1 = check_right(file_tuples, FILE_SERVICE_TYPE, action, url)
        if not layer1.allowed:
            return Decision(False, None, "cas-rights")
        matched = layer1.matched_tuple
    info = account_table[decision.account]
    if action == READ_ACTION:
        local_ok = _under(path, info.home) or (
            public_root is not None and _under(path, public_root)
        )
    else:
        local_ok = _under(path, info.home) and info.writable
    if not local_ok:
        return Decision(False, None, "local-perms")
    return Decision(True, matched, "ok")


# -- audit log -------------------------------------------------------------------


@dataclass(frozen=True)
class AuditRecord:
    timestamp: datetime
    subject: str
    issuer: str
    account: str
    via: str
    op: str  # LIST | GET | PUT | MAP
    path: str
    decision: str  # allow | deny
    reason: str

    def line(self) -> str:
        return "\t".join(
            (
                format_timestamp(self.timestamp),
                self.subject,
                self.issuer,
                self.account,
                self.via,
                self.op,
                _audit_field(self.path),
                self.decision,
                self.reason,
            )
        ) + "\n"


class AuditLog:
    """Append-only, serialized, flushed before each response."""

    def __init__(self, path: str):
        self._lock = threading.Lock()
        self._handle = open(path, "a", encoding="utf-8")

    def write(self, record: AuditRecord) -> None:
        try:
            with self._lock:
                self._handle.write(record.line())
                self._handle.flush()
        except (OSError, ValueError) as exc:
            raise AuditError("audit log unavailable: %s" % exc) from exc

    def close(self) -> None:
        with self._lock:
            self._handle.close()


# -- the service -------------------------------------------------------------------


class ResourceService:
    """Session state machine plus the immutable maps it consults."""

    def __init__(
        self,
        server_name: str,
        export_root: str,
        role_map: tuple[tuple[str, str], ...],
        grid_map: Mapping[str, tuple[str, ...]],
        account_table: Mapping[str, AccountInfo],
        trusted_issuers: Mapping[str, bytes],
        trust_root: bytes,
        audit_log: AuditLog,
        public_root: Optional[str] = None,
        clock: Clock = utc_now,
    ):
        for role, account in role_map:
            if account not in account_table:
                raise ValueError("role %s maps to unknown account %r" % (role, account))
        for dn, accounts in grid_map.items():
            for account in accounts:
                if account not in account_table:
                    raise ValueError("grid map names unknown account %r" % account)
        self.server_name = server_name
        self.export_root = os.path.realpath(export_root)
        if not os.path.isdir(self.export_root):
            raise ValueError("export root %r is not a directory" % export_root)
        self.role_map = tuple(role_map)
        self.grid_map = dict(grid_map)
        self.account_table = dict(account_table)
        self.trusted_issuers = dict(trusted_issuers)
        self.trust_root = trust_root
        self.audit_log = audit_log
        self.public_root = canonical_path(public_root) if public_root else None
        self.clock = clock

    # -- filesystem ----------------------------------------------------------

    def fs_path(self, virtual: str) -> str:
        """Map a canonical virtual path into the export root.

        The realpath of the result (or of its parent, for targets that
        do not exist yet) must stay inside the export root, and the
        target itself may not be a symlink.
        """
        fs = os.path.join(self.export_root, virtual.lstrip("/"))
        if os.path.islink(fs):
            raise PathError("symlinks are not served")
        probe = fs if os.path.exists(fs) else os.path.dirname(fs)
        real = os.path.realpath(probe)
        if real != self.export_root and not real.startswith(self.export_root + os.sep):
            raise PathError("path escapes the export root")
        return fs

    # -- session driving -------------------------------------------------------

    def handle_session(self, channel: wire.Channel) -> None:
        try:
            peer = authenticate_peer(channel, self.trust_root, self.clock())
        except HandshakeError as exc:
            _best_effort_send(
                channel,
                {"type": "response", "status": 401, "code": exc.code, "message": str(exc)},
            )
            return
        session = _Session(self, peer)
        try:
            session.run(channel)
        except (wire.WireError, AuditError):
            pass

    def audit(
        self,
        subject: str,
        issuer: Optional[str],
        decision: Optional[AccountDecision],
        op: str,
        path: str,
        allowed: bool,
        reason: str,
    ) -> None:
        self.audit_log.write(
            AuditRecord(
                timestamp=self.clock(),
                subject=subject,
                issuer=issuer or _NO_VALUE,
                account=decision.account if decision else _NO_VALUE,
                via=decision.via if decision else _NO_VALUE,
                op=op,
                path=path,
                decision="allow" if allowed else "deny",
                reason=reason,
            )
        )


class _Session:
    """One authenticated connection's state and command loop."""

    def __init__(self, service: ResourceService, peer: AuthenticatedPeer):
        self.service = service
        self.peer = peer
        self.rights: tuple[RightsTuple, ...] = ()
        self.issuer: Optional[str] = None  # None until an assertion is accepted
        self.decision: Optional[AccountDecision] = None
        self.saw_traffic = False

    def run(self, channel: wire.Channel) -> None:
        try:
            while True:
                frame = channel.recv_frame()
                kind = frame.get("type")
                if kind == "present_assertion":
                    if not self._present_assertion(channel, frame):
                        return
                elif kind == "command":
                    if not self._command(channel, frame):
                        return
                else:
                    channel.send_frame(
                        _protocol_error("unsupported frame type %r" % kind)
                    )
                    return
        except wire.ConnectionClosedError:
            return
        except AuditError:
            _best_effort_send(
                channel,
                {
                    "type": "response",
                    "status": 500,
                    "code": "audit-unavailable",
                    "message": "cannot record the operation, refusing to serve it",
                },
            )
            return
        finally:
            channel.close()

    # -- assertion intake ------------------------------------------------------

    def _present_assertion(self, channel: wire.Channel, frame: dict) -> bool:
        service = self.service
        if self.saw_traffic:
            channel.send_frame(
                _protocol_error("present_assertion must be the first frame")
            )
            return False
        self.saw_traffic = True

        def reject(status: int, code: str, message: str, issuer: Optional[str]) -> bool:
            service.audit(self.peer.subject, issuer, None, "MAP", _NO_VALUE, False, code)
            channel.send_frame(
                {"type": "response", "status": status, "code": code, "message": message}
            )
            return False

        try:
            assertion = assertion_from_doc(frame.get("assertion"))
        except MalformedCredential as exc:
            return reject(400, "bad-assertion", str(exc), None)
        issuer = assertion.body.issuer
        try:
            verified = verify_assertion(
                assertion, service.trusted_issuers, service.clock()
            )
        except UntrustedIssuer as exc:
            return reject(401, "untrusted-issuer", str(exc), issuer)
        except BadSignature as exc:
            return reject(401, "bad-signature", str(exc), issuer)
        except Expired as exc:
            return reject(401, "expired", str(exc), issuer)
        except NotYetValid as exc:
            return reject(401, "not-yet-valid", str(exc), issuer)
        except CredentialError as exc:
            return reject(401, "bad-assertion", str(exc), issuer)
        if verified.subject != self.peer.subject:
            return reject(
                401,
                "subject-mismatch",
                "assertion subject %r does not match the authenticated peer"
                % verified.subject,
                issuer,
            )
        try:
            decision = map_to_account(verified, service.role_map, service.grid_map)
        except MappingError as exc:
            return reject(403, exc.code, str(exc), issuer)
        self.rights = verified.rights
        self.issuer = verified.issuer
        self.decision = decision
        channel.send_frame(
            {
                "type": "response",
                "status": 200,
                "account": decision.account,
                "via": decision.via,
            }
        )
        return True

    # -- commands ----------------------------------------------------------------

    def _command(self, channel: wire.Channel, frame: dict) -> bool:
        self.saw_traffic = True
        op = frame.get("op")
        if op == "QUIT":
            channel.send_frame({"type": "response", "status": 200, "message": "bye"})
            return False
        if op not in ("LIST", "GET", "PUT"):
            channel.send_frame(_protocol_error("unknown op %r" % op))
            return False
        if self.decision is None and not self._map_personal(channel, op):
            return False
        if op == "LIST":
            return self._list(channel, frame)
        if op == "GET":
            return self._get(channel, frame)
        return self._put(channel, frame)

    def _map_personal(self, channel: wire.Channel, op: str) -> bool:
        """Sessions without an assertion map on first use, personally."""
        service = self.service
        anonymous = VerifiedRights(
            issuer=self.peer.subject, subject=self.peer.subject, rights=()
        )
        try:
            self.decision = map_to_account(anonymous, service.role_map, service.grid_map)
        except MappingError as exc:
            service.audit(
                self.peer.subject, self.issuer, None, "MAP", _NO_VALUE, False, exc.code
            )
            channel.send_frame(
                {"type": "response", "status": 403, "code": exc.code, "message": str(exc)}
            )
            return False
        return True

    def _check(self, channel: wire.Channel, op: str, raw_path) -> Optional[str]:
        """Canonicalize and authorize; audit and respond on failure."""
        service = self.service
        try:
            path = canonical_path(raw_path)
        except PathError as exc:
            self._refuse(channel, op, str(raw_path), 400, "bad-path", str(exc))
            return None
        verdict = authorize_file_op(
            self.rights,
            self.decision,
            op,
            path,
            service.account_table,
            service.server_name,
            service.public_root,
        )
        if not verdict.allowed:
            self._refuse(channel, op, path, 403, verdict.reason, "denied by %s" % verdict.reason)
            return None
        return path

    def _refuse(
        self, channel: wire.Channel, op: str, path: str, status: int, code: str, message: str
    ) -> None:
        self.service.audit(
            self.peer.subject, self.issuer, self.decision, op, path, False, code
        )
        channel.send_frame(
            {"type": "response", "status": status, "code": code, "message": message}
        )

    def _allow(self, op: str, path: str) -> None:
        self.service.audit(
            self.peer.subject, self.issuer, self.decision, op, path, True, "ok"
        )

    def _list(self, channel: wire.Channel, frame: dict) -> bool:
        path = self._check(channel, "LIST", frame.get("path"))
        if path is None:
            return True
        try:
            fs = self.service.fs_path(path)
        except PathError as exc:
            self._refuse(channel, "LIST", path, 400, "bad-path", str(exc))
            return True
        if not os.path.exists(fs):
            self._refuse(channel, "LIST", path, 404, "not-found", "no such path")
            return True
        if not os.path.isdir(fs):
            self._refuse(channel, "LIST", path, 404, "not-a-directory", "not a directory")
            return True
        entries = sorted(os.listdir(fs))
        self._allow("LIST", path)
        channel.send_frame({"type": "response", "status": 200, "entries": entries})
        return True

    def _get(self, channel: wire.Channel, frame: dict) -> bool:
        path = self._check(channel, "GET", frame.get("path"))
        if path is None:
            return True
        try:
            fs = self.service.fs_path(path)
        except PathError as exc:
            self._refuse(channel, "GET", path, 400, "bad-path", str(exc))
            return True
        if not os.path.isfile(fs):
            self._refuse(channel, "GET", path, 404, "not-found", "no such file")
            return True
        size = os.path.getsize(fs)
        self._allow("GET", path)
        channel.send_frame({"type": "response", "status": 200})
        channel.send_frame({"type": "data_header", "size": size})
        with open(fs, "rb") as handle:
            while True:
                chunk = handle.read(65536)
                if not chunk:
                    break
                channel.send_bytes(chunk)
        return True

    def _put(self, channel: wire.Channel, frame: dict) -> bool:
        size = frame.get("size")
        if isinstance(size, bool) or not isinstance(size, int) or size < 0:
            channel.send_frame(_protocol_error("PUT needs a non-negative integer size"))
            return False
        if size > MAX_PUT_BYTES:
            channel.send_frame(_protocol_error("PUT payload exceeds %d bytes" % MAX_PUT_BYTES))
            return False

        # The payload bytes follow the command frame unconditionally, so
        # every refusal must still drain them to keep the stream aligned.
        def drain() -> None:
            channel.recv_bytes_to(size, _NullSink())

        path = self._check_put_path(channel, frame.get("path"), drain)
        if path is None:
            return True
        fs, fd = self._open_put_target(channel, path, drain)
        if fd is None:
            return True
        try:
            with os.fdopen(fd, "wb") as handle:
                channel.recv_bytes_to(size, handle)
        except wire.WireError:
            _unlink_quietly(fs)
            raise
        except OSError as exc:
            # A failed local write loses stream alignment; close after
            # reporting rather than guess how much payload remains.
            _unlink_quietly(fs)
            self._refuse(channel, "PUT", path, 500, "internal", "write failed: %s" % exc)
            return False
        self._allow("PUT", path)
        channel.send_frame({"type": "response", "status": 200, "size": size})
        return True

    def _check_put_path(self, channel, raw_path, drain) -> Optional[str]:
        service = self.service
        try:
            path = canonical_path(raw_path)
        except PathError as exc:
            drain()
            self._refuse(channel, "PUT", str(raw_path), 400, "bad-path", str(exc))
            return None
        verdict = authorize_file_op(
            self.rights,
            self.decision,
            "PUT",
            path,
            service.account_table,
            service.server_name,
            service.public_root,
        )
        if not verdict.allowed:
            drain()
            self._refuse(channel, "PUT", path, 403, verdict.reason, "denied by %s" % verdict.reason)
            return None
        return path

    def _open_put_target(self, channel, path: str, drain):
        try:
            fs = self.service.fs_path(path)
            # O_EXCL makes "PUT never overwrites" race-free.
            fd = os.open(fs, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o644)
            return fs, fd
        except FileExistsError:
            drain()
            self._refuse(channel, "PUT", path, 409, "exists", "refusing to overwrite")
        except (FileNotFoundError, NotADirectoryError):
            drain()
            self._refuse(channel, "PUT", path, 404, "missing-parent", "no such directory")
        except PathError as exc:
            drain()
            self._refuse(channel, "PUT", path, 400, "bad-path", str(exc))
        return path, None


class _NullSink:
    def write(self, data: bytes) -> None:
        pass


def _audit_field(value: str) -> str:
    # Column integrity: the path is the one client-chosen audit field
    # that may reach here unvalidated (bad-path refusals).
    return "".join(c if ord(c) >= 0x20 else "?" for c in value)


def _unlink_quietly(path: str) -> None:
    try:
        os.unlink(path)
    except OSError:
        pass


def _protocol_error(message: str) -> dict:
    return {"type": "error", "status": 400, "code": "protocol-error", "message": message}


def _best_effort_send(channel: wire.Channel, frame: dict) -> None:
    try:
        channel.send_frame(frame)
    except OSError:
        pass


# -- server plumbing and configuration ------------------------------------------


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        service: ResourceService = self.server.service  # type: ignore[attr-defined]
        channel = wire.Channel(self.request, timeout=IO_TIMEOUT_SECONDS)
        service.handle_session(channel)


class FileServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], service: ResourceService):
        super().__init__(address, _Handler)
        self.service = service

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[0], self.server_address[1]


@dataclass(frozen=True)
class FileServiceConfig:
    listen: str
    server_name: str
    trust_root_file: str
    issuer_files: tuple[str, ...]
    role_map_file: str
    grid_map_file: str
    account_file: str
    export_root: str
    audit_file: str
    public_root: Optional[str]


def load_file_config(path: str) -> FileServiceConfig:
    with open(path, "r", encoding="utf-8") as handle:
        raw = parse_kv_config(handle.read())
    base = os.path.dirname(os.path.abspath(path))

    def resolve(value: str) -> str:
        return os.path.join(base, value)

    required = (
        "server_name",
        "trust_root_file",
        "issuer_files",
        "role_map_file",
        "grid_map_file",
        "account_file",
        "export_root",
        "audit_file",
    )
    for key in required:
        if not raw.get(key):
            raise ValueError("config is missing %r" % key)
    return FileServiceConfig(
        listen=raw.get("listen", ":%d" % DEFAULT_PORT),
        server_name=raw["server_name"],
        trust_root_file=resolve(raw["trust_root_file"]),
        issuer_files=tuple(resolve(p) for p in split_quoted_list(raw["issuer_files"])),
        role_map_file=resolve(raw["role_map_file"]),
        grid_map_file=resolve(raw["grid_map_file"]),
        account_file=resolve(raw["account_file"]),
        export_root=resolve(raw["export_root"]),
        audit_file=resolve(raw["audit_file"]),
        public_root=raw.get("public_root") or None,
    )


def service_from_config(
    config: FileServiceConfig,
    export_root: Optional[str] = None,
    clock: Clock = utc_now,
) -> ResourceService:
    with open(config.trust_root_file, "r", encoding="utf-8") as handle:
        trust_root = public_key_from_pem(handle.read())
    trusted: dict[str, bytes] = {}
    for issuer_file in config.issuer_files:
        with open(issuer_file, "r", encoding="utf-8") as handle:
            doc = json.load(handle)
        if isinstance(doc, dict):
            # Tolerate a full keypair file; only the public part matters here.
            doc.pop("private_key_pem", None)
        credential = identity_from_doc(doc)
        trusted[credential.subject] = credential.public_key
    with open(config.role_map_file, "r", encoding="utf-8") as handle:
        role_map = parse_role_map(handle.read())
    with open(config.grid_map_file, "r", encoding="utf-8") as handle:
        grid_map = parse_grid_map(handle.read())
    with open(config.account_file, "r", encoding="utf-8") as handle:
        account_table = parse_account_table(handle.read())
    return ResourceService(
        server_name=config.server_name,
        export_root=export_root or config.export_root,
        role_map=role_map,
        grid_map=grid_map,
        account_table=account_table,
        trusted_issuers=trusted,
        trust_root=trust_root,
        audit_log=AuditLog(config.audit_file),
        public_root=config.public_root,
        clock=clock,
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vo-file-server", description="VO role-aware file service"
    )
    parser.add_argument("--config", required=True, help="key=value config file")
    parser.add_argument("--port", type=int, help="listen port (default %d)" % DEFAULT_PORT)
    parser.add_argument("--export-root", help="directory served as /, overrides config")
    args = parser.parse_args(argv)

    try:
        config = load_file_config(args.config)
        if args.port is not None:
            address = ("0.0.0.0", args.port)
        else:
            address = wire.parse_address(config.listen)
        service = service_from_config(config, export_root=args.export_root)
        server = FileServer(address, service)
    except (ValueError, OSError, CredentialError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    host, port = server.address
    print("file service %s listening on %s:%d" % (service.server_name, host, port))
    sys.stdout.flush()
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
