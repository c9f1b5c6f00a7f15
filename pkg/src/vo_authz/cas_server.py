"""Issuance service: turns stored grants into signed assertions.

Each connection carries exactly one request. The server authenticates
the peer with the challenge-response handshake, then answers either an
``issue_request`` (mint an assertion for the peer's granted rights,
optionally narrowed by a requested filter) or an ``admin_load`` (apply
a policy command file, admins only). The policy store is an immutable
value, so concurrent issuance always sees either the pre-load or the
post-load store, never a mix; a lock serializes the writers.
"""

from __future__ import annotations

import argparse
import os
import socketserver
import sys
import threading
from dataclasses import dataclass
from datetime import timedelta
from typing import Optional

from . import wire
from .ca import load_identity_keypair
from .credentials import (
    DEFAULT_LIFETIME_SECONDS,
    AssertionBody,
    AuthenticatedPeer,
    Clock,
    CredentialError,
    HandshakeError,
    IdentityCredential,
    assertion_to_doc,
    authenticate_peer,
    fresh_serial,
    public_key_from_pem,
    sign_assertion,
    utc_now,
)
from .engine import FilterDenied, filter_rights
from .lineformat import parse_kv_config, split_quoted_list
from .policy import (
    CommandFileError,
    PolicyStore,
    RightsTuple,
    apply_command_file,
    load_snapshot,
    save_snapshot,
)

IO_TIMEOUT_SECONDS = 10.0


@dataclass(frozen=True)
class CasConfig:
    listen: str
    key_file: str
    trust_root_file: str
    snapshot_file: Optional[str]
    admin_dns: tuple[str, ...]
    max_lifetime_seconds: int
    key_passphrase_env: Optional[str] = None


def load_cas_config(path: str) -> CasConfig:
    """Load a key=value config file; relative paths resolve against it."""
    with open(path, "r", encoding="utf-8") as handle:
        raw = parse_kv_config(handle.read())
    base = os.path.dirname(os.path.abspath(path))

    def resolve(name: str) -> Optional[str]:
        value = raw.get(name)
        return os.path.join(base, value) if value else None

    for required in ("listen", "key_file", "trust_root_file"):
        if not raw.get(required):
            raise ValueError("config is missing %r" % required)
    return CasConfig(
        listen=raw["listen"],
        key_file=resolve("key_file"),
        trust_root_file=resolve("trust_root_file"),
        snapshot_file=resolve("snapshot_file"),
        admin_dns=tuple(split_quoted_list(raw.get("admin_dns", ""))),
        max_lifetime_seconds=int(raw.get("max_lifetime_seconds", DEFAULT_LIFETIME_SECONDS)),
        key_passphrase_env=raw.get("key_passphrase_env") or None,
    )


class CasService:
    """Request handlers plus the mutable store slot they share."""

    def __init__(
        self,
        issuer: IdentityCredential,
        issuer_private_key,
        trust_root: bytes,
        store: PolicyStore = PolicyStore(),
        admin_dns: tuple[str, ...] = (),
        max_lifetime_seconds: int = DEFAULT_LIFETIME_SECONDS,
        snapshot_path: Optional[str] = None,
        clock: Clock = utc_now,
    ):
        if max_lifetime_seconds <= 0:
            raise ValueError("max_lifetime_seconds must be positive")
        self.issuer = issuer
        self._issuer_private_key = issuer_private_key
        self.trust_root = trust_root
        self.admin_dns = tuple(admin_dns)
        self.max_lifetime_seconds = max_lifetime_seconds
        self.snapshot_path = snapshot_path
        self.clock = clock
        self._store = store
        self._write_lock = threading.Lock()

    @property
    def store(self) -> PolicyStore:
        return self._store

    def handle_request(self, peer: AuthenticatedPeer, frame: dict) -> dict:
        if frame["type"] == "issue_request":
            return self.handle_issue(peer, frame)
        if frame["type"] == "admin_load":
            return self.handle_admin_load(peer, frame)
        return _error(400, "unknown-request", "unsupported request type %r" % frame["type"])

    # -- issuance -----------------------------------------------------------

    def handle_issue(self, peer: AuthenticatedPeer, frame: dict) -> dict:
        try:
            requested = _parse_requested_rights(frame.get("rights"))
            lifetime = _parse_lifetime(frame.get("lifetime_seconds"))
        except ValueError as exc:
            return _issue_failure(400, "bad-request", str(exc))

        store = self._store
        if peer.subject not in store.subjects:
            return _issue_failure(
                403, "no-vo-membership", "subject %r is not a member of this VO" % peer.subject
            )
        granted = store.rights_of(peer.subject)
        if not granted:
            return _issue_failure(
                403, "no-rights", "subject %r holds no rights" % peer.subject
            )
        try:
            rights = filter_rights(granted, requested)
        except FilterDenied as exc:
            failure = _issue_failure(403, "rights-not-granted", str(exc))
            failure["uncovered"] = [t.as_dict() for t in exc.uncovered]
            return failure

        now = self.clock()
        seconds = min(lifetime or self.max_lifetime_seconds, self.max_lifetime_seconds)
        body = AssertionBody(
            issuer=self.issuer.subject,
            subject=peer.subject,
            serial=fresh_serial(),
            issued_at=now,
            not_after=now + timedelta(seconds=seconds),
            rights=rights,
        )
        assertion = sign_assertion(body, self._issuer_private_key)
        return {
            "type": "issue_response",
            "status": 200,
            "assertion": assertion_to_doc(assertion),
        }

    # -- administration -----------------------------------------------------

    def handle_admin_load(self, peer: AuthenticatedPeer, frame: dict) -> dict:
        if peer.subject not in self.admin_dns:
            return {
                "type": "admin_result",
                "status": 403,
                "code": "not-admin",
                "message": "subject %r may not load policy" % peer.subject,
            }
        commands = frame.get("commands")
        if not isinstance(commands, str):
            return {
                "type": "admin_result",
                "status": 400,
                "code": "bad-request",
                "message": "admin_load needs a string 'commands' field",
            }
        with self._write_lock:
            try:
                new_store, applied = apply_command_file(self._store, commands)
            except CommandFileError as exc:
                return {
                    "type": "admin_result",
                    "status": 400,
                    "code": "command-file-error",
                    "line": exc.line,
                    "message": str(exc),
                }
            if self.snapshot_path is not None:
                _write_atomically(self.snapshot_path, save_snapshot(new_store))
            self._store = new_store
        return {"type": "admin_result", "status": 200, "applied": applied}


def _parse_requested_rights(value) -> list[RightsTuple]:
    if value is None:
        return []
    if not isinstance(value, list):
        raise ValueError("'rights' must be a list of rights tuples")
    try:
        return [RightsTuple.from_dict(item) for item in value]
    except (TypeError, ValueError) as exc:
        raise ValueError("bad requested right: %s" % exc)


def _parse_lifetime(value) -> Optional[int]:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
        raise ValueError("'lifetime_seconds' must be a positive integer")
    return value


def _issue_failure(status: int, code: str, message: str) -> dict:
    return {"type": "issue_response", "status": status, "code": code, "message": message}


def _error(status: int, code: str, message: str) -> dict:
    return {"type": "error", "status": status, "code": code, "message": message}


def _write_atomically(path: str, data: bytes) -> None:
    tmp = "%s.tmp.%d" % (path, os.getpid())
    with open(tmp, "wb") as handle:
        handle.write(data)
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(tmp, path)


# -- network plumbing --------------------------------------------------------


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        service: CasService = self.server.service  # type: ignore[attr-defined]
        channel = wire.Channel(self.request, timeout=IO_TIMEOUT_SECONDS)
        try:
            try:
                peer = authenticate_peer(channel, service.trust_root, service.clock())
            except HandshakeError as exc:
                _best_effort_send(channel, _error(401, exc.code, str(exc)))
                return
            frame = channel.recv_frame()
            channel.send_frame(service.handle_request(peer, frame))
        except wire.WireError as exc:
            _best_effort_send(channel, _error(400, "protocol-error", str(exc)))
        finally:
            channel.close()


def _best_effort_send(channel: wire.Channel, frame: dict) -> None:
    try:
        channel.send_frame(frame)
    except OSError:
        pass


class CasServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], service: CasService):
        super().__init__(address, _Handler)
        self.service = service

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[0], self.server_address[1]


def service_from_config(config: CasConfig, clock: Clock = utc_now) -> CasService:
    passphrase = None
    if config.key_passphrase_env:
        value = os.environ.get(config.key_passphrase_env)
        passphrase = value.encode("utf-8") if value else None
    issuer, private_key = load_identity_keypair(config.key_file, passphrase)
    with open(config.trust_root_file, "r", encoding="utf-8") as handle:
        trust_root = public_key_from_pem(handle.read())
    store = PolicyStore()
    if config.snapshot_file and os.path.exists(config.snapshot_file):
        with open(config.snapshot_file, "rb") as handle:
            store = load_snapshot(handle.read())
    return CasService(
        issuer=issuer,
        issuer_private_key=private_key,
        trust_root=trust_root,
        store=store,
        admin_dns=config.admin_dns,
        max_lifetime_seconds=config.max_lifetime_seconds,
        snapshot_path=config.snapshot_file,
        clock=clock,
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vo-cas-server", description="VO rights issuance service"
    )
    parser.add_argument("--config", required=True, help="key=value config file")
    parser.add_argument("--listen", help="addr:port, overrides the config file")
    args = parser.parse_args(argv)

    try:
        config = load_cas_config(args.config)
        address = wire.parse_address(args.listen or config.listen)
        service = service_from_config(config)
        server = CasServer(address, service)
    except (ValueError, OSError, CredentialError, CommandFileError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    host, port = server.address
    print("issuance service for %s listening on %s:%d" % (service.issuer.subject, host, port))
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
