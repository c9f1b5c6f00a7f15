"""Credentials and signed assertions.

Three signed objects make up the trust chain:

* an identity credential: a subject DN and public key, signed by the
  flat trust root (the artifact's stand-in for a CA hierarchy);
* a session credential: a short-lived keypair delegated from an
  identity, signed by the identity key (the proxy in proxy-credential
  parlance);
* an assertion: an issuer's time-bounded statement binding a subject
  to a list of rights tuples, signed by the issuer's identity key.

All signatures are Ed25519 over a canonical encoding: key-sorted
compact JSON, UTF-8, timestamps as RFC 3339 UTC at seconds precision.
Public keys travel as raw 32-byte values (base64 in JSON); private
keys only ever live in PEM files owned by their component.
"""

from __future__ import annotations

import base64
import json
import re
import secrets
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Callable, Mapping, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from . import wire
from .policy import RightsTuple, sort_rights, validate_subject_dn

AUTH_CONTEXT = b"vo-authz-auth-v1"
DEFAULT_CLOCK_SKEW_SECONDS = 300
DEFAULT_LIFETIME_SECONDS = 43200  # 12 hours, for sessions and assertions alike

_SERIAL_RE = re.compile(r"[0-9a-f]{32}\Z")
_TIMESTAMP_RE = re.compile(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}Z\Z")


class CredentialError(Exception):
    """Base class for credential and assertion failures."""


class MalformedCredential(CredentialError):
    """A serialized credential or assertion did not parse."""


class UntrustedIssuer(CredentialError):
    """The assertion's issuer is not in the trust set."""


class BadSignature(CredentialError):
    """A signature did not verify."""


class NotYetValid(CredentialError):
    """The validity window has not opened (beyond clock skew)."""


class Expired(CredentialError):
    """The validity window has closed."""


class HandshakeError(CredentialError):
    """Challenge-response authentication failed."""

    def __init__(self, code: str, message: str):
        super().__init__("%s: %s" % (code, message))
        self.code = code


# -- canonical encoding ------------------------------------------------------


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def format_timestamp(ts: datetime) -> str:
    if ts.tzinfo is None:
        raise ValueError("timestamps must be timezone-aware")
    ts = ts.astimezone(timezone.utc)
    if ts.microsecond:
        raise ValueError("timestamps must be whole seconds")
    return ts.strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_timestamp(text: str) -> datetime:
    if not isinstance(text, str) or not _TIMESTAMP_RE.match(text):
        raise ValueError("bad timestamp %r" % (text,))
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)


def floor_to_second(ts: datetime) -> datetime:
    return ts.replace(microsecond=0)


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text, what: str) -> bytes:
    if not isinstance(text, str):
        raise MalformedCredential("%s must be base64 text" % what)
    try:
        decoded = base64.b64decode(text, validate=True)
    except (ValueError, TypeError) as exc:
        raise MalformedCredential("%s is not valid base64" % what) from exc
    # Canonical form only: otherwise unused slack bits in the final
    # character give one value several encodings.
    if _b64(decoded) != text:
        raise MalformedCredential("%s is not canonical base64" % what)
    return decoded


# -- key material ------------------------------------------------------------


def generate_keypair() -> tuple[Ed25519PrivateKey, bytes]:
    """Return a fresh private key and its raw 32-byte public key."""
    private = Ed25519PrivateKey.generate()
    return private, raw_public_key(private.public_key())


def raw_public_key(key: Ed25519PublicKey) -> bytes:
    return key.public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )


def public_key_from_raw(raw: bytes) -> Ed25519PublicKey:
    if not isinstance(raw, bytes) or len(raw) != 32:
        raise MalformedCredential("public key must be 32 raw bytes")
    return Ed25519PublicKey.from_public_bytes(raw)


def private_key_to_pem(key: Ed25519PrivateKey, passphrase: Optional[bytes] = None) -> str:
    if passphrase:
        algo = serialization.BestAvailableEncryption(passphrase)
    else:
        algo = serialization.NoEncryption()
    return key.private_bytes(
        serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, algo
    ).decode("ascii")


def private_key_from_pem(pem: str, passphrase: Optional[bytes] = None) -> Ed25519PrivateKey:
    try:
        key = serialization.load_pem_private_key(pem.encode("ascii"), password=passphrase)
    except (ValueError, TypeError) as exc:
        raise CredentialError("cannot decrypt private key: %s" % exc) from exc
    if not isinstance(key, Ed25519PrivateKey):
        raise CredentialError("private key is not Ed25519")
    return key


def public_key_to_pem(raw: bytes) -> str:
    return public_key_from_raw(raw).public_bytes(
        serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo
    ).decode("ascii")


def public_key_from_pem(pem: str) -> bytes:
    try:
        key = serialization.load_pem_public_key(pem.encode("ascii"))
    except (ValueError, TypeError) as exc:
        raise CredentialError("bad public key PEM: %s" % exc) from exc
    if not isinstance(key, Ed25519PublicKey):
        raise CredentialError("public key is not Ed25519")
    return raw_public_key(key)


def _verify(raw_key: bytes, signature: bytes, payload: bytes) -> bool:
    try:
        public_key_from_raw(raw_key).verify(signature, payload)
        return True
    except InvalidSignature:
        return False


def _validate_window_field(ts: datetime, name: str) -> datetime:
    if ts.tzinfo is None or ts.utcoffset() is None:
        raise ValueError("%s must be timezone-aware" % name)
    if ts.astimezone(timezone.utc).microsecond:
        raise ValueError("%s must be whole seconds" % name)
    return ts.astimezone(timezone.utc)


# -- identity and session credentials ---------------------------------------


@dataclass(frozen=True)
class IdentityCredential:
    """Long-term identity: subject DN and public key, trust-root signed."""

    subject: str
    public_key: bytes
    not_before: datetime
    not_after: datetime
    signature: bytes

    def __post_init__(self):
        validate_subject_dn(self.subject)
        if len(self.public_key) != 32:
            raise ValueError("public key must be 32 raw bytes")
        object.__setattr__(self, "not_before", _validate_window_field(self.not_before, "not_before"))
        object.__setattr__(self, "not_after", _validate_window_field(self.not_after, "not_after"))
        if not self.not_before < self.not_after:
            raise ValueError("not_before must precede not_after")

    def signed_payload(self) -> bytes:
        return identity_payload(self.subject, self.public_key, self.not_before, self.not_after)


def identity_payload(subject: str, public_key: bytes, not_before: datetime, not_after: datetime) -> bytes:
    return canonical_json({
        "kind": "identity",
        "not_after": format_timestamp(not_after),
        "not_before": format_timestamp(not_before),
        "public_key": _b64(public_key),
        "subject": subject,
    })


@dataclass(frozen=True)
class SessionCredential:
    """Short-lived delegated keypair; cannot outlive its identity."""

    identity: IdentityCredential
    session_public_key: bytes
    not_after: datetime
    delegation_signature: bytes

    def __post_init__(self):
        if len(self.session_public_key) != 32:
            raise ValueError("session public key must be 32 raw bytes")
        object.__setattr__(self, "not_after", _validate_window_field(self.not_after, "not_after"))
        if self.not_after > self.identity.not_after:
            raise ValueError(
                "session may not outlive its identity (identity expires %s)"
                % format_timestamp(self.identity.not_after)
            )

    def signed_payload(self) -> bytes:
        return delegation_payload(self.identity.subject, self.session_public_key, self.not_after)


def delegation_payload(subject: str, session_public_key: bytes, not_after: datetime) -> bytes:
    return canonical_json({
        "kind": "session-delegation",
        "not_after": format_timestamp(not_after),
        "session_public_key": _b64(session_public_key),
        "subject": subject,
    })


def delegate_session(
    identity: IdentityCredential,
    identity_private_key: Ed25519PrivateKey,
    session_public_key: bytes,
    not_after: datetime,
) -> SessionCredential:
    """Sign a session credential with the identity key."""
    not_after = floor_to_second(not_after)
    if not_after > identity.not_after:
        raise CredentialError(
            "requested lifetime exceeds the identity window (identity expires %s)"
            % format_timestamp(identity.not_after)
        )
    payload = delegation_payload(identity.subject, session_public_key, not_after)
    return SessionCredential(
        identity=identity,
        session_public_key=session_public_key,
        not_after=not_after,
        delegation_signature=identity_private_key.sign(payload),
    )


def verify_identity(credential: IdentityCredential, trust_root: bytes, now: datetime,
                    skew_seconds: int = DEFAULT_CLOCK_SKEW_SECONDS) -> None:
    """Check an identity credential against the trust root at time ``now``."""
    if not _verify(trust_root, credential.signature, credential.signed_payload()):
        raise BadSignature("identity credential signature does not verify")
    skew = timedelta(seconds=skew_seconds)
    if now < credential.not_before - skew:
        raise NotYetValid("identity not valid before %s" % format_timestamp(credential.not_before))
    if now >= credential.not_after:
        raise Expired("identity expired at %s" % format_timestamp(credential.not_after))


def verify_session_chain(session: SessionCredential, trust_root: bytes, now: datetime,
                         skew_seconds: int = DEFAULT_CLOCK_SKEW_SECONDS) -> None:
    """Check the identity-to-session chain down from the trust root."""
    verify_identity(session.identity, trust_root, now, skew_seconds)
    if not _verify(session.identity.public_key, session.delegation_signature, session.signed_payload()):
        raise BadSignature("session delegation signature does not verify")
    if now >= session.not_after:
        raise Expired("session expired at %s" % format_timestamp(session.not_after))


@dataclass(frozen=True)
class SessionBundle:
    """A session credential together with its private key."""

    session: SessionCredential
    private_key: Ed25519PrivateKey

    @property
    def subject(self) -> str:
        return self.session.identity.subject


# -- assertions --------------------------------------------------------------


@dataclass(frozen=True)
class AssertionBody:
    """The signed statement: issuer says subject holds these rights."""

    issuer: str
    subject: str
    serial: str
    issued_at: datetime
    not_after: datetime
    rights: tuple[RightsTuple, ...]
    version: int = 1

    def __post_init__(self):
        if self.version != 1:
            raise ValueError("unsupported assertion version %r" % self.version)
        validate_subject_dn(self.issuer)
        validate_subject_dn(self.subject)
        if not _SERIAL_RE.match(self.serial):
            raise ValueError("serial must be 32 lowercase hex digits")
        object.__setattr__(self, "issued_at", _validate_window_field(self.issued_at, "issued_at"))
        object.__setattr__(self, "not_after", _validate_window_field(self.not_after, "not_after"))
        if not self.issued_at < self.not_after:
            raise ValueError("issued_at must precede not_after")
        object.__setattr__(self, "rights", sort_rights(self.rights))


def fresh_serial() -> str:
    return secrets.token_hex(16)


def canonical_bytes(body: AssertionBody) -> bytes:
    """Deterministic byte encoding of an assertion body.

    Equal bodies encode to identical bytes; the encoding is the
    key-sorted compact JSON of the body's fields.
    """
    return canonical_json(_body_dict(body))


def _body_dict(body: AssertionBody) -> dict:
    return {
        "issued_at": format_timestamp(body.issued_at),
        "issuer": body.issuer,
        "not_after": format_timestamp(body.not_after),
        "rights": [r.as_dict() for r in body.rights],
        "serial": body.serial,
        "subject": body.subject,
        "version": body.version,
    }


@dataclass(frozen=True)
class Assertion:
    body: AssertionBody
    signature: bytes


@dataclass(frozen=True)
class VerifiedRights:
    """What a successfully verified assertion establishes."""

    issuer: str
    subject: str
    rights: tuple[RightsTuple, ...]


def sign_assertion(body: AssertionBody, issuer_private_key: Ed25519PrivateKey) -> Assertion:
    return Assertion(body=body, signature=issuer_private_key.sign(canonical_bytes(body)))


def verify_assertion(
    assertion: Assertion,
    trusted_issuers: Mapping[str, bytes],
    now: datetime,
    skew_seconds: int = DEFAULT_CLOCK_SKEW_SECONDS,
) -> VerifiedRights:
    """Verify issuer trust, signature, and validity window.

    The window is half-open: ``now == issued_at`` is valid (and clock
    skew stretches the opening edge), ``now == not_after`` is expired.
    """
    body = assertion.body
    issuer_key = trusted_issuers.get(body.issuer)
    if issuer_key is None:
        raise UntrustedIssuer("issuer %r is not trusted" % body.issuer)
    if not _verify(issuer_key, assertion.signature, canonical_bytes(body)):
        raise BadSignature("assertion signature does not verify")
    if now < body.issued_at - timedelta(seconds=skew_seconds):
        raise NotYetValid("assertion not valid before %s" % format_timestamp(body.issued_at))
    if now >= body.not_after:
        raise Expired("assertion expired at %s" % format_timestamp(body.not_after))
    return VerifiedRights(issuer=body.issuer, subject=body.subject, rights=body.rights)


# -- serialized documents ----------------------------------------------------
#
# A signed object is stored and transmitted as one JSON document: the
# canonical body fields plus a base64 signature field. Parsers are
# strict; unknown or missing fields reject the document.


def assertion_to_doc(assertion: Assertion) -> dict:
    doc = _body_dict(assertion.body)
    doc["signature"] = _b64(assertion.signature)
    return doc


def assertion_from_doc(doc) -> Assertion:
    if not isinstance(doc, dict):
        raise MalformedCredential("assertion document must be a JSON object")
    expected = {"issued_at", "issuer", "not_after", "rights", "serial", "subject", "version", "signature"}
    if set(doc) != expected:
        raise MalformedCredential("assertion document has wrong fields: %r" % sorted(doc))
    signature = _unb64(doc["signature"], "signature")
    try:
        rights = tuple(RightsTuple.from_dict(r) for r in _require_list(doc["rights"]))
        body = AssertionBody(
            issuer=_require_str(doc["issuer"], "issuer"),
            subject=_require_str(doc["subject"], "subject"),
            serial=_require_str(doc["serial"], "serial"),
            issued_at=parse_timestamp(doc["issued_at"]),
            not_after=parse_timestamp(doc["not_after"]),
            rights=rights,
            version=doc["version"] if isinstance(doc["version"], int) else -1,
        )
    except ValueError as exc:
        raise MalformedCredential("bad assertion body: %s" % exc) from exc
    if [r.as_dict() for r in body.rights] != doc["rights"]:
        raise MalformedCredential("assertion rights are not in canonical order")
    return Assertion(body=body, signature=signature)


def assertion_to_bytes(assertion: Assertion) -> bytes:
    return canonical_json(assertion_to_doc(assertion))


def assertion_from_bytes(data: bytes) -> Assertion:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedCredential("assertion is not valid JSON") from exc
    return assertion_from_doc(doc)


def identity_to_doc(credential: IdentityCredential) -> dict:
    return {
        "kind": "identity",
        "subject": credential.subject,
        "public_key": _b64(credential.public_key),
        "not_before": format_timestamp(credential.not_before),
        "not_after": format_timestamp(credential.not_after),
        "signature": _b64(credential.signature),
    }


def identity_from_doc(doc) -> IdentityCredential:
    if not isinstance(doc, dict) or doc.get("kind") != "identity":
        raise MalformedCredential("not an identity credential document")
    expected = {"kind", "subject", "public_key", "not_before", "not_after", "signature"}
    if set(doc) != expected:
        raise MalformedCredential("identity document has wrong fields: %r" % sorted(doc))
    try:
        return IdentityCredential(
            subject=_require_str(doc["subject"], "subject"),
            public_key=_unb64(doc["public_key"], "public_key"),
            not_before=parse_timestamp(doc["not_before"]),
            not_after=parse_timestamp(doc["not_after"]),
            signature=_unb64(doc["signature"], "signature"),
        )
    except ValueError as exc:
        raise MalformedCredential("bad identity credential: %s" % exc) from exc


def session_to_doc(session: SessionCredential) -> dict:
    return {
        "kind": "session",
        "identity": identity_to_doc(session.identity),
        "session_public_key": _b64(session.session_public_key),
        "not_after": format_timestamp(session.not_after),
        "delegation_signature": _b64(session.delegation_signature),
    }


def session_from_doc(doc) -> SessionCredential:
    if not isinstance(doc, dict) or doc.get("kind") != "session":
        raise MalformedCredential("not a session credential document")
    expected = {"kind", "identity", "session_public_key", "not_after", "delegation_signature"}
    if set(doc) != expected:
        raise MalformedCredential("session document has wrong fields: %r" % sorted(doc))
    try:
        return SessionCredential(
            identity=identity_from_doc(doc["identity"]),
            session_public_key=_unb64(doc["session_public_key"], "session_public_key"),
            not_after=parse_timestamp(doc["not_after"]),
            delegation_signature=_unb64(doc["delegation_signature"], "delegation_signature"),
        )
    except ValueError as exc:
        raise MalformedCredential("bad session credential: %s" % exc) from exc


def _require_str(value, what: str) -> str:
    if not isinstance(value, str):
        raise MalformedCredential("%s must be a string" % what)
    return value


def _require_list(value) -> list:
    if not isinstance(value, list):
        raise MalformedCredential("rights must be a list")
    return value


# -- challenge-response handshake --------------------------------------------
#
# The verifier sends a fresh 32-byte nonce; the prover answers with its
# credential chain and an Ed25519 signature over nonce || AUTH_CONTEXT
# made with the session key. One direction only: clients prove their
# identity to services.


@dataclass(frozen=True)
class AuthenticatedPeer:
    subject: str
    session_public_key: bytes


def authenticate_peer(channel, trust_root: bytes, now: datetime,
                      skew_seconds: int = DEFAULT_CLOCK_SKEW_SECONDS) -> AuthenticatedPeer:
    """Run the verifier side of the handshake on a framed channel."""
    nonce = secrets.token_bytes(32)
    channel.send_frame({"type": "challenge", "nonce": _b64(nonce)})
    try:
        frame = channel.recv_frame()
    except wire.ChannelTimeout as exc:
        raise HandshakeError("timeout", str(exc)) from exc
    if frame["type"] != "auth":
        raise HandshakeError("protocol", "expected auth frame, got %r" % frame["type"])
    try:
        session = session_from_doc(frame.get("session"))
        nonce_signature = _unb64(frame.get("nonce_signature"), "nonce_signature")
    except MalformedCredential as exc:
        raise HandshakeError("chain-invalid", str(exc)) from exc
    try:
        verify_session_chain(session, trust_root, now, skew_seconds)
    except (NotYetValid, Expired) as exc:
        raise HandshakeError("expired", str(exc)) from exc
    except CredentialError as exc:
        raise HandshakeError("chain-invalid", str(exc)) from exc
    if not _verify(session.session_public_key, nonce_signature, nonce + AUTH_CONTEXT):
        raise HandshakeError("nonce-mismatch", "nonce signature does not verify")
    return AuthenticatedPeer(
        subject=session.identity.subject,
        session_public_key=session.session_public_key,
    )


def answer_challenge(channel, bundle: SessionBundle) -> None:
    """Run the prover side: consume the challenge, send the auth frame."""
    frame = channel.recv_frame()
    if frame["type"] != "challenge":
        raise HandshakeError("protocol", "expected challenge frame, got %r" % frame["type"])
    nonce = _unb64(frame.get("nonce"), "nonce")
    channel.send_frame({
        "type": "auth",
        "session": session_to_doc(bundle.session),
        "nonce_signature": _b64(bundle.private_key.sign(nonce + AUTH_CONTEXT)),
    })


Clock = Callable[[], datetime]


def utc_now() -> datetime:
    """Default clock: timezone-aware UTC now, floored to whole seconds."""
    return floor_to_second(datetime.now(timezone.utc))
