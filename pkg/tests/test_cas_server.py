from __future__ import annotations

import os
import random
import socket
import struct
import threading
from datetime import timedelta

import pytest

from vo_authz import wire
from vo_authz.cas_server import CasServer, CasService, load_cas_config, service_from_config
from vo_authz.client import ServiceError, admin_load, issue_assertion
from vo_authz.credentials import (
    AuthenticatedPeer,
    assertion_from_doc,
    verify_assertion,
)
from vo_authz.policy import RightsTuple, apply_command_file, load_snapshot, save_snapshot

from .conftest import ADMIN, CAS_DN, DEMO_POLICY, ORWELL, TULL, WELLS


@pytest.fixture
def cas_service(cas_identity, trust_root, demo_store, clock, tmp_path):
    cred, private = cas_identity
    return CasService(
        issuer=cred,
        issuer_private_key=private,
        trust_root=trust_root[1],
        store=demo_store,
        admin_dns=(ADMIN,),
        max_lifetime_seconds=43200,
        snapshot_path=str(tmp_path / "policy.snapshot"),
        clock=clock,
    )


def peer(subject: str) -> AuthenticatedPeer:
    return AuthenticatedPeer(subject=subject, session_public_key=b"\x00" * 32)


def issue(service: CasService, subject: str, **fields) -> dict:
    frame = {"type": "issue_request"}
    frame.update(fields)
    return service.handle_issue(peer(subject), frame)


def trusted(service: CasService) -> dict[str, bytes]:
    return {service.issuer.subject: service.issuer.public_key}


# -- issuance ------------------------------------------------------------------


def test_empty_request_issues_all_granted_rights(cas_service, demo_store, now):
    response = issue(cas_service, TULL)
    assert response["status"] == 200
    assertion = assertion_from_doc(response["assertion"])
    verified = verify_assertion(assertion, trusted(cas_service), now)
    assert verified.subject == TULL
    assert verified.issuer == CAS_DN
    assert list(verified.rights) == demo_store.rights_of(TULL)


def test_filter_narrows_issue(cas_service, now):
    want = RightsTuple("group", "member", "atlas/admin")
    response = issue(cas_service, TULL, rights=[want.as_dict()])
    assert response["status"] == 200
    body = assertion_from_doc(response["assertion"]).body
    assert body.rights == (want,)


def test_uncovered_request_denied_with_listing(cas_service):
    want = RightsTuple("group", "member", "atlas/admin")
    response = issue(cas_service, ORWELL, rights=[want.as_dict()])
    assert response["status"] == 403
    assert response["code"] == "rights-not-granted"
    assert response["uncovered"] == [want.as_dict()]


def test_unknown_subject_gets_no_vo_membership(cas_service):
    response = issue(cas_service, WELLS)
    assert response["status"] == 403
    assert response["code"] == "no-vo-membership"


def test_registered_but_grantless_subject_gets_no_rights(cas_identity, trust_root, demo_store, clock):
    cred, private = cas_identity
    store, _ = apply_command_file(demo_store, 'user "%s"\n' % WELLS)
    service = CasService(cred, private, trust_root[1], store=store, clock=clock)
    response = issue(service, WELLS)
    assert response["status"] == 403
    assert response["code"] == "no-rights"


def test_issue_window_uses_requested_lifetime(cas_service, now):
    response = issue(cas_service, TULL, lifetime_seconds=60)
    body = assertion_from_doc(response["assertion"]).body
    assert body.issued_at == now
    assert body.not_after == now + timedelta(seconds=60)


def test_issue_lifetime_clamped_to_server_max(cas_service, now):
    response = issue(cas_service, TULL, lifetime_seconds=10**9)
    body = assertion_from_doc(response["assertion"]).body
    assert body.not_after == now + timedelta(seconds=cas_service.max_lifetime_seconds)


@pytest.mark.parametrize("lifetime", [0, -5, True, "3600"])
def test_bad_lifetime_rejected(cas_service, lifetime):
    response = issue(cas_service, TULL, lifetime_seconds=lifetime)
    assert response["status"] == 400


@pytest.mark.parametrize(
    "rights",
    ["not-a-list", [{"service_type": "group"}], [{"service_type": "group", "action": "member", "target": "atlas/admin", "match_mode": "glob"}]],
)
def test_bad_requested_rights_rejected(cas_service, rights):
    response = issue(cas_service, TULL, rights=rights)
    assert response["status"] == 400


def test_issued_rights_always_subset_of_granted(cas_service, demo_store, now):
    # Soundness: whatever subset is requested, nothing outside the
    # store's grants is ever issued.
    rng = random.Random(42)
    granted = demo_store.rights_of(TULL)
    extra = RightsTuple("group", "member", "cms/prod")
    for _ in range(50):
        req = [t for t in granted if rng.random() < 0.6]
        if rng.random() < 0.3:
            req.append(extra)
        response = issue(cas_service, TULL, rights=[t.as_dict() for t in req])
        if extra in req:
            assert response["status"] == 403
        else:
            body = assertion_from_doc(response["assertion"]).body
            assert set(body.rights) <= set(granted)
            if not req:
                assert list(body.rights) == granted


def test_serials_are_fresh(cas_service):
    serials = set()
    for _ in range(50):
        response = issue(cas_service, TULL)
        serials.add(response["assertion"]["serial"])
    assert len(serials) == 50


def test_unknown_request_type(cas_service):
    response = cas_service.handle_request(peer(TULL), {"type": "command"})
    assert response["type"] == "error"
    assert response["status"] == 400


# -- administration ------------------------------------------------------------


def test_non_admin_cannot_load(cas_service, demo_store):
    response = cas_service.handle_admin_load(
        peer(TULL), {"type": "admin_load", "commands": "servicetype net join\n"}
    )
    assert response["status"] == 403
    assert response["code"] == "not-admin"
    assert cas_service.store == demo_store


def test_admin_load_applies_and_persists(cas_service):
    commands = 'rescind "%s" member atlas/admin\n' % TULL
    response = cas_service.handle_admin_load(
        peer(ADMIN), {"type": "admin_load", "commands": commands}
    )
    assert response == {"type": "admin_result", "status": 200, "applied": 1}
    assert cas_service.store.rights_of(TULL) == [
        RightsTuple("group", "member", "atlas/data")
    ]
    with open(cas_service.snapshot_path, "rb") as handle:
        assert load_snapshot(handle.read()) == cas_service.store


def test_admin_load_error_names_line_and_mutates_nothing(cas_service, demo_store):
    cas_service.handle_admin_load(peer(ADMIN), {"type": "admin_load", "commands": ""})
    with open(cas_service.snapshot_path, "rb") as handle:
        before = handle.read()
    commands = "object group atlas/new\nbogus line\n"
    response = cas_service.handle_admin_load(
        peer(ADMIN), {"type": "admin_load", "commands": commands}
    )
    assert response["status"] == 400
    assert response["code"] == "command-file-error"
    assert response["line"] == 2
    assert cas_service.store == demo_store
    with open(cas_service.snapshot_path, "rb") as handle:
        assert handle.read() == before


def test_admin_load_requires_string_commands(cas_service):
    response = cas_service.handle_admin_load(peer(ADMIN), {"type": "admin_load", "commands": 7})
    assert response["status"] == 400


def test_issuance_sees_pre_or_post_load_store_never_a_mix(cas_service, demo_store):
    pre = tuple(demo_store.rights_of(TULL))
    post = (RightsTuple("group", "member", "atlas/data"),)
    commands = 'rescind "%s" member atlas/admin\n' % TULL
    results: list[tuple] = []
    stop = threading.Event()

    def issuer_loop():
        while not stop.is_set():
            response = issue(cas_service, TULL)
            body = assertion_from_doc(response["assertion"]).body
            results.append(body.rights)

    threads = [threading.Thread(target=issuer_loop) for _ in range(4)]
    for t in threads:
        t.start()
    cas_service.handle_admin_load(peer(ADMIN), {"type": "admin_load", "commands": commands})
    stop.set()
    for t in threads:
        t.join(timeout=10)
    assert results
    for rights in results:
        assert rights in (pre, post)


# -- over the wire ---------------------------------------------------------------


@pytest.fixture
def cas_server(cas_service):
    server = CasServer(("127.0.0.1", 0), cas_service)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()
    server.server_close()
    thread.join(timeout=5)


def test_issue_over_tcp(cas_server, identities, now, cas_service):
    bundle = identities.bundle(TULL)
    assertion = issue_assertion(cas_server.address, bundle)
    verified = verify_assertion(assertion, trusted(cas_service), now)
    assert verified.subject == TULL


def test_admin_load_over_tcp(cas_server, identities, cas_service):
    bundle = identities.bundle(ADMIN)
    applied = admin_load(cas_server.address, bundle, 'rescind "%s" member atlas/admin\n' % TULL)
    assert applied == 1
    assert cas_service.store.rights_of(TULL) == [
        RightsTuple("group", "member", "atlas/data")
    ]


def test_denied_issue_over_tcp_raises_service_error(cas_server, identities):
    bundle = identities.bundle(WELLS)
    with pytest.raises(ServiceError) as exc:
        issue_assertion(cas_server.address, bundle)
    assert exc.value.status == 403
    assert exc.value.code == "no-vo-membership"


def test_concurrent_issues_get_distinct_serials(cas_server, identities):
    serials: list[str] = []
    lock = threading.Lock()
    bundles = [identities.bundle(TULL), identities.bundle(ORWELL)]

    def one(bundle):
        assertion = issue_assertion(cas_server.address, bundle)
        with lock:
            serials.append(assertion.body.serial)

    threads = [threading.Thread(target=one, args=(b,)) for b in bundles for _ in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=10)
    assert len(serials) == 6
    assert len(set(serials)) == 6


def test_expired_session_rejected_over_tcp(cas_server, identities, now):
    bundle = identities.bundle(TULL, session_lifetime=timedelta(seconds=1))
    # Server clock is far past this session's expiry.  The server sends
    # its 401 and closes while the client is still pipelining, so the
    # error may surface as a connection failure instead of a response.
    cas_server.service.clock = lambda: now + timedelta(hours=1)
    try:
        with pytest.raises((ServiceError, wire.WireError, OSError)):
            issue_assertion(cas_server.address, bundle)
    finally:
        cas_server.service.clock = lambda: now


def test_oversized_frame_gets_protocol_error(cas_server):
    sock = socket.create_connection(cas_server.address, timeout=5)
    try:
        channel = wire.Channel(sock, timeout=5)
        channel.recv_frame()  # the challenge
        sock.sendall(struct.pack(">I", wire.MAX_FRAME_BYTES + 1))
        frame = channel.recv_frame()
        assert frame["type"] == "error"
        assert frame["code"] == "protocol-error"
    finally:
        sock.close()


# -- configuration -----------------------------------------------------------------


def test_config_round_trip(tmp_path, trust_root, identities, cas_identity):
    import json

    from vo_authz.credentials import identity_to_doc, private_key_to_pem, public_key_to_pem

    cred, private = cas_identity
    key_doc = identity_to_doc(cred)
    key_doc["private_key_pem"] = private_key_to_pem(private)
    (tmp_path / "cas_key.json").write_text(json.dumps(key_doc))
    (tmp_path / "trust_root.pem").write_text(public_key_to_pem(trust_root[1]))
    (tmp_path / "cas.conf").write_text(
        "listen = 127.0.0.1:0\n"
        "key_file = cas_key.json\n"
        "trust_root_file = trust_root.pem\n"
        "snapshot_file = policy.snapshot\n"
        'admin_dns = "%s"\n'
        "max_lifetime_seconds = 600\n" % ADMIN
    )
    config = load_cas_config(str(tmp_path / "cas.conf"))
    assert config.admin_dns == (ADMIN,)
    assert config.max_lifetime_seconds == 600
    assert os.path.isabs(config.key_file)

    service = service_from_config(config)
    assert service.issuer.subject == CAS_DN
    assert service.store.subjects == frozenset()

    # A stored snapshot is picked up on the next start.
    service.handle_admin_load(
        AuthenticatedPeer(ADMIN, b"\x00" * 32),
        {"type": "admin_load", "commands": DEMO_POLICY},
    )
    again = service_from_config(config)
    assert again.store == service.store
    assert save_snapshot(again.store) == save_snapshot(service.store)


def test_config_missing_key_errors(tmp_path):
    (tmp_path / "cas.conf").write_text("listen = :0\n")
    with pytest.raises(ValueError):
        load_cas_config(str(tmp_path / "cas.conf"))
