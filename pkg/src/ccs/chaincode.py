"""Deterministic business logic executed by every ledger node.

``execute`` maps (transaction, state snapshot) to a read/write set and nothing
else: no clocks, no randomness, no I/O. That purity is what lets independent
nodes endorse by digest comparison, and what makes replay reproduce state.

Rejections carry stable, machine-readable reason codes so that honest nodes
reject identically and a quorum can form even on failures.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from . import crypto
from .crypto import Digest
from .encoding import MalformedInputError
from .ledger import (
    GenesisRecord,
    Transaction,
    WorldState,
    compute_tx_id,
    TX_TYPES,
    verify_transaction_signature,
)
from .policy import (
    CertificationPolicy,
    NoRuleForDomainError,
    evaluate_authorization,
    is_permitted,
    validate_policy,
)
from .records import (
    ActorRecord,
    CertificateRecord,
    CSRRecord,
    RAEndorsementRecord,
    RAMemberRecord,
    UserRecord,
    canonical_bytes,
    canonical_serialize,
    certificate_content_digest,
    certificate_signing_message,
    compute_csr_id,
    csr_pop_message,
    deserialize,
    email_domain,
    ra_endorsement_message,
    register_record,
    validate_record,
)

ADMIN_KEY = "actor/admin"
CA_KEY = "actor/ca"
POLICY_KEY = "policy"

RW_SET_DOMAIN = b"ccs:rw-set:v1:"


def user_key(user_id: str) -> str:
    return f"user/{user_id}"


def ra_member_key(ra_member_id: str) -> str:
    return f"ra/{ra_member_id}"


class ChaincodeRejection(Exception):
    """Deterministic execution failure with a stable reason code."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}: {detail}" if detail else reason)


def _reject(reason: str, detail: str = "") -> None:
    raise ChaincodeRejection(reason, detail)


# ---------------------------------------------------------------------------
# Read/write sets
# ---------------------------------------------------------------------------


@register_record
@dataclass(frozen=True)
class ReadWriteSet:
    """What an execution read (with versions) and what it wants written."""

    reads: tuple[tuple[str, int], ...]
    writes: tuple[tuple[str, bytes], ...]


def readwrite_set_digest(rw_set: ReadWriteSet) -> Digest:
    return crypto.hash_bytes(RW_SET_DOMAIN + canonical_bytes(rw_set))


class _TxView:
    """Snapshot wrapper that records reads and stages writes."""

    def __init__(self, snapshot: WorldState):
        self._snapshot = snapshot
        self._reads: list[tuple[str, int]] = []
        self._read_keys: set[str] = set()
        self._writes: dict[str, bytes] = {}
        self._written: dict[str, object] = {}

    def get(self, key: str):
        if key in self._written:
            return self._written[key]
        if key not in self._read_keys:
            self._read_keys.add(key)
            self._reads.append((key, self._snapshot.version_of(key)))
        return self._snapshot.get(key)

    def put(self, key: str, record) -> None:
        self._written[key] = record
        self._writes[key] = canonical_serialize(record)

    def readwrite_set(self) -> ReadWriteSet:
        return ReadWriteSet(
            reads=tuple(self._reads),
            writes=tuple(sorted(self._writes.items())),
        )


# ---------------------------------------------------------------------------
# Transaction payloads
# ---------------------------------------------------------------------------


@register_record
@dataclass(frozen=True)
class CreateCsrPayload:
    user_id: str
    csr: CSRRecord


@register_record
@dataclass(frozen=True)
class EndorseCsrPayload:
    user_id: str
    csr_id: str
    endorsement: RAEndorsementRecord


@register_record
@dataclass(frozen=True)
class IssueCertificatePayload:
    user_id: str
    certificate: CertificateRecord


@register_record
@dataclass(frozen=True)
class ValidationHistory:
    """The ledger-resident endorsement trail behind an issued certificate."""

    user_id: str
    cert_serial: str
    csr_id: str
    authorized: bool
    endorsements: tuple[RAEndorsementRecord, ...]


# ---------------------------------------------------------------------------
# Execution entry point
# ---------------------------------------------------------------------------


def execute(tx: Transaction, snapshot: WorldState) -> ReadWriteSet:
    """Run one transaction against a snapshot. Pure; raises ChaincodeRejection."""
    if tx.tx_type not in TX_TYPES:
        _reject("unknown-tx-type", tx.tx_type)
    expected_id = compute_tx_id(tx.tx_type, tx.payload, tx.client_signature.signer_key_id)
    if tx.tx_id != expected_id:
        _reject("malformed-transaction", "tx_id does not match contents")
    try:
        payload = deserialize(tx.payload)
    except MalformedInputError as exc:
        raise ChaincodeRejection("malformed-payload", str(exc)) from exc
    view = _TxView(snapshot)
    handler = _HANDLERS[tx.tx_type]
    handler(tx, payload, view)
    return view.readwrite_set()


def _require_payload(payload, cls):
    if not isinstance(payload, cls):
        _reject("malformed-payload", f"expected {cls.__name__}, got {type(payload).__name__}")
    return payload


def _require_admin(tx: Transaction, view: _TxView) -> None:
    admin = view.get(ADMIN_KEY)
    if not isinstance(admin, ActorRecord) or not verify_transaction_signature(tx, admin.public_key):
        _reject("not-admin", "transaction is not signed by the admin identity")


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------


def handle_register_user(tx: Transaction, payload, view: _TxView) -> None:
    _require_admin(tx, view)
    user = _require_payload(payload, UserRecord)
    if user.csrs or user.certificates:
        _reject("invalid-record", "new users must not carry requests or certificates")
    violations = validate_record(user)
    if violations:
        _reject("invalid-record", violations[0])
    if view.get(user_key(user.user_id)) is not None:
        _reject("duplicate-id", user.user_id)
    view.put(user_key(user.user_id), user)


def handle_register_ra_member(tx: Transaction, payload, view: _TxView) -> None:
    _require_admin(tx, view)
    member = _require_payload(payload, RAMemberRecord)
    violations = validate_record(member)
    if violations:
        _reject("invalid-record", violations[0])
    if view.get(ra_member_key(member.ra_member_id)) is not None:
        _reject("duplicate-id", member.ra_member_id)
    view.put(ra_member_key(member.ra_member_id), member)


def handle_policy_update(tx: Transaction, payload, view: _TxView) -> None:
    admin = view.get(ADMIN_KEY)
    if admin is None:
        genesis = _require_payload(payload, GenesisRecord)
        if not verify_transaction_signature(tx, genesis.admin.public_key):
            _reject("invalid-genesis", "genesis must be signed by the declared admin key")
        violations = validate_policy(genesis.policy)
        if violations:
            _reject("invalid-policy", violations[0])
        view.put(ADMIN_KEY, genesis.admin)
        view.put(CA_KEY, genesis.ca)
        view.put(POLICY_KEY, genesis.policy)
        return
    _require_admin(tx, view)
    policy = _require_payload(payload, CertificationPolicy)
    violations = validate_policy(policy)
    if violations:
        _reject("invalid-policy", violations[0])
    view.put(POLICY_KEY, policy)


def handle_create_csr(tx: Transaction, payload, view: _TxView) -> None:
    payload = _require_payload(payload, CreateCsrPayload)
    user = view.get(user_key(payload.user_id))
    if not isinstance(user, UserRecord):
        _reject("unknown-user", payload.user_id)
    csr = payload.csr
    if not verify_transaction_signature(tx, csr.subject_public_key):
        _reject("invalid-client-signature", "transaction not signed by the subject key")
    if csr.subject_email != user.email:
        _reject("email-mismatch", f"{csr.subject_email!r} is not {user.email!r}")
    if csr.authorized or csr.endorsements:
        _reject("invalid-record", "fresh requests start unauthorized and unendorsed")
    if csr.subject_email.count("@") != 1 or csr.domain != email_domain(csr.subject_email):
        _reject("invalid-record", "domain does not match subject_email")
    expected_id = compute_csr_id(
        csr.subject_name, csr.subject_email, csr.subject_public_key, csr.created_at
    )
    if csr.csr_id != expected_id:
        _reject("csr-id-mismatch", csr.csr_id)
    pop_message = csr_pop_message(csr.subject_name, csr.subject_email, csr.subject_public_key)
    if not crypto.verify(csr.subject_public_key, pop_message, csr.requester_signature):
        _reject("proof-of-possession-failed", csr.csr_id)
    if any(existing.csr_id == csr.csr_id for existing in user.csrs):
        _reject("duplicate-csr", csr.csr_id)
    view.put(user_key(user.user_id), replace(user, csrs=user.csrs + (csr,)))


def handle_endorse_csr(tx: Transaction, payload, view: _TxView) -> None:
    payload = _require_payload(payload, EndorseCsrPayload)
    endorsement = payload.endorsement
    user = view.get(user_key(payload.user_id))
    if not isinstance(user, UserRecord):
        _reject("unknown-csr", payload.csr_id)
    index = next((i for i, c in enumerate(user.csrs) if c.csr_id == payload.csr_id), None)
    if index is None:
        _reject("unknown-csr", payload.csr_id)
    csr = user.csrs[index]
    if csr.authorized:
        _reject("already-authorized", csr.csr_id)
    member = view.get(ra_member_key(endorsement.ra_member_id))
    if not isinstance(member, RAMemberRecord):
        _reject("unknown-ra", endorsement.ra_member_id)
    if not verify_transaction_signature(tx, member.public_key):
        _reject("invalid-client-signature", "transaction not signed by the endorsing member")
    policy = view.get(POLICY_KEY)
    if not isinstance(policy, CertificationPolicy):
        _reject("no-rule-for-domain", csr.domain)
    try:
        if not is_permitted(policy, endorsement.ra_member_id, csr):
            _reject("not-permitted", f"{endorsement.ra_member_id} may not endorse {csr.domain}")
    except NoRuleForDomainError:
        _reject("no-rule-for-domain", csr.domain)
    if any(e.ra_member_id == endorsement.ra_member_id for e in csr.endorsements):
        _reject("duplicate-endorser", endorsement.ra_member_id)
    if not endorsement.id_document_serial_suffix:
        _reject("invalid-record", "id_document_serial_suffix is empty")
    message = ra_endorsement_message(
        csr.csr_id,
        endorsement.ra_member_id,
        endorsement.verified_name,
        endorsement.verified_email,
        endorsement.id_document_serial_suffix,
        endorsement.timestamp,
    )
    if not crypto.verify(member.public_key, message, endorsement.signature):
        _reject("invalid-endorsement-signature", endorsement.ra_member_id)
    updated = replace(csr, endorsements=csr.endorsements + (endorsement,))
    if evaluate_authorization(policy, updated):
        updated = replace(updated, authorized=True)
    csrs = user.csrs[:index] + (updated,) + user.csrs[index + 1 :]
    view.put(user_key(user.user_id), replace(user, csrs=csrs))


def handle_issue_certificate(tx: Transaction, payload, view: _TxView) -> None:
    payload = _require_payload(payload, IssueCertificatePayload)
    cert = payload.certificate
    ca = view.get(CA_KEY)
    if not isinstance(ca, ActorRecord) or not verify_transaction_signature(tx, ca.public_key):
        _reject("not-ca", "issuance must be submitted by the CA identity")
    user = view.get(user_key(payload.user_id))
    if not isinstance(user, UserRecord):
        _reject("unknown-csr", cert.csr_id)
    csr = next((c for c in user.csrs if c.csr_id == cert.csr_id), None)
    if csr is None:
        _reject("unknown-csr", cert.csr_id)
    if not csr.authorized:
        _reject("csr-not-authorized", cert.csr_id)
    if any(
        existing.csr_id == cert.csr_id or existing.cert_serial == cert.cert_serial
        for existing in user.certificates
    ):
        _reject("duplicate-certificate", cert.cert_serial)
    if (
        cert.subject_name != csr.subject_name
        or cert.subject_email != csr.subject_email
        or cert.subject_public_key != csr.subject_public_key
    ):
        _reject("subject-mismatch", cert.cert_serial)
    message = certificate_signing_message(
        cert.cert_serial,
        cert.csr_id,
        cert.subject_name,
        cert.subject_email,
        cert.subject_public_key,
        cert.issued_at,
    )
    if not crypto.verify(ca.public_key, message, cert.ca_signature):
        _reject("invalid-ca-signature", cert.cert_serial)
    view.put(user_key(user.user_id), replace(user, certificates=user.certificates + (cert,)))


_HANDLERS = {
    "registerUser": handle_register_user,
    "registerRAMember": handle_register_ra_member,
    "policyUpdate": handle_policy_update,
    "createCSR": handle_create_csr,
    "endorseCSR": handle_endorse_csr,
    "issueCertificate": handle_issue_certificate,
}


# ---------------------------------------------------------------------------
# Audit
# ---------------------------------------------------------------------------


def audit_certificate(cert: CertificateRecord, state: WorldState) -> ValidationHistory | None:
    """Look up the validation trail behind a certificate, by content.

    The lookup keys on what the certificate claims, so it also answers for
    certificates that were never written to the ledger: those return None,
    which is exactly the signal that something was issued out of band. A
    tampered copy of a real certificate hashes differently and likewise
    returns None.
    """
    target = certificate_content_digest(cert)
    for key, record in state.items():
        if not key.startswith("user/") or not isinstance(record, UserRecord):
            continue
        for stored in record.certificates:
            if certificate_content_digest(stored).bytes != target.bytes:
                continue
            csr = next((c for c in record.csrs if c.csr_id == stored.csr_id), None)
            if csr is None or not csr.endorsements:
                return None
            return ValidationHistory(
                user_id=record.user_id,
                cert_serial=stored.cert_serial,
                csr_id=stored.csr_id,
                authorized=csr.authorized,
                endorsements=csr.endorsements,
            )
    return None
