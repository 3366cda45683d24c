"""User-centered record types and their canonical serialization.

Records are frozen dataclasses. On the wire and on the ledger a record is a
tagged dict (a ``_type`` key plus one key per field) rendered in the canonical
notation from :mod:`ccs.encoding`; field order never matters because the
encoder sorts keys. The same tagged shape doubles as the JSON body format of
the HTTP API, with bytes as lowercase hex and timestamps as canonical strings.

All signed payloads are built here, never by ad-hoc formatting: each message
builder prefixes a distinct domain tag so a signature over one record kind can
never be replayed as another.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from datetime import datetime
from typing import Any, Mapping, Optional, Union, get_args, get_origin, get_type_hints

from . import crypto
from .crypto import Digest, KeyPair, Signature
from .encoding import (
    MalformedInputError,
    encode_value,
    format_timestamp,
    parse_timestamp,
)

CSR_ID_BYTES = 16

POP_DOMAIN = b"ccs:csr-pop:v1:"
CSR_ID_DOMAIN = b"ccs:csr-id:v1:"
RA_ENDORSE_DOMAIN = b"ccs:ra-endorse:v1:"
CERT_SIGN_DOMAIN = b"ccs:cert:v1:"
CERT_CONTENT_DOMAIN = b"ccs:cert-content:v1:"

# ---------------------------------------------------------------------------
# Record registry and conversion
# ---------------------------------------------------------------------------

RECORD_TYPES: dict[str, type] = {}
_HINTS_CACHE: dict[type, dict[str, Any]] = {}


def register_record(cls):
    """Class decorator: make a frozen dataclass canonically serializable."""
    RECORD_TYPES[cls.__name__] = cls
    return cls


def _field_hints(cls: type) -> dict[str, Any]:
    if cls not in _HINTS_CACHE:
        hints = get_type_hints(cls)
        _HINTS_CACHE[cls] = {f.name: hints[f.name] for f in dataclasses.fields(cls)}
    return _HINTS_CACHE[cls]


def is_record(value) -> bool:
    return type(value).__name__ in RECORD_TYPES and isinstance(
        value, RECORD_TYPES[type(value).__name__]
    )


def record_to_tagged(value):
    """Recursively convert a record (or composite) into plain tagged values."""
    if is_record(value):
        tagged: dict[str, Any] = {"_type": type(value).__name__}
        for field in dataclasses.fields(value):
            tagged[field.name] = record_to_tagged(getattr(value, field.name))
        return tagged
    if isinstance(value, (list, tuple)):
        return [record_to_tagged(item) for item in value]
    if isinstance(value, (set, frozenset)):
        return sorted(record_to_tagged(item) for item in value)
    if isinstance(value, dict):
        return {key: record_to_tagged(item) for key, item in value.items()}
    return value


def _coerce(value, hint, path: str, json_mode: bool):
    """Check a decoded plain value against a field hint, rebuilding containers."""
    if hint is Any:
        return tagged_to_record(value) if isinstance(value, (dict, list)) else value
    origin = get_origin(hint)
    if origin is Union:
        args = [a for a in get_args(hint) if a is not type(None)]
        if value is None:
            if len(args) == len(get_args(hint)):
                raise MalformedInputError(f"{path}: null not allowed")
            return None
        return _coerce(value, args[0], path, json_mode)
    if hint is bool:
        if not isinstance(value, bool):
            raise MalformedInputError(f"{path}: expected bool")
        return value
    if hint is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise MalformedInputError(f"{path}: expected int")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise MalformedInputError(f"{path}: expected string")
        return value
    if hint is bytes:
        if json_mode:
            if not isinstance(value, str):
                raise MalformedInputError(f"{path}: expected hex string")
            try:
                return bytes.fromhex(value)
            except ValueError as exc:
                raise MalformedInputError(f"{path}: invalid hex") from exc
        if not isinstance(value, bytes):
            raise MalformedInputError(f"{path}: expected bytes")
        return value
    if hint is datetime:
        if json_mode:
            if not isinstance(value, str):
                raise MalformedInputError(f"{path}: expected timestamp string")
            try:
                return parse_timestamp(value)
            except ValueError as exc:
                raise MalformedInputError(f"{path}: {exc}") from exc
        if not isinstance(value, datetime):
            raise MalformedInputError(f"{path}: expected timestamp")
        return value
    if origin in (tuple, list):
        args = get_args(hint)
        if not isinstance(value, list):
            raise MalformedInputError(f"{path}: expected list")
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(value) != len(args):
                raise MalformedInputError(f"{path}: expected {len(args)} items")
            return tuple(
                _coerce(item, arg, f"{path}[{i}]", json_mode)
                for i, (item, arg) in enumerate(zip(value, args))
            )
        element = args[0] if args else Any
        return tuple(
            _coerce(item, element, f"{path}[{i}]", json_mode)
            for i, item in enumerate(value)
        )
    if origin is frozenset:
        element = get_args(hint)[0]
        if not isinstance(value, list):
            raise MalformedInputError(f"{path}: expected list")
        items = [_coerce(item, element, f"{path}[{i}]", json_mode) for i, item in enumerate(value)]
        result = frozenset(items)
        if len(result) != len(items):
            raise MalformedInputError(f"{path}: duplicate set elements")
        return result
    if origin is dict:
        key_hint, value_hint = get_args(hint)
        if key_hint is not str:
            raise MalformedInputError(f"{path}: unsupported dict key type")
        if not isinstance(value, dict):
            raise MalformedInputError(f"{path}: expected object")
        return {
            key: _coerce(item, value_hint, f"{path}[{key!r}]", json_mode)
            for key, item in value.items()
        }
    if isinstance(hint, type) and hint.__name__ in RECORD_TYPES:
        built = _build_record(value, path, json_mode) if isinstance(value, dict) else value
        if not isinstance(built, hint):
            raise MalformedInputError(f"{path}: expected {hint.__name__} record")
        return built
    raise MalformedInputError(f"{path}: unsupported field type {hint!r}")


def _build_record(value: dict, path: str, json_mode: bool):
    name = value.get("_type")
    if not isinstance(name, str) or name not in RECORD_TYPES:
        raise MalformedInputError(f"{path}: unknown record type {name!r}")
    cls = RECORD_TYPES[name]
    hints = _field_hints(cls)
    given = set(value.keys()) - {"_type"}
    missing = set(hints) - given
    unknown = given - set(hints)
    if missing:
        raise MalformedInputError(f"{path}: missing field {sorted(missing)[0]!r} of {name}")
    if unknown:
        raise MalformedInputError(f"{path}: unknown field {sorted(unknown)[0]!r} of {name}")
    kwargs = {
        field: _coerce(value[field], hint, f"{path}.{field}", json_mode)
        for field, hint in hints.items()
    }
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise MalformedInputError(f"{path}: invalid {name}: {exc}") from exc


def tagged_to_record(value, json_mode: bool = False):
    """Inverse of :func:`record_to_tagged` for plain decoded values."""
    if isinstance(value, dict) and "_type" in value:
        return _build_record(value, value.get("_type", "record"), json_mode)
    if isinstance(value, dict):
        return {key: tagged_to_record(item, json_mode) for key, item in value.items()}
    if isinstance(value, list):
        return [tagged_to_record(item, json_mode) for item in value]
    return value


def canonical_bytes(value) -> bytes:
    """Canonically encode any value, records included."""
    return encode_value(record_to_tagged(value))


def canonical_serialize(record) -> bytes:
    """Canonically encode one record. Equal records encode to equal bytes."""
    if not is_record(record):
        raise TypeError(f"{type(record).__name__} is not a registered record type")
    return canonical_bytes(record)


def deserialize(data: bytes):
    """Exact inverse of canonical_serialize; raises MalformedInputError otherwise."""
    from .encoding import decode_value

    value = decode_value(data)
    if not isinstance(value, dict) or "_type" not in value:
        raise MalformedInputError("top-level value is not a record")
    return _build_record(value, value["_type"], json_mode=False)


def to_jsonable(value):
    """Render a record (or composite) as plain JSON-compatible data."""
    tagged = record_to_tagged(value)

    def walk(node):
        if isinstance(node, dict):
            return {key: walk(item) for key, item in node.items()}
        if isinstance(node, list):
            return [walk(item) for item in node]
        if isinstance(node, bytes):
            return node.hex()
        if isinstance(node, datetime):
            return format_timestamp(node)
        return node

    return walk(tagged)


def from_jsonable(value):
    """Rebuild a record from its JSON rendering, strictly."""
    if not isinstance(value, dict) or "_type" not in value:
        raise MalformedInputError("JSON value is not a record")
    return _build_record(value, value["_type"], json_mode=True)


# ---------------------------------------------------------------------------
# Crypto value types participate in serialization
# ---------------------------------------------------------------------------

register_record(Signature)
register_record(Digest)


# ---------------------------------------------------------------------------
# Domain records
# ---------------------------------------------------------------------------


def email_domain(email: str) -> str:
    """The domain a request belongs to: everything after the '@'."""
    if email.count("@") != 1:
        raise ValueError(f"email must contain exactly one '@': {email!r}")
    return email.split("@", 1)[1]


@register_record
@dataclass(frozen=True)
class RAEndorsementRecord:
    """One registration-authority member's signed validation attestation."""

    ra_member_id: str
    verified_name: str
    verified_email: str
    id_document_serial_suffix: str
    timestamp: datetime
    signature: Signature


@register_record
@dataclass(frozen=True)
class CSRRecord:
    """A signing request with its endorsement history and authorization flag."""

    csr_id: str
    subject_name: str
    subject_email: str
    subject_public_key: bytes
    domain: str
    requester_signature: Signature
    endorsements: tuple[RAEndorsementRecord, ...]
    authorized: bool
    created_at: datetime


@register_record
@dataclass(frozen=True)
class CertificateRecord:
    """An issued certificate, bound byte-for-byte to its source request."""

    cert_serial: str
    csr_id: str
    subject_name: str
    subject_email: str
    subject_public_key: bytes
    issued_at: datetime
    ca_signature: Signature


@register_record
@dataclass(frozen=True)
class UserRecord:
    user_id: str
    name: str
    email: str
    csrs: tuple[CSRRecord, ...]
    certificates: tuple[CertificateRecord, ...]


@register_record
@dataclass(frozen=True)
class RAMemberRecord:
    ra_member_id: str
    display_name: str
    public_key: bytes
    permitted_domains: frozenset[str]


@register_record
@dataclass(frozen=True)
class ActorRecord:
    """A non-user identity known to the ledger (the admin and the CA)."""

    actor_id: str
    role: str
    public_key: bytes


# ---------------------------------------------------------------------------
# Signed message builders
# ---------------------------------------------------------------------------


def csr_pop_message(subject_name: str, subject_email: str, subject_public_key: bytes) -> bytes:
    """Proof-of-possession payload: the serialized subject fields."""
    return POP_DOMAIN + encode_value(
        {
            "subject_email": subject_email,
            "subject_name": subject_name,
            "subject_public_key": subject_public_key,
        }
    )


def compute_csr_id(
    subject_name: str,
    subject_email: str,
    subject_public_key: bytes,
    created_at: datetime,
) -> str:
    """Content-derived request id, computable by the requester alone."""
    digest = crypto.hash_bytes(
        CSR_ID_DOMAIN
        + encode_value(
            {
                "created_at": created_at,
                "subject_email": subject_email,
                "subject_name": subject_name,
                "subject_public_key": subject_public_key,
            }
        )
    )
    return digest.bytes[:CSR_ID_BYTES].hex()


def ra_endorsement_message(
    csr_id: str,
    ra_member_id: str,
    verified_name: str,
    verified_email: str,
    id_document_serial_suffix: str,
    timestamp: datetime,
) -> bytes:
    """What an RA member signs: every endorsement field plus the target csr_id."""
    return RA_ENDORSE_DOMAIN + encode_value(
        {
            "csr_id": csr_id,
            "id_document_serial_suffix": id_document_serial_suffix,
            "ra_member_id": ra_member_id,
            "timestamp": timestamp,
            "verified_email": verified_email,
            "verified_name": verified_name,
        }
    )


def certificate_signing_message(
    cert_serial: str,
    csr_id: str,
    subject_name: str,
    subject_email: str,
    subject_public_key: bytes,
    issued_at: datetime,
) -> bytes:
    """What the CA signs when issuing: every certificate field but the signature."""
    return CERT_SIGN_DOMAIN + encode_value(
        {
            "cert_serial": cert_serial,
            "csr_id": csr_id,
            "issued_at": issued_at,
            "subject_email": subject_email,
            "subject_name": subject_name,
            "subject_public_key": subject_public_key,
        }
    )


def certificate_content_digest(cert: CertificateRecord) -> Digest:
    """Content fingerprint used for after-the-fact audit lookups.

    Keyed by what the certificate claims, not where it is stored, so a
    certificate that never touched the ledger can still be queried.
    """
    return crypto.hash_bytes(
        CERT_CONTENT_DOMAIN
        + encode_value(
            {
                "cert_serial": cert.cert_serial,
                "subject_email": cert.subject_email,
                "subject_name": cert.subject_name,
                "subject_public_key": cert.subject_public_key,
            }
        )
    )


# ---------------------------------------------------------------------------
# Client-side builders
# ---------------------------------------------------------------------------


def build_csr(requester: KeyPair, subject_name: str, subject_email: str, created_at: datetime) -> CSRRecord:
    """Assemble and sign a fresh request for the requester's own key."""
    pop = crypto.sign(
        requester.private_key,
        csr_pop_message(subject_name, subject_email, requester.public_key),
    )
    return CSRRecord(
        csr_id=compute_csr_id(subject_name, subject_email, requester.public_key, created_at),
        subject_name=subject_name,
        subject_email=subject_email,
        subject_public_key=requester.public_key,
        domain=email_domain(subject_email),
        requester_signature=pop,
        endorsements=(),
        authorized=False,
        created_at=created_at,
    )


def build_endorsement(
    ra_key: KeyPair,
    ra_member_id: str,
    csr_id: str,
    verified_name: str,
    verified_email: str,
    id_document_serial_suffix: str,
    timestamp: datetime,
) -> RAEndorsementRecord:
    signature = crypto.sign(
        ra_key.private_key,
        ra_endorsement_message(
            csr_id,
            ra_member_id,
            verified_name,
            verified_email,
            id_document_serial_suffix,
            timestamp,
        ),
    )
    return RAEndorsementRecord(
        ra_member_id=ra_member_id,
        verified_name=verified_name,
        verified_email=verified_email,
        id_document_serial_suffix=id_document_serial_suffix,
        timestamp=timestamp,
        signature=signature,
    )


def build_certificate(ca_key: KeyPair, csr: CSRRecord, cert_serial: str, issued_at: datetime) -> CertificateRecord:
    """Issue a certificate over the request's exact subject fields."""
    signature = crypto.sign(
        ca_key.private_key,
        certificate_signing_message(
            cert_serial,
            csr.csr_id,
            csr.subject_name,
            csr.subject_email,
            csr.subject_public_key,
            issued_at,
        ),
    )
    return CertificateRecord(
        cert_serial=cert_serial,
        csr_id=csr.csr_id,
        subject_name=csr.subject_name,
        subject_email=csr.subject_email,
        subject_public_key=csr.subject_public_key,
        issued_at=issued_at,
        ca_signature=signature,
    )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationContext:
    """Cross-record lookups some invariants need; omit what is unavailable."""

    ra_public_keys: Optional[Mapping[str, bytes]] = None
    ca_public_key: Optional[bytes] = None
    csr_id: Optional[str] = None
    user_email: Optional[str] = None


def validate_record(record, context: ValidationContext | None = None) -> list[str]:
    """Check a record's invariants, returning one message per violation.

    Signature checks that need key material outside the record run only when
    the context supplies it; everything structural always runs.
    """
    ctx = context or ValidationContext()
    violations: list[str] = []
    if isinstance(record, RAEndorsementRecord):
        _validate_endorsement(record, ctx, violations)
    elif isinstance(record, CSRRecord):
        _validate_csr(record, ctx, violations)
    elif isinstance(record, CertificateRecord):
        _validate_certificate(record, ctx, violations)
    elif isinstance(record, UserRecord):
        _validate_user(record, violations)
    elif isinstance(record, RAMemberRecord):
        if not record.ra_member_id:
            violations.append("ra_member_id is empty")
        if not record.permitted_domains:
            violations.append("permitted_domains is empty")
        if len(record.public_key) != crypto.PUBLIC_KEY_SIZE:
            violations.append("public_key has wrong length")
    elif not is_record(record):
        violations.append(f"not a record: {type(record).__name__}")
    return violations


def _validate_endorsement(record: RAEndorsementRecord, ctx: ValidationContext, out: list[str]) -> None:
    if not record.ra_member_id:
        out.append("ra_member_id is empty")
    if not record.id_document_serial_suffix:
        out.append("id_document_serial_suffix is empty")
    if ctx.ra_public_keys is not None and ctx.csr_id is not None:
        key = ctx.ra_public_keys.get(record.ra_member_id)
        message = ra_endorsement_message(
            ctx.csr_id,
            record.ra_member_id,
            record.verified_name,
            record.verified_email,
            record.id_document_serial_suffix,
            record.timestamp,
        )
        if key is None or not crypto.verify(key, message, record.signature):
            out.append(f"endorsement signature by {record.ra_member_id!r} does not verify")


def _validate_csr(record: CSRRecord, ctx: ValidationContext, out: list[str]) -> None:
    if record.subject_email.count("@") != 1:
        out.append("subject_email must contain exactly one '@'")
    elif record.domain != email_domain(record.subject_email):
        out.append("domain does not match subject_email")
    expected_id = compute_csr_id(
        record.subject_name,
        record.subject_email,
        record.subject_public_key,
        record.created_at,
    )
    if record.csr_id != expected_id:
        out.append("csr_id does not match record contents")
    if not crypto.verify(
        record.subject_public_key,
        csr_pop_message(record.subject_name, record.subject_email, record.subject_public_key),
        record.requester_signature,
    ):
        out.append("requester proof-of-possession signature does not verify")
    if record.authorized and not record.endorsements:
        out.append("authorized flag set without any endorsement")
    members = [e.ra_member_id for e in record.endorsements]
    if len(members) != len(set(members)):
        out.append("multiple endorsements by the same RA member")
    if ctx.user_email is not None and record.subject_email != ctx.user_email:
        out.append("subject_email does not match owning user")
    endorsement_ctx = ValidationContext(
        ra_public_keys=ctx.ra_public_keys,
        csr_id=record.csr_id,
    )
    for endorsement in record.endorsements:
        out.extend(validate_record(endorsement, endorsement_ctx))


def _validate_certificate(record: CertificateRecord, ctx: ValidationContext, out: list[str]) -> None:
    if not record.cert_serial:
        out.append("cert_serial is empty")
    if ctx.ca_public_key is not None:
        message = certificate_signing_message(
            record.cert_serial,
            record.csr_id,
            record.subject_name,
            record.subject_email,
            record.subject_public_key,
            record.issued_at,
        )
        if not crypto.verify(ctx.ca_public_key, message, record.ca_signature):
            out.append("ca_signature does not verify")


def _validate_user(record: UserRecord, out: list[str]) -> None:
    if not record.user_id:
        out.append("user_id is empty")
    if record.email.count("@") != 1:
        out.append("email must contain exactly one '@'")
    csr_ids = [c.csr_id for c in record.csrs]
    if len(csr_ids) != len(set(csr_ids)):
        out.append("duplicate csr_id within user")
    serials = [c.cert_serial for c in record.certificates]
    if len(serials) != len(set(serials)):
        out.append("duplicate cert_serial within user")
    by_id = {c.csr_id: c for c in record.csrs}
    for cert in record.certificates:
        source = by_id.get(cert.csr_id)
        if source is None:
            out.append(f"certificate {cert.cert_serial!r} references unknown csr")
        else:
            if not source.authorized:
                out.append(f"certificate {cert.cert_serial!r} references unauthorized csr")
            if (
                cert.subject_name != source.subject_name
                or cert.subject_email != source.subject_email
                or cert.subject_public_key != source.subject_public_key
            ):
                out.append(f"certificate {cert.cert_serial!r} subject differs from csr")
    for csr in record.csrs:
        out.extend(validate_record(csr, ValidationContext(user_email=record.email)))
