"""Certification policy: who may endorse which requests, and when a request
counts as authorized.

A policy maps domains to rules. A rule names the RA members permitted to
endorse requests in that domain, how many distinct endorsements authorize a
request, and whether the cross-endorsement consistency checks are enforced.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .records import CSRRecord, RAEndorsementRecord, register_record


class PolicyError(Exception):
    """Base error for this module."""


class NoRuleForDomainError(PolicyError):
    """Neither a specific rule nor a default rule covers the domain."""

    def __init__(self, domain: str):
        self.domain = domain
        super().__init__(f"no rule for domain {domain!r}")


@register_record
@dataclass(frozen=True)
class DomainRule:
    domain: str
    required_endorsements: int
    permitted_ra_members: frozenset[str]
    plausibility_checks_enabled: bool


@register_record
@dataclass(frozen=True)
class CertificationPolicy:
    rules: dict[str, DomainRule]
    default_rule: Optional[DomainRule] = None


@dataclass(frozen=True)
class PlausibilityConflict:
    """Two sources disagree about the requester. ``ra_member_b`` is the literal
    string "csr" when an endorsement contradicts the request itself."""

    field: str
    ra_member_a: str
    value_a: str
    ra_member_b: str
    value_b: str


def validate_policy(policy: CertificationPolicy) -> list[str]:
    """Rule-level sanity: thresholds must be satisfiable by the permitted set."""
    violations: list[str] = []
    rules = list(policy.rules.items())
    if policy.default_rule is not None:
        rules.append(("<default>", policy.default_rule))
    for key, rule in rules:
        if key != "<default>" and key != rule.domain:
            violations.append(f"rule keyed {key!r} names domain {rule.domain!r}")
        if rule.required_endorsements < 1:
            violations.append(f"rule for {rule.domain!r}: required_endorsements < 1")
        if rule.required_endorsements > len(rule.permitted_ra_members):
            violations.append(
                f"rule for {rule.domain!r}: requires {rule.required_endorsements} "
                f"endorsements but permits only {len(rule.permitted_ra_members)} members"
            )
    return violations


def resolve_rule(policy: CertificationPolicy, domain: str) -> DomainRule:
    """The specific rule for a domain, falling back to the default rule."""
    rule = policy.rules.get(domain)
    if rule is not None:
        return rule
    if policy.default_rule is not None:
        return policy.default_rule
    raise NoRuleForDomainError(domain)


def is_permitted(policy: CertificationPolicy, ra_member_id: str, csr: CSRRecord) -> bool:
    """Whether this member may endorse this request's domain."""
    rule = resolve_rule(policy, csr.domain)
    return ra_member_id in rule.permitted_ra_members


def plausibility_check(
    endorsements: list[RAEndorsementRecord] | tuple[RAEndorsementRecord, ...],
    csr: CSRRecord,
) -> list[PlausibilityConflict]:
    """Cross-check what different members verified about the same requester.

    Passes (returns an empty list) only when every pair of endorsements agrees
    on the verified name, email, and document serial suffix, and the verified
    email matches the request's subject email. Signatures are assumed to have
    been verified already.
    """
    conflicts: list[PlausibilityConflict] = []
    checked_fields = ("verified_name", "verified_email", "id_document_serial_suffix")
    items = list(endorsements)
    for i, first in enumerate(items):
        for second in items[i + 1 :]:
            for field in checked_fields:
                a, b = getattr(first, field), getattr(second, field)
                if a != b:
                    conflicts.append(
                        PlausibilityConflict(
                            field=field,
                            ra_member_a=first.ra_member_id,
                            value_a=a,
                            ra_member_b=second.ra_member_id,
                            value_b=b,
                        )
                    )
    for endorsement in items:
        if endorsement.verified_email != csr.subject_email:
            conflicts.append(
                PlausibilityConflict(
                    field="verified_email",
                    ra_member_a=endorsement.ra_member_id,
                    value_a=endorsement.verified_email,
                    ra_member_b="csr",
                    value_b=csr.subject_email,
                )
            )
    return conflicts


def _distinct_permitted(rule: DomainRule, endorsements) -> list[RAEndorsementRecord]:
    seen: set[str] = set()
    result = []
    for endorsement in endorsements:
        if endorsement.ra_member_id in rule.permitted_ra_members and endorsement.ra_member_id not in seen:
            seen.add(endorsement.ra_member_id)
            result.append(endorsement)
    return result


def evaluate_authorization(policy: CertificationPolicy, csr: CSRRecord) -> bool:
    """Decide whether enough distinct, permitted members back this request.

    With consistency checks enabled, a conflicting endorsement does not poison
    the request: it is enough that some mutually consistent subset of distinct
    permitted members, each confirming the request's own subject email,
    reaches the threshold. The requester can recover from a conflict by
    meeting a further member.
    """
    rule = resolve_rule(policy, csr.domain)
    counted = _distinct_permitted(rule, csr.endorsements)
    if not rule.plausibility_checks_enabled:
        return len(counted) >= rule.required_endorsements
    groups: dict[tuple[str, str, str], int] = {}
    for endorsement in counted:
        key = (
            endorsement.verified_name,
            endorsement.verified_email,
            endorsement.id_document_serial_suffix,
        )
        groups[key] = groups.get(key, 0) + 1
    return any(
        email == csr.subject_email and count >= rule.required_endorsements
        for (_, email, _), count in groups.items()
    )
