"""Simulated grid identities, grid-mapfile lookup, and capability tokens.

Credentials are plain local files the simulator trusts; only capability
tokens carry a cryptographic tag.  A token binds a subject, its VO
context, and a policy fragment under an HMAC-SHA256 keyed by the
issuing VO's registered secret.  Signing is deterministic: the MAC is
computed over a canonical serialization of the claims, so identical
claims always produce identical tokens.
"""

from __future__ import annotations

import hashlib
import hmac
import re
from dataclasses import dataclass, field
from typing import Mapping

from . import policy as policy_mod

KEY_BYTES = 32
MAC_BYTES = 32

_ACCOUNT_RE = re.compile(r"[a-z_][a-z0-9_-]*\Z")

_POLICY_BEGIN = "---BEGIN POLICY---"
_POLICY_END = "---END POLICY---"


class CredentialError(ValueError):
    """Base class for credential and token errors."""


class CredentialFormatError(CredentialError):
    pass


class MissingFieldError(CredentialError):
    def __init__(self, name: str):
        self.field = name
        super().__init__(f"missing required field '{name}'")


class InvalidClaimsError(CredentialError):
    pass


class UnknownIssuerError(CredentialError):
    pass


class BadSignatureError(CredentialError):
    pass


class ExpiredTokenError(CredentialError):
    pass


@dataclass(frozen=True)
class GridCredential:
    """A grid identity with optional VO membership."""

    subject: str
    expiry: int
    vo: str | None = None
    groups: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "groups", frozenset(self.groups))
        if not self.subject:
            raise CredentialFormatError("credential subject may not be empty")
        if self.expiry <= 0:
            raise CredentialFormatError("credential expiry must be positive")
        if self.groups and self.vo is None:
            raise CredentialFormatError("groups require a vo")


def load_credential(text: str) -> GridCredential:
    """Parse the line-oriented ``.cred`` format.

    An expired credential still loads; expiry is checked at use time.
    """
    fields: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        key = key.strip()
        if not sep:
            raise CredentialFormatError(f"line {lineno}: expected 'field: value'")
        if key not in ("subject", "vo", "groups", "expiry"):
            raise CredentialFormatError(f"line {lineno}: unknown field '{key}'")
        if key in fields:
            raise CredentialFormatError(f"line {lineno}: duplicate field '{key}'")
        fields[key] = value.strip()

    if "subject" not in fields or not fields["subject"]:
        raise MissingFieldError("subject")
    if "expiry" not in fields:
        raise MissingFieldError("expiry")
    try:
        expiry = int(fields["expiry"])
    except ValueError:
        raise CredentialFormatError("expiry must be an integer") from None
    groups = frozenset(
        g.strip() for g in fields.get("groups", "").split(",") if g.strip()
    )
    return GridCredential(
        subject=fields["subject"],
        expiry=expiry,
        vo=fields.get("vo") or None,
        groups=groups,
    )


def format_credential(cred: GridCredential) -> str:
    lines = [f"subject: {cred.subject}"]
    if cred.vo is not None:
        lines.append(f"vo: {cred.vo}")
    if cred.groups:
        lines.append(f"groups: {', '.join(sorted(cred.groups))}")
    lines.append(f"expiry: {cred.expiry}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class GridMapFile:
    """Exact-match mapping from subject DNs to local account names."""

    entries: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "entries", dict(self.entries))
        for dn, account in self.entries.items():
            if not _ACCOUNT_RE.match(account):
                raise CredentialFormatError(
                    f"bad local account name {account!r} for {dn!r}"
                )

    def lookup(self, subject: str) -> str | None:
        """The mapped account, or None when the DN is not mapped.

        An unmapped DN is an ordinary outcome (it triggers dynamic
        account leasing downstream), not an error.
        """
        return self.entries.get(subject)


def load_gridmap(text: str) -> GridMapFile:
    """Parse grid-mapfile lines: ``"<DN>" <account>``, ``#`` comments."""
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if not line.startswith('"'):
            raise CredentialFormatError(f"line {lineno}: expected a quoted DN")
        end = line.find('"', 1)
        if end < 0:
            raise CredentialFormatError(f"line {lineno}: unterminated DN")
        dn = line[1:end]
        account = line[end + 1 :].strip()
        if not dn or not account or " " in account:
            raise CredentialFormatError(f"line {lineno}: expected '\"<DN>\" <account>'")
        if dn in entries:
            raise CredentialFormatError(f"line {lineno}: duplicate entry for {dn!r}")
        if not _ACCOUNT_RE.match(account):
            raise CredentialFormatError(f"line {lineno}: bad account name {account!r}")
        entries[dn] = account
    return GridMapFile(entries)


@dataclass(frozen=True)
class CapabilityClaims:
    """Signed content of a push-mode token.

    ``policy_fragment`` is the VO policy document (DSL text) restricted
    to the blocks that apply to the subject; embedding it makes a
    pushed token self-contained.
    """

    subject: str
    vo: str
    groups: frozenset
    expiry: int
    policy_fragment: str

    def __post_init__(self):
        object.__setattr__(self, "groups", frozenset(self.groups))
        if not self.subject:
            raise InvalidClaimsError("claims subject may not be empty")
        if not self.vo:
            raise InvalidClaimsError("claims vo may not be empty")
        if self.expiry <= 0:
            raise InvalidClaimsError("claims expiry must be positive")


@dataclass(frozen=True)
class CapabilityToken:
    claims: CapabilityClaims
    issuer_vo: str
    mac: bytes


def canonical_claims_text(claims: CapabilityClaims) -> str:
    """The byte-stable serialization the MAC is computed over.

    Field order is fixed and groups are sorted, so logically equal
    claims serialize identically regardless of construction order.
    """
    return (
        f"subject: {claims.subject}\n"
        f"vo: {claims.vo}\n"
        f"groups: {', '.join(sorted(claims.groups))}\n"
        f"expiry: {claims.expiry}\n"
        f"{_POLICY_BEGIN}\n"
        f"{claims.policy_fragment.rstrip(chr(10))}\n"
        f"{_POLICY_END}\n"
    )


def _validate_claims(claims: CapabilityClaims) -> None:
    try:
        fragment = policy_mod.parse_policy(claims.policy_fragment)
    except policy_mod.PolicyError as exc:
        raise InvalidClaimsError(f"policy fragment does not parse: {exc}") from None
    if fragment.source != "vo":
        raise InvalidClaimsError("policy fragment must be a vo document")
    for i, block in enumerate(fragment.blocks):
        if not policy_mod.matcher_matches(block.matcher, claims.subject, claims.groups):
            raise InvalidClaimsError(
                f"fragment block {i} does not apply to the claims subject"
            )


def sign_capability(vo_key: bytes, claims: CapabilityClaims) -> CapabilityToken:
    """Deterministically MAC the canonical claims under the VO key."""
    if len(vo_key) != KEY_BYTES:
        raise ValueError(f"vo key must be exactly {KEY_BYTES} bytes")
    _validate_claims(claims)
    mac = hmac.new(
        vo_key, canonical_claims_text(claims).encode("utf-8"), hashlib.sha256
    ).digest()
    return CapabilityToken(claims=claims, issuer_vo=claims.vo, mac=mac)


def verify_capability(
    registry: Mapping, token: CapabilityToken, now: int
) -> CapabilityClaims:
    """Return the claims iff the MAC checks out and the token is fresh."""
    key = registry.get(token.issuer_vo)
    if key is None:
        raise UnknownIssuerError(f"no key registered for vo '{token.issuer_vo}'")
    expected = hmac.new(
        key, canonical_claims_text(token.claims).encode("utf-8"), hashlib.sha256
    ).digest()
    if not hmac.compare_digest(expected, token.mac):
        raise BadSignatureError("token MAC does not verify")
    if now >= token.claims.expiry:
        raise ExpiredTokenError(f"token expired at {token.claims.expiry}")
    return token.claims


def format_token(token: CapabilityToken) -> str:
    """The ``.cap`` file format: canonical claims plus a final mac line."""
    return canonical_claims_text(token.claims) + f"mac: {token.mac.hex()}\n"


def load_token(text: str) -> CapabilityToken:
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines or not lines[-1].startswith("mac: "):
        raise CredentialFormatError("token must end with a 'mac:' line")
    mac_hex = lines.pop()[len("mac: ") :].strip()
    if len(mac_hex) != 2 * MAC_BYTES:
        raise CredentialFormatError("mac must be 64 hex characters")
    try:
        mac = bytes.fromhex(mac_hex)
    except ValueError:
        raise CredentialFormatError("mac must be 64 hex characters") from None

    fields: dict[str, str] = {}
    fragment: list[str] | None = None
    in_fragment = False
    for lineno, line in enumerate(lines, start=1):
        if in_fragment:
            if line == _POLICY_END:
                in_fragment = False
            else:
                fragment.append(line)
            continue
        if line == _POLICY_BEGIN:
            if fragment is not None:
                raise CredentialFormatError(f"line {lineno}: duplicate policy fence")
            fragment = []
            in_fragment = True
            continue
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep or key.strip() not in ("subject", "vo", "groups", "expiry"):
            raise CredentialFormatError(f"line {lineno}: unexpected line in token")
        fields[key.strip()] = value.strip()
    if in_fragment or fragment is None:
        raise CredentialFormatError("token is missing its policy fragment")
    for required in ("subject", "vo", "expiry"):
        if required not in fields:
            raise MissingFieldError(required)
    try:
        expiry = int(fields["expiry"])
    except ValueError:
        raise CredentialFormatError("expiry must be an integer") from None
    groups = frozenset(
        g.strip() for g in fields.get("groups", "").split(",") if g.strip()
    )
    claims = CapabilityClaims(
        subject=fields["subject"],
        vo=fields["vo"],
        groups=groups,
        expiry=expiry,
        policy_fragment="\n".join(fragment) + "\n",
    )
    return CapabilityToken(claims=claims, issuer_vo=claims.vo, mac=mac)
