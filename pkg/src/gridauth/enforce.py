"""Enforcement primitives: dynamic accounts, sandbox limits, usage ledger.

The account pool hands out pre-created local accounts to grid users who
have no static mapping; each lease carries a sandbox configuration and
a TTL that the job manager renews while the job lives.  The allocation
ledger charges VO and per-member cpu-second budgets at admission and
refunds the unconsumed remainder when a job settles.  Limits are
inclusive: usage may equal a cap, exceeding it is a breach.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable


class EnforcementError(ValueError):
    pass


class PoolExhaustedError(EnforcementError):
    pass


class UnknownLeaseError(EnforcementError):
    pass


class UnknownVoError(EnforcementError):
    pass


class UnknownMemberError(EnforcementError):
    pass


class QuotaExceededError(EnforcementError):
    def __init__(self, scope: str, message: str):
        self.scope = scope  # "vo" | "member"
        super().__init__(message)


class LedgerUnderflowError(EnforcementError):
    pass


@dataclass(frozen=True)
class SandboxSpec:
    """Per-lease resource caps; None means the dimension is unlimited."""

    max_cpu: int | None = None
    max_memory: int | None = None
    max_disk: int | None = None
    groups: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "groups", frozenset(self.groups))
        for name in ("max_cpu", "max_memory", "max_disk"):
            limit = getattr(self, name)
            if limit is not None and limit <= 0:
                raise EnforcementError(f"{name} must be positive when set")


@dataclass(frozen=True)
class UsageSample:
    """Cumulative usage of one job; samples are monotonic per job."""

    cpu: int
    memory: int = 0
    disk: int = 0


def record_usage(spec: SandboxSpec, sample: UsageSample) -> str | None:
    """First breached dimension in (cpu, memory, disk) order, or None."""
    if spec.max_cpu is not None and sample.cpu > spec.max_cpu:
        return "cpu"
    if spec.max_memory is not None and sample.memory > spec.max_memory:
        return "memory"
    if spec.max_disk is not None and sample.disk > spec.max_disk:
        return "disk"
    return None


@dataclass
class AccountLease:
    account: str
    subject: str
    spec: SandboxSpec
    expires_at: int


class DynamicAccountPool:
    """FIFO pool of local accounts leased to one subject at a time."""

    def __init__(self, accounts: Iterable[str] = ()):
        self._free: deque = deque()
        self._leased: dict[str, AccountLease] = {}
        for name in accounts:
            if name in self._free:
                raise EnforcementError(f"duplicate account {name!r}")
            self._free.append(name)

    @property
    def free_accounts(self) -> tuple:
        return tuple(self._free)

    @property
    def leases(self) -> tuple:
        return tuple(self._leased.values())

    def size(self) -> int:
        return len(self._free) + len(self._leased)

    def lease(self, subject: str, spec: SandboxSpec, now: int, ttl: int) -> AccountLease:
        if not self._free:
            raise PoolExhaustedError("no dynamic accounts available")
        account = self._free.popleft()
        lease = AccountLease(account, subject, spec, now + ttl)
        self._leased[account] = lease
        return lease

    def release(self, lease: AccountLease) -> None:
        if self._leased.get(lease.account) is not lease:
            raise UnknownLeaseError(f"no active lease on {lease.account!r}")
        del self._leased[lease.account]
        lease.spec = SandboxSpec()  # scrubbed before going back in the pool
        self._free.append(lease.account)

    def renew(self, lease: AccountLease, now: int, ttl: int) -> None:
        if self._leased.get(lease.account) is not lease:
            raise UnknownLeaseError(f"no active lease on {lease.account!r}")
        lease.expires_at = now + ttl

    def expired(self, now: int) -> list:
        return [l for l in self._leased.values() if l.expires_at <= now]


@dataclass
class _MemberAccount:
    quota: int | None = None
    used: int = 0


@dataclass
class _VoAccount:
    allocation: int | None = None
    used: int = 0
    members: dict = field(default_factory=dict)


class AllocationLedger:
    """VO-allocation and member-quota accounting in whole cpu-seconds.

    ``reserve`` is all-or-nothing: both bounds are checked before either
    figure moves.  ``settle`` refunds the unconsumed part of an earlier
    reservation; the consumed part stays charged.
    """

    def __init__(self):
        self._vos: dict[str, _VoAccount] = {}

    def register_vo(self, vo: str, allocation: int | None = None) -> None:
        account = self._vos.setdefault(vo, _VoAccount())
        account.allocation = allocation

    def set_member_quota(self, vo: str, member: str, quota: int) -> None:
        account = self._vos.get(vo)
        if account is None:
            raise UnknownVoError(f"vo '{vo}' is not registered")
        account.members.setdefault(member, _MemberAccount()).quota = quota

    def vos(self) -> tuple:
        return tuple(sorted(self._vos))

    def allocation(self, vo: str) -> int | None:
        return self._require_vo(vo).allocation

    def vo_used(self, vo: str) -> int:
        return self._require_vo(vo).used

    def member_used(self, vo: str, member: str) -> int:
        account = self._require_vo(vo)
        if member not in account.members:
            raise UnknownMemberError(f"'{member}' has no record under vo '{vo}'")
        return account.members[member].used

    def _require_vo(self, vo: str) -> _VoAccount:
        account = self._vos.get(vo)
        if account is None:
            raise UnknownVoError(f"vo '{vo}' is not registered")
        return account

    def reserve(self, vo: str, member: str, amount: int) -> None:
        if amount < 0:
            raise ValueError("reservation amount must be non-negative")
        if amount == 0:
            return
        account = self._require_vo(vo)
        if account.allocation is not None and account.used + amount > account.allocation:
            raise QuotaExceededError(
                "vo",
                f"vo '{vo}' allocation exceeded: "
                f"{account.used} + {amount} > {account.allocation}",
            )
        record = account.members.get(member)
        if record is not None and record.quota is not None:
            if record.used + amount > record.quota:
                raise QuotaExceededError(
                    "member",
                    f"member '{member}' quota exceeded: "
                    f"{record.used} + {amount} > {record.quota}",
                )
        account.used += amount
        account.members.setdefault(member, _MemberAccount()).used += amount

    def settle(self, vo: str, member: str, reserved: int, consumed: int) -> None:
        if consumed > reserved:
            raise LedgerUnderflowError(
                f"consumed {consumed} exceeds reservation {reserved}"
            )
        account = self._require_vo(vo)
        record = account.members.get(member)
        if record is None:
            raise UnknownMemberError(f"'{member}' has no record under vo '{vo}'")
        refund = reserved - consumed
        if refund > record.used or refund > account.used:
            raise LedgerUnderflowError(
                f"refund {refund} exceeds outstanding usage"
            )
        account.used -= refund
        record.used -= refund
        # an auto-created record (no quota) disappears once fully refunded,
        # so a rolled-back reservation leaves no trace
        if record.quota is None and record.used == 0:
            del account.members[member]

    def report(self) -> str:
        """One line per scope: ``vo=... used=n/alloc``, ``member=... used=n/quota``."""
        lines = []
        for vo in sorted(self._vos):
            account = self._vos[vo]
            alloc = "unlimited" if account.allocation is None else account.allocation
            lines.append(f"vo={vo} used={account.used}/{alloc}")
            for member in sorted(account.members):
                record = account.members[member]
                quota = "unlimited" if record.quota is None else record.quota
                lines.append(f"member={member} used={record.used}/{quota}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            vo: {
                "allocation": acct.allocation,
                "used": acct.used,
                "members": {
                    dn: {"quota": m.quota, "used": m.used}
                    for dn, m in acct.members.items()
                },
            }
            for vo, acct in self._vos.items()
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AllocationLedger":
        ledger = cls()
        for vo, acct in data.items():
            account = _VoAccount(allocation=acct["allocation"], used=acct["used"])
            for dn, m in acct["members"].items():
                account.members[dn] = _MemberAccount(quota=m["quota"], used=m["used"])
            ledger._vos[vo] = account
        return ledger
