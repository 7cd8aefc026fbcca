"""Simulated gatekeeper and job manager with a discrete clock.

Submission and management requests each pass one enforcement point that
asks the decision point before anything changes; a denied request
leaves no state behind.  Admitted jobs move through a fixed lifecycle
(pending, active, suspended, and the absorbing done/failed/canceled)
driven by `tick`, which advances simulated time one second at a step:
pending jobs activate (highest priority first, then submission order),
every active job consumes ``count`` cpu-seconds per simulated second,
and jobs whose total consumption reaches their profiled runtime settle
their reservation and complete.  Sandbox breaches kill the job instead.

All mutations go through one engine instance and are serialized by the
caller; records returned to callers are snapshots.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Iterable, Mapping

from .credential import CapabilityToken, GridCredential, GridMapFile
from .enforce import (
    AccountLease,
    AllocationLedger,
    DynamicAccountPool,
    PoolExhaustedError,
    SandboxSpec,
    UsageSample,
    record_usage,
)
from .pdp import (
    AuthzQuery,
    Decision,
    PolicySourceSet,
    decide,
    decide_push,
)
from .policy import (
    MaxSpec,
    MayContain,
    MustContain,
    OrSpec,
    PolicyDocument,
    RangeSpec,
    parse_policy,
)
from .rsl import JobAction, RslRequest, parse_rsl, serialize_rsl

DEFAULT_LEASE_TTL = 3600


class JobManagerError(Exception):
    pass


class DeniedByPolicyError(JobManagerError):
    def __init__(self, decision: Decision):
        self.decision = decision
        reasons = [e.reason for e in decision.trace if e.reason]
        detail = reasons[0] if reasons else "denied"
        super().__init__(f"denied by policy: {detail}")


class UnknownJobError(JobManagerError):
    pass


class IllegalTransitionError(JobManagerError):
    pass


class NoAccountsAvailableError(JobManagerError):
    pass


class JobState(enum.Enum):
    PENDING = "pending"
    ACTIVE = "active"
    SUSPENDED = "suspended"
    DONE = "done"
    FAILED = "failed"
    CANCELED = "canceled"


TERMINAL_STATES = frozenset({JobState.DONE, JobState.FAILED, JobState.CANCELED})

#: the only lifecycle moves the engine will ever perform
TRANSITIONS: Mapping = {
    (JobState.PENDING, "activate"): JobState.ACTIVE,
    (JobState.ACTIVE, "suspend"): JobState.SUSPENDED,
    (JobState.SUSPENDED, "resume"): JobState.ACTIVE,
    (JobState.PENDING, "cancel"): JobState.CANCELED,
    (JobState.ACTIVE, "cancel"): JobState.CANCELED,
    (JobState.SUSPENDED, "cancel"): JobState.CANCELED,
    (JobState.ACTIVE, "complete"): JobState.DONE,
    (JobState.ACTIVE, "limit_kill"): JobState.FAILED,
    (JobState.ACTIVE, "fault"): JobState.FAILED,
}


@dataclass(frozen=True)
class SimProfile:
    """What the simulated job would really do if it ran."""

    runtime: int  # total cpu-seconds the job consumes before finishing
    memory_peak: int = 0  # MB
    disk: int = 0  # MB

    def __post_init__(self):
        if self.runtime < 0 or self.memory_peak < 0 or self.disk < 0:
            raise ValueError("profile figures must be non-negative")


@dataclass
class Job:
    id: str
    owner: str
    vo: str | None
    jobtag: str | None
    request: RslRequest
    state: JobState
    account: str
    dynamic_account: bool
    reserved: int
    consumed: int
    priority: int
    submitted_at: int
    ended_at: int | None
    profile: SimProfile
    sandbox: SandboxSpec
    accounted: bool

    @property
    def count(self) -> int:
        return self.request.get("count") or 1


@dataclass(frozen=True)
class Event:
    t: int
    job: str
    name: str
    detail: str

    @property
    def line(self) -> str:
        return f"t={self.t} job={self.job} event={self.name} detail={self.detail}"


def _spec_upper(spec) -> int | None:
    if isinstance(spec, MaxSpec):
        return spec.bound
    if isinstance(spec, RangeSpec):
        return spec.hi
    if isinstance(spec, OrSpec):
        uppers = [_spec_upper(alt) for alt in spec.alternatives]
        if any(u is None for u in uppers):
            return None
        return max(uppers)
    return None


def _policy_caps(decision: Decision, docs: Mapping, attr: str) -> list:
    """Upper bounds the permitting blocks place on an integer attribute."""
    caps = []
    for entry in decision.trace:
        if entry.outcome != "permit" or entry.block is None:
            continue
        doc = docs.get(entry.source)
        if doc is None:
            continue
        block = doc.blocks[entry.block]
        for a in block.assertions:
            if isinstance(a, (MayContain, MustContain)) and a.attr == attr:
                upper = _spec_upper(a.spec) if a.spec is not None else None
                # the attribute itself is a positive integer, so only
                # positive bounds are meaningful sandbox caps
                if upper is not None and upper >= 1:
                    caps.append(upper)
    return caps


class JobManager:
    """Gatekeeper, job-manager instances, clock and bookkeeping in one place."""

    def __init__(
        self,
        resource_policy: PolicyDocument | None = None,
        vo_policies: Iterable = (),
        gridmap: GridMapFile | None = None,
        pool: DynamicAccountPool | None = None,
        key_registry: Mapping | None = None,
        target: str = "site",
        lease_ttl: int = DEFAULT_LEASE_TTL,
    ):
        if resource_policy is not None and resource_policy.source != "resource":
            raise ValueError("resource_policy must have source 'resource'")
        self.resource_policy = resource_policy
        self.vo_policies: dict[str, PolicyDocument] = {}
        for doc in vo_policies:
            if doc.source != "vo":
                raise ValueError(f"policy '{doc.name}' is not a vo document")
            self.vo_policies[doc.name] = doc
        self.gridmap = gridmap or GridMapFile({})
        self.pool = pool or DynamicAccountPool()
        self.key_registry = dict(key_registry or {})
        self.target = target
        self.lease_ttl = lease_ttl

        self.clock = 0
        self.jobs: dict[str, Job] = {}
        self.events: list[Event] = []
        self.ledger = AllocationLedger()
        self._leases: dict[str, AccountLease] = {}
        self._next_seq = 1

        for doc in self.vo_policies.values():
            self._register_accounting(doc)

    # -- plumbing ---------------------------------------------------------

    def _register_accounting(self, doc: PolicyDocument) -> None:
        if doc.allocation is None and not doc.member_quotas:
            return
        self.ledger.register_vo(doc.name, doc.allocation)
        for dn, quota in doc.member_quotas.items():
            self.ledger.set_member_quota(doc.name, dn, quota)

    def _emit(self, job_id: str, name: str, detail: str) -> Event:
        event = Event(self.clock, job_id, name, detail)
        self.events.append(event)
        return event

    def _transition(self, job: Job, event: str) -> None:
        new_state = TRANSITIONS.get((job.state, event))
        if new_state is None:
            raise IllegalTransitionError(
                f"cannot {event} job {job.id} in state {job.state.value}"
            )
        job.state = new_state

    def _decide(
        self, q: AuthzQuery, token: CapabilityToken | None
    ) -> tuple[Decision, PolicyDocument | None]:
        """Run the PDP; also return the VO document the decision used."""
        if self.resource_policy is None:
            raise ValueError("no resource policy configured")
        if token is not None:
            decision = decide_push(
                q, self.resource_policy, token, self.key_registry, now=self.clock
            )
            vo_doc = None
            if decision.permitted:
                vo_doc = parse_policy(token.claims.policy_fragment)
            return decision, vo_doc
        vo_doc = (
            self.vo_policies.get(q.credential.vo)
            if q.credential.vo is not None
            else None
        )
        decision = decide(q, PolicySourceSet(self.resource_policy, vo_doc))
        return decision, vo_doc

    # -- gatekeeper -------------------------------------------------------

    def gatekeeper_submit(
        self,
        cred: GridCredential,
        rsl_text: str,
        profile: SimProfile,
        token: CapabilityToken | None = None,
    ) -> str:
        """Admit a job or raise; admission is atomic.

        Raises RslError for malformed requests, DeniedByPolicyError,
        QuotaExceededError or NoAccountsAvailableError; on any of these
        no state change persists.
        """
        request = parse_rsl(rsl_text)
        query = AuthzQuery(
            credential=cred,
            action=JobAction.START,
            target=self.target,
            request=request,
        )
        decision, vo_doc = self._decide(query, token)
        if not decision.permitted:
            raise DeniedByPolicyError(decision)

        accounted = False
        reserved = decision.charged_estimate or 0
        if cred.vo is not None and vo_doc is not None:
            if vo_doc.allocation is not None or cred.subject in vo_doc.member_quotas:
                accounted = True
                self.ledger.register_vo(cred.vo, vo_doc.allocation)
                if cred.subject in vo_doc.member_quotas:
                    self.ledger.set_member_quota(
                        cred.vo, cred.subject, vo_doc.member_quotas[cred.subject]
                    )
                self.ledger.reserve(cred.vo, cred.subject, reserved)

        sandbox = self._sandbox_for(cred, request, decision, vo_doc)
        account = self.gridmap.lookup(cred.subject)
        dynamic = False
        lease = None
        if account is None:
            try:
                lease = self.pool.lease(cred.subject, sandbox, self.clock, self.lease_ttl)
            except PoolExhaustedError:
                if accounted:
                    self.ledger.settle(cred.vo, cred.subject, reserved, 0)
                raise NoAccountsAvailableError(
                    f"no local account for {cred.subject} and the dynamic pool is empty"
                ) from None
            account = lease.account
            dynamic = True

        job_id = f"j{self._next_seq}"
        self._next_seq += 1
        jobtag = request.get("jobtag")
        job = Job(
            id=job_id,
            owner=cred.subject,
            vo=cred.vo,
            jobtag=jobtag,
            request=request,
            state=JobState.PENDING,
            account=account,
            dynamic_account=dynamic,
            reserved=reserved,
            consumed=0,
            priority=0,
            submitted_at=self.clock,
            ended_at=None,
            profile=profile,
            sandbox=sandbox,
            accounted=accounted,
        )
        self.jobs[job_id] = job
        if lease is not None:
            self._leases[job_id] = lease
        self._emit(job_id, "submit", f"owner={cred.subject} state=pending reserved={reserved}")
        return job_id

    def _sandbox_for(
        self,
        cred: GridCredential,
        request: RslRequest,
        decision: Decision,
        vo_doc: PolicyDocument | None,
    ) -> SandboxSpec:
        """Caps from the request, tightened by the permitting blocks."""
        docs = {"resource": self.resource_policy, "vo": vo_doc}
        count = request.get("count") or 1

        cpu_bounds = _policy_caps(decision, docs, "maxcputime")
        if request.get("maxcputime") is not None:
            cpu_bounds.append(request.get("maxcputime"))
        max_cpu = count * min(cpu_bounds) if cpu_bounds else None

        mem_bounds = _policy_caps(decision, docs, "maxmemory")
        if request.get("maxmemory") is not None:
            mem_bounds.append(request.get("maxmemory"))
        max_memory = min(mem_bounds) if mem_bounds else None

        return SandboxSpec(
            max_cpu=max_cpu,
            max_memory=max_memory,
            max_disk=None,
            groups=cred.groups,
        )

    # -- job manager ------------------------------------------------------

    def manage(
        self,
        job_id: str,
        action: JobAction,
        cred: GridCredential,
        token: CapabilityToken | None = None,
        priority: int | None = None,
    ) -> Job:
        """Authorize and apply one management request; returns a snapshot."""
        if action is JobAction.START:
            raise ValueError("start is not a management action")
        job = self.jobs.get(job_id)
        if job is None:
            raise UnknownJobError(f"no such job '{job_id}'")
        query = AuthzQuery(
            credential=cred,
            action=action,
            target=self.target,
            jobtag=job.jobtag,
            owner=job.owner,
        )
        decision, _ = self._decide(query, token)
        if not decision.permitted:
            raise DeniedByPolicyError(decision)

        if action is JobAction.STATUS:
            return self.job_record(job_id)
        if action is JobAction.SET_PRIORITY:
            if priority is None:
                raise ValueError("set_priority requires a priority value")
            if job.state in TERMINAL_STATES:
                raise IllegalTransitionError(
                    f"cannot set_priority job {job.id} in state {job.state.value}"
                )
            job.priority = priority
            self._emit(job_id, "set_priority", f"priority={priority} by={cred.subject}")
            return self.job_record(job_id)

        event = action.value  # suspend | resume | cancel
        self._transition(job, event)
        if action is JobAction.SUSPEND:
            self._emit(job_id, "suspend", f"state=suspended by={cred.subject}")
        elif action is JobAction.RESUME:
            self._emit(job_id, "resume", f"state=active by={cred.subject}")
        else:
            self._emit(job_id, "cancel", f"state=canceled by={cred.subject}")
            self._settle(job)
        return self.job_record(job_id)

    def _settle(self, job: Job) -> None:
        if job.accounted:
            self.ledger.settle(job.vo, job.owner, job.reserved, job.consumed)
        lease = self._leases.pop(job.id, None)
        if lease is not None:
            self.pool.release(lease)
        job.ended_at = self.clock

    # -- clock ------------------------------------------------------------

    def tick(self, dt: int) -> list:
        """Advance the clock ``dt`` whole seconds; returns the new events."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        first_new = len(self.events)
        for _ in range(dt):
            self._step()
        return self.events[first_new:]

    def _step(self) -> None:
        pending = sorted(
            (j for j in self.jobs.values() if j.state is JobState.PENDING),
            key=lambda j: (-j.priority, j.submitted_at, int(j.id[1:])),
        )
        for job in pending:
            self._transition(job, "activate")
            self._emit(job.id, "activate", "state=active")

        self.clock += 1

        for job in list(self.jobs.values()):
            if job.state is not JobState.ACTIVE:
                continue
            delta = min(job.count, job.profile.runtime - job.consumed)
            tentative = job.consumed + delta
            sample = UsageSample(
                cpu=tentative, memory=job.profile.memory_peak, disk=job.profile.disk
            )
            breach = record_usage(job.sandbox, sample)
            if breach is not None:
                if breach == "cpu":
                    # the kill lands the moment the cap is crossed
                    job.consumed = min(tentative, job.sandbox.max_cpu)
                else:
                    job.consumed = tentative
                self._transition(job, "limit_kill")
                self._emit(job.id, "failed", f"state=failed limit={breach}")
                self._settle(job)
                continue
            job.consumed = tentative
            if job.consumed >= job.profile.runtime:
                self._transition(job, "complete")
                refund = max(job.reserved - job.consumed, 0)
                self._emit(
                    job.id,
                    "done",
                    f"state=done consumed={job.consumed} refunded={refund}",
                )
                self._settle(job)

        # leases stay fresh while their job lives; an expired lease under
        # a running job is a simulator fault
        for job_id, lease in list(self._leases.items()):
            job = self.jobs[job_id]
            if job.state in TERMINAL_STATES:
                continue
            if lease.expires_at <= self.clock and job.state is JobState.ACTIVE:
                self._transition(job, "fault")
                self._emit(job_id, "failed", "state=failed fault=lease-expired")
                self._settle(job)
            else:
                self.pool.renew(lease, self.clock, self.lease_ttl)

    # -- inspection -------------------------------------------------------

    def job_record(self, job_id: str) -> Job:
        job = self.jobs.get(job_id)
        if job is None:
            raise UnknownJobError(f"no such job '{job_id}'")
        return replace(job)

    def event_lines(self) -> list:
        return [e.line for e in self.events]

    def ledger_report(self) -> str:
        return self.ledger.report()

    # -- persistence ------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "clock": self.clock,
            "next_seq": self._next_seq,
            "target": self.target,
            "lease_ttl": self.lease_ttl,
            "jobs": [self._job_to_dict(j) for j in self.jobs.values()],
            "ledger": self.ledger.to_dict(),
            "pool": {
                "free": list(self.pool.free_accounts),
                "leased": {
                    job_id: {
                        "account": lease.account,
                        "subject": lease.subject,
                        "spec": self._spec_to_dict(lease.spec),
                        "expires_at": lease.expires_at,
                    }
                    for job_id, lease in self._leases.items()
                },
            },
            "events": [
                {"t": e.t, "job": e.job, "name": e.name, "detail": e.detail}
                for e in self.events
            ],
        }

    @staticmethod
    def _spec_to_dict(spec: SandboxSpec) -> dict:
        return {
            "max_cpu": spec.max_cpu,
            "max_memory": spec.max_memory,
            "max_disk": spec.max_disk,
            "groups": sorted(spec.groups),
        }

    @staticmethod
    def _spec_from_dict(data: dict) -> SandboxSpec:
        return SandboxSpec(
            max_cpu=data["max_cpu"],
            max_memory=data["max_memory"],
            max_disk=data["max_disk"],
            groups=frozenset(data["groups"]),
        )

    def _job_to_dict(self, job: Job) -> dict:
        return {
            "id": job.id,
            "owner": job.owner,
            "vo": job.vo,
            "jobtag": job.jobtag,
            "request": serialize_rsl(job.request),
            "state": job.state.value,
            "account": job.account,
            "dynamic_account": job.dynamic_account,
            "reserved": job.reserved,
            "consumed": job.consumed,
            "priority": job.priority,
            "submitted_at": job.submitted_at,
            "ended_at": job.ended_at,
            "profile": {
                "runtime": job.profile.runtime,
                "memory_peak": job.profile.memory_peak,
                "disk": job.profile.disk,
            },
            "sandbox": self._spec_to_dict(job.sandbox),
            "accounted": job.accounted,
        }

    @classmethod
    def restore(
        cls,
        state: dict,
        resource_policy: PolicyDocument | None = None,
        vo_policies: Iterable = (),
        gridmap: GridMapFile | None = None,
        key_registry: Mapping | None = None,
    ) -> "JobManager":
        engine = cls(
            resource_policy=resource_policy,
            vo_policies=vo_policies,
            gridmap=gridmap,
            key_registry=key_registry,
            target=state["target"],
            lease_ttl=state["lease_ttl"],
        )
        engine.clock = state["clock"]
        engine._next_seq = state["next_seq"]
        engine.ledger = AllocationLedger.from_dict(state["ledger"])
        # rebuild the pool with leases attached to their jobs
        engine.pool = DynamicAccountPool(state["pool"]["free"])
        for job_id, entry in state["pool"]["leased"].items():
            lease = AccountLease(
                account=entry["account"],
                subject=entry["subject"],
                spec=cls._spec_from_dict(entry["spec"]),
                expires_at=entry["expires_at"],
            )
            engine.pool._leased[lease.account] = lease
            engine._leases[job_id] = lease
        for data in state["jobs"]:
            job = Job(
                id=data["id"],
                owner=data["owner"],
                vo=data["vo"],
                jobtag=data["jobtag"],
                request=parse_rsl(data["request"]),
                state=JobState(data["state"]),
                account=data["account"],
                dynamic_account=data["dynamic_account"],
                reserved=data["reserved"],
                consumed=data["consumed"],
                priority=data["priority"],
                submitted_at=data["submitted_at"],
                ended_at=data["ended_at"],
                profile=SimProfile(**data["profile"]),
                sandbox=cls._spec_from_dict(data["sandbox"]),
                accounted=data["accounted"],
            )
            engine.jobs[job.id] = job
        engine.events = [
            Event(e["t"], e["job"], e["name"], e["detail"]) for e in state["events"]
        ]
        return engine
