"""The policy decision point.

A query carries a credential, an action, a policy target and (for job
startup) the parsed request.  Evaluation consults the resource document
always and the VO document whenever the credential claims a VO, then
combines outcomes:

* within one source, a single permitting subject block suffices;
* across sources, every consulted source must permit (deny-overrides);
* no applicable policy means deny;
* a management request by the job's own owner is permitted outright,
  reproducing the stock gatekeeper behaviour the VO extensions build on.

Pull mode (`decide`) evaluates locally available documents; push mode
(`decide_push`) verifies a capability token, reconstructs the VO
document from its embedded fragment and delegates to `decide`.  All
entry points are pure functions over immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

from .credential import (
    BadSignatureError,
    CapabilityClaims,
    CapabilityToken,
    ExpiredTokenError,
    GridCredential,
    UnknownIssuerError,
    verify_capability,
)
from .policy import (
    MayContain,
    MustContain,
    MustNotContain,
    PolicyDocument,
    PolicyError,
    SubjectBlock,
    applicable_blocks,
    format_policy,
    matcher_matches,
    parse_policy,
)
from .rsl import JobAction, RslRequest, render_value


class InvalidQueryError(ValueError):
    pass


class NoApplicableBlocksError(ValueError):
    """The VO refuses to issue a capability that grants nothing."""


@dataclass(frozen=True)
class AuthzQuery:
    """One authorization question for the decision point.

    ``jobtag`` and ``owner`` describe the targeted job and are only
    meaningful for management actions; start requests carry the full
    job description instead.
    """

    credential: GridCredential
    action: JobAction
    target: str
    request: RslRequest | None = None
    jobtag: str | None = None
    owner: str | None = None

    def __post_init__(self):
        if self.action is JobAction.START and self.request is None:
            raise InvalidQueryError("start queries require a job description")
        if self.action is not JobAction.START and self.request is not None:
            raise InvalidQueryError("management queries carry no job description")


@dataclass(frozen=True)
class TraceEntry:
    source: str
    block: int | None
    outcome: str  # "permit" | "deny"
    reason: str | None = None


@dataclass(frozen=True)
class Decision:
    effect: str  # "permit" | "deny"
    trace: tuple
    charged_estimate: int | None = None

    @property
    def permitted(self) -> bool:
        return self.effect == "permit"


@dataclass(frozen=True)
class PolicySourceSet:
    resource: PolicyDocument
    vo: PolicyDocument | None = None

    def __post_init__(self):
        if self.resource.source != "resource":
            raise InvalidQueryError("resource slot needs a resource-source document")
        if self.vo is not None and self.vo.source != "vo":
            raise InvalidQueryError("vo slot needs a vo-source document")


def eval_assertion(assertion, req: RslRequest) -> str | None:
    """Evaluate one assertion; None when satisfied, else the violation.

    A numeric spec tested against a non-integer value (or vice versa)
    counts as a violation with a reason, never an error: a malformed
    clause must not fail open or abort the decision.
    """
    value = req.get(assertion.attr)
    if isinstance(assertion, MustContain):
        if value is None:
            return f"require attr {assertion.attr}: attribute missing"
        if assertion.spec is not None and not assertion.spec.allows(value):
            return (
                f"require attr {assertion.attr}: value {render_value(value)} "
                f"fails {assertion.spec.describe()}"
            )
        return None
    if isinstance(assertion, MustNotContain):
        if value is None:
            return None
        if assertion.spec is None:
            return f"forbid attr {assertion.attr}: attribute present"
        if assertion.spec.allows(value):
            return (
                f"forbid attr {assertion.attr}: value {render_value(value)} "
                f"matches {assertion.spec.describe()}"
            )
        return None
    # MayContain: vacuous when absent; union semantics live in eval_block,
    # this checks membership in the single spec.
    if value is None:
        return None
    if not assertion.spec.allows(value):
        return (
            f"attr {assertion.attr}: value {render_value(value)} "
            f"fails {assertion.spec.describe()}"
        )
    return None


def eval_block(block: SubjectBlock, q: AuthzQuery) -> str | None:
    """Evaluate an applicable block; None means permit, else the reason.

    Checks run in a fixed order (action, then assertions in document
    order, then closed-world) so the first failing assertion reported
    in the trace is deterministic.
    """
    if q.action not in block.allowed_actions:
        return f"action '{q.action.value}' not allowed"

    if q.action is not JobAction.START:
        grants = block.jobtag_grants.get(q.action)
        if grants is None:
            return None
        rendered = ", ".join(f"'{t}'" for t in sorted(grants))
        if q.jobtag is None:
            return f"action '{q.action.value}' granted only on jobtags {rendered}"
        if q.jobtag not in grants:
            return (
                f"jobtag '{q.jobtag}' not in grants for action '{q.action.value}'"
            )
        return None

    req = q.request
    may_specs: dict[str, list] = {}
    for a in block.assertions:
        if isinstance(a, MayContain):
            may_specs.setdefault(a.attr, []).append(a.spec)

    union_checked: set[str] = set()
    for a in block.assertions:
        if isinstance(a, (MustContain, MustNotContain)):
            reason = eval_assertion(a, req)
            if reason is not None:
                return reason
        elif a.attr not in union_checked:
            union_checked.add(a.attr)
            value = req.get(a.attr)
            if value is None:
                continue
            specs = may_specs[a.attr]
            if not any(spec.allows(value) for spec in specs):
                union = " or ".join(spec.describe() for spec in specs)
                return f"attr {a.attr}: value {render_value(value)} fails {union}"

    if block.closed_world:
        allowed_names = block.allowed_attribute_names()
        for name in req.attributes:
            if name not in allowed_names:
                return f"closed-world rejects attribute '{name}'"
    return None


def _evaluate_source(name: str, doc: PolicyDocument, q: AuthzQuery, trace: list) -> bool:
    indices = [
        i
        for i, b in enumerate(doc.blocks)
        if matcher_matches(b.matcher, q.credential.subject, q.credential.groups)
    ]
    if not indices:
        trace.append(TraceEntry(name, None, "deny", "no applicable blocks"))
        return False
    permitted = False
    for i in indices:
        reason = eval_block(doc.blocks[i], q)
        if reason is None:
            trace.append(TraceEntry(name, i, "permit"))
            permitted = True
        else:
            trace.append(TraceEntry(name, i, "deny", reason))
    return permitted


def _accounting_active(vo_doc: PolicyDocument | None, subject: str) -> bool:
    if vo_doc is None:
        return False
    return vo_doc.allocation is not None or subject in vo_doc.member_quotas


def decide(q: AuthzQuery, sources: PolicySourceSet) -> Decision:
    """Evaluate a query against every consulted source and combine."""
    if q.action is not JobAction.START and q.owner is not None:
        if q.owner == q.credential.subject:
            return Decision(
                "permit", (TraceEntry("builtin-owner", None, "permit"),), None
            )

    trace: list[TraceEntry] = []
    all_permit = _evaluate_source("resource", sources.resource, q, trace)

    if q.credential.vo is not None:
        if sources.vo is None:
            trace.append(
                TraceEntry(
                    "vo",
                    None,
                    "deny",
                    f"no policy document for vo '{q.credential.vo}'",
                )
            )
            all_permit = False
        else:
            all_permit = _evaluate_source("vo", sources.vo, q, trace) and all_permit

    charged: int | None = None
    if q.action is JobAction.START:
        maxcputime = q.request.get("maxcputime")
        if maxcputime is None:
            accounting = q.credential.vo is not None and _accounting_active(
                sources.vo, q.credential.subject
            )
            if all_permit and accounting:
                trace.append(
                    TraceEntry(
                        "accounting", None, "deny", "accounting-requires-maxcputime"
                    )
                )
                all_permit = False
        else:
            charged = (q.request.get("count") or 1) * maxcputime

    effect = "permit" if all_permit else "deny"
    return Decision(
        effect=effect,
        trace=tuple(trace),
        charged_estimate=charged if effect == "permit" else None,
    )


def derive_capability(
    vo_doc: PolicyDocument, cred: GridCredential, expiry: int
) -> CapabilityClaims:
    """Restrict a VO document to the credential and wrap it as claims.

    The fragment keeps the applicable blocks verbatim (matchers
    included) plus the allocation clause and the member's own quota, so
    a pushed decision sees exactly the policy a pull-mode decision
    would apply to this credential.
    """
    if vo_doc.source != "vo":
        raise ValueError("capabilities derive from vo documents")
    if cred.vo is None or cred.vo != vo_doc.name:
        raise NoApplicableBlocksError(
            f"credential vo {cred.vo!r} does not match policy '{vo_doc.name}'"
        )
    blocks = applicable_blocks(vo_doc, cred)
    if not blocks:
        raise NoApplicableBlocksError(
            f"no blocks of '{vo_doc.name}' apply to {cred.subject}"
        )
    quotas = {}
    if cred.subject in vo_doc.member_quotas:
        quotas[cred.subject] = vo_doc.member_quotas[cred.subject]
    fragment = PolicyDocument(
        name=vo_doc.name,
        source="vo",
        blocks=tuple(blocks),
        allocation=vo_doc.allocation,
        member_quotas=quotas,
    )
    return CapabilityClaims(
        subject=cred.subject,
        vo=cred.vo,
        groups=cred.groups,
        expiry=expiry,
        policy_fragment=format_policy(fragment),
    )


_TOKEN_FAILURES = {
    UnknownIssuerError: "UnknownIssuer",
    BadSignatureError: "BadSignature",
    ExpiredTokenError: "Expired",
}


def decide_push(
    q: AuthzQuery,
    resource_doc: PolicyDocument,
    token: CapabilityToken,
    registry,
    now: int,
) -> Decision:
    """Decide from a pushed capability instead of a local VO document."""
    try:
        claims = verify_capability(registry, token, now)
    except (UnknownIssuerError, BadSignatureError, ExpiredTokenError) as exc:
        reason = f"{_TOKEN_FAILURES[type(exc)]}: {exc}"
        return Decision("deny", (TraceEntry("vo", None, "deny", reason),), None)
    if claims.subject != q.credential.subject:
        return Decision(
            "deny", (TraceEntry("vo", None, "deny", "subject-mismatch"),), None
        )
    try:
        fragment = parse_policy(claims.policy_fragment)
    except PolicyError as exc:
        return Decision(
            "deny",
            (TraceEntry("vo", None, "deny", f"invalid policy fragment: {exc}"),),
            None,
        )
    if fragment.source != "vo":
        return Decision(
            "deny",
            (TraceEntry("vo", None, "deny", "policy fragment is not a vo document"),),
            None,
        )
    return decide(q, PolicySourceSet(resource=resource_doc, vo=fragment))


def explain(decision: Decision) -> str:
    """Render the trace, one line per entry, deterministically."""
    lines = []
    for e in decision.trace:
        where = e.source if e.block is None else f"{e.source}/block[{e.block}]"
        if e.reason is None:
            lines.append(f"{where}: {e.outcome}")
        else:
            lines.append(f"{where}: {e.outcome} — {e.reason}")
    return "\n".join(lines)
