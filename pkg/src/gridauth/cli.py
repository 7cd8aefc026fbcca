"""Command-line frontend over the in-process simulator.

One binary, seven subcommands: ``check`` asks the decision point
directly; ``submit``, ``manage``, ``tick`` and ``ledger`` drive a
persistent simulated site; ``issue-cap`` mints a signed capability;
``scenario`` replays a scripted scenario in memory.

Simulator state lives in a single versioned JSON file named by
``--state`` so shell scripts can chain invocations; the file is locked
for the duration of a command.  Policies, credentials and tokens are
passed per invocation as files.  Exit codes: 0 success/permit,
1 denied or illegal, 2 bad input, 3 state-file trouble.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager

from .credential import (
    CredentialError,
    load_credential,
    load_gridmap,
    load_token,
    format_token,
    sign_capability,
)
from .enforce import DynamicAccountPool, EnforcementError, QuotaExceededError
from .jobmgr import (
    DeniedByPolicyError,
    IllegalTransitionError,
    JobManager,
    JobManagerError,
    NoAccountsAvailableError,
    SimProfile,
    UnknownJobError,
)
from .pdp import (
    AuthzQuery,
    InvalidQueryError,
    NoApplicableBlocksError,
    decide,
    decide_push,
    derive_capability,
    explain,
    PolicySourceSet,
)
from .policy import PolicyError, parse_policy
from .rsl import JobAction, RslError, parse_rsl
from .scenario import ScenarioError, run_scenario

EXIT_OK = 0
EXIT_DENIED = 1
EXIT_INPUT = 2
EXIT_STATE = 3

STATE_VERSION = 1


class StateFileError(Exception):
    pass


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------


def _read(path: str, what: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return f.read()
    except OSError as exc:
        raise InputError(f"cannot read {what} {path!r}: {exc}") from None


def _load_policy_file(path: str):
    return parse_policy(_read(path, "policy"))


def _load_cred_file(path: str):
    return load_credential(_read(path, "credential"))


def _parse_vo_keys(entries) -> dict:
    registry = {}
    for entry in entries or []:
        name, sep, hexkey = entry.partition("=")
        if not sep:
            raise InputError(f"--vo-key expects <vo>=<hex>, got {entry!r}")
        try:
            key = bytes.fromhex(hexkey)
        except ValueError:
            raise InputError(f"--vo-key for '{name}' is not hex") from None
        if len(key) != 32:
            raise InputError(f"--vo-key for '{name}' must be 32 bytes (64 hex chars)")
        registry[name] = key
    return registry


@contextmanager
def _state_lock(path: str):
    lock_path = path + ".lock"
    f = open(lock_path, "w")
    try:
        try:
            import fcntl

            fcntl.flock(f, fcntl.LOCK_EX)
        except ImportError:  # pragma: no cover
            pass
        yield
    finally:
        f.close()


def _load_state(path: str) -> dict | None:
    if not os.path.exists(path):
        return None
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise StateFileError(f"cannot read state file {path!r}: {exc}") from None
    if not isinstance(data, dict) or data.get("format") != "gridauth-state":
        raise StateFileError(f"{path!r} is not a gridauth state file")
    if data.get("version") != STATE_VERSION:
        raise StateFileError(
            f"state file version {data.get('version')!r} unsupported"
        )
    return data["engine"]


def _save_state(path: str, engine: JobManager) -> None:
    payload = {
        "format": "gridauth-state",
        "version": STATE_VERSION,
        "engine": engine.snapshot(),
    }
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as exc:
        raise StateFileError(f"cannot write state file {path!r}: {exc}") from None


def _make_engine(args, state: dict | None) -> JobManager:
    resource = (
        _load_policy_file(args.resource_policy)
        if getattr(args, "resource_policy", None)
        else None
    )
    vo_docs = [_load_policy_file(p) for p in getattr(args, "vo_policy", None) or []]
    gridmap = (
        load_gridmap(_read(args.map, "grid-mapfile"))
        if getattr(args, "map", None)
        else None
    )
    registry = _parse_vo_keys(getattr(args, "vo_key", None))
    if state is not None:
        return JobManager.restore(
            state,
            resource_policy=resource,
            vo_policies=vo_docs,
            gridmap=gridmap,
            key_registry=registry,
        )
    pool_names = [
        name.strip()
        for name in (getattr(args, "pool", None) or "").split(",")
        if name.strip()
    ]
    return JobManager(
        resource_policy=resource,
        vo_policies=vo_docs,
        gridmap=gridmap,
        pool=DynamicAccountPool(pool_names),
        key_registry=registry,
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_check(args) -> int:
    if args.cap and args.vo_policy:
        raise InputError("use either --vo-policy (pull) or --cap (push), not both")
    resource = _load_policy_file(args.resource_policy)
    cred = _load_cred_file(args.cred)
    action = JobAction(args.action)
    request = None
    if action is JobAction.START:
        if not args.rsl:
            raise InputError("start checks need --rsl")
        request = parse_rsl(_read(args.rsl, "rsl"))
    query = AuthzQuery(
        credential=cred,
        action=action,
        target=args.target,
        request=request,
        jobtag=args.jobtag,
        owner=args.owner,
    )
    if args.cap:
        token = load_token(_read(args.cap, "capability"))
        registry = _parse_vo_keys(args.vo_key)
        decision = decide_push(query, resource, token, registry, now=args.now)
    else:
        vo_doc = _load_policy_file(args.vo_policy) if args.vo_policy else None
        decision = decide(query, PolicySourceSet(resource, vo_doc))
    print(decision.effect)
    if args.explain:
        print(explain(decision))
    return EXIT_OK if decision.permitted else EXIT_DENIED


def cmd_submit(args) -> int:
    with _state_lock(args.state):
        engine = _make_engine(args, _load_state(args.state))
        cred = _load_cred_file(args.cred)
        token = load_token(_read(args.cap, "capability")) if args.cap else None
        profile = SimProfile(
            runtime=args.runtime, memory_peak=args.memory, disk=args.disk
        )
        job_id = engine.gatekeeper_submit(
            cred, _read(args.rsl, "rsl"), profile, token=token
        )
        _save_state(args.state, engine)
        job = engine.job_record(job_id)
        print(f"job={job.id} state={job.state.value} reserved={job.reserved}")
    return EXIT_OK


def cmd_manage(args) -> int:
    with _state_lock(args.state):
        engine = _make_engine(args, _load_state(args.state))
        cred = _load_cred_file(args.cred)
        token = load_token(_read(args.cap, "capability")) if args.cap else None
        action = JobAction(args.action)
        job = engine.manage(
            args.job, action, cred, token=token, priority=args.priority
        )
        _save_state(args.state, engine)
        if action is JobAction.STATUS:
            print(
                f"job={job.id} state={job.state.value} owner={job.owner} "
                f"consumed={job.consumed} reserved={job.reserved} "
                f"priority={job.priority}"
            )
        else:
            print(f"job={job.id} state={job.state.value}")
    return EXIT_OK


def cmd_tick(args) -> int:
    with _state_lock(args.state):
        state = _load_state(args.state)
        if state is None:
            raise StateFileError(f"no state file at {args.state!r}")
        engine = _make_engine(args, state)
        events = engine.tick(args.dt)
        _save_state(args.state, engine)
        for event in events:
            print(event.line)
    return EXIT_OK


def cmd_ledger(args) -> int:
    with _state_lock(args.state):
        state = _load_state(args.state)
        if state is None:
            raise StateFileError(f"no state file at {args.state!r}")
        engine = _make_engine(args, state)
        report = engine.ledger_report()
        if report:
            print(report)
    return EXIT_OK


def cmd_issue_cap(args) -> int:
    vo_doc = _load_policy_file(args.vo_policy)
    cred = _load_cred_file(args.cred)
    registry = _parse_vo_keys(args.vo_key)
    if vo_doc.name not in registry:
        raise InputError(f"--vo-key must provide the key for vo '{vo_doc.name}'")
    claims = derive_capability(vo_doc, cred, args.expiry)
    token = sign_capability(registry[vo_doc.name], claims)
    text = format_token(token)
    if args.cap:
        try:
            with open(args.cap, "w", encoding="utf-8") as f:
                f.write(text)
        except OSError as exc:
            raise InputError(f"cannot write {args.cap!r}: {exc}") from None
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_scenario(args) -> int:
    report = run_scenario(args.script)
    for line in report.lines:
        print(line)
    return EXIT_OK if report.all_passed else EXIT_DENIED


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridauth",
        description="Fine-grain authorization simulator for grid job management.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add_policy_flags(p, vo_multi=True):
        p.add_argument("--resource-policy", metavar="FILE", required=True)
        if vo_multi:
            p.add_argument("--vo-policy", metavar="FILE", action="append")
        else:
            p.add_argument("--vo-policy", metavar="FILE")
        p.add_argument("--cap", metavar="FILE")
        p.add_argument("--vo-key", metavar="VO=HEX", action="append")

    check = sub.add_parser("check", help="evaluate one authorization query")
    add_policy_flags(check, vo_multi=False)
    check.add_argument("--cred", metavar="FILE", required=True)
    check.add_argument("--rsl", metavar="FILE")
    check.add_argument(
        "--action", required=True, choices=[a.value for a in JobAction]
    )
    check.add_argument("--jobtag")
    check.add_argument("--owner", metavar="DN")
    check.add_argument("--target", default="site")
    check.add_argument("--now", type=int, default=0)
    check.add_argument("--explain", action="store_true")
    check.set_defaults(func=cmd_check)

    submit = sub.add_parser("submit", help="submit a job to the simulated site")
    submit.add_argument("--state", metavar="FILE", required=True)
    add_policy_flags(submit)
    submit.add_argument("--cred", metavar="FILE", required=True)
    submit.add_argument("--rsl", metavar="FILE", required=True)
    submit.add_argument("--map", metavar="FILE", help="grid-mapfile")
    submit.add_argument("--pool", metavar="A,B,...", help="dynamic accounts (new state only)")
    submit.add_argument("--runtime", type=int, required=True)
    submit.add_argument("--memory", type=int, default=0)
    submit.add_argument("--disk", type=int, default=0)
    submit.add_argument("--explain", action="store_true")
    submit.set_defaults(func=cmd_submit)

    manage = sub.add_parser("manage", help="manage an existing job")
    manage.add_argument("--state", metavar="FILE", required=True)
    add_policy_flags(manage)
    manage.add_argument("--cred", metavar="FILE", required=True)
    manage.add_argument("--map", metavar="FILE", help="grid-mapfile")
    manage.add_argument("--job", required=True)
    manage.add_argument(
        "--action",
        required=True,
        choices=[a.value for a in JobAction if a is not JobAction.START],
    )
    manage.add_argument("--priority", type=int)
    manage.add_argument("--explain", action="store_true")
    manage.set_defaults(func=cmd_manage)

    tick = sub.add_parser("tick", help="advance the simulated clock")
    tick.add_argument("--state", metavar="FILE", required=True)
    tick.add_argument("--dt", type=int, required=True)
    tick.set_defaults(func=cmd_tick)

    ledger = sub.add_parser("ledger", help="print the allocation ledger")
    ledger.add_argument("--state", metavar="FILE", required=True)
    ledger.set_defaults(func=cmd_ledger)

    issue = sub.add_parser("issue-cap", help="derive and sign a capability token")
    issue.add_argument("--vo-policy", metavar="FILE", required=True)
    issue.add_argument("--cred", metavar="FILE", required=True)
    issue.add_argument("--vo-key", metavar="VO=HEX", action="append", required=True)
    issue.add_argument("--expiry", type=int, required=True)
    issue.add_argument("--cap", metavar="FILE", help="write the token here instead of stdout")
    issue.set_defaults(func=cmd_issue_cap)

    scenario = sub.add_parser("scenario", help="run a scripted scenario")
    scenario.add_argument("script", metavar="SCRIPT")
    scenario.set_defaults(func=cmd_scenario)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return EXIT_INPUT
    try:
        return args.func(args)
    except DeniedByPolicyError as exc:
        print(f"denied: {exc}", file=sys.stderr)
        if getattr(args, "explain", False):
            print(explain(exc.decision), file=sys.stderr)
        return EXIT_DENIED
    except (
        QuotaExceededError,
        NoAccountsAvailableError,
        IllegalTransitionError,
        NoApplicableBlocksError,
    ) as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_DENIED
    except StateFileError as exc:
        print(f"state error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except ScenarioError as exc:
        print(f"script error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (
        InputError,
        UnknownJobError,
        RslError,
        PolicyError,
        CredentialError,
        EnforcementError,
        JobManagerError,
        InvalidQueryError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
