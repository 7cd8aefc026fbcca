"""Gatekeeper/job-manager engine tests: admission, lifecycle, clock, accounting."""

from __future__ import annotations

import random

import pytest

from gridauth.credential import GridCredential, GridMapFile, sign_capability
from gridauth.enforce import DynamicAccountPool, QuotaExceededError
from gridauth.jobmgr import (
    DeniedByPolicyError,
    IllegalTransitionError,
    JobManager,
    JobState,
    NoAccountsAvailableError,
    SimProfile,
    TERMINAL_STATES,
    TRANSITIONS,
    UnknownJobError,
)
from gridauth.pdp import derive_capability
from gridauth.policy import parse_policy
from gridauth.rsl import JobAction, parse_rsl

KEY = bytes(range(32))

ALICE = GridCredential("/O=Grid/CN=alice", expiry=10**9, vo="fusion", groups={"members"})
BOB = GridCredential("/O=Grid/CN=bob", expiry=10**9, vo="fusion", groups={"members"})
CAROL = GridCredential("/O=Grid/CN=carol", expiry=10**9, vo="fusion", groups={"admins"})
GHOST = GridCredential("/O=Grid/CN=ghost", expiry=10**9, vo="fusion", groups={"members"})

GRIDMAP = GridMapFile(
    {
        "/O=Grid/CN=alice": "alice_l",
        "/O=Grid/CN=bob": "bob_l",
        "/O=Grid/CN=carol": "carol_l",
    }
)

RESOURCE = parse_policy(
    'policy "site" source resource { trust vo "fusion"; subject any {'
    " allow action start, cancel, status, suspend, resume, set_priority; } }"
)

VO_ACCOUNTING = parse_policy(
    'policy "fusion" source vo {\n'
    "  allocation 1000 cpu-seconds;\n"
    '  member-quota "/O=Grid/CN=alice" 600 cpu-seconds;\n'
    '  member-quota "/O=Grid/CN=bob" 600 cpu-seconds;\n'
    '  subject group "members" { allow action start; }\n'
    '  subject group "admins" { allow action suspend, cancel on jobtag "fusion-prod"; }\n'
    "}\n"
)

VO_PLAIN = parse_policy(
    'policy "fusion" source vo {\n'
    '  subject group "members" { allow action start; }\n'
    '  subject group "admins" { allow action suspend, cancel on jobtag "fusion-prod"; }\n'
    "}\n"
)

TRANSP = '&(executable="/opt/vo/apps/transp")(count=1)(maxcputime=600)'


def _engine(vo=VO_ACCOUNTING, pool=(), gridmap=GRIDMAP, **kw):
    return JobManager(
        resource_policy=RESOURCE,
        vo_policies=[vo] if vo else [],
        gridmap=gridmap,
        pool=DynamicAccountPool(pool),
        key_registry={"fusion": KEY},
        **kw,
    )


class TestSubmit:
    def test_admission_reserves_count_times_maxcputime(self):
        eng = _engine()
        rsl = '&(executable="/opt/vo/apps/transp")(count=3)(maxcputime=50)'
        job_id = eng.gatekeeper_submit(ALICE, rsl, SimProfile(runtime=60))
        job = eng.job_record(job_id)
        request = parse_rsl(rsl)
        assert job.state is JobState.PENDING
        assert job.reserved == request.get("count") * request.get("maxcputime")
        assert eng.ledger.vo_used("fusion") == job.reserved

    def test_denied_executable_for_wrong_group(self):
        vo = parse_policy(
            'policy "fusion" source vo { subject group "members" {'
            " allow action start;"
            ' attr executable in {"/opt/vo/dbg/*"}; } }'
        )
        eng = _engine(vo=vo)
        with pytest.raises(DeniedByPolicyError) as exc:
            eng.gatekeeper_submit(ALICE, TRANSP, SimProfile(runtime=10))
        reasons = [e.reason for e in exc.value.decision.trace if e.reason]
        assert any("fails" in r for r in reasons)
        assert eng.jobs == {}

    def test_unmapped_dn_leases_dynamic_account(self):
        eng = _engine(pool=("dyn00",))
        job_id = eng.gatekeeper_submit(GHOST, TRANSP, SimProfile(runtime=10))
        job = eng.job_record(job_id)
        assert job.account == "dyn00"
        assert job.dynamic_account

    def test_unmapped_dn_with_empty_pool_is_atomic(self):
        eng = _engine()
        before = eng.ledger.report()
        with pytest.raises(NoAccountsAvailableError):
            eng.gatekeeper_submit(GHOST, TRANSP, SimProfile(runtime=10))
        assert eng.ledger.report() == before
        assert eng.jobs == {}
        assert eng.event_lines() == []

    def test_quota_denial_changes_nothing(self):
        eng = _engine()
        eng.gatekeeper_submit(ALICE, TRANSP, SimProfile(runtime=200))
        before = eng.ledger.report()
        with pytest.raises(QuotaExceededError) as exc:
            eng.gatekeeper_submit(
                BOB,
                '&(executable="/opt/vo/apps/transp")(count=1)(maxcputime=500)',
                SimProfile(runtime=100),
            )
        assert exc.value.scope == "vo"
        assert eng.ledger.report() == before
        assert len(eng.jobs) == 1

    def test_parse_error_propagates(self):
        from gridauth.rsl import RslError

        eng = _engine()
        with pytest.raises(RslError):
            eng.gatekeeper_submit(ALICE, "&(count=1)(count=2)", SimProfile(runtime=1))

    def test_push_submission(self):
        eng = _engine(vo=None)  # resource knows nothing about the VO locally
        claims = derive_capability(VO_ACCOUNTING, ALICE, expiry=10**9)
        token = sign_capability(KEY, claims)
        job_id = eng.gatekeeper_submit(ALICE, TRANSP, SimProfile(runtime=10), token=token)
        job = eng.job_record(job_id)
        assert job.reserved == 600
        # the pushed fragment's allocation and quota registered in the ledger
        assert eng.ledger.allocation("fusion") == 1000
        assert eng.ledger.member_used("fusion", ALICE.subject) == 600

    def test_push_management(self):
        # the site holds no fusion policy; carol's rights travel in her token
        eng = _engine(vo=None)
        alice_claims = derive_capability(VO_PLAIN, ALICE, expiry=10**9)
        job_id = eng.gatekeeper_submit(
            ALICE,
            '&(executable="/opt/vo/apps/transp")(jobtag="fusion-prod")',
            SimProfile(runtime=100),
            token=sign_capability(KEY, alice_claims),
        )
        eng.tick(1)
        carol_token = sign_capability(KEY, derive_capability(VO_PLAIN, CAROL, expiry=10**9))
        job = eng.manage(job_id, JobAction.SUSPEND, CAROL, token=carol_token)
        assert job.state is JobState.SUSPENDED
        # a tampered token gets nobody anywhere
        bad = type(carol_token)(
            claims=carol_token.claims,
            issuer_vo=carol_token.issuer_vo,
            mac=bytes(32),
        )
        with pytest.raises(DeniedByPolicyError):
            eng.manage(job_id, JobAction.CANCEL, CAROL, token=bad)

    def test_jobtag_recorded_from_request(self):
        eng = _engine()
        job_id = eng.gatekeeper_submit(
            ALICE,
            '&(executable="/opt/vo/apps/transp")(count=1)(maxcputime=10)(jobtag="fusion-prod")',
            SimProfile(runtime=5),
        )
        assert eng.job_record(job_id).jobtag == "fusion-prod"


class TestManage:
    def test_owner_cancels_own_pending_job_with_empty_policies(self):
        empty_res = parse_policy(
            'policy "open" source resource { subject any { allow action start; } }'
        )
        eng = JobManager(
            resource_policy=empty_res,
            gridmap=GRIDMAP,
            pool=DynamicAccountPool(),
        )
        local_alice = GridCredential("/O=Grid/CN=alice", expiry=10**9)
        job_id = eng.gatekeeper_submit(
            local_alice, '&(executable="/bin/work")', SimProfile(runtime=10)
        )
        job = eng.manage(job_id, JobAction.CANCEL, local_alice)
        assert job.state is JobState.CANCELED
        assert job.ended_at == 0

    def test_admin_suspends_tagged_job_of_other_member(self):
        eng = _engine(vo=VO_PLAIN)
        job_id = eng.gatekeeper_submit(
            ALICE,
            '&(executable="/opt/vo/apps/transp")(jobtag="fusion-prod")',
            SimProfile(runtime=100),
        )
        eng.tick(1)
        job = eng.manage(job_id, JobAction.SUSPEND, CAROL)
        assert job.state is JobState.SUSPENDED

    def test_admin_cannot_touch_untagged_job(self):
        eng = _engine(vo=VO_PLAIN)
        job_id = eng.gatekeeper_submit(
            ALICE, '&(executable="/opt/vo/apps/transp")', SimProfile(runtime=100)
        )
        eng.tick(1)
        with pytest.raises(DeniedByPolicyError):
            eng.manage(job_id, JobAction.SUSPEND, CAROL)
        assert eng.job_record(job_id).state is JobState.ACTIVE

    def test_non_owner_without_grants_cannot_query_status(self):
        eng = _engine(vo=VO_PLAIN)
        job_id = eng.gatekeeper_submit(
            ALICE, '&(executable="/opt/vo/apps/transp")', SimProfile(runtime=100)
        )
        with pytest.raises(DeniedByPolicyError):
            eng.manage(job_id, JobAction.STATUS, BOB)

    def test_illegal_transition(self):
        eng = _engine(vo=VO_PLAIN)
        job_id = eng.gatekeeper_submit(
            ALICE, '&(executable="/opt/vo/apps/transp")', SimProfile(runtime=100)
        )
        with pytest.raises(IllegalTransitionError):
            eng.manage(job_id, JobAction.RESUME, ALICE)  # resume on pending
        assert eng.job_record(job_id).state is JobState.PENDING

    def test_unknown_job(self):
        with pytest.raises(UnknownJobError):
            _engine().manage("j99", JobAction.CANCEL, ALICE)

    def test_set_priority(self):
        eng = _engine(vo=VO_PLAIN)
        job_id = eng.gatekeeper_submit(
            ALICE, '&(executable="/opt/vo/apps/transp")', SimProfile(runtime=100)
        )
        job = eng.manage(job_id, JobAction.SET_PRIORITY, ALICE, priority=5)
        assert job.priority == 5
        assert job.state is JobState.PENDING

    def test_status_returns_snapshot(self):
        eng = _engine(vo=VO_PLAIN)
        job_id = eng.gatekeeper_submit(
            ALICE, '&(executable="/opt/vo/apps/transp")', SimProfile(runtime=100)
        )
        snap = eng.manage(job_id, JobAction.STATUS, ALICE)
        snap.consumed = 12345  # mutating the snapshot must not touch the engine
        assert eng.job_record(job_id).consumed == 0


class TestTick:
    def test_consumption_rate_is_count_per_second(self):
        eng = _engine(vo=VO_PLAIN)
        job_id = eng.gatekeeper_submit(
            ALICE,
            '&(executable="/opt/vo/apps/transp")(count=2)',
            SimProfile(runtime=10),
        )
        eng.tick(5)
        job = eng.job_record(job_id)
        # arithmetic oracle: consumed = count * elapsed = 2 * 5
        assert job.consumed == 2 * 5
        assert job.state is JobState.DONE
        assert job.ended_at == 5

    def test_suspended_job_consumes_nothing(self):
        eng = _engine(vo=VO_PLAIN)
        job_id = eng.gatekeeper_submit(
            ALICE, '&(executable="/opt/vo/apps/transp")', SimProfile(runtime=100)
        )
        eng.tick(2)
        eng.manage(job_id, JobAction.SUSPEND, ALICE)
        before = eng.job_record(job_id).consumed
        eng.tick(50)
        assert eng.job_record(job_id).consumed == before
        eng.manage(job_id, JobAction.RESUME, ALICE)
        eng.tick(1)
        assert eng.job_record(job_id).consumed == before + 1

    def test_priority_orders_activation(self):
        eng = _engine(vo=VO_PLAIN)
        j1 = eng.gatekeeper_submit(
            ALICE, '&(executable="/opt/vo/apps/transp")', SimProfile(runtime=5)
        )
        j2 = eng.gatekeeper_submit(
            ALICE, '&(executable="/opt/vo/apps/transp")(count=2)', SimProfile(runtime=5)
        )
        eng.manage(j2, JobAction.SET_PRIORITY, ALICE, priority=5)
        events = eng.tick(1)
        activations = [e.job for e in events if e.name == "activate"]
        assert activations == [j2, j1]

    def test_done_settles_and_refunds(self):
        eng = _engine()
        job_id = eng.gatekeeper_submit(ALICE, TRANSP, SimProfile(runtime=200))
        assert eng.ledger.vo_used("fusion") == 600
        eng.tick(200)
        job = eng.job_record(job_id)
        assert job.state is JobState.DONE
        assert job.consumed == 200
        assert eng.ledger.vo_used("fusion") == 200
        assert eng.ledger.member_used("fusion", ALICE.subject) == 200

    def test_cpu_limit_kill(self):
        # profiled work exceeds the request's cpu budget: enforcement kills it
        eng = _engine()
        job_id = eng.gatekeeper_submit(
            ALICE,
            '&(executable="/opt/vo/apps/transp")(count=1)(maxcputime=50)',
            SimProfile(runtime=80),
        )
        eng.tick(60)
        job = eng.job_record(job_id)
        assert job.state is JobState.FAILED
        assert job.consumed == 50  # charged exactly the cap
        assert eng.ledger.vo_used("fusion") == 50

    def test_memory_limit_kill(self):
        vo = parse_policy(
            'policy "fusion" source vo { subject group "members" {'
            " allow action start; attr maxmemory max 512; } }"
        )
        eng = _engine(vo=vo)
        job_id = eng.gatekeeper_submit(
            ALICE,
            '&(executable="/opt/vo/apps/transp")(maxmemory=256)',
            SimProfile(runtime=100, memory_peak=300),
        )
        eng.tick(1)
        job = eng.job_record(job_id)
        assert job.state is JobState.FAILED
        assert "limit=memory" in eng.event_lines()[-1]

    def test_policy_cap_tightens_sandbox(self):
        vo = parse_policy(
            'policy "fusion" source vo { subject group "members" {'
            " allow action start; attr maxcputime max 40; } }"
        )
        eng = _engine(vo=vo)
        job_id = eng.gatekeeper_submit(
            ALICE,
            '&(executable="/x")(maxcputime=30)',
            SimProfile(runtime=10),
        )
        assert eng.job_record(job_id).sandbox.max_cpu == 30  # request tighter
        job_id2 = eng.gatekeeper_submit(
            ALICE,
            '&(executable="/x")(count=2)',
            SimProfile(runtime=10),
        )
        # request silent: the permitting block's cap bounds the sandbox
        assert eng.job_record(job_id2).sandbox.max_cpu == 2 * 40

    def test_lease_expiry_with_live_job_is_a_fault(self):
        eng = _engine(vo=VO_PLAIN, pool=("dyn00",), gridmap=GridMapFile({}), lease_ttl=0)
        job_id = eng.gatekeeper_submit(
            ALICE, '&(executable="/opt/vo/apps/transp")', SimProfile(runtime=100)
        )
        eng.tick(1)
        job = eng.job_record(job_id)
        assert job.state is JobState.FAILED
        assert "fault=lease-expired" in eng.event_lines()[-1]
        assert eng.pool.free_accounts == ("dyn00",)  # account reclaimed

    def test_dynamic_account_released_on_completion(self):
        eng = _engine(vo=VO_PLAIN, pool=("dyn00",), gridmap=GridMapFile({}))
        eng.gatekeeper_submit(
            ALICE, '&(executable="/opt/vo/apps/transp")', SimProfile(runtime=3)
        )
        assert eng.pool.free_accounts == ()
        eng.tick(3)
        assert eng.pool.free_accounts == ("dyn00",)

    def test_zero_runtime_completes_immediately(self):
        eng = _engine(vo=VO_PLAIN)
        job_id = eng.gatekeeper_submit(
            ALICE, '&(executable="/opt/vo/apps/transp")', SimProfile(runtime=0)
        )
        eng.tick(1)
        assert eng.job_record(job_id).state is JobState.DONE

    def test_tick_requires_positive_dt(self):
        with pytest.raises(ValueError):
            _engine().tick(0)


class TestJobRecord:
    def test_fresh_submission(self):
        eng = _engine()
        job_id = eng.gatekeeper_submit(ALICE, TRANSP, SimProfile(runtime=10))
        job = eng.job_record(job_id)
        assert job.state is JobState.PENDING
        assert job.consumed == 0
        assert job.ended_at is None

    def test_after_cancel(self):
        eng = _engine()
        job_id = eng.gatekeeper_submit(ALICE, TRANSP, SimProfile(runtime=10))
        eng.manage(job_id, JobAction.CANCEL, ALICE)
        job = eng.job_record(job_id)
        assert job.state is JobState.CANCELED
        assert job.ended_at == 0

    def test_unknown_id(self):
        with pytest.raises(UnknownJobError):
            _engine().job_record("j404")


class TestDeterminism:
    def _run(self):
        eng = _engine()
        eng.gatekeeper_submit(ALICE, TRANSP, SimProfile(runtime=20))
        eng.tick(3)
        eng.gatekeeper_submit(
            BOB,
            '&(executable="/opt/vo/apps/transp")(count=2)(maxcputime=100)',
            SimProfile(runtime=8),
        )
        eng.tick(10)
        eng.manage("j1", JobAction.CANCEL, ALICE)
        eng.tick(2)
        return eng.event_lines(), eng.ledger_report()

    def test_identical_inputs_identical_logs(self):
        assert self._run() == self._run()

    def test_event_line_format(self):
        eng = _engine()
        eng.gatekeeper_submit(ALICE, TRANSP, SimProfile(runtime=2))
        eng.tick(2)
        assert eng.event_lines() == [
            "t=0 job=j1 event=submit detail=owner=/O=Grid/CN=alice state=pending reserved=600",
            "t=0 job=j1 event=activate detail=state=active",
            "t=2 job=j1 event=done detail=state=done consumed=2 refunded=598",
        ]


def _conservation_holds(eng: JobManager) -> bool:
    by_vo: dict[str, int] = {}
    for job in eng.jobs.values():
        if not job.accounted:
            continue
        charge = job.consumed if job.state in TERMINAL_STATES else job.reserved
        by_vo[job.vo] = by_vo.get(job.vo, 0) + charge
    for vo, expected in by_vo.items():
        if eng.ledger.vo_used(vo) != expected:
            return False
    return True


class TestStructuralProperties:
    def test_conservation_under_random_operations(self):
        rng = random.Random(0xFEED)
        vo = parse_policy(
            'policy "fusion" source vo { allocation 100000 cpu-seconds;'
            ' subject group "members" { allow action start; } }'
        )
        eng = _engine(vo=vo)
        creds = [ALICE, BOB]
        live: list[str] = []
        for _ in range(2_000):
            roll = rng.random()
            try:
                if roll < 0.35:
                    cred = rng.choice(creds)
                    count = rng.randint(1, 3)
                    budget = rng.randint(1, 30)
                    job_id = eng.gatekeeper_submit(
                        cred,
                        f'&(executable="/x")(count={count})(maxcputime={budget})',
                        SimProfile(runtime=rng.randint(0, 40)),
                    )
                    live.append(job_id)
                elif roll < 0.65 and live:
                    job_id = rng.choice(live)
                    owner = eng.job_record(job_id).owner
                    cred = ALICE if owner == ALICE.subject else BOB
                    action = rng.choice(
                        [JobAction.SUSPEND, JobAction.RESUME, JobAction.CANCEL,
                         JobAction.SET_PRIORITY]
                    )
                    eng.manage(job_id, action, cred, priority=rng.randint(-2, 2))
                else:
                    eng.tick(rng.randint(1, 3))
            except (IllegalTransitionError, QuotaExceededError):
                pass
            assert _conservation_holds(eng)
            for job in eng.jobs.values():
                if job.accounted:
                    assert job.consumed <= job.reserved

    def test_state_machine_safety_under_random_events(self):
        legal_moves = set(TRANSITIONS)
        rng = random.Random(0xBEEF)
        eng = _engine(vo=VO_PLAIN)
        actions = [
            JobAction.SUSPEND,
            JobAction.RESUME,
            JobAction.CANCEL,
            JobAction.SET_PRIORITY,
        ]
        ids = [
            eng.gatekeeper_submit(
                ALICE, '&(executable="/opt/vo/apps/transp")', SimProfile(runtime=6)
            )
            for _ in range(5)
        ]
        for _ in range(3_000):
            states = {j: eng.job_record(j).state for j in ids}
            if rng.random() < 0.6:
                job_id = rng.choice(ids)
                action = rng.choice(actions)
                try:
                    eng.manage(job_id, action, ALICE, priority=rng.randint(0, 3))
                except IllegalTransitionError:
                    assert eng.job_record(job_id).state == states[job_id]
            else:
                eng.tick(1)
            for job_id, old in states.items():
                new = eng.job_record(job_id).state
                if new != old:
                    assert any(
                        (old, event) in legal_moves and TRANSITIONS[(old, event)] is new
                        for event in ("activate", "suspend", "resume", "cancel",
                                      "complete", "limit_kill", "fault")
                    )
                if old in TERMINAL_STATES:
                    assert new == old


class TestPersistence:
    def test_snapshot_restore_round_trip(self):
        eng = _engine(pool=("dyn00", "dyn01"))
        eng.gatekeeper_submit(ALICE, TRANSP, SimProfile(runtime=50))
        eng.gatekeeper_submit(
            GHOST,
            '&(executable="/opt/vo/apps/transp")(count=1)(maxcputime=100)',
            SimProfile(runtime=50),
        )
        eng.tick(7)
        snap = eng.snapshot()
        again = JobManager.restore(
            snap,
            resource_policy=RESOURCE,
            vo_policies=[VO_ACCOUNTING],
            gridmap=GRIDMAP,
            key_registry={"fusion": KEY},
        )
        assert again.event_lines() == eng.event_lines()
        assert again.ledger_report() == eng.ledger_report()
        assert again.snapshot() == snap
        # the restored engine keeps evolving identically
        eng.tick(50)
        again.tick(50)
        assert again.event_lines() == eng.event_lines()
        assert again.ledger_report() == eng.ledger_report()
