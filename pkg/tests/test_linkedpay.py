"""Linked multi-hop payments: entry lifecycle, registry adjudication,
constant-expiry vs ladder scheduling, honest/petty end-to-end runs."""

import random

from hypothesis import given, settings, strategies as st

from chansim.chainenv import Chain
from chansim.cryptosuite import CryptoSuite
from chansim.linkedpay import (
    CANCELLED, COMPLETED, DISPUTED, E_AMOUNT, E_EXPIRY, E_HASH, E_OPENER,
    E_STATUS, HTLC, INFLIGHT, SPRITES, ContractLinked, ContractPM,
    FLinkedOracle, LinkedUpdate, PREIMAGE_TAG, hop_lock_durations,
    ladder_expiries, normalize_linked_input, run_linked_payment,
    sprites_expiries,
)
from chansim.paychannel import CRED, WDTOT, pay_side
from chansim.simkernel import Simulator
from chansim.statechannel import UpdateContext, round_payload

H1 = bytes([1]) * 32
H2 = bytes([2]) * 32


def apply_linked(state, left=None, right=None, deposits=(0, 0), now=0):
    u = LinkedUpdate()
    return u.apply(state, (left, right), UpdateContext(deposits, now))


ZERO = ((), (pay_side(), pay_side()))


# -- update function ---------------------------------------------------------


def test_open_locks_credit_until_settled():
    state, out = apply_linked(
        ZERO, left=((("open", H1, 30, 50),), (), 0), deposits=(100, 0))
    assert state[0] == ((H1, 0, 30, 50, INFLIGHT),)
    assert state[1][0][CRED] == -30
    assert state[1][1][CRED] == 0
    assert out is None


def test_open_respects_balance_guard():
    state, out = apply_linked(
        ZERO, left=((("open", H1, 150, 50),), (), 0), deposits=(100, 0))
    assert state[0] == ()
    assert state[1][0][CRED] == 0


def test_complete_pays_only_from_the_opener_side():
    opened, _ = apply_linked(
        ZERO, left=((("open", H1, 30, 50),), (), 0), deposits=(100, 0))
    # the payee cannot complete for itself
    state, _ = apply_linked(opened, right=((("complete", H1),), (), 0),
                            deposits=(100, 0))
    assert state[0][0][E_STATUS] == INFLIGHT
    # the opener can
    state, _ = apply_linked(opened, left=((("complete", H1),), (), 0),
                            deposits=(100, 0))
    assert state[0][0][E_STATUS] == COMPLETED
    assert state[1][0][CRED] == -30
    assert state[1][1][CRED] == 30


def test_cancel_refunds_only_with_the_payee_consent():
    opened, _ = apply_linked(
        ZERO, left=((("open", H1, 30, 50),), (), 0), deposits=(100, 0))
    state, _ = apply_linked(opened, left=((("cancel", H1),), (), 0),
                            deposits=(100, 0))
    assert state[0][0][E_STATUS] == INFLIGHT
    state, _ = apply_linked(opened, right=((("cancel", H1),), (), 0),
                            deposits=(100, 0))
    assert state[0][0][E_STATUS] == CANCELLED
    assert state[1][0][CRED] == 0


def test_dispute_needs_expiry_passed_and_rides_the_output():
    opened, _ = apply_linked(
        ZERO, left=((("open", H1, 30, 50),), (), 0), deposits=(100, 0))
    state, out = apply_linked(opened, right=((("dispute", H1),), (), 0),
                              deposits=(100, 0), now=50)
    assert state[0][0][E_STATUS] == INFLIGHT and out is None
    state, out = apply_linked(opened, right=((("dispute", H1),), (), 0),
                              deposits=(100, 0), now=51)
    assert state[0][0][E_STATUS] == DISPUTED
    assert out == ("lnk", 0, 0, ((H1, 30, 0, 50),))


def test_disputed_entries_stay_in_every_later_output():
    opened, _ = apply_linked(
        ZERO, left=((("open", H1, 30, 50),), (), 0), deposits=(100, 0))
    disputed, _ = apply_linked(opened, right=((("dispute", H1),), (), 0),
                               deposits=(100, 0), now=60)
    state, out = apply_linked(disputed, left=(((), (), 10)),
                              deposits=(100, 0), now=61)
    assert out == ("lnk", 10, 0, ((H1, 30, 0, 50),))


def test_ops_settle_before_pays_in_the_same_round():
    # opening consumes headroom first: the 30 no longer fits behind an 80 open
    state, _ = apply_linked(
        ZERO, left=((("open", H1, 80, 50),), (30,), 0), deposits=(100, 0))
    assert state[1][0][CRED] == -80
    assert state[1][0][1] == ()   # no pays accepted
    # a completion received this round is already spendable by the payee
    opened, _ = apply_linked(
        ZERO, left=((("open", H1, 30, 50),), (), 0), deposits=(100, 0))
    state, _ = apply_linked(opened, left=((("complete", H1),), (), 0),
                            right=((), (25,), 0), deposits=(100, 0))
    assert state[1][1][CRED] == 30 - 25
    assert state[1][0][CRED] == -30 + 25


def test_malformed_ops_are_neutralized():
    assert normalize_linked_input(None) == ((), (), 0)
    assert normalize_linked_input(("x",)) == ((), (), 0)
    ops, pays, wd = normalize_linked_input(
        ((("open", "nothash", 5, 9), ("grab", H1), ("cancel", H1), 7),
         (4, -4), 3))
    assert ops == (("cancel", H1),)
    assert pays == (4,) and wd == 3
    # open with a bad amount drops inside the transition too
    state, _ = apply_linked(ZERO, left=((("open", H1, "9", 50),), (), 0),
                            deposits=(100, 0))
    assert state[0] == ()


def test_duplicate_open_for_the_same_hash_drops():
    opened, _ = apply_linked(
        ZERO, left=((("open", H1, 30, 50),), (), 0), deposits=(100, 0))
    state, _ = apply_linked(opened, right=((("open", H1, 10, 99),), (), 0),
                            deposits=(100, 100))
    assert state[0] == ((H1, 0, 30, 50, INFLIGHT),)
    assert state[1][1][CRED] == 0


# -- preimage registry ------------------------------------------------------


def registry_world():
    sim = Simulator(message_delay_bound=4)
    chain = Chain(sim, 4)
    suite = CryptoSuite(seed=1, clock=lambda: sim.now)
    pm = chain.deploy(ContractPM("PM", suite))
    chain.mint("A", 10)
    return sim, chain, suite, pm


def test_registry_first_write_wins():
    sim, chain, suite, pm = registry_world()
    x = b"s" * 32
    h = suite.hash_obj(x, tag=PREIMAGE_TAG)
    chain.submit("A", "PM", "publish", (x,))
    sim.run_until(1)
    assert pm.published[h] == 1
    sim.run_until(9)
    chain.submit("A", "PM", "publish", (x,))
    sim.run_until(11)
    assert pm.published[h] == 1          # the early timestamp survives
    assert pm.published_by(h, 1) and not pm.published_by(h, 0)


def test_registry_rejects_non_bytes():
    sim, chain, suite, pm = registry_world()
    tx = chain.submit("A", "PM", "publish", ("notbytes",))
    sim.run_until(2)
    assert tx.ok is False and pm.published == {}


# -- contract adjudication ----------------------------------------------------


def adjudication_world(publish_at, expiry):
    sim = Simulator(message_delay_bound=4)
    chain = Chain(sim, 4)
    suite = CryptoSuite(seed=2, clock=lambda: sim.now)
    pm = chain.deploy(ContractPM("PM", suite))
    c = chain.deploy(ContractLinked("X", "s", ("L", "R"), suite, "PM"))
    for pid in ("L", "R"):
        suite.register(pid)
        chain.mint(pid, 100)
    chain.submit("L", "X", "deposit", coins=100)
    x = b"p" * 32
    h = suite.hash_obj(x, tag=PREIMAGE_TAG)
    if publish_at is not None:
        sim.run_until(publish_at - 1)
        chain.submit("L", "PM", "publish", (x,))
    sim.run_until(10)
    # both parties sign a round whose state has the entry disputed
    entries = ((h, 0, 30, expiry, DISPUTED),)
    pay = (pay_side(cred=-30), pay_side())
    state = (entries, pay)
    out = ("lnk", 0, 0, ((h, 30, 0, expiry),))
    payload = round_payload("s", 0, state, out)
    sigs = (suite.sign("L", payload), suite.sign("R", payload))
    chain.submit("R", "X", "evidence", (0, state, out, sigs))
    sim.run_until(12)
    return chain, c, h


def test_adjudication_pays_payee_when_registered_in_time():
    chain, c, h = adjudication_world(publish_at=5, expiry=8)
    assert c.adjudicated[h] is True
    assert c.deposits == (100, 30)
    assert c.adjud_total == 30


def test_adjudication_refunds_opener_when_late_or_missing():
    chain, c, h = adjudication_world(publish_at=9, expiry=8)
    assert c.adjudicated[h] is False
    assert c.deposits == (130, 0)
    chain, c, h = adjudication_world(publish_at=None, expiry=8)
    assert c.adjudicated[h] is False


def test_adjudication_applies_exactly_once():
    chain, c, h = adjudication_world(publish_at=5, expiry=8)
    # replaying the same output cannot move more money
    c.apply_aux_output(0, ("lnk", 0, 0, ((h, 30, 0, 8),)))
    assert c.deposits == (100, 30) and c.adjud_total == 30


# -- expiry schedules ----------------------------------------------------------


def test_expiry_schedules():
    assert sprites_expiries(10, 5, 6) == (46, 46, 46, 46)
    ladder = ladder_expiries(10, 5, 6)
    assert ladder[-1] == 10 + 6 * 4 + 6 + 8
    diffs = [a - b for a, b in zip(ladder, ladder[1:])]
    assert diffs == [7, 7, 7]            # delta + rung per hop


# -- end-to-end runs -------------------------------------------------------------


def test_all_honest_payment_completes_off_chain():
    res = run_linked_payment(4, 100, delta=6)
    assert res.problems == []
    assert res.success and res.engaged
    assert res.published_at is None
    assert [h.status for h in res.hops] == [COMPLETED] * 3
    assert {m.method for m in res.chain.tx_log} == {"deposit"}
    assert res.nets == {"P1": -100, "P2": 0, "P3": 0, "P4": 100}
    # every hop settles well before the shared expiry
    assert all(h.t_release < res.expiries[0] for h in res.hops)


def test_all_petty_chain_settles_every_hop_at_the_same_deadline():
    delta = 6
    res = run_linked_payment(4, 100, delta=delta, honest=(False,) * 4)
    assert res.problems == []
    assert res.success
    t_exp = res.expiries[0]
    assert res.published_at == t_exp - delta + 1
    assert [h.status for h in res.hops] == [DISPUTED] * 3
    assert all(h.paid is True for h in res.hops)
    # dispute at expiry+delta+slack, confirm +1, sighting +1, wait delta,
    # resolve confirms one tick later: identical for every hop
    expected = (t_exp + delta + res.slack) + delta + 3
    assert [h.t_release for h in res.hops] == [expected] * 3
    assert res.nets == {"P1": -100, "P2": 0, "P3": 0, "P4": 100}


def test_petty_intermediary_cannot_steal_or_stall():
    res = run_linked_payment(3, 80, delta=5, honest=(True, False, True))
    assert res.problems == []
    assert res.success
    assert res.nets == {"P1": -80, "P2": 0, "P3": 80}


def test_petty_recipient_claims_through_the_registry():
    res = run_linked_payment(3, 80, delta=6, honest=(True, True, False))
    assert res.problems == []
    assert res.success
    assert res.published_at is not None
    assert res.nets == {"P1": -80, "P2": 0, "P3": 80}


def test_capacity_shortfall_aborts_atomically():
    res = run_linked_payment(3, 100, delta=6,
                             deposits=[(100, 0), (40, 0)])
    assert res.problems == []
    assert not res.success
    assert res.hops[0].status == CANCELLED and res.hops[0].paid is False
    assert res.hops[1].status is None
    assert res.nets == {"P1": 0, "P2": 0, "P3": 0}


def test_ladder_all_petty_locks_upstream_hops_longer():
    delta = 6
    res = run_linked_payment(4, 100, delta=delta, model=HTLC,
                             honest=(False,) * 4)
    assert res.problems == []
    assert res.success
    releases = [h.t_release for h in res.hops]
    assert releases[0] > releases[1] > releases[2]
    for i, hop in enumerate(res.hops):
        assert hop.t_release == res.expiries[i] + 2 * delta + res.slack + 3
    durations = hop_lock_durations(res)
    assert durations[0] > durations[-1]


def test_constant_expiry_keeps_delta_slope_flat_across_lengths():
    def first_hop_duration(model, n, delta):
        res = run_linked_payment(n, 100, delta=delta, model=model,
                                 honest=(False,) * n)
        assert res.problems == []
        return hop_lock_durations(res)[0]

    for n in (3, 5):
        lo = first_hop_duration(SPRITES, n, 4)
        hi = first_hop_duration(SPRITES, n, 8)
        assert (hi - lo) / 4 == 3          # release slope wrt delta
        lo_l = first_hop_duration(HTLC, n, 4)
        hi_l = first_hop_duration(HTLC, n, 8)
        assert (hi_l - lo_l) / 4 >= n - 1  # the ladder steepens with length


def test_plain_pays_and_withdrawals_ride_the_linked_channel():
    res = run_linked_payment(2, 50, delta=4, deposits=((80, 40),))
    assert res.problems == []
    left = res.nodes[0].channels["C1"]
    right = res.nodes[1].channels["C1"]
    sim, chain = res.chain.sim, res.chain
    assert right.pay(20)
    sim.run_until(sim.now + 30)
    assert left.received_total == 20
    assert left.withdraw(30)
    sim.run_until(sim.now + 40)
    assert chain.balance("P1") >= 30
    chain.assert_conservation()


@settings(deadline=None, max_examples=20)
@given(st.data())
def test_linked_payment_property(data):
    n = data.draw(st.integers(2, 5), label="parties")
    delta = data.draw(st.integers(4, 8), label="delta")
    model = data.draw(st.sampled_from([SPRITES, HTLC]), label="model")
    honest = tuple(data.draw(st.booleans(), label=f"honest{i}")
                   for i in range(n))
    seed = data.draw(st.integers(0, 2 ** 16), label="seed")
    adversarial = data.draw(st.booleans(), label="adversarial-chain")
    kw = {}
    if adversarial:
        rng = random.Random(seed + 99)
        kw = dict(tx_delay=lambda tx: rng.randint(1, delta),
                  event_delay=lambda p, ev: rng.randint(1, delta),
                  read_lag=lambda p, now: rng.randint(0, delta))
    res = run_linked_payment(n, 60, delta=delta, model=model, honest=honest,
                             seed=seed, **kw)
    assert res.problems == []
    res.chain.assert_conservation()
    for node in res.nodes:
        for ch in node.channels.values():
            assert not ch.engine.queue
