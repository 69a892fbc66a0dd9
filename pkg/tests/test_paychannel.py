"""Payment channels: acceptance rules, withdrawals, money conservation."""

from hypothesis import given, settings, strategies as st

from chansim.chainenv import Chain
from chansim.cryptosuite import CryptoSuite
from chansim.paychannel import (
    CRED, NEWARR, PAYTOT, WDTOT, ContractPay, FPayOracle, PayChannelParty,
    PayUpdate, normalize_pay_input, pay_side,
)
from chansim.simkernel import Simulator
from chansim.statechannel import HonestPolicy, LemmaMonitor, Timing, UpdateContext


def apply_pay(state, left=None, right=None, deposits=(0, 0), now=0):
    u = PayUpdate()
    return u.apply(state, (left, right), UpdateContext(deposits, now))


ZERO = (pay_side(), pay_side())


def test_overcommitted_batch_drops_only_what_does_not_fit():
    # reference case worked by hand: 100 available, pays (30, 80) requested;
    # 30 fits, 80 no longer does, so exactly 30 moves across
    state, out = apply_pay(ZERO, left=((30, 80), 0), deposits=(100, 0))
    assert state[0][NEWARR] == (30,)
    assert state[0][CRED] == -30
    assert state[1][CRED] == 30
    assert out is None


def test_drop_and_continue_accepts_later_fitting_payment():
    state, _ = apply_pay(ZERO, left=((30, 80, 50), 0), deposits=(100, 0))
    assert state[0][NEWARR] == (30, 50)
    assert state[0][CRED] == -80


def test_withdrawal_clamps_to_zero_when_it_does_not_fit():
    state, out = apply_pay(ZERO, left=((30,), 80), deposits=(100, 0))
    assert state[0][WDTOT] == 0 and out is None
    state, out = apply_pay(ZERO, left=((30,), 70), deposits=(100, 0))
    assert state[0][WDTOT] == 70
    assert state[0][CRED] == -100
    assert out == ("wd", 70, 0)


def test_credit_can_fund_further_payments():
    state, _ = apply_pay(ZERO, left=((40,), 0), deposits=(40, 0))
    # right side spends entirely from earned credit
    state, _ = apply_pay(state, right=((25,), 0), deposits=(40, 0))
    assert state[1][CRED] == 15
    assert state[0][CRED] == -15


def test_same_round_income_is_not_spendable_yet():
    state, _ = apply_pay(ZERO, left=((40,), 0), right=((10,), 0),
                         deposits=(40, 0))
    # right side had nothing at the start of the round: its pay is dropped
    assert state[1][NEWARR] == ()
    assert state[0][CRED] == -40 + 0
    assert state[1][CRED] == 40


def test_malformed_inputs_are_neutralized():
    assert normalize_pay_input(None) == ((), 0)
    assert normalize_pay_input(("x", -1)) == ((), 0)
    assert normalize_pay_input(((3, -2, "y", 5), 2)) == ((3, 5), 2)
    state, out = apply_pay(ZERO, left="garbage", deposits=(9, 9))
    assert state == ZERO and out is None


def test_wd_output_is_cumulative():
    state, out = apply_pay(ZERO, left=((), 10), deposits=(50, 0))
    assert out == ("wd", 10, 0)
    state, out = apply_pay(state, left=((), 5), deposits=(50, 0))
    assert state[0][WDTOT] == 15
    assert out == ("wd", 15, 0)


class RefuseSign(HonestPolicy):
    def should_sign(self, r, inputs, state, out):
        return False


def pay_world(delta=6, deposits=(100, 100), mint=1000, policies=(None, None)):
    sim = Simulator(message_delay_bound=delta)
    chain = Chain(sim, delta)
    suite = CryptoSuite(seed=3, clock=lambda: sim.now)
    monitor = LemmaMonitor(suite, delta)
    pids = ("L", "R")
    contract = chain.deploy(ContractPay("pc", "pay", pids, suite))
    parties = tuple(
        PayChannelParty(sim, chain, suite, "pay", pid, pids, "pc",
                        Timing(delta), policy=pol, monitor=monitor)
        for pid, pol in zip(pids, policies)
    )
    for pid, dep in zip(pids, deposits):
        chain.mint(pid, mint)
        if dep:
            parties[pids.index(pid)].deposit(dep)
    sim.run()
    return sim, chain, contract, parties, monitor


def test_offchain_payment_reaches_counterparty():
    sim, chain, contract, (L, R), mon = pay_world()
    got = []
    R.on_receive = lambda total, amounts: got.append((sim.now, total, amounts))
    t0 = sim.now
    assert L.pay(30)
    sim.run()
    assert got and got[0][1] == 30 and got[0][2] == (30,)
    assert got[0][0] - t0 <= 8          # optimistic pay is a handful of ticks
    assert R.engine.state[0][CRED] == -30 and R.engine.state[1][CRED] == 30
    # a pure pay still touches nothing on-chain beyond the two deposits
    assert [tx.method for tx in chain.tx_log] == ["deposit", "deposit"]
    assert FPayOracle().check(contract, (L, R)) == []


def test_withdrawal_collects_coins_on_chain():
    sim, chain, contract, (L, R), mon = pay_world()
    L.pay(30)
    sim.run()
    assert R.withdraw(20)
    sim.run()
    assert chain.balance("R") == 1000 - 100 + 20
    assert chain.escrow["pc"] == 200 - 20
    assert contract.paid == (0, 20)
    assert FPayOracle().check(contract, (L, R)) == []
    chain.assert_conservation()


def test_spendable_tracks_buffered_and_inflight_promises():
    sim, chain, contract, (L, R), mon = pay_world()
    assert L.spendable() == 100
    assert not L.pay(150)               # guard refuses what cannot fit
    L.pay(60)
    assert L.spendable() == 40
    sim.run()
    assert L.spendable() == 40
    assert R.spendable() == 160


def test_petty_counterparty_cannot_block_a_payment():
    sim, chain, contract, (L, R), mon = pay_world(policies=(None, RefuseSign()))
    got = []
    R.on_receive = lambda total, amounts: got.append(total)
    assert L.pay(25)
    sim.run()
    assert got == [25]
    assert contract.settled.get(0) == "on"       # forced through the chain
    assert contract.state[1][CRED] == 25
    assert FPayOracle().check(contract, (L, R)) == []
    assert mon.check(chain, "pc", "pay", {"L"}) == []


def test_report_flags_dropped_payments():
    sim, chain, contract, (L, R), mon = pay_world(deposits=(50, 0))
    reports = []
    L.on_settled = reports.append
    L.pay(30, guard=False)
    L.pay(40, guard=False)              # cannot fit after the first
    sim.run()
    assert [(r.requested, r.accepted) for r in reports] == [
        ((30,), (30,)),
        ((40,), ()),                    # flagged as dropped, not retried
    ]
    assert L.engine.state[0][CRED] == -30


@settings(max_examples=40, deadline=None)
@given(
    deposits=st.tuples(st.integers(min_value=0, max_value=200),
                       st.integers(min_value=0, max_value=200)),
    actions=st.lists(
        st.tuples(st.integers(min_value=0, max_value=1),       # which side
                  st.sampled_from(["pay", "wd"]),
                  st.integers(min_value=1, max_value=120)),
        max_size=8),
    petty_right=st.booleans(),
)
def test_money_identities_hold_under_random_traffic(deposits, actions,
                                                    petty_right):
    policies = (None, RefuseSign() if petty_right else None)
    sim, chain, contract, parties, mon = pay_world(
        deposits=deposits, policies=policies)
    for side_i, kind, amount in actions:
        p = parties[side_i]
        if side_i == 1 and petty_right:
            continue                    # a petty node issues nothing here
        if kind == "pay":
            p.pay(amount)
        else:
            p.withdraw(amount)
        sim.run()
    honest = {"L"} if petty_right else {"L", "R"}
    assert FPayOracle().check(contract, parties) == []
    assert mon.check(chain, "pc", "pay", honest) == []
    chain.assert_conservation()
    # every coin is either a balance, channel escrow, or paid-out withdrawal
    total = chain.balance("L") + chain.balance("R") + chain.escrow["pc"]
    assert total == 2000
