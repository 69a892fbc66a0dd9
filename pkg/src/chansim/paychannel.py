"""Two-party payment channels as a state-channel application.

The update function keeps one record per side: running credit, the payments
accepted this round, and cumulative pay/withdraw totals.  A round input is
``(pays, wd)`` — a tuple of payment amounts plus a withdrawal request.  Each
side can spend at most ``deposit + credit`` as of the start of the round:
payments that do not fit are dropped individually (the rest of the batch
still goes through), and a withdrawal that does not fit is clamped to zero.

Deposits live on the contract and reach the update function as auxiliary
input; withdrawal totals travel in the aux output as *cumulative* figures so
that replaying old rounds or skipping intermediate ones can never double-pay:
the contract pays out only the excess over what it already transferred.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

from .chainenv import CallContext, Chain, Money
from .cryptosuite import CryptoSuite
from .simkernel import Simulator
from .statechannel import (
    ContractState, FStateOracle, LemmaMonitor, PartyHub, StateChannelParty,
    Timing, UpdateContext, UpdateFunction, verify_channel_fold,
)

# One side of the channel state: (credit, newly-accepted pays, cumulative
# pays, cumulative withdrawals).
CRED, NEWARR, PAYTOT, WDTOT = range(4)


def pay_side(cred: Money = 0, newarr: tuple = (), paytot: Money = 0,
             wdtot: Money = 0) -> tuple:
    return (cred, newarr, paytot, wdtot)


def normalize_pay_input(cmd: Any) -> tuple[tuple, Money]:
    """Coerce an arbitrary (possibly adversarial) round input to (pays, wd)."""
    if not (isinstance(cmd, tuple) and len(cmd) == 2):
        return (), 0
    pays, wd = cmd
    if not isinstance(pays, (tuple, list)):
        pays = ()
    pays = tuple(x for x in pays if isinstance(x, int) and x > 0)
    if not (isinstance(wd, int) and wd > 0):
        wd = 0
    return pays, wd


class PayUpdate(UpdateFunction):
    AUX_FIELDS = ("deposits",)

    def initial_state(self, n: int) -> tuple:
        return (pay_side(), pay_side())

    def apply(self, state, inputs, ctx: UpdateContext):
        deposits = ctx.aux_in if isinstance(ctx.aux_in, tuple) else (0, 0)
        accepted: list[tuple] = [(), ()]
        wd_ok: list[Money] = [0, 0]
        for i in (0, 1):
            pays, wd = normalize_pay_input(inputs[i])
            avail = deposits[i] + state[i][CRED]
            acc = []
            for x in pays:
                if x <= avail:
                    avail -= x
                    acc.append(x)
            if wd <= avail:
                wd_ok[i] = wd
                avail -= wd
            accepted[i] = tuple(acc)
        new_state = []
        for i in (0, 1):
            j = 1 - i
            new_state.append(pay_side(
                cred=state[i][CRED] - sum(accepted[i]) - wd_ok[i] + sum(accepted[j]),
                newarr=accepted[i],
                paytot=state[i][PAYTOT] + sum(accepted[i]),
                wdtot=state[i][WDTOT] + wd_ok[i],
            ))
        new_state = tuple(new_state)
        totals = (new_state[0][WDTOT], new_state[1][WDTOT])
        out = ("wd",) + totals if totals != (0, 0) else None
        return new_state, out


class ContractPay(ContractState):
    """Holds the deposits and honours cumulative withdrawal outputs."""

    READABLE = ContractState.READABLE + ("deposits", "paid")

    def __init__(self, address: str, sid: str, parties: Sequence[str],
                 suite: CryptoSuite, u: Optional[UpdateFunction] = None):
        super().__init__(address, sid, parties, u or PayUpdate(), suite)
        self.deposits: tuple = (0,) * len(self.parties)
        self.paid: tuple = (0,) * len(self.parties)

    def aux_input(self):
        return self.deposits

    def m_deposit(self, ctx: CallContext) -> None:
        self.require(ctx.sender in self.parties, "not a party")
        self.require(ctx.coins > 0, "no coins attached")
        i = self.parties.index(ctx.sender)
        d = list(self.deposits)
        d[i] += ctx.coins
        self.deposits = tuple(d)
        self.emit("EventDeposit", i, ctx.coins)

    def apply_aux_output(self, r: int, out: Any) -> None:
        if not (isinstance(out, tuple) and len(out) >= 3 and out[0] == "wd"):
            return
        paid = list(self.paid)
        for i, party in enumerate(self.parties):
            delta = out[1 + i] - paid[i]
            if delta > 0:
                self.pay_out(party, delta)
                paid[i] += delta
        self.paid = tuple(paid)


@dataclass
class PayReport:
    """What one flushed command batch came to once a round consumed it."""

    requested: tuple
    accepted: tuple
    wd_requested: Money
    wd_accepted: Money


class PayChannelParty:
    """Application driver for one side of a payment channel.

    Buffers local pay/withdraw requests into one composite round input at a
    time; reports what the settled round actually accepted and surfaces
    incoming payments from the counterparty.
    """

    def __init__(self, sim: Simulator, chain: Chain, suite: CryptoSuite,
                 sid: str, pid: str, parties: Sequence[str], contract: str,
                 timing: Timing, policy: Any = None,
                 monitor: Optional[LemmaMonitor] = None,
                 hub: Optional[PartyHub] = None,
                 u: Optional[UpdateFunction] = None):
        self.engine = StateChannelParty(
            sim, chain, suite, sid, pid, parties, contract, u or PayUpdate(),
            timing, app=self, policy=policy, monitor=monitor, hub=hub)
        self.sim = sim
        self.chain = chain
        self.pid = pid
        self.contract = contract
        self.idx = self.engine.idx
        self.buf_pays: list[Money] = []
        self.buf_wd: Money = 0
        self.inflight: Optional[tuple[tuple, Money]] = None
        self.on_receive: Optional[Callable[[Money, tuple], None]] = None
        self.on_settled: Optional[Callable[[PayReport], None]] = None
        self.reports: list[PayReport] = []
        self.received_total: Money = 0

    # -- local money view --------------------------------------------------

    def deposit(self, amount: Money):
        return self.chain.submit(self.pid, self.contract, "deposit",
                                 coins=amount)

    def my_deposit_view(self) -> Money:
        return self.chain.read(self.pid, self.contract, "deposits")[self.idx]

    def spendable(self) -> Money:
        """Deposit + credit minus everything already promised locally."""
        promised = sum(self.buf_pays) + self.buf_wd
        if self.inflight is not None:
            promised += sum(self.inflight[0]) + self.inflight[1]
        return (self.my_deposit_view()
                + self.engine.state[self.idx][CRED] - promised)

    # -- requests ------------------------------------------------------------

    def pay(self, amount: Money, *, guard: bool = True) -> bool:
        if guard and amount > self.spendable():
            return False
        self.buf_pays.append(amount)
        self._flush()
        return True

    def withdraw(self, amount: Money, *, guard: bool = True) -> bool:
        if guard and amount > self.spendable():
            return False
        self.buf_wd += amount
        self._flush()
        return True

    def _flush(self) -> None:
        if self.inflight is not None or not (self.buf_pays or self.buf_wd):
            return
        cmd = (tuple(self.buf_pays), self.buf_wd)
        self.inflight = cmd
        self.buf_pays, self.buf_wd = [], 0
        self.engine.submit_input(cmd)

    # -- round callback -------------------------------------------------------

    def on_round(self, pid: str, r: int, state, prev_state, via: str) -> None:
        mine, theirs = state[self.idx], state[1 - self.idx]
        got = theirs[PAYTOT] - prev_state[1 - self.idx][PAYTOT]
        if got > 0:
            self.received_total += got
            amounts = theirs[NEWARR] if sum(theirs[NEWARR]) == got else (got,)
            if self.on_receive is not None:
                self.on_receive(got, amounts)
        if self.inflight is not None and not self.engine.queue:
            # our composite was consumed by this (or an earlier) round
            req_pays, req_wd = self.inflight
            acc_pay = mine[PAYTOT] - prev_state[self.idx][PAYTOT]
            acc_wd = mine[WDTOT] - prev_state[self.idx][WDTOT]
            report = PayReport(req_pays, self._match(req_pays, acc_pay),
                               req_wd, acc_wd)
            self.inflight = None
            self.reports.append(report)
            if self.on_settled is not None:
                self.on_settled(report)
        if mine[WDTOT] > self._contract_paid_view():
            # coins are owed to us on-chain: present the evidence
            self.engine.submit_evidence()
        self._flush()

    @staticmethod
    def _match(requested: tuple, accepted_total: Money) -> tuple:
        """Greedy reconstruction of which requested pays fit the total."""
        out, left = [], accepted_total
        for x in requested:
            if x <= left:
                out.append(x)
                left -= x
        return tuple(out)

    def _contract_paid_view(self) -> Money:
        return self.chain.read(self.pid, self.contract, "paid")[self.idx]


class FPayOracle:
    """Ideal payment channel: the fold plus the money identities.

    For a channel that consumed rounds R with deposits D the ideal outcome
    satisfies, per side i: worth_i = D_i + cred_i, and globally
    sum(D) == sum(worth) + sum(wd_paid).
    """

    def __init__(self):
        self.u = PayUpdate()

    def expected_state(self, rounds) -> tuple:
        return FStateOracle(self.u, 2).final_state(rounds)

    def check(self, contract: ContractPay,
              parties: Sequence[PayChannelParty]) -> list[str]:
        engines = [p.engine for p in parties]
        problems = verify_channel_fold(contract, engines)
        state = contract.state
        worth = [contract.deposits[i] + state[i][CRED] for i in (0, 1)]
        if any(w < 0 for w in worth):
            problems.append(f"{contract.address}: negative channel worth {worth}")
        escrow = contract.chain.escrow[contract.address]
        if sum(contract.deposits) - sum(contract.paid) != escrow:
            problems.append(
                f"{contract.address}: escrow {escrow} != deposits-paid "
                f"{sum(contract.deposits) - sum(contract.paid)}")
        for i in (0, 1):
            if contract.paid[i] > state[i][WDTOT]:
                problems.append(
                    f"{contract.address}: side {i} overpaid "
                    f"{contract.paid[i]} > {state[i][WDTOT]}")
        return problems
