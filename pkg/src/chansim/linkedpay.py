"""Hash-linked multi-hop payments over payment channels.

A payment from a sender to a recipient across a path of payment channels is
expressed per hop as a conditional entry keyed by the hash of a secret
preimage.  Opening an entry locks the amount from the opener's credit;
completing it (by the opener) or cancelling it (by the payee) settles
cooperatively off-chain.  If a hop is still unresolved after its expiry,
either party can force a round on-chain whose output asks the channel
contract to adjudicate against a shared on-chain preimage registry: the entry
pays the payee exactly when the preimage was registered no later than the
entry's expiry, and refunds the opener otherwise.

Because the registry is global and first-write-wins, one registration made in
time settles every hop of the payment at once, so all hops can carry the same
constant expiry regardless of path length.  A decreasing per-hop expiry
ladder (the classic hashed-timelock arrangement) is available as a baseline:
it runs on the same machinery with per-hop expiries, so the two designs
differ only in the expiry schedule handed to the nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

from .chainenv import CallContext, Chain, Contract, Money
from .cryptosuite import CryptoSuite
from .paychannel import (CRED, NEWARR, PAYTOT, WDTOT, ContractPay, PayUpdate,
                         normalize_pay_input, pay_side)
from .simkernel import Simulator, Ticks
from .statechannel import (LemmaMonitor, PartyHub, StateChannelParty, Timing,
                           UpdateContext, UpdateFunction, verify_channel_fold)

SPRITES = "sprites"   # one shared expiry for every hop
HTLC = "htlc"         # decreasing per-hop expiry ladder

INFLIGHT = "inflight"
COMPLETED = "completed"
CANCELLED = "cancelled"
DISPUTED = "disputed"
TERMINAL = (COMPLETED, CANCELLED, DISPUTED)

# linked entry tuple layout: (hash, opener, amount, expiry, status)
E_HASH, E_OPENER, E_AMOUNT, E_EXPIRY, E_STATUS = range(5)

PREIMAGE_TAG = "pm"
DISPUTE_SLACK = 3     # ticks past expiry+delta before going on-chain
PUBLISH_HEADROOM = 8  # ladder: last hop's decision margin before its expiry
LADDER_RUNG = 1       # ladder: extra spacing between consecutive hop expiries
HOP_TICKS = 6         # worst honest off-chain propagation per hop


def normalize_linked_input(cmd: Any) -> tuple[tuple, tuple, Money]:
    """Coerce an arbitrary (possibly adversarial) round input to
    (ops, pays, wd)."""
    if not (isinstance(cmd, tuple) and len(cmd) == 3):
        return (), (), 0
    ops, pays, wd = cmd
    if not isinstance(ops, (tuple, list)):
        ops = ()
    ops = tuple(op for op in ops
                if isinstance(op, tuple) and len(op) >= 2
                and op[0] in ("open", "complete", "cancel", "dispute")
                and isinstance(op[1], bytes))
    pays, wd = normalize_pay_input((pays, wd))
    return ops, pays, wd


class LinkedUpdate(UpdateFunction):
    """Payment-channel core extended with hash-keyed conditional entries.

    State is (entries, pay_state): entries is a hash-sorted tuple of
    (hash, opener, amount, expiry, status); pay_state is the plain two-side
    payment state.  Round inputs are (ops, pays, wd).  Ops settle before the
    pay core runs, so an opened amount is not spendable in the same round,
    while a completed or cancelled amount already is.  Invalid or currently
    inapplicable ops drop without effect.  The aux output carries the
    cumulative withdrawal totals plus every entry currently in the disputed
    status, so a skipped or replayed output can never lose an adjudication.
    """

    AUX_FIELDS = ("deposits",)

    def __init__(self):
        self._pay = PayUpdate()

    def initial_state(self, n: int) -> tuple:
        return ((), (pay_side(), pay_side()))

    def apply(self, state, inputs, ctx: UpdateContext):
        deposits = ctx.aux_in if isinstance(ctx.aux_in, tuple) else (0, 0)
        entries = {e[E_HASH]: list(e[1:]) for e in state[0]}
        sides = [list(state[1][0]), list(state[1][1])]
        pay_inputs = []
        for i in (0, 1):
            ops, pays, wd = normalize_linked_input(inputs[i])
            pay_inputs.append((pays, wd))
            for op in ops:
                kind, h = op[0], op[1]
                ent = entries.get(h)
                if kind == "open":
                    if (ent is None and len(op) == 4
                            and isinstance(op[2], int) and op[2] > 0
                            and isinstance(op[3], int)
                            and deposits[i] + sides[i][CRED] >= op[2]):
                        entries[h] = [i, op[2], op[3], INFLIGHT]
                        sides[i][CRED] -= op[2]
                elif ent is None or ent[3] != INFLIGHT or len(op) != 2:
                    continue
                elif kind == "complete" and ent[0] == i:
                    ent[3] = COMPLETED
                    sides[1 - i][CRED] += ent[1]
                elif kind == "cancel" and ent[0] == 1 - i:
                    ent[3] = CANCELLED
                    sides[ent[0]][CRED] += ent[1]
                elif kind == "dispute" and ctx.now > ent[2]:
                    ent[3] = DISPUTED
        pay_state = (pay_side(*sides[0]), pay_side(*sides[1]))
        new_pay, _ = self._pay.apply(pay_state, tuple(pay_inputs), ctx)
        new_entries = tuple((h, *vals) for h, vals in sorted(entries.items()))
        disputed = tuple((e[E_HASH], e[E_AMOUNT], e[E_OPENER], e[E_EXPIRY])
                         for e in new_entries if e[E_STATUS] == DISPUTED)
        wd_tot = (new_pay[0][WDTOT], new_pay[1][WDTOT])
        if wd_tot == (0, 0) and not disputed:
            out = None
        else:
            out = ("lnk", wd_tot[0], wd_tot[1], disputed)
        return (new_entries, new_pay), out


class ContractPM(Contract):
    """Global preimage registry: first registration of a value fixes its
    timestamp forever; anyone may register."""

    READABLE = ("published",)

    def __init__(self, address: str, suite: CryptoSuite):
        super().__init__(address)
        self.suite = suite
        self.published: dict[bytes, Ticks] = {}
        self.preimages: dict[bytes, bytes] = {}

    def m_publish(self, ctx: CallContext, x: Any) -> None:
        self.require(isinstance(x, bytes), "preimage must be bytes")
        h = self.suite.hash_obj(x, tag=PREIMAGE_TAG)
        if h not in self.published:
            self.published[h] = ctx.now
            self.preimages[h] = x
            self.emit("EventPublish", h, ctx.now)

    def m_lookup(self, ctx: CallContext, h: Any) -> Optional[Ticks]:
        return self.published.get(h)

    def published_by(self, h: bytes, t: Ticks) -> bool:
        ts = self.published.get(h)
        return ts is not None and ts <= t


class ContractLinked(ContractPay):
    """Payment-channel contract that adjudicates disputed linked entries
    against the preimage registry.

    Each disputed entry is adjudicated exactly once: the entry's amount is
    added to the payee's deposit if the registry holds the preimage with a
    timestamp no later than the entry's expiry, and back to the opener's
    deposit otherwise.  Deposit totals therefore grow by the adjudicated
    amount, which `adjud_total` tracks for the escrow identity
    escrow == sum(deposits) - adjud_total - sum(paid).
    """

    READABLE = ContractPay.READABLE + ("adjudicated",)

    def __init__(self, address: str, sid: str, parties: Sequence[str],
                 suite: CryptoSuite, pm: str,
                 u: Optional[UpdateFunction] = None):
        super().__init__(address, sid, parties, suite, u or LinkedUpdate())
        self.pm = pm
        self.adjudicated: dict[bytes, bool] = {}
        self.adjud_total: Money = 0

    def apply_aux_output(self, r: int, out: Any) -> None:
        if not (isinstance(out, tuple) and len(out) == 4 and out[0] == "lnk"):
            return
        _, wd0, wd1, disputes = out
        super().apply_aux_output(r, ("wd", wd0, wd1))
        for h, amount, opener, expiry in disputes:
            if h in self.adjudicated:
                continue
            ok, ts = self.call(self.pm, "lookup", h)
            paid = bool(ok) and ts is not None and ts <= expiry
            winner = (1 - opener) if paid else opener
            d = list(self.deposits)
            d[winner] += amount
            self.deposits = tuple(d)
            self.adjud_total += amount
            self.adjudicated[h] = paid
            self.emit("EventAdjudicate", h, paid, winner, amount)


class PettySignPolicy:
    """Cooperates off-chain only with rounds that merely open entries or move
    plain payments; refuses completes, cancels, disputes and withdrawals, and
    never escalates on its own timers."""

    def should_batch(self, r: int, inputs: tuple) -> bool:
        return self._benign(inputs)

    def should_sign(self, r: int, inputs: tuple, state, out) -> bool:
        return self._benign(inputs)

    def escalates(self) -> bool:
        return False

    @staticmethod
    def _benign(inputs) -> bool:
        for v in inputs:
            if v is None:
                continue
            ops, _pays, wd = normalize_linked_input(v)
            if wd > 0 or any(op[0] != "open" for op in ops):
                return False
        return True


class LinkedChannelParty:
    """Application driver for one side of a linked payment channel.

    Buffers local ops/pays/withdrawals into one composite round input at a
    time, surfaces entry status changes and incoming payments, and pushes
    evidence on-chain whenever a withdrawal or a freshly disputed entry needs
    the contract to act.
    """

    def __init__(self, sim: Simulator, chain: Chain, suite: CryptoSuite,
                 sid: str, pid: str, parties: Sequence[str], contract: str,
                 timing: Timing, policy: Any = None,
                 monitor: Optional[LemmaMonitor] = None,
                 hub: Optional[PartyHub] = None,
                 u: Optional[UpdateFunction] = None):
        self.engine = StateChannelParty(
            sim, chain, suite, sid, pid, parties, contract, u or LinkedUpdate(),
            timing, app=self, policy=policy, monitor=monitor, hub=hub)
        self.sim = sim
        self.chain = chain
        self.pid = pid
        self.sid = sid
        self.contract = contract
        self.idx = self.engine.idx
        self.buf_ops: list[tuple] = []
        self.buf_pays: list[Money] = []
        self.buf_wd: Money = 0
        self.inflight: Optional[tuple] = None
        self.on_receive: Optional[Callable[[Money, tuple], None]] = None
        self.on_entry: Optional[Callable] = None
        self.entry_log: dict[bytes, dict] = {}
        self.received_total: Money = 0

    # -- local money view ----------------------------------------------------

    def deposit(self, amount: Money):
        return self.chain.submit(self.pid, self.contract, "deposit",
                                 coins=amount)

    def my_deposit_view(self) -> Money:
        return self.chain.read(self.pid, self.contract, "deposits")[self.idx]

    def entries(self) -> dict[bytes, tuple]:
        return {e[E_HASH]: e for e in self.engine.state[0]}

    def spendable(self) -> Money:
        promised = sum(self.buf_pays) + self.buf_wd
        promised += sum(op[2] for op in self.buf_ops if op[0] == "open")
        if self.inflight is not None:
            ops, pays, wd = self.inflight
            promised += sum(pays) + wd
            promised += sum(op[2] for op in ops if op[0] == "open")
        return (self.my_deposit_view()
                + self.engine.state[1][self.idx][CRED] - promised)

    # -- requests --------------------------------------------------------------

    def submit_op(self, op: tuple, *, urgent: bool = False) -> None:
        """Queue a linked-entry op.  `urgent` additionally forces the round
        on-chain right away (deadline actions must not wait for cooperation)."""
        self.buf_ops.append(op)
        self._flush()
        if urgent:
            self.engine._force_escalate("deadline")

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
        if self.inflight is not None or not (self.buf_ops or self.buf_pays
                                             or self.buf_wd):
            return
        cmd = (tuple(self.buf_ops), tuple(self.buf_pays), self.buf_wd)
        self.inflight = cmd
        self.buf_ops, self.buf_pays, self.buf_wd = [], [], 0
        self.engine.submit_input(cmd)

    # -- round callback ----------------------------------------------------------

    def on_round(self, pid: str, r: int, state, prev_state, via: str) -> None:
        now = self.sim.now
        prev_entries = {e[E_HASH]: e for e in prev_state[0]}
        fresh_dispute = False
        for e in state[0]:
            h, status = e[E_HASH], e[E_STATUS]
            old = prev_entries.get(h)
            old_status = old[E_STATUS] if old is not None else None
            if old_status == status:
                continue
            log = self.entry_log.setdefault(h, {"open": now, "end": None})
            if status in TERMINAL and log["end"] is None:
                log["end"] = now
            if status == DISPUTED:
                fresh_dispute = True
            if self.on_entry is not None:
                self.on_entry(self.sid, h, e, old_status, via)
        mine = state[1][self.idx]
        theirs = state[1][1 - self.idx]
        got = theirs[PAYTOT] - prev_state[1][1 - self.idx][PAYTOT]
        if got > 0:
            self.received_total += got
            if self.on_receive is not None:
                amounts = theirs[NEWARR] if sum(theirs[NEWARR]) == got else (got,)
                self.on_receive(got, amounts)
        if self.inflight is not None and not self.engine.queue:
            self.inflight = None
        if mine[WDTOT] > self._contract_paid_view() or fresh_dispute:
            self.engine.submit_evidence()
        self._flush()

    def _contract_paid_view(self) -> Money:
        return self.chain.read(self.pid, self.contract, "paid")[self.idx]


@dataclass
class PaymentCtx:
    """One node's view of one multi-hop payment."""

    h: bytes
    amount: Money
    route: tuple[str, ...]
    sids: tuple[str, ...]
    expiries: tuple[Ticks, ...]
    pos: int
    x: Optional[bytes] = None
    engaged: bool = False          # recipient released the preimage off-chain
    forwarded: bool = False
    published_sent: bool = False
    complete_sent: bool = False

    @property
    def in_sid(self) -> Optional[str]:
        return self.sids[self.pos - 1] if self.pos > 0 else None

    @property
    def out_sid(self) -> Optional[str]:
        return self.sids[self.pos] if self.pos < len(self.sids) else None

    @property
    def in_expiry(self) -> Optional[Ticks]:
        return self.expiries[self.pos - 1] if self.pos > 0 else None

    @property
    def out_expiry(self) -> Optional[Ticks]:
        return self.expiries[self.pos] if self.pos < len(self.sids) else None


class LinkedNode:
    """One principal's driver across all its channels for linked payments.

    Honest behaviour: forward opens downstream, release/relay completion on
    seeing the preimage, register the preimage on-chain at the last safe
    instant (expiry - delta) if the incoming hop is still unresolved, settle
    by registry state at expiry + delta, and force adjudication at the
    dispute deadline.  A petty node cooperates off-chain only with opens and
    plain pays, never completes or cancels, never relays the preimage, and
    acts on-chain only at the last permissible instants.
    """

    def __init__(self, sim: Simulator, chain: Chain, suite: CryptoSuite,
                 pid: str, pm: str, *, honest: bool = True,
                 slack: int = DISPUTE_SLACK):
        self.sim = sim
        self.chain = chain
        self.suite = suite
        self.pid = pid
        self.pm = pm
        self.honest = honest
        self.slack = slack
        self.delta = chain.delta
        self.hub = PartyHub(sim, pid)
        self.hub.fallback = self._on_direct
        self.channels: dict[str, LinkedChannelParty] = {}
        self.payments: dict[bytes, PaymentCtx] = {}

    def join(self, sid: str, parties: Sequence[str], contract: str,
             *, timing: Optional[Timing] = None,
             monitor: Optional[LemmaMonitor] = None) -> LinkedChannelParty:
        policy = None if self.honest else PettySignPolicy()
        party = LinkedChannelParty(
            self.sim, self.chain, self.suite, sid, self.pid, parties,
            contract, timing or Timing(self.delta), policy=policy,
            monitor=monitor, hub=self.hub)
        party.on_entry = self._on_entry
        self.channels[sid] = party
        return party

    # -- sender API ---------------------------------------------------------

    def start_payment(self, route: Sequence[str], sids: Sequence[str],
                      amount: Money,
                      expiries: Sequence[Ticks]) -> tuple[bytes, bytes]:
        x = self.suite.preimage(self.sim.rng)
        h = self.suite.hash_obj(x, tag=PREIMAGE_TAG)
        ctx = PaymentCtx(h, amount, tuple(route), tuple(sids),
                         tuple(expiries), pos=0, x=x)
        self._register(ctx)
        note = {"kind": "ROUTE", "h": h, "amount": amount,
                "route": tuple(route), "sids": tuple(sids),
                "expiries": tuple(expiries)}
        for q in route[1:]:
            self.sim.send(self.pid, q, dict(note))
        self.sim.send(self.pid, route[-1], {"kind": "PREIMAGE", "h": h, "x": x})
        self.channels[sids[0]].submit_op(("open", h, amount, expiries[0]))
        return h, x

    # -- payment bookkeeping ---------------------------------------------------

    def _register(self, ctx: PaymentCtx) -> None:
        self.payments[ctx.h] = ctx
        now = self.sim.now

        def arm(t: Ticks, fn: Callable[[bytes], None], kind: str) -> None:
            self.sim.schedule(max(now, t), ctx.h,
                              lambda e: fn(e.payload), kind=kind,
                              source=self.pid)

        if ctx.in_sid is not None:
            arm(ctx.in_expiry - self.delta, self._at_crit, "crit-timer")
            arm(ctx.in_expiry + self.delta + self.slack,
                self._at_dispute_in, "dispute-timer")
            if self.honest and ctx.out_sid is not None:
                arm(ctx.in_expiry + self.delta, self._at_expiry_in,
                    "expiry-timer")
        if ctx.out_sid is not None and self.honest:
            arm(ctx.out_expiry + self.delta, self._at_expiry_out,
                "expiry-timer")
            arm(ctx.out_expiry + self.delta + self.slack,
                self._at_dispute_out, "dispute-timer")

    def _arm_lapsed(self, ctx: PaymentCtx, sid: str) -> None:
        # When channel rounds crawl at the delay bound an entry can surface
        # after its deadline instants, i.e. after the timers armed at
        # registration already fired against a missing entry.  Re-run exactly
        # the lapsed deadline actions now; the handlers are idempotent and
        # no-op on settled entries, so a double fire is harmless.
        now = self.sim.now

        def rearm(t: Ticks, fn: Callable[[bytes], None], kind: str) -> None:
            if t <= now:
                self.sim.schedule(now, ctx.h, lambda e: fn(e.payload),
                                  kind=kind, source=self.pid)

        if sid == ctx.in_sid:
            rearm(ctx.in_expiry + self.delta + self.slack,
                  self._at_dispute_in, "dispute-timer")
            if self.honest and ctx.out_sid is not None:
                rearm(ctx.in_expiry + self.delta, self._at_expiry_in,
                      "expiry-timer")
        elif sid == ctx.out_sid and self.honest:
            rearm(ctx.out_expiry + self.delta, self._at_expiry_out,
                  "expiry-timer")
            rearm(ctx.out_expiry + self.delta + self.slack,
                  self._at_dispute_out, "dispute-timer")

    def _entry(self, ctx: PaymentCtx, sid: Optional[str]) -> Optional[tuple]:
        if sid is None:
            return None
        return self.channels[sid].entries().get(ctx.h)

    def _published_view(self, h: bytes, t_limit: Ticks) -> bool:
        pub = self.chain.read(self.pid, self.pm, "published")
        ts = pub.get(h) if isinstance(pub, dict) else None
        return ts is not None and ts <= t_limit

    # -- direct (non-channel) messages ---------------------------------------

    def _on_direct(self, event) -> None:
        msg = event.payload
        if not isinstance(msg, dict):
            return
        if msg.get("kind") == "ROUTE":
            self._on_route(msg)
        elif msg.get("kind") == "PREIMAGE":
            self._on_preimage(msg)

    def _on_route(self, msg: dict) -> None:
        h = msg["h"]
        if h in self.payments or self.pid not in msg["route"]:
            return
        ctx = PaymentCtx(h, msg["amount"], msg["route"], msg["sids"],
                         msg["expiries"], pos=msg["route"].index(self.pid))
        self._register(ctx)

    def _on_preimage(self, msg: dict) -> None:
        h, x = msg.get("h"), msg.get("x")
        if not isinstance(x, bytes):
            return
        if self.suite.hash_obj(x, tag=PREIMAGE_TAG) != h:
            return
        ctx = self.payments.get(h)
        if ctx is None:
            return
        if ctx.x is None:
            ctx.x = x
        if not self.honest:
            return
        if ctx.out_sid is None:
            ent = self._entry(ctx, ctx.in_sid)
            if ent is not None and ent[E_STATUS] == INFLIGHT:
                self._engage(ctx, ent)
        else:
            # an echoed preimage doubles as the delivery signal for the
            # party that originated the payment
            self._try_complete_out(ctx)

    # -- entry transitions -------------------------------------------------------

    def _on_entry(self, sid: str, h: bytes, e: tuple, old_status,
                  via: str) -> None:
        ctx = self.payments.get(h)
        if ctx is None:
            return
        status = e[E_STATUS]
        if status == INFLIGHT and old_status is None:
            self._arm_lapsed(ctx, sid)
        if status == INFLIGHT and old_status is None and sid == ctx.in_sid:
            if ctx.out_sid is None:
                if self.honest and ctx.x is not None:
                    self._engage(ctx, e)
            elif not ctx.forwarded:
                ctx.forwarded = True
                out_ch = self.channels[ctx.out_sid]
                # a window the next hop can no longer claim in is dead money;
                # refuse it no matter the policy
                viable = self.sim.now + self.delta + 1 <= ctx.out_expiry
                if (viable and e[E_AMOUNT] == ctx.amount
                        and out_ch.spendable() >= ctx.amount):
                    out_ch.submit_op(("open", h, ctx.amount, ctx.out_expiry))
                elif self.honest:
                    self.channels[sid].submit_op(("cancel", h))
        elif status == CANCELLED and sid == ctx.out_sid and self.honest:
            ent = self._entry(ctx, ctx.in_sid)
            if ent is not None and ent[E_STATUS] == INFLIGHT:
                self.channels[ctx.in_sid].submit_op(("cancel", h))
        elif status == COMPLETED and sid == ctx.in_sid and self.honest:
            self._try_complete_out(ctx)

    def _engage(self, ctx: PaymentCtx, e: tuple) -> None:
        if ctx.engaged:
            return
        if e[E_AMOUNT] < ctx.amount:
            return
        if e[E_EXPIRY] - self.sim.now < self.delta + 1:
            return   # too late to still secure it on-chain: stay out
        ctx.engaged = True
        for q in ctx.route:
            if q != self.pid:
                self.sim.send(self.pid, q,
                              {"kind": "PREIMAGE", "h": ctx.h, "x": ctx.x})

    def _try_complete_out(self, ctx: PaymentCtx) -> None:
        if not self.honest or ctx.out_sid is None or ctx.x is None:
            return
        if ctx.complete_sent:
            return
        ent = self._entry(ctx, ctx.out_sid)
        if ent is None or ent[E_STATUS] != INFLIGHT:
            return
        if ctx.in_sid is not None and not self._in_secured(ctx):
            return
        ctx.complete_sent = True
        self.channels[ctx.out_sid].submit_op(("complete", ctx.h))

    def _in_secured(self, ctx: PaymentCtx) -> bool:
        ent = self._entry(ctx, ctx.in_sid)
        if ent is None:
            return False
        if ent[E_STATUS] == COMPLETED:
            return True
        if ent[E_STATUS] == DISPUTED:
            adj = self.chain.read(self.pid,
                                  self.channels[ctx.in_sid].contract,
                                  "adjudicated")
            return bool(adj.get(ctx.h)) if isinstance(adj, dict) else False
        # still inflight: safe if we can yet register the preimage in time,
        # or someone already did
        return (self.sim.now <= ctx.in_expiry - self.delta
                or self._published_view(ctx.h, ctx.in_expiry))

    # -- deadline actions -----------------------------------------------------

    def _at_crit(self, h: bytes) -> None:
        ctx = self.payments.get(h)
        if ctx is None or ctx.x is None or ctx.published_sent:
            return
        ent = self._entry(ctx, ctx.in_sid)
        if ent is not None and ent[E_STATUS] == INFLIGHT:
            ctx.published_sent = True
            self.chain.submit(self.pid, self.pm, "publish", (ctx.x,))

    def _at_expiry_out(self, h: bytes) -> None:
        ctx = self.payments.get(h)
        if ctx is None:
            return
        ent = self._entry(ctx, ctx.out_sid)
        if (ent is not None and ent[E_STATUS] == INFLIGHT
                and self._published_view(h, ctx.out_expiry)):
            self.channels[ctx.out_sid].submit_op(("complete", h))

    def _at_expiry_in(self, h: bytes) -> None:
        ctx = self.payments.get(h)
        if ctx is None:
            return
        ent = self._entry(ctx, ctx.in_sid)
        if (ent is not None and ent[E_STATUS] == INFLIGHT
                and not self._published_view(h, ctx.in_expiry)):
            self.channels[ctx.in_sid].submit_op(("cancel", h))

    def _at_dispute_in(self, h: bytes) -> None:
        ctx = self.payments.get(h)
        if ctx is not None:
            self._dispute(ctx, ctx.in_sid)

    def _at_dispute_out(self, h: bytes) -> None:
        ctx = self.payments.get(h)
        if ctx is not None:
            self._dispute(ctx, ctx.out_sid)

    def _dispute(self, ctx: PaymentCtx, sid: Optional[str]) -> None:
        ent = self._entry(ctx, sid)
        if ent is not None and ent[E_STATUS] == INFLIGHT:
            self.channels[sid].submit_op(("dispute", ctx.h), urgent=True)


# -- expiry schedules ------------------------------------------------------------


def sprites_expiries(t0: Ticks, n_parties: int, delta: int) -> tuple:
    """One shared expiry, sized for full off-chain propagation plus delta."""
    return (t0 + HOP_TICKS * n_parties + delta,) * (n_parties - 1)


def ladder_expiries(t0: Ticks, n_parties: int, delta: int,
                    *, headroom: int = PUBLISH_HEADROOM,
                    rung: int = LADDER_RUNG) -> tuple:
    """Decreasing per-hop expiries: the hop nearest the recipient expires
    first; each hop toward the sender adds delta+rung reaction time."""
    hops = n_parties - 1
    t_last = t0 + HOP_TICKS * hops + delta + headroom
    return tuple(t_last + (hops - 1 - i) * (delta + rung)
                 for i in range(hops))


# -- whole-payment harness ----------------------------------------------------------


@dataclass
class HopLock:
    sid: str
    status: Optional[str]          # None if the hop never opened
    paid: Optional[bool]           # True -> payee, False -> opener, None open/never
    t_open: Optional[Ticks]
    t_release: Optional[Ticks]


@dataclass
class LinkedRunResult:
    h: bytes
    amount: Money
    route: tuple[str, ...]
    sids: tuple[str, ...]
    expiries: tuple[Ticks, ...]
    honest: tuple[bool, ...]
    start: Ticks
    delta: int
    slack: int
    adversarial_chain: bool
    capacity_ok: bool
    success: bool
    engaged: bool
    published_at: Optional[Ticks]
    hops: list[HopLock]
    nets: dict[str, Money]
    collateral: Money              # coin-ticks locked across all hops
    problems: list[str]
    chain: Chain
    nodes: list[LinkedNode]
    contracts: list[ContractLinked]
    pm: ContractPM
    monitor: LemmaMonitor


def hop_lock_durations(res: LinkedRunResult) -> list[Ticks]:
    return [hop.t_release - hop.t_open for hop in res.hops
            if hop.t_open is not None and hop.t_release is not None]


class FLinkedOracle:
    """Ideal linked payment: every opened hop settles by its deadline, value
    moves atomically along the path, honest intermediaries break even, and
    the endpoints gain/lose the amount exactly when their edge hop paid."""

    def check(self, res: LinkedRunResult) -> list[str]:
        problems: list[str] = []
        x_amt = res.amount
        paid = [hop.paid for hop in res.hops]
        extra = (5 * res.delta + 6) if res.adversarial_chain else (2 * res.delta + 3)
        for i, hop in enumerate(res.hops):
            if hop.t_open is None:
                if hop.status is not None:
                    problems.append(f"hop {i}: status {hop.status} without open")
                continue
            if hop.status not in TERMINAL or paid[i] is None:
                problems.append(f"hop {i}: never settled (status {hop.status})")
                continue
            deadline = res.expiries[i] + res.delta + res.slack + extra
            if hop.t_release is None or hop.t_release > deadline:
                problems.append(
                    f"hop {i}: released at {hop.t_release} > deadline {deadline}")
        for i in range(len(res.hops) - 1):
            if paid[i + 1] is True and paid[i] is not True:
                problems.append(
                    f"hop {i + 1} paid but upstream hop {i} was not")
        expected = {pid: 0 for pid in res.route}
        settled = [p is True for p in paid]
        for i, pid in enumerate(res.route):
            if i > 0 and settled[i - 1]:
                expected[pid] += x_amt
            if i < len(res.sids) and settled[i]:
                expected[pid] -= x_amt
        for i, pid in enumerate(res.route):
            if res.nets.get(pid, 0) != expected[pid]:
                problems.append(
                    f"{pid}: net {res.nets.get(pid)} != expected {expected[pid]}")
            if res.honest[i] and 0 < i < len(res.route) - 1 and res.nets.get(pid, 0) != 0:
                problems.append(f"honest intermediary {pid} net "
                                f"{res.nets.get(pid)} != 0")
        if sum(res.nets.values()) != 0:
            problems.append(f"nets do not cancel: {res.nets}")
        if res.honest[-1] and res.engaged and paid and paid[-1] is not True:
            problems.append("honest engaged recipient was not paid")
        for i, (sid, c) in enumerate(zip(res.sids, res.contracts)):
            left = res.nodes[i].channels[sid].engine
            right = res.nodes[i + 1].channels[sid].engine
            problems += verify_channel_fold(c, [left, right])
            escrow = c.chain.escrow[c.address]
            if sum(c.deposits) - c.adjud_total - sum(c.paid) != escrow:
                problems.append(f"{c.address}: escrow identity broken")
            state = left.state
            for side in (0, 1):
                if c.deposits[side] + state[1][side][CRED] < 0:
                    problems.append(f"{c.address}: side {side} worth negative")
                if c.paid[side] > state[1][side][WDTOT]:
                    problems.append(f"{c.address}: side {side} overpaid")
        # Pure off-chain completion is only promised when nothing slows the
        # run down; with hostile delays the chain fallback is the protocol
        # working, and a starved window may atomically refund instead.
        if all(res.honest) and res.capacity_ok and not res.adversarial_chain:
            if not res.success:
                problems.append("all-honest payment did not complete")
            if res.published_at is not None:
                problems.append("all-honest payment touched the registry")
            if any(hop.status != COMPLETED for hop in res.hops):
                problems.append("all-honest run left a hop uncompleted")
            noisy = [rec for rec in res.chain.tx_log
                     if rec.method not in ("deposit",)]
            if noisy:
                problems.append(
                    f"all-honest run used the chain beyond deposits: "
                    f"{[rec.method for rec in noisy]}")
        return problems


def _adjudication_time(chain: Chain, address: str, h: bytes) -> Optional[Ticks]:
    for rec in chain.tx_log:
        for ev in rec.events:
            if (ev.name == "EventAdjudicate" and ev.emitter == address
                    and ev.args[0] == h):
                return ev.emitted_at
    return None


def run_linked_payment(
    n_parties: int,
    amount: Money = 100,
    *,
    delta: int = 6,
    model: str = SPRITES,
    honest: Optional[Sequence[bool]] = None,
    deposits: Optional[Sequence[tuple[Money, Money]]] = None,
    seed: int = 0,
    start: Optional[Ticks] = None,
    slack: int = DISPUTE_SLACK,
    tx_delay=None,
    event_delay=None,
    read_lag=None,
    delay_policy=None,
) -> LinkedRunResult:
    """Build a path of linked payment channels, run one payment end to end,
    and return the audited outcome."""
    if n_parties < 2:
        raise ValueError("need at least sender and recipient")
    route = tuple(f"P{i + 1}" for i in range(n_parties))
    sids = tuple(f"C{i + 1}" for i in range(n_parties - 1))
    hflags = tuple(honest) if honest is not None else (True,) * n_parties
    adversarial = any(k is not None
                      for k in (tx_delay, event_delay, read_lag, delay_policy))
    sim = Simulator(seed=seed, message_delay_bound=delta,
                    delay_policy=delay_policy)
    chain = Chain(sim, delta, tx_delay=tx_delay, event_delay=event_delay,
                  read_lag=read_lag)
    suite = CryptoSuite(seed=seed + 1, clock=lambda: sim.now)
    monitor = LemmaMonitor(suite, delta)
    pm = chain.deploy(ContractPM("PM", suite))
    contracts = [
        chain.deploy(ContractLinked(f"X{i + 1}", sid,
                                    (route[i], route[i + 1]), suite, "PM"))
        for i, sid in enumerate(sids)
    ]
    nodes = [LinkedNode(sim, chain, suite, pid, "PM",
                        honest=hflags[i], slack=slack)
             for i, pid in enumerate(route)]
    deps = list(deposits) if deposits is not None else [(amount, 0)] * len(sids)
    for i, sid in enumerate(sids):
        pair = (route[i], route[i + 1])
        for side in (0, 1):
            nodes[i + side].join(sid, pair, f"X{i + 1}", monitor=monitor)
            if deps[i][side] > 0:
                chain.mint(pair[side], deps[i][side])
                nodes[i + side].channels[sid].deposit(deps[i][side])
    t0 = start if start is not None else 2 * delta + 2
    if model == SPRITES:
        expiries = sprites_expiries(t0, n_parties, delta)
    elif model == HTLC:
        expiries = ladder_expiries(t0, n_parties, delta)
    else:
        raise ValueError(f"unknown model {model!r}")
    sim.schedule(t0, None,
                 lambda e: nodes[0].start_payment(route, sids, amount,
                                                  expiries),
                 kind="payment-start", source=route[0])
    horizon = max(expiries) + slack + 10 * delta + 80
    sim.run_until(horizon)
    chain.assert_conservation()

    h = next(iter(nodes[0].payments), None)
    hops: list[HopLock] = []
    nets: dict[str, Money] = {pid: 0 for pid in route}
    collateral: Money = 0
    for i, sid in enumerate(sids):
        c = contracts[i]
        left = nodes[i].channels[sid]
        right = nodes[i + 1].channels[sid]
        ent = left.entries().get(h) if h is not None else None
        status = ent[E_STATUS] if ent is not None else None
        if status == COMPLETED:
            paid = True
        elif status == CANCELLED:
            paid = False
        elif status == DISPUTED:
            paid = c.adjudicated.get(h)
        else:
            paid = None
        logs = [p.entry_log.get(h) for p in (left, right) if h is not None]
        logs = [lg for lg in logs if lg is not None]
        t_open = min((lg["open"] for lg in logs), default=None)
        ends = [lg["end"] for lg in logs if lg["end"] is not None]
        t_release = min(ends, default=None)
        if status == DISPUTED:
            adj = _adjudication_time(chain, c.address, h)
            if adj is not None:
                t_release = adj
        hops.append(HopLock(sid, status, paid, t_open, t_release))
        if t_open is not None:
            t_end = t_release if t_release is not None else sim.now
            collateral += amount * (t_end - t_open)
        state = left.engine.state
        for side, pid in enumerate((route[i], route[i + 1])):
            worth = c.deposits[side] + state[1][side][CRED]
            nets[pid] += worth - deps[i][side]
    recipient_ctx = nodes[-1].payments.get(h) if h is not None else None
    res = LinkedRunResult(
        h=h if h is not None else b"",
        amount=amount, route=route, sids=sids, expiries=expiries,
        honest=hflags, start=t0, delta=delta, slack=slack,
        adversarial_chain=adversarial,
        capacity_ok=all(d[0] >= amount for d in deps),
        success=bool(hops) and hops[-1].paid is True,
        engaged=bool(recipient_ctx.engaged) if recipient_ctx else False,
        published_at=pm.published.get(h) if h is not None else None,
        hops=hops, nets=nets, collateral=collateral, problems=[],
        chain=chain, nodes=nodes, contracts=contracts, pm=pm, monitor=monitor)
    res.problems = FLinkedOracle().check(res)
    honest_pids = {pid for pid, hf in zip(route, hflags) if hf}
    for sid, c in zip(sids, contracts):
        res.problems += monitor.check(chain, c.address, sid, honest_pids)
    return res
