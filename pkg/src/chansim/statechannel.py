"""Duplex state channels: off-chain rounds with an on-chain fallback.

A channel runs an application-defined update function ``U`` over numbered
rounds.  Off-chain, the first party acts as leader: it collects inputs,
applies ``U``, and circulates the result for signatures
(INPUT -> BATCH -> SIGN -> COMMIT).  A committed round is a full set of
signatures over ``(sid, r, state, out)`` and can be presented to the contract
as *evidence* at any time.

If the fast path stalls — a peer withholds a message, or delivery is slow —
any party escalates: it submits its newest evidence, its own input for the
next round ``r``, and ``dispute(r)``.  The contract then opens a window of
``Δ`` ticks during which parties may land their inputs on-chain; after the
deadline anyone may call ``resolve(r)``, which applies ``U`` to the inputs
that made it (missing ones default) and emits the result.  A full-signature
``evidence(r)`` for the disputed round cancels the dispute instead.

Time enters ``U`` explicitly through :class:`UpdateContext`: off-chain the
leader stamps the batch with the chain time its auxiliary read reflects
(``asof``); on-chain the contract uses the confirmation tick.  Since ``asof``
always lies in the past, stale stamps can only make time guards more
conservative, never anticipate them.

Aux outputs (e.g. withdrawals) are part of the signed tuple and fire on-chain
at most once per round, whenever that round's evidence or resolution first
lands; application contracts are expected to make them idempotent across
rounds (cumulative totals, not increments).

Dispute pause rule: a party that observes ``EventDispute(r, ·)`` before the
COMMIT for ``r`` reaches it buffers any late COMMIT and lets the on-chain
path settle ``r``; it never signs ``r+1`` in between.  Inputs that a settled
round did not consume stay queued and are re-announced for the next round.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

from .chainenv import CallContext, Chain, Contract
from .cryptosuite import CryptoSuite, Signature
from .simkernel import EventHandle, Simulator, Ticks

FLAG_OK = "OK"
FLAG_DISPUTE = "DISPUTE"


@dataclass(frozen=True)
class UpdateContext:
    aux_in: Any
    now: Ticks


class UpdateFunction:
    """Deterministic application transition used both off- and on-chain.

    ``apply`` must be a pure function of its arguments; states must be
    immutable values (tuples, ints, bytes, strings, None).
    """

    def initial_state(self, n: int) -> Any:
        raise NotImplementedError

    def default_input(self) -> Any:
        return None

    def apply(self, state: Any, inputs: tuple, ctx: UpdateContext) -> tuple[Any, Any]:
        raise NotImplementedError


def round_payload(sid: str, r: int, state: Any, out: Any) -> tuple:
    """The tuple every party signs for a committed round."""
    return ("round", sid, r, state, out)


class ContractState(Contract):
    """On-chain arbiter: best signed round wins; disputes force progress."""

    READABLE = ("best_round", "state", "flag", "deadline", "dispute_round",
                "inputs", "settled")

    def __init__(self, address: str, sid: str, parties: Sequence[str],
                 u: UpdateFunction, suite: CryptoSuite):
        super().__init__(address)
        self.sid = sid
        self.parties = tuple(parties)
        self.u = u
        self.suite = suite
        self.best_round = -1
        self.state = u.initial_state(len(self.parties))
        self.flag = FLAG_OK
        self.deadline: Optional[Ticks] = None
        self.dispute_round: Optional[int] = None
        self.inputs: dict[tuple[int, int], Any] = {}
        self.settled: dict[int, str] = {}     # r -> "off" | "on"
        self.round_log: dict[int, tuple] = {}  # resolved rounds: (vec, aux, now)
        self._applied: set[int] = set()

    # Subclasses supply auxiliary input (e.g. on-chain deposits) for U and
    # interpret aux outputs (e.g. withdrawals).
    def aux_input(self) -> Any:
        return None

    def apply_aux_output(self, r: int, out: Any) -> None:
        pass

    def _sigs_ok(self, r: int, state: Any, out: Any, sigs: Sequence) -> bool:
        if len(sigs) != len(self.parties):
            return False
        payload = round_payload(self.sid, r, state, out)
        return all(
            isinstance(sig, Signature) and self.suite.verify(p, payload, sig)
            for p, sig in zip(self.parties, sigs)
        )

    def m_evidence(self, ctx: CallContext, r: int, state: Any, out: Any,
                   sigs: Sequence) -> None:
        self.require(isinstance(r, int) and r >= 0, "bad round")
        self.require(self._sigs_ok(r, state, out, tuple(sigs)), "bad signatures")
        if r > self.best_round:
            self.best_round = r
            self.state = state
            self.settled[r] = "off"
            if self.flag == FLAG_DISPUTE:
                # any newer agreed round supersedes the pending dispute
                self.flag = FLAG_OK
                self.deadline = None
                self.dispute_round = None
            self.emit("EventOffchain", r, self.best_round, state)
        self._fire_out(r, out)

    def m_dispute(self, ctx: CallContext, r: int) -> None:
        self.require(ctx.sender in self.parties, "not a party")
        self.require(self.flag == FLAG_OK, "dispute already active")
        self.require(r == self.best_round + 1, "wrong round")
        self.flag = FLAG_DISPUTE
        self.dispute_round = r
        self.deadline = ctx.now + self.chain.delta
        self.emit("EventDispute", r, self.deadline)

    def m_input(self, ctx: CallContext, r: int, v: Any) -> None:
        self.require(ctx.sender in self.parties, "not a party")
        self.require(isinstance(r, int) and r > self.best_round, "round settled")
        key = (r, self.parties.index(ctx.sender))
        self.require(key not in self.inputs, "input already recorded")
        self.inputs[key] = v
        self.emit("EventInput", r, key[1])

    def m_resolve(self, ctx: CallContext, r: int) -> None:
        self.require(self.flag == FLAG_DISPUTE, "no dispute")
        self.require(r == self.dispute_round, "wrong round")
        self.require(ctx.now >= self.deadline, "deadline not reached")
        vec = tuple(self.inputs.get((r, i), self.u.default_input())
                    for i in range(len(self.parties)))
        aux = self.aux_input()
        self.round_log[r] = (vec, aux, ctx.now)
        state, out = self.u.apply(self.state, vec, UpdateContext(aux, ctx.now))
        self.best_round = r
        self.state = state
        self.settled[r] = "on"
        self.flag = FLAG_OK
        self.deadline = None
        self.dispute_round = None
        self.emit("EventOnchain", r, self.best_round, state)
        self._fire_out(r, out)

    def _fire_out(self, r: int, out: Any) -> None:
        if r in self._applied:
            return
        self._applied.add(r)
        if out is not None:
            self.apply_aux_output(r, out)


class HonestPolicy:
    """Cooperate with every well-formed step and escalate on silence."""

    def should_batch(self, r: int, inputs: tuple) -> bool:
        return True

    def should_sign(self, r: int, inputs: tuple, state: Any, out: Any) -> bool:
        return True

    def escalates(self) -> bool:
        return True


@dataclass
class RoundRecord:
    r: int
    inputs: tuple
    state: Any
    out: Any
    aux_in: Any
    asof: Ticks
    sigs: dict = field(default_factory=dict)    # party -> Signature


@dataclass(frozen=True)
class Timing:
    """Fast-path pacing.  One tick is the worst honest message delay."""

    delta: int
    batch_wait: int = 2      # leader: round trigger -> BATCH goes out
    sign_grace: int = 3      # leader: BATCH out -> escalate if sigs missing
    commit_grace: int = 3    # signer: SIGN out -> escalate if no COMMIT
    input_grace: int = 7     # announcer: INPUT out -> escalate if no commit


class PartyHub:
    """One principal's mailbox, shared by all channels it participates in.

    Channel engines register here instead of claiming the party's name on the
    simulator directly, so a node can sit on many channels at once.
    """

    def __init__(self, sim: Simulator, pid: str):
        self.sim = sim
        self.pid = pid
        self.engines: dict[str, "StateChannelParty"] = {}
        self.fallback: Optional[Callable] = None   # non-channel traffic
        sim.register(pid, self._route)

    def add(self, engine: "StateChannelParty") -> None:
        self.engines[engine.sid] = engine

    def _route(self, event) -> None:
        engine = self.engines.get(event.payload.get("sid"))
        if engine is not None:
            engine._on_message(event)
        elif self.fallback is not None:
            self.fallback(event)


class StateChannelParty:
    """One participant's protocol engine for a single channel."""

    def __init__(self, sim: Simulator, chain: Chain, suite: CryptoSuite,
                 sid: str, pid: str, parties: Sequence[str], contract: str,
                 u: UpdateFunction, timing: Timing,
                 app: Any = None, policy: Any = None,
                 monitor: "LemmaMonitor | None" = None,
                 hub: Optional[PartyHub] = None):
        self.sim = sim
        self.chain = chain
        self.suite = suite
        self.sid = sid
        self.pid = pid
        self.parties = tuple(parties)
        self.idx = self.parties.index(pid)
        self.contract = contract
        self.u = u
        self.timing = timing
        self.app = app
        self.policy = policy or HonestPolicy()
        self.monitor = monitor

        self.is_leader = self.idx == 0
        self.leader = self.parties[0]
        self.r_last = -1
        self.state = u.initial_state(len(self.parties))
        self.queue: deque = deque()          # local inputs awaiting a round
        self.records: dict[int, RoundRecord] = {}
        self.commits: dict[int, RoundRecord] = {}
        self.commit_seen_at: dict[int, Ticks] = {}
        self.paused_round: Optional[int] = None
        self.buffered_commits: dict[int, RoundRecord] = {}
        self.announced: Optional[tuple[int, Any]] = None   # (r, v) sent to leader
        self.onchain_inputs: dict[int, Any] = {}           # r -> v we put on-chain
        self.escalated: set[int] = set()
        self.evidenced: set[int] = set()
        self.inflight: Optional[int] = None                # leader: round gathering
        self.claims: dict[str, tuple[int, Any]] = {}       # leader: pid -> (r, v)
        self._timers: dict[str, EventHandle] = {}
        self._adopt_pending: set[int] = set()

        suite.register(pid)
        if hub is None:
            sim.register(pid, self._on_message)
        else:
            hub.add(self)
        chain.subscribe(pid, contract, self._on_chain_event)
        if monitor is not None:
            monitor.attach_party(self)

    # -- public -------------------------------------------------------------

    def submit_input(self, v: Any) -> None:
        """Queue an application input; it stays queued until some round
        (off- or on-chain) consumes it."""
        self.queue.append(v)
        self._announce()

    def escalate_now(self) -> None:
        """Application-driven escalation (e.g. a dispute deadline)."""
        self._escalate("app")

    def submit_evidence(self) -> None:
        """Push the newest committed round on-chain (fires its aux output)."""
        self._submit_evidence()

    @property
    def next_round(self) -> int:
        return self.r_last + 1

    # -- fast path ----------------------------------------------------------

    def _announce(self) -> None:
        if not self.queue or self.paused_round is not None:
            return
        r = self.next_round
        if self.announced is not None and self.announced[0] >= r:
            return
        v = self.queue[0]
        self.announced = (r, v)
        if self.is_leader:
            self.claims[self.pid] = (r, v)
            self._maybe_start_round()
        else:
            self.sim.send(self.pid, self.leader,
                          {"kind": "INPUT", "sid": self.sid, "r": r, "v": v})
            self._arm("input", self.timing.input_grace, lambda: self._escalate("input-timeout"))

    def _maybe_start_round(self) -> None:
        if not self.is_leader or self.inflight is not None or self.paused_round is not None:
            return
        r = self.next_round
        if not any(cr == r for cr, _ in self.claims.values()):
            return
        self.inflight = r
        self._arm("batch", self.timing.batch_wait, lambda: self._do_batch(r))

    def _do_batch(self, r: int) -> None:
        if self.inflight != r or self.paused_round is not None or r != self.next_round:
            return
        vec = [self.u.default_input()] * len(self.parties)
        for pid, (cr, v) in self.claims.items():
            if cr == r:
                vec[self.parties.index(pid)] = v
        vec = tuple(vec)
        if not self.policy.should_batch(r, vec):
            self.inflight = None
            return
        asof, aux_in = self._read_aux()
        state, out = self.u.apply(self.state, vec, UpdateContext(aux_in, asof))
        rec = RoundRecord(r, vec, state, out, aux_in, asof)
        rec.sigs[self.pid] = self._sign_round(rec)
        self.records[r] = rec
        for p in self.parties[1:]:
            self.sim.send(self.pid, p, {
                "kind": "BATCH", "sid": self.sid, "r": r, "inputs": vec,
                "aux_in": aux_in, "asof": asof, "state": state, "out": out,
            })
        self._arm("sign", self.timing.sign_grace, lambda: self._escalate("sign-timeout"))

    def _read_aux(self) -> tuple[Ticks, Any]:
        fields = getattr(self.u, "AUX_FIELDS", None)
        if not fields:
            return self.sim.now, None
        view, vals = self.chain.snapshot_view(self.pid, self.contract, fields)
        aux = tuple(vals[f] for f in fields)
        return view, aux[0] if len(fields) == 1 else aux

    def _sign_round(self, rec: RoundRecord) -> Signature:
        payload = round_payload(self.sid, rec.r, rec.state, rec.out)
        if self.monitor is not None:
            self.monitor.note_payload(self.sid, rec.r, self.suite.hash_obj(payload, tag="sig"))
        return self.suite.sign(self.pid, payload)

    def _on_message(self, event) -> None:
        msg = event.payload
        if msg.get("sid") != self.sid:
            return
        kind = msg["kind"]
        if kind == "INPUT" and self.is_leader:
            self.claims[event.source] = (msg["r"], msg["v"])
            self._maybe_start_round()
        elif kind == "BATCH" and not self.is_leader:
            self._on_batch(msg)
        elif kind == "SIGN" and self.is_leader:
            self._on_sign(event.source, msg)
        elif kind == "COMMIT" and not self.is_leader:
            self._on_commit(msg)

    def _on_batch(self, msg: dict) -> None:
        r = msg["r"]
        if r != self.next_round or self.paused_round is not None or r in self.records:
            return
        vec = tuple(msg["inputs"])
        mine = vec[self.idx]
        if mine is not None and (self.announced is None or self.announced[1] != mine):
            # leader attributed an input to us that we never sent
            self._escalate("forged-input")
            return
        asof = msg["asof"]
        if not (asof < self.sim.now and self.sim.now - asof
                <= 2 * self.timing.delta + self.timing.batch_wait):
            self._escalate("stale-batch")
            return
        state, out = self.u.apply(self.state, vec, UpdateContext(msg["aux_in"], asof))
        if state != msg["state"] or out != msg["out"]:
            self._escalate("bad-batch")
            return
        if not self.policy.should_sign(r, vec, state, out):
            return
        rec = RoundRecord(r, vec, state, out, msg["aux_in"], asof)
        sig = self._sign_round(rec)
        rec.sigs[self.pid] = sig
        self.records[r] = rec
        self.sim.send(self.pid, self.leader,
                      {"kind": "SIGN", "sid": self.sid, "r": r, "sig": sig})
        self._arm("commit", self.timing.commit_grace, lambda: self._escalate("commit-timeout"))

    def _on_sign(self, source: str, msg: dict) -> None:
        r = msg["r"]
        rec = self.records.get(r)
        if rec is None or r <= self.r_last or source not in self.parties:
            return
        payload = round_payload(self.sid, r, rec.state, rec.out)
        if not self.suite.verify(source, payload, msg["sig"]):
            return
        rec.sigs[source] = msg["sig"]
        if len(rec.sigs) == len(self.parties):
            self._disarm("sign")
            sigs = tuple(rec.sigs[p] for p in self.parties)
            for p in self.parties[1:]:
                self.sim.send(self.pid, p, {"kind": "COMMIT", "sid": self.sid,
                                            "r": r, "sigs": sigs})
            self.inflight = None
            self.claims = {p: c for p, c in self.claims.items() if c[0] > r}
            self._adopt_commit(rec)

    def _on_commit(self, msg: dict) -> None:
        r = msg["r"]
        rec = self.records.get(r)
        if rec is None or r <= self.r_last:
            return
        payload = round_payload(self.sid, r, rec.state, rec.out)
        sigs = tuple(msg["sigs"])
        if len(sigs) != len(self.parties) or not all(
                self.suite.verify(p, payload, s) for p, s in zip(self.parties, sigs)):
            return
        for p, s in zip(self.parties, sigs):
            rec.sigs[p] = s
        if self.paused_round == r:
            # dispute for r reached us first: let the chain settle it
            self.buffered_commits[r] = rec
            return
        self._adopt_commit(rec)

    def _adopt_commit(self, rec: RoundRecord) -> None:
        self.commits[rec.r] = rec
        self.commit_seen_at[rec.r] = self.sim.now
        prev = self.state
        self.r_last = rec.r
        self.state = rec.state
        self._disarm("input")
        self._disarm("commit")
        self._consume_if_matches(rec.r, rec.inputs[self.idx])
        self._notify_app(rec.r, prev, "offchain")
        self._announce()
        if self.is_leader:
            self._maybe_start_round()

    def _consume_if_matches(self, r: int, committed_v: Any) -> None:
        if self.announced is not None and self.announced[0] <= r:
            if committed_v is not None and self.queue and committed_v == self.queue[0]:
                self.queue.popleft()
            self.announced = None

    def _notify_app(self, r: int, prev_state: Any, via: str) -> None:
        if self.app is not None:
            self.app.on_round(self.pid, r, self.state, prev_state, via)

    # -- escalation and chain events -----------------------------------------

    def _escalate(self, why: str) -> None:
        if not self.policy.escalates():
            return
        self._force_escalate(why)

    def _force_escalate(self, why: str) -> None:
        r = self.next_round
        if r in self.escalated or self.paused_round is not None:
            return
        self.escalated.add(r)
        self.sim.log_note("escalate", self.pid, f"{self.sid} r={r} ({why})")
        self._submit_evidence()
        if self.queue and r not in self.onchain_inputs:
            self.onchain_inputs[r] = self.queue[0]
            self.chain.submit(self.pid, self.contract, "input", (r, self.queue[0]))
        self.chain.submit(self.pid, self.contract, "dispute", (r,))
        # A dispute confirming ahead of our own evidence is discarded by the
        # contract; by delta+1 every tx of this batch has confirmed, so one
        # blind re-submission restores liveness (duplicates discard no-op).
        self._arm(f"redispute{r}", self.timing.delta + 1,
                  lambda: self._retry_dispute(r))

    def _retry_dispute(self, r: int) -> None:
        if self.paused_round is not None or self.next_round != r:
            return
        self.chain.submit(self.pid, self.contract, "dispute", (r,))

    def _submit_evidence(self) -> None:
        r = self.r_last
        if r < 0 or r in self.evidenced or r not in self.commits:
            return
        rec = self.commits[r]
        sigs = tuple(rec.sigs[p] for p in self.parties)
        self.evidenced.add(r)
        self.chain.submit(self.pid, self.contract, "evidence",
                          (r, rec.state, rec.out, sigs))

    def _on_chain_event(self, ev) -> None:
        name, args = ev.name, ev.args
        if name == "EventDispute":
            self._on_dispute_event(args[0], args[1])
        elif name in ("EventOffchain", "EventOnchain"):
            r = args[0]
            if r > self.r_last:
                self._try_adopt(r)
        # EventInput needs no reaction

    def _on_dispute_event(self, r: int, deadline: Ticks) -> None:
        if self.monitor is not None:
            self.monitor.note_dispute_seen(self.sid, self.pid, r, deadline,
                                           had_commit=r in self.commits)
        if r <= self.r_last:
            # we already hold an agreed round >= r: present it
            self.evidenced.discard(self.r_last)
            self._submit_evidence()
            return
        self.paused_round = r
        self._disarm("input")
        self._disarm("commit")
        if (self.announced is not None and self.announced[0] == r
                and r not in self.onchain_inputs):
            self.onchain_inputs[r] = self.announced[1]
            self.chain.submit(self.pid, self.contract, "input", (r, self.announced[1]))
        at = self.sim.now + self.timing.delta
        self.sim.schedule(at, r, lambda e: self._try_resolve(e.payload),
                          kind="resolve-timer", source=self.pid)

    def _try_resolve(self, r: int) -> None:
        if self.r_last >= r:
            return
        self.chain.submit(self.pid, self.contract, "resolve", (r,))

    def _try_adopt(self, r: int) -> None:
        if r <= self.r_last:
            return
        view, vals = self.chain.snapshot_view(
            self.pid, self.contract,
            ("best_round", "state", "inputs", "settled"))
        if vals["best_round"] < r:
            # our view has not caught up with the announced settlement yet
            if r not in self._adopt_pending:
                self._adopt_pending.add(r)
                self.sim.schedule(self.sim.now + 1, r,
                                  lambda e: (self._adopt_pending.discard(r),
                                             self._try_adopt(e.payload)),
                                  kind="adopt-retry", source=self.pid)
            return
        adopted = vals["best_round"]
        if adopted <= self.r_last:
            return
        prev = self.state
        if self.announced is not None and self.announced[0] <= adopted:
            rr, v = self.announced
            if vals["settled"].get(rr) == "on":
                got = vals["inputs"].get((rr, self.idx))
            else:
                rec = self.records.get(rr)
                got = rec.inputs[self.idx] if rec is not None else None
            if got == v and self.queue and self.queue[0] == v:
                self.queue.popleft()
            self.announced = None
        self.r_last = adopted
        self.state = vals["state"]
        self._disarm("input")
        self._disarm("commit")
        if self.paused_round is not None and self.paused_round <= adopted:
            self.paused_round = None
        self.buffered_commits = {k: c for k, c in self.buffered_commits.items()
                                 if k > adopted}
        if self.is_leader:
            if self.inflight is not None and self.inflight <= adopted:
                self.inflight = None
                self._disarm("batch")
            self.claims = {p: c for p, c in self.claims.items() if c[0] > adopted}
        self._notify_app(adopted, prev, "onchain")
        self._announce()
        if self.is_leader:
            self._maybe_start_round()

    # -- timers ---------------------------------------------------------------

    def _arm(self, name: str, after: Ticks, fn: Callable[[], None]) -> None:
        self._disarm(name)
        self._timers[name] = self.sim.schedule(
            self.sim.now + after, None, lambda e: fn(),
            kind=f"{name}-timer", source=self.pid)

    def _disarm(self, name: str) -> None:
        h = self._timers.pop(name, None)
        if h is not None:
            h.cancel()


class FStateOracle:
    """Ideal channel: folds U over per-round input vectors.

    The protocol above, run against any delivery schedule, must land on
    exactly this state sequence for the rounds it settles.
    """

    def __init__(self, u: UpdateFunction, n: int):
        self.u = u
        self.n = n

    def fold(self, rounds: Sequence[tuple[tuple, Any, Ticks]]) -> list[tuple[Any, Any]]:
        state = self.u.initial_state(self.n)
        trace = []
        for vec, aux_in, now in rounds:
            vec = tuple(self.u.default_input() if v is None else v for v in vec)
            state, out = self.u.apply(state, vec, UpdateContext(aux_in, now))
            trace.append((state, out))
        return trace

    def final_state(self, rounds: Sequence[tuple[tuple, Any, Ticks]]) -> Any:
        trace = self.fold(rounds)
        return trace[-1][0] if trace else self.u.initial_state(self.n)


class LemmaMonitor:
    """Checks the three dispute-timing guarantees on a finished run.

    With T the deadline carried in ``EventDispute(r, T)`` and all times being
    contract emission ticks:

    1. every dispute is answered: some settlement event — ``EventOffchain``
       or ``EventOnchain`` with round ``>= r`` — lands by ``T + 2Δ`` (the
       fast path, a counterparty that answers straight from a signed round it
       already holds, lands an ``EventOffchain`` by ``T + Δ``; that sharper
       bound is enforced from the parties' own sighting records below, since
       the chain log alone cannot tell whether the round was in hand);
    2. an honest party holding no COMMIT for ``r`` by ``T`` signs no round
       ``> r`` until the chain settled ``r``;
    3. if an honest party held COMMIT(r) before it saw the dispute for ``r``,
       the off-chain evidence lands by ``T + 2Δ``.
    """

    def __init__(self, suite: CryptoSuite, delta: int):
        self.suite = suite
        self.delta = delta
        self.parties: list[StateChannelParty] = []
        self.payload_digests: dict[tuple[str, int], set[bytes]] = {}
        self.dispute_sightings: list[tuple[str, str, int, Ticks, bool]] = []

    def attach_party(self, party: StateChannelParty) -> None:
        self.parties.append(party)

    def note_payload(self, sid: str, r: int, digest: bytes) -> None:
        self.payload_digests.setdefault((sid, r), set()).add(digest)

    def note_dispute_seen(self, sid: str, pid: str, r: int, deadline: Ticks,
                          had_commit: bool) -> None:
        self.dispute_sightings.append((sid, pid, r, deadline, had_commit))

    def _contract_events(self, chain: Chain, address: str):
        for tx in chain.tx_log:
            for ev in tx.events:
                if ev.emitter == address:
                    yield ev

    def check(self, chain: Chain, address: str, sid: str,
              honest: set[str]) -> list[str]:
        disputes, offchain, onchain = [], [], []
        for ev in self._contract_events(chain, address):
            if ev.name == "EventDispute":
                disputes.append((ev.args[0], ev.args[1]))
            elif ev.name == "EventOffchain":
                offchain.append((ev.args[0], ev.emitted_at))
            elif ev.name == "EventOnchain":
                onchain.append((ev.args[0], ev.emitted_at))
        problems = []
        d = self.delta
        for r, deadline in disputes:
            ok = any(rr >= r and t <= deadline + 2 * d
                     for rr, t in offchain + onchain)
            if not ok:
                problems.append(f"lemma1: dispute r={r} T={deadline} unanswered")
        settle_time: dict[int, Ticks] = {}
        for rr, t in offchain + onchain:
            settle_time[rr] = min(settle_time.get(rr, t), t)
        for s_sid, pid, r, deadline, had_commit in self.dispute_sightings:
            if s_sid != sid or pid not in honest:
                continue
            if had_commit:
                ok = any(rr >= r and t <= deadline + 2 * d for rr, t in offchain)
                if not ok:
                    problems.append(
                        f"lemma3: {pid} held COMMIT({r}) but no evidence by T+2Δ")
            else:
                settled = settle_time.get(r)
                limit = settled if settled is not None else float("inf")
                for rr_key, digests in self.payload_digests.items():
                    if rr_key[0] != sid or rr_key[1] <= r:
                        continue
                    for t, _ in self.suite.signed_rounds(pid, digests):
                        if t > deadline and t < limit:
                            problems.append(
                                f"lemma2: {pid} signed r={rr_key[1]} at {t} "
                                f"during open dispute r={r}")
        return problems


def reconstruct_rounds(contract: ContractState,
                       parties: Sequence[StateChannelParty]
                       ) -> Optional[list[tuple[tuple, Any, Ticks]]]:
    """Recover the (inputs, aux, time) sequence the channel actually ran.

    On-chain rounds come from the contract's own log; off-chain rounds from
    any participant that signed them.  Returns None if some round cannot be
    reconstructed (no honest witness kept its record).
    """
    rounds = []
    for r in range(contract.best_round + 1):
        if r in contract.round_log:
            rounds.append(contract.round_log[r])
            continue
        rec = next((p.records[r] for p in parties if r in p.records), None)
        if rec is None:
            return None
        rounds.append((rec.inputs, rec.aux_in, rec.asof))
    return rounds


def verify_channel_fold(contract: ContractState,
                        parties: Sequence[StateChannelParty]) -> list[str]:
    """Replay the ideal fold over what the channel consumed and compare."""
    problems = []
    rounds = reconstruct_rounds(contract, parties)
    if rounds is None:
        return [f"{contract.address}: cannot reconstruct round history"]
    oracle = FStateOracle(contract.u, len(contract.parties))
    expected = oracle.final_state(rounds)
    if contract.state != expected:
        problems.append(
            f"{contract.address}: contract state {contract.state!r} "
            f"!= ideal fold {expected!r}")
    for p in parties:
        if p.r_last == contract.best_round and p.state != expected:
            problems.append(
                f"{contract.address}: {p.pid} adopted {p.state!r} "
                f"!= ideal fold {expected!r}")
    return problems
