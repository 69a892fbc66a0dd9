"""Abstract-fidelity payment-network world.

Channels are tracked as directional balances plus timed locks rather than as
full protocol instances; the lock release schedule reuses the protocol's
measured timing constants, so worst-case behavior matches the full stack:

* constant-expiry model ("sprites"): every hop of a payment shares one expiry
  ``T_exp``; a hop adjacent to a withholding (petty) node settles on-chain at
  ``T_exp + 2*delta + 2*slack`` regardless of its position, and a preimage
  needed on-chain is published at ``T_exp - delta`` — the last safe instant.
* decreasing-ladder model ("htlc"): per-hop expiries grow toward the sender
  by ``delta + proto`` per hop, so a withheld preimage delays upstream hops
  by an amount linear in both path length and ``delta``.

Cooperative hops complete off-chain at message-propagation speed: under the
constant-expiry model the recipient reveals the preimage to every route
member at once, under the ladder it travels hop-by-hop upstream.

Fidelity mode "full" replays a sample of payments through the real protocol
stack and asserts the abstract release times agree (exactly for on-chain
settlements, within a propagation bound for cooperative ones).
"""
from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import networkx as nx

from ..linkedpay import SPRITES, HTLC, run_linked_payment
from .topology import (FAILED, PENDING, SUCCESS, AttributeProfiles,
                       PaymentRequest, Topology, assign_attributes, gen_ba,
                       gen_request, gen_ws, route_shortest)
from .flare import flare_build, flare_route


class NetsimInvariant(AssertionError):
    """A conservation/terminality/validation invariant failed."""


@dataclass
class RunConfig:
    topology: str = "ba"            # "ba" | "ws"
    n: int = 200
    ba_m: int = 2
    ws_k: int = 4
    ws_p: float = 0.3
    model: str = SPRITES            # SPRITES | HTLC
    routing: str = "sp"             # "sp" | "flare"
    incremental: bool = True        # deposits without pausing the channel
    revive: bool = False            # off-chain cycle cancellation
    petty_rate: float = 0.0
    delta: int = 40                 # on-chain confirmation bound, ticks
    proto_tick: int = 4             # channel message-delay bound, ticks
    proto_hop_ticks: int = 6        # off-chain propagation budget per hop
    complete_round_ticks: int = 4   # one cooperative update round
    dispute_slack: int = 3
    ladder_headroom: int = 8
    warmup: int = 300
    measure: int = 700
    request_rate: float = 2.0       # requests per tick
    max_route_len: int = 10
    low_watermark: int = 2_000      # $20: top-up trigger
    top_up_to: int = 4_000
    rebalance_interval: int = 100   # ticks (10 s)
    revive_interval: int = 300      # ticks (30 s)
    revive_min_unit: int = 100      # ignore skews below $1
    flare_rho: int = 2
    flare_beacons: int = 4
    flare_queries: int = 10
    fidelity: str = "abstract"      # "abstract" | "full"
    full_validate_count: int = 3
    profiles: AttributeProfiles = field(default_factory=AttributeProfiles)
    seed: int = 0


@dataclass
class RunMetrics:
    attempts: int = 0
    successes: int = 0
    success_rate: float = 1.0
    throughput_tps: float = 0.0
    mean_duration: float = 0.0      # seconds
    p99_duration: float = 0.0
    collateral_integral: int = 0    # cent-ticks
    onchain_txs: int = 0


@dataclass
class HopInfo:
    release: int
    claim: int
    onchain: bool


def hop_release_times(cfg: RunConfig, route: List[int], honest: Dict[int, bool],
                      latency: Dict[int, int], t0: int
                      ) -> Tuple[List[HopInfo], Optional[int]]:
    """Per-hop (release, claim, onchain) schedule and the registry publication
    instant (None when the preimage never reaches the chain).

    Expiry schedules are built from the channels' pinned message-delay bound
    (``proto_tick``); actual node latencies govern when messages really
    arrive, so a node slower than the bound falls out of the cooperative
    windows and its hops settle through the chain."""
    l = len(route) - 1
    proto = cfg.proto_tick
    coop_round = cfg.complete_round_ticks * proto
    settle = 2 * cfg.delta + 2 * cfg.dispute_slack
    delta = cfg.delta
    rec = route[-1]
    hops: List[HopInfo] = []
    publish: Optional[int] = None

    if cfg.model == SPRITES:
        t_exp = t0 + cfg.proto_hop_ticks * (l + 1) * proto + delta
        t_crit = t_exp - delta
        if honest[rec]:
            x_t = t0 + latency[rec]         # recipient multicasts the preimage
        else:
            # an uncooperative recipient still wants the money: it claims
            # through the registry at the last safe instant
            x_t = t_crit + 1
            publish = t_crit
        for i in range(l):
            u, v = route[i], route[i + 1]
            if honest[u] and honest[v]:
                r = x_t + latency[u] + coop_round
                if r <= t_exp:
                    if r > t_crit and publish is None:
                        publish = t_crit    # receiver publishes defensively
                    hops.append(HopInfo(r, r - coop_round, False))
                else:
                    publish = t_crit
                    hops.append(HopInfo(t_exp + settle, t_crit, True))
            elif honest[u]:
                # the receiver stalls countersigning; the opener pushes the
                # completion through the contract, settling at the expiry
                publish = t_crit
                hops.append(HopInfo(t_exp + 2, t_exp, True))
            else:
                # the opener never completes; the receiver disputes
                publish = t_crit
                hops.append(HopInfo(t_exp + settle, t_crit, True))
        return hops, publish

    # decreasing ladder: expiries grow toward the sender
    t_last = (t0 + cfg.proto_hop_ticks * l * proto + delta
              + cfg.ladder_headroom * proto)
    exps = [t_last + (l - 1 - i) * (delta + proto) for i in range(l)]
    # an answered dispute settles one inclusion window after the expiry; an
    # unanswered one needs a second, blind escalation
    answered = delta + cfg.dispute_slack + 1
    if honest[rec]:
        x_t = t0 + latency[rec]
    else:
        # the recipient only reveals the preimage inside its dispute answer,
        # which other channels cannot observe off-chain
        x_t = exps[l - 1] - delta + 1
        publish = exps[l - 1] - delta
    for i in range(l):
        u, v = route[i], route[i + 1]
        if honest[u] and honest[v]:
            if not honest[rec]:
                hops.append(HopInfo(exps[i] + answered, exps[i] - delta, True))
                continue
            r = x_t + latency[u] + coop_round
            if r <= exps[i] - delta:
                hops.append(HopInfo(r, r - coop_round, False))
            else:
                t_claim = min(x_t + latency[v], exps[i] - delta)
                publish = t_claim if publish is None else min(publish, t_claim)
                hops.append(HopInfo(exps[i] + answered, t_claim, True))
        elif honest[u]:
            # the receiver stalls countersigning
            if v == rec:
                # it claims its own hop inside the dispute answer
                release = exps[i] + cfg.dispute_slack + 2
            elif honest[rec]:
                # the opener knows the preimage and pushes the completion
                # through the contract
                release = min(exps[i] + 2, max(x_t, t_last) + answered)
            else:
                # the opener never learns the preimage; the receiver is paid
                # when its dispute answer lands
                release = exps[i] + settle + 1
            hops.append(HopInfo(release, min(exps[i], release), True))
        else:
            if honest[v]:
                t_claim = min(x_t + latency[v], exps[i] - delta)
            else:
                t_claim = exps[i] - delta   # withholds to the last instant
            publish = t_claim if publish is None else min(publish, t_claim)
            hops.append(HopInfo(exps[i] + settle, t_claim, True))
    return hops, publish


@dataclass
class _Lock:
    key: Tuple[int, int]
    to_node: int
    amount: int
    opened_at: int
    request: Optional[PaymentRequest]       # set on the recipient's hop


class World:
    """One seeded network world driven tick by tick."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        if cfg.topology == "ba":
            self.topo = gen_ba(cfg.n, cfg.ba_m, cfg.seed)
        elif cfg.topology == "ws":
            self.topo = gen_ws(cfg.n, cfg.ws_k, cfg.ws_p, cfg.seed)
        else:
            raise ValueError(f"unknown topology {cfg.topology!r}")
        assign_attributes(self.topo, cfg.seed + 1, cfg.profiles)
        nodes = sorted(self.topo.graph.nodes)
        k = round(cfg.petty_rate * len(nodes))
        petty = set(random.Random(cfg.seed + 2).sample(nodes, k))
        self.honest = {n: n not in petty for n in nodes}
        self.rng = random.Random(cfg.seed + 3)
        self.tables = (flare_build(self.topo, cfg.flare_rho, cfg.flare_beacons,
                                   cfg.seed + 4)
                       if cfg.routing == "flare" else None)
        self.now = 0
        self._seq = 0
        self.events: list = []              # (tick, seq, kind, payload)
        self.requests: List[PaymentRequest] = []
        self.paused: Dict[Tuple[int, int], int] = {}      # key -> until tick
        self.pending_topups: set = set()                  # (key, node)
        self.locked_out = 0
        self.pending_credit = 0
        self.injected = 0
        self.onchain_txs = 0
        self.tx_times: List[int] = []
        self.collateral_cent_ticks = 0
        self._credit = 0.0
        self._validated = 0
        self.initial_total = sum(sum(b.values())
                                 for b in self.topo.balances.values())

    # -- plumbing ---------------------------------------------------------

    def _schedule(self, tick: int, kind: str, payload) -> None:
        self._seq += 1
        heapq.heappush(self.events, (tick, self._seq, kind, payload))

    def _paused_set(self) -> frozenset:
        if not self.paused:
            return frozenset()
        return frozenset(k for k, until in self.paused.items()
                         if until > self.now)

    # -- payment lifecycle --------------------------------------------------

    def admit(self, req: PaymentRequest) -> bool:
        """Route and open a payment; a routing failure fails the request."""
        paused = self._paused_set()
        if self.cfg.routing == "flare":
            path, _ = flare_route(self.tables, self.topo, req,
                                  self.cfg.flare_queries, paused=paused)
            if path is not None and len(path) - 1 > self.cfg.max_route_len:
                path = None
        else:
            path = route_shortest(self.topo, req, paused=paused,
                                  max_len=self.cfg.max_route_len)
        self.requests.append(req)
        if path is None:
            req.status = FAILED
            req.completed_at = self.now
            return False
        self._open(req, path)
        return True

    def _open(self, req: PaymentRequest, path: List[int]) -> None:
        cfg = self.cfg
        hops, publish = hop_release_times(cfg, path, self.honest,
                                          self.topo.latency, self.now)
        if cfg.fidelity == "full" and self._validated < cfg.full_validate_count:
            self._validate_full(req, path, hops)
        n_onchain = sum(1 for h in hops if h.onchain)
        txs = (1 if publish is not None else 0) + 2 * n_onchain
        self.onchain_txs += txs
        if publish is not None:
            self.tx_times.append(publish)
        last = len(hops) - 1
        for i, info in enumerate(hops):
            u, v = path[i], path[i + 1]
            key = self.topo.edge_key(u, v)
            bal = self.topo.balances[key]
            if bal[u] < req.amount:
                raise NetsimInvariant(f"open through insolvent side {key}/{u}")
            bal[u] -= req.amount
            self.locked_out += req.amount
            self._schedule(info.release, "release",
                           _Lock(key, v, req.amount, self.now,
                                 req if i == last else None))

    def _validate_full(self, req: PaymentRequest, path: List[int],
                       hops: List[HopInfo]) -> None:
        """Replay this payment through the real protocol stack and check the
        abstract schedule against it."""
        if (self.cfg.proto_tick != 1
                or max(self.topo.latency[v] for v in path) != 1):
            return                          # constants calibrated at 1-tick
        self._validated += 1
        cfg = self.cfg
        honest = tuple(self.honest[v] for v in path)
        res = run_linked_payment(len(path), req.amount, delta=cfg.delta,
                                 model=cfg.model, honest=honest,
                                 slack=cfg.dispute_slack)
        if res.problems:
            raise NetsimInvariant(f"full-fidelity replay: {res.problems}")
        t0_full = res.start
        coop_budget = cfg.proto_hop_ticks * (len(path) + 2)
        # petty-adjacent settlement can shift by dispute-round alignment
        band = 2 * cfg.delta + 2 * cfg.proto_hop_ticks
        for i, (abstract, full) in enumerate(zip(hops, res.hops)):
            a_off = abstract.release - req.created_at
            f_off = full.t_release - t0_full
            if not honest[i]:
                # an opener that never completes forces the full dispute
                # path, whose settlement instant is a protocol constant
                if a_off != f_off:
                    raise NetsimInvariant(
                        f"hop {i}: abstract on-chain release {a_off} != "
                        f"protocol {f_off}")
            elif all(honest):
                if abs(a_off - f_off) > coop_budget:
                    raise NetsimInvariant(
                        f"hop {i}: abstract release {a_off} deviates from "
                        f"protocol {f_off} beyond {coop_budget}")
            elif abs(a_off - f_off) > band:
                raise NetsimInvariant(
                    f"hop {i}: abstract release {a_off} deviates from "
                    f"protocol {f_off} beyond {band}")

    def _release(self, lock: _Lock) -> None:
        until = self.paused.get(lock.key, 0)
        if until > self.now:                # deferred until the channel reopens
            self._schedule(until, "release", lock)
            return
        self.topo.balances[lock.key][lock.to_node] += lock.amount
        self.locked_out -= lock.amount
        self.collateral_cent_ticks += lock.amount * (self.now - lock.opened_at)
        if lock.request is not None:
            lock.request.status = SUCCESS
            lock.request.completed_at = self.now

    # -- rebalancing ----------------------------------------------------------

    def _rebalance_onchain(self) -> None:
        cfg = self.cfg
        for key in sorted(self.topo.balances):
            bal = self.topo.balances[key]
            for node in key:
                if bal[node] >= cfg.low_watermark:
                    continue
                if (key, node) in self.pending_topups:
                    continue
                amount = cfg.top_up_to - bal[node]
                self.pending_topups.add((key, node))
                self.onchain_txs += 1
                self.tx_times.append(self.now)
                self.injected += amount
                self.pending_credit += amount
                self._schedule(self.now + cfg.delta, "credit",
                               (key, node, amount))
                if not cfg.incremental:
                    # the whole channel pauses while the deposit confirms
                    self.paused[key] = max(self.paused.get(key, 0),
                                           self.now + cfg.delta)

    def _credit_topup(self, key, node, amount) -> None:
        self.topo.balances[key][node] += amount
        self.pending_credit -= amount
        self.pending_topups.discard((key, node))

    def _rebalance_revive(self) -> None:
        """Unwind credit cycles in the skew graph; per-node worth unchanged."""
        unit = self.cfg.revive_min_unit
        g = nx.DiGraph()
        for key in sorted(self.topo.balances):
            u, v = key
            bal = self.topo.balances[key]
            skew = (bal[u] - bal[v]) // 2
            if skew >= unit:
                g.add_edge(u, v, w=skew, key=key)
            elif -skew >= unit:
                g.add_edge(v, u, w=-skew, key=key)
        guard = 10 * g.number_of_edges() + 10
        while guard > 0:
            guard -= 1
            try:
                cycle = nx.find_cycle(g)
            except nx.NetworkXNoCycle:
                return
            flow = min(g[a][b]["w"] for a, b in cycle)
            for a, b in cycle:
                data = g[a][b]
                bal = self.topo.balances[data["key"]]
                bal[a] -= flow
                bal[b] += flow
                data["w"] -= flow
                if data["w"] < unit:
                    g.remove_edge(a, b)

    # -- main loop -------------------------------------------------------------

    def step(self, admit_new: bool = True) -> None:
        """Advance one tick: due events, rebalance checks, new requests."""
        cfg, now = self.cfg, self.now
        while self.events and self.events[0][0] <= now:
            _, _, kind, payload = heapq.heappop(self.events)
            if kind == "release":
                self._release(payload)
            elif kind == "credit":
                self._credit_topup(*payload)
        if now > 0 and now % cfg.rebalance_interval == 0:
            self._rebalance_onchain()
        if cfg.revive and now > 0 and now % cfg.revive_interval == 0:
            self._rebalance_revive()
        if admit_new:
            self._credit += cfg.request_rate
            while self._credit >= 1.0:
                self._credit -= 1.0
                self.admit(gen_request(self.topo, self.rng, created_at=now))
        self.now += 1

    def run(self) -> RunMetrics:
        cfg = self.cfg
        end_admit = cfg.warmup + cfg.measure
        while self.now < end_admit:
            self.step(admit_new=True)
        while self.events:
            self.now = max(self.now, self.events[0][0])
            self.step(admit_new=False)
        self.audit()
        return self.metrics(cfg.warmup, end_admit)

    # -- accounting --------------------------------------------------------------

    def audit(self) -> None:
        total = sum(sum(b.values()) for b in self.topo.balances.values())
        expect = self.initial_total + self.injected
        got = total + self.locked_out + self.pending_credit
        if got != expect:
            raise NetsimInvariant(f"conservation: {got} != {expect}")
        for key, bal in self.topo.balances.items():
            for node, cents in bal.items():
                if cents < 0:
                    raise NetsimInvariant(f"negative balance {key}/{node}")
        for req in self.requests:
            if req.status == PENDING:
                raise NetsimInvariant("request left pending after drain")

    def metrics(self, window_start: int, window_end: int) -> RunMetrics:
        window = [r for r in self.requests
                  if window_start <= r.created_at < window_end]
        m = RunMetrics()
        m.attempts = len(window)
        m.successes = sum(1 for r in window if r.status == SUCCESS)
        m.success_rate = m.successes / m.attempts if window else 1.0
        seconds = (window_end - window_start) / 10.0
        m.throughput_tps = m.successes / seconds if seconds else 0.0
        durations = sorted((r.completed_at - r.created_at) / 10.0
                           for r in window if r.status == SUCCESS)
        if durations:
            m.mean_duration = sum(durations) / len(durations)
            m.p99_duration = durations[max(0, -(-99 * len(durations) // 100) - 1)]
        m.collateral_integral = self.collateral_cent_ticks
        m.onchain_txs = self.onchain_txs
        return m
