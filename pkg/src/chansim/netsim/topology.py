"""Random payment-network topologies with node roles and channel capacities.

A topology is an undirected graph whose nodes are either consumers (payment
senders) or merchants (payment receivers), each with a network latency class,
a spend/receive frequency and a per-sender amount profile; every edge carries
a two-sided channel balance in integer cents.  Generation, attribute
assignment and request sampling are all driven by explicit seeds so a given
(generator, seed) pair always yields the identical world.

One simulation tick represents 100 ms, so the three latency classes
(100 ms / 1 s / 10 s) map to 1 / 10 / 100 ticks.
"""
from __future__ import annotations

import math
import random
from bisect import bisect_right
from dataclasses import dataclass, field
from itertools import accumulate
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx

CONSUMER = "consumer"
MERCHANT = "merchant"

PENDING = "pending"
SUCCESS = "success"
FAILED = "failed"


@dataclass(frozen=True)
class AttributeProfiles:
    """Sampling profiles for node attributes and the payment workload.

    Amount and frequency distributions are a synthetic stand-in for real
    transaction data; every knob is config-overridable and results should be
    read as model-relative, not absolute.
    """
    p_consumer: float = 1.0 / 3.0
    latency_ticks: Tuple[int, ...] = (1, 10, 100)
    latency_probs: Tuple[float, ...] = (0.925, 0.049, 0.026)
    capacity_cents: Tuple[int, ...] = (80_000, 5_000)   # $800 / $50 channels
    capacity_probs: Tuple[float, ...] = (0.2, 0.8)
    amount_median_cents: float = 800.0                  # ~$8 typical payment
    amount_sigma: float = 0.5                           # lognormal shape
    amount_rel_std: float = 0.5                         # per-sender std/mean
    max_payment_cents: int = 2_000                      # $20 hard cap
    freq_sigma: float = 0.5


@dataclass
class PaymentRequest:
    sender: int
    recipient: int
    amount: int                       # cents
    created_at: int = 0
    status: str = PENDING
    completed_at: Optional[int] = None


@dataclass
class Topology:
    graph: nx.Graph
    kind: str                                   # "ba" or "ws"
    seed: int
    profiles: Optional[AttributeProfiles] = None
    roles: Dict[int, str] = field(default_factory=dict)
    latency: Dict[int, int] = field(default_factory=dict)
    spend_freq: Dict[int, float] = field(default_factory=dict)
    receive_freq: Dict[int, float] = field(default_factory=dict)
    amount_mean: Dict[int, float] = field(default_factory=dict)
    amount_std: Dict[int, float] = field(default_factory=dict)
    # per-edge balances: {(u, v) with u < v: {u: cents, v: cents}}
    balances: Dict[Tuple[int, int], Dict[int, int]] = field(default_factory=dict)
    consumers: List[int] = field(default_factory=list)
    merchants: List[int] = field(default_factory=list)
    _adj: Dict[int, Tuple[int, ...]] = field(default_factory=dict)
    _consumer_cum: List[float] = field(default_factory=list)
    _merchant_cum: List[float] = field(default_factory=list)

    def edge_key(self, u: int, v: int) -> Tuple[int, int]:
        return (u, v) if u < v else (v, u)

    def rebuild_sampling_tables(self) -> None:
        self.consumers = sorted(n for n, r in self.roles.items() if r == CONSUMER)
        self.merchants = sorted(n for n, r in self.roles.items() if r == MERCHANT)
        self._consumer_cum = list(accumulate(self.spend_freq[n] for n in self.consumers))
        self._merchant_cum = list(accumulate(self.receive_freq[n] for n in self.merchants))
        self._adj = {n: tuple(sorted(self.graph.neighbors(n)))
                     for n in self.graph.nodes}


def _largest_component_fraction(g: nx.Graph) -> float:
    if g.number_of_nodes() == 0:
        return 0.0
    return max(len(c) for c in nx.connected_components(g)) / g.number_of_nodes()


def _generate(kind: str, build, seed: int, min_fraction: float = 0.99,
              attempts: int = 20) -> Tuple[nx.Graph, int]:
    """Build a graph, regenerating with a shifted seed until the largest
    connected component covers at least ``min_fraction`` of the nodes."""
    s = seed
    for _ in range(attempts):
        g = build(s)
        if _largest_component_fraction(g) >= min_fraction:
            return g, s
        s += 1_000_003
    raise RuntimeError(f"{kind}: no sufficiently connected graph after "
                       f"{attempts} attempts (seed {seed})")


def gen_ba(n: int, m_attach: int, seed: int) -> Topology:
    """Preferential-attachment random graph with ``n`` nodes, each new node
    attaching ``m_attach`` edges."""
    if not n > m_attach >= 1:
        raise ValueError("require n > m_attach >= 1")
    g, used = _generate("ba", lambda s: nx.barabasi_albert_graph(n, m_attach, seed=s),
                        seed)
    return Topology(graph=g, kind="ba", seed=used)


def gen_ws(n: int, k: int, p_rewire: float, seed: int) -> Topology:
    """Ring-lattice small-world graph: ``k`` nearest neighbours, each edge
    rewired with probability ``p_rewire``."""
    if k % 2 != 0 or not k < n:
        raise ValueError("require k even and k < n")
    g, used = _generate("ws", lambda s: nx.watts_strogatz_graph(n, k, p_rewire, seed=s),
                        seed)
    return Topology(graph=g, kind="ws", seed=used)


def _weighted_index(cum: Sequence[float], r: float) -> int:
    return bisect_right(cum, r * cum[-1])


def assign_attributes(topo: Topology, seed: int,
                      profiles: Optional[AttributeProfiles] = None) -> Topology:
    """Assign roles, latencies, frequency/amount profiles and channel
    capacities in place; returns the same topology for chaining."""
    p = profiles or AttributeProfiles()
    rng = random.Random(seed)
    lat_cum = list(accumulate(p.latency_probs))
    cap_cum = list(accumulate(p.capacity_probs))
    topo.profiles = p
    for n in sorted(topo.graph.nodes):
        topo.roles[n] = CONSUMER if rng.random() < p.p_consumer else MERCHANT
        topo.latency[n] = p.latency_ticks[_weighted_index(lat_cum, rng.random())]
        topo.spend_freq[n] = rng.lognormvariate(0.0, p.freq_sigma)
        topo.receive_freq[n] = rng.lognormvariate(0.0, p.freq_sigma)
        mean = p.amount_median_cents * math.exp(rng.gauss(0.0, p.amount_sigma))
        topo.amount_mean[n] = mean
        topo.amount_std[n] = mean * p.amount_rel_std
    for u, v in sorted(topo.graph.edges):
        key = topo.edge_key(u, v)
        cap = p.capacity_cents[_weighted_index(cap_cum, rng.random())]
        half, rem = divmod(cap, 2)
        topo.balances[key] = {key[0]: half + rem, key[1]: half}
    topo.rebuild_sampling_tables()
    return topo


def gen_request(topo: Topology, rng: random.Random,
                created_at: int = 0) -> PaymentRequest:
    """Sample one payment: sender ~ consumers weighted by spend frequency,
    recipient ~ merchants weighted by receive frequency, amount ~ the
    sender's truncated normal, capped at the maximum payment size."""
    p = topo.profiles
    sender = topo.consumers[_weighted_index(topo._consumer_cum, rng.random())]
    while True:
        recipient = topo.merchants[_weighted_index(topo._merchant_cum, rng.random())]
        if recipient != sender:
            break
    mean, std = topo.amount_mean[sender], topo.amount_std[sender]
    amt = 0.0
    while amt <= 0.0:                       # resample non-positive draws
        amt = rng.gauss(mean, std)
    amount = min(max(1, int(round(amt))), p.max_payment_cents)
    return PaymentRequest(sender=sender, recipient=recipient, amount=amount,
                          created_at=created_at)


def route_shortest(topo: Topology, request: PaymentRequest, *,
                   paused: frozenset = frozenset(),
                   max_len: Optional[int] = None) -> Optional[List[int]]:
    """Global-information routing: the hop-count shortest path over edges
    whose directional available balance covers the amount, ties broken toward
    the lexicographically smallest node sequence.  Returns None on failure.
    """
    src, dst, amt = request.sender, request.recipient, request.amount
    if src == dst:
        return None
    edge_key, balances, adj = topo.edge_key, topo.balances, topo._adj

    def usable(u: int, v: int) -> bool:
        key = edge_key(u, v)
        return key not in paused and balances[key][u] >= amt

    # distance-to-destination by reverse BFS over usable directed edges
    dist = {dst: 0}
    frontier = [dst]
    while frontier:
        nxt = []
        for v in frontier:
            for u in adj[v]:
                if u not in dist and usable(u, v):
                    dist[u] = dist[v] + 1
                    nxt.append(u)
        frontier = nxt
    if src not in dist or (max_len is not None and dist[src] > max_len):
        return None
    # walk forward, always taking the smallest next hop that stays shortest
    path = [src]
    cur = src
    while cur != dst:
        cur = next(v for v in adj[cur]
                   if dist.get(v, -1) == dist[cur] - 1 and usable(cur, v))
        path.append(cur)
    return path
