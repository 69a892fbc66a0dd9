"""Decentralized route discovery from partial views.

Every node knows shortest paths to all nodes within a small hop radius (its
neighborhood) plus up to B long-range "beacon" nodes chosen to be close to it
in a hashed XOR address space.  Routing merges the source table, then the
destination table, then iteratively queries the known node XOR-closest to the
destination, until a capacity-feasible path appears in the merged view or the
query budget is spent.
"""
from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Tuple

from ..cryptosuite import canon
from .topology import PaymentRequest, Topology

Path = Tuple[int, ...]          # node sequence, starting at the table owner


def xor_id(node: int) -> int:
    """Deterministic 64-bit address of a node in XOR space."""
    return int.from_bytes(
        hashlib.blake2b(canon(("flare-id", node)), digest_size=8).digest(),
        "big")


def _simplify(path: Iterable[int]) -> Path:
    """Drop loops introduced by concatenating paths (keep first visits)."""
    out: List[int] = []
    seen: Dict[int, int] = {}
    for node in path:
        if node in seen:
            del out[seen[node] + 1:]
            for dropped in list(seen):
                if seen[dropped] > seen[node]:
                    del seen[dropped]
        else:
            seen[node] = len(out)
            out.append(node)
    return tuple(out)


@dataclass(frozen=True)
class FlareTable:
    node: int
    xid: int
    neighborhood: Dict[int, Path]          # target -> path (self ... target)
    beacons: Tuple[Tuple[int, Path], ...]  # sorted by XOR distance to node

    def entries(self) -> Dict[int, Path]:
        merged = dict(self.neighborhood)
        for target, path in self.beacons:
            merged.setdefault(target, path)
        return merged


def flare_build(topo: Topology, rho: int, beacons: int,
                seed: int) -> Dict[int, FlareTable]:
    """Build all nodes' tables: BFS neighborhoods to radius ``rho``, then a
    randomized pass in which each node repeatedly asks its XOR-closest known
    node for anything closer, keeping the ``beacons`` closest discoveries."""
    ids = {n: xor_id(n) for n in topo.graph.nodes}
    tables: Dict[int, FlareTable] = {}
    for n in sorted(topo.graph.nodes):
        paths = nx_single_source_paths(topo, n, rho)
        paths.pop(n, None)
        tables[n] = FlareTable(node=n, xid=ids[n],
                               neighborhood={t: tuple(p) for t, p in paths.items()},
                               beacons=())
    if beacons <= 0:
        return tables

    order = sorted(topo.graph.nodes)
    random.Random(seed).shuffle(order)
    # Re-running discovery once everyone has published beacons lets each
    # node hop through progressively XOR-closer peers, as in an iterative
    # distributed lookup reaching a fixpoint.
    for _ in range(4):
        changed = False
        for u in order:
            uid = ids[u]
            known: Dict[int, Path] = dict(tables[u].neighborhood)
            for w, pw in tables[u].beacons:
                known.setdefault(w, pw)
            queried = set()
            # query until every current top-B candidate has answered
            for _ in range(4 * beacons + 8):
                top = sorted(known, key=lambda w: ids[w] ^ uid)[:beacons]
                cands = [w for w in top if w not in queried]
                if not cands:
                    break
                c = cands[0]
                queried.add(c)
                via = known[c]
                for w, pw in tables[c].entries().items():
                    if w == u or w in known:
                        continue
                    known[w] = _simplify(via + pw[1:])
            chosen = sorted(known, key=lambda w: ids[w] ^ uid)[:beacons]
            new_beacons = tuple((w, known[w]) for w in chosen)
            if new_beacons != tables[u].beacons:
                changed = True
            tables[u] = replace(tables[u], beacons=new_beacons)
        if not changed:
            break
    return tables


def nx_single_source_paths(topo: Topology, source: int,
                           cutoff: int) -> Dict[int, List[int]]:
    """Shortest paths from ``source`` to every node within ``cutoff`` hops,
    visiting neighbours in sorted order for determinism."""
    paths: Dict[int, List[int]] = {source: [source]}
    frontier = [source]
    for _ in range(cutoff):
        nxt = []
        for v in frontier:
            base = paths[v]
            for w in topo._adj[v]:
                if w not in paths:
                    paths[w] = base + [w]
                    nxt.append(w)
        frontier = nxt
    return paths


class _KnownView:
    """Edge set accumulated from merged tables, with path search."""

    def __init__(self, topo: Topology, amount: int,
                 paused: frozenset, ignore_capacity: bool):
        self.topo = topo
        self.amount = amount
        self.paused = paused
        self.ignore_capacity = ignore_capacity
        self.adj: Dict[int, set] = {}
        self.nodes: set = set()

    def add_path(self, path: Path) -> None:
        for a, b in zip(path, path[1:]):
            self.adj.setdefault(a, set()).add(b)
            self.adj.setdefault(b, set()).add(a)
        self.nodes.update(path)

    def merge(self, table: FlareTable) -> None:
        self.nodes.add(table.node)
        for _, path in table.entries().items():
            self.add_path(path)

    def _usable(self, u: int, v: int) -> bool:
        key = self.topo.edge_key(u, v)
        if key in self.paused:
            return False
        if self.ignore_capacity:
            return True
        return self.topo.balances[key][u] >= self.amount

    def shortest(self, src: int, dst: int) -> Optional[List[int]]:
        if src not in self.adj or dst not in self.adj:
            return None
        dist = {dst: 0}
        frontier = [dst]
        while frontier:
            nxt = []
            for v in frontier:
                for u in sorted(self.adj.get(v, ())):
                    if u not in dist and self._usable(u, v):
                        dist[u] = dist[v] + 1
                        nxt.append(u)
            frontier = nxt
        if src not in dist:
            return None
        path, cur = [src], src
        while cur != dst:
            cur = min(v for v in self.adj[cur]
                      if dist.get(v, -1) == dist[cur] - 1 and self._usable(cur, v))
            path.append(cur)
        return path


def flare_route(tables: Dict[int, FlareTable], topo: Topology,
                request: PaymentRequest, query_limit: int, *,
                paused: frozenset = frozenset(),
                ignore_capacity: bool = False
                ) -> Tuple[Optional[List[int]], int]:
    """Route using only table knowledge.  Returns (path or None, queries
    used).  Queries merge in the full table of the not-yet-queried known node
    closest to the destination in XOR space."""
    src, dst = request.sender, request.recipient
    view = _KnownView(topo, request.amount, paused, ignore_capacity)
    did = {n: tables[n].xid for n in tables}
    dst_id = did[dst]

    view.merge(tables[src])
    path = view.shortest(src, dst)
    if path is not None:
        return path, 0
    view.merge(tables[dst])
    path = view.shortest(src, dst)
    if path is not None:
        return path, 0

    queried = {src, dst}
    queries = 0
    while queries < query_limit:
        cands = [w for w in view.nodes if w not in queried]
        if not cands:
            break
        c = min(cands, key=lambda w: did[w] ^ dst_id)
        queried.add(c)
        queries += 1
        view.merge(tables[c])
        path = view.shortest(src, dst)
        if path is not None:
            return path, queries
    return None, queries
