"""Network-simulator tests: topology statistics, workload sampling, routing,
lock-schedule hand traces, rebalancing, conservation, and the abstract-vs-
full-protocol validation bridge."""
import math
import random
import statistics

import networkx as nx
import numpy as np
import pytest

from chansim.linkedpay import HTLC, SPRITES
from chansim.netsim import (AttributeProfiles, RunConfig, World,
                            assign_attributes, flare_build, flare_route,
                            gen_ba, gen_request, gen_ws,
                            hop_release_times, measure_throughput_at_98,
                            rows_to_csv_text, route_shortest, run_world,
                            sweep, xor_id, ExperimentConfig)
from chansim.netsim.engine import NetsimInvariant
from chansim.netsim.topology import CONSUMER, MERCHANT, PaymentRequest


# -- topology generation ------------------------------------------------------

def test_ba_power_law_tail():
    topo = gen_ba(2000, 2, seed=7)
    degrees = [d for _, d in topo.graph.degree()]
    hist = {}
    for d in degrees:
        hist[d] = hist.get(d, 0) + 1
    pts = [(math.log(d), math.log(c)) for d, c in hist.items() if c >= 5]
    xs, ys = zip(*pts)
    slope = np.polyfit(xs, ys, 1)[0]
    assert -3.5 <= slope <= -2.0


def test_ba_degenerate_and_deterministic():
    topo = gen_ba(50, 3, seed=1)
    # every node added after the seed set contributes exactly m edges
    assert topo.graph.number_of_edges() == (50 - 3) * 3
    assert nx.is_connected(topo.graph)
    a, b = gen_ba(200, 2, seed=9), gen_ba(200, 2, seed=9)
    assert sorted(a.graph.edges) == sorted(b.graph.edges)


def test_ws_lattice_and_smallworld():
    ring = gen_ws(40, 4, 0.0, seed=3)
    assert all(d == 4 for _, d in ring.graph.degree())
    ws = gen_ws(2000, 4, 0.3, seed=3)
    degs = [d for _, d in ws.graph.degree()]
    assert statistics.mean(degs) == pytest.approx(4.0, abs=0.01)
    # rewiring destroys lattice clustering (ring-lattice baseline is 0.5)
    assert nx.average_clustering(ws.graph) < 0.5
    again = gen_ws(2000, 4, 0.3, seed=3)
    assert sorted(ws.graph.edges) == sorted(again.graph.edges)


def test_attribute_mix_matches_profiles():
    topo = assign_attributes(gen_ws(20_000, 4, 0.0, seed=5), seed=6)
    n = 20_000
    lat = [topo.latency[v] for v in topo.graph.nodes]
    for ticks, share in ((1, 0.925), (10, 0.049), (100, 0.026)):
        assert abs(lat.count(ticks) / n - share) < 0.01
    assert abs(len(topo.consumers) / n - 1 / 3) < 0.015
    caps = [sum(b.values()) for b in topo.balances.values()]
    assert abs(statistics.mean(caps) / 100 - 200.0) < 4.0   # dollars


def test_requests_are_capped_positive_and_weighted():
    topo = assign_attributes(gen_ws(300, 4, 0.1, seed=11), seed=12)
    boosted = topo.consumers[0]
    for c in topo.consumers:
        topo.spend_freq[c] = 1.0
    topo.spend_freq[boosted] = 2.0
    topo.rebuild_sampling_tables()
    rng = random.Random(0)
    hits = 0
    draws = 40_000
    for _ in range(draws):
        req = gen_request(topo, rng)
        assert 0 < req.amount <= 2_000
        assert topo.roles[req.sender] == CONSUMER
        assert topo.roles[req.recipient] == MERCHANT
        hits += req.sender == boosted
    expected = 2.0 / (len(topo.consumers) + 1)
    assert abs(hits / draws / expected - 1.0) < 0.12


# -- routing ------------------------------------------------------------------

def _hand_topology(edges, amounts):
    g = nx.Graph()
    g.add_edges_from(edges)
    topo = assign_attributes(
        __import__("chansim.netsim.topology", fromlist=["Topology"])
        .Topology(graph=g, kind="ba", seed=0), seed=0)
    for key, cents in amounts.items():
        k = topo.edge_key(*key)
        topo.balances[k] = {k[0]: cents, k[1]: cents}
    return topo


def test_shortest_path_prefers_direct_and_fails_when_starved():
    topo = _hand_topology([(0, 1), (0, 2), (2, 1)], {(0, 1): 500, (0, 2): 500,
                                                     (2, 1): 500})
    req = PaymentRequest(sender=0, recipient=1, amount=100)
    assert route_shortest(topo, req) == [0, 1]
    topo.balances[(0, 1)][0] = 0
    assert route_shortest(topo, req) == [0, 2, 1]
    topo.balances[(0, 2)][0] = 0
    assert route_shortest(topo, req) is None


def test_shortest_path_tie_breaks_lexicographically():
    edges = [(0, 1), (1, 5), (0, 2), (2, 5), (0, 3), (3, 5), (0, 4), (4, 5)]
    topo = _hand_topology(edges, {e: 1_000 for e in edges})
    req = PaymentRequest(sender=0, recipient=5, amount=10)
    got = route_shortest(topo, req)
    feasible = nx.all_shortest_paths(topo.graph, 0, 5)
    assert got == min(feasible)            # exhaustive-enumeration oracle
    # capacity can disqualify the lexicographically first option
    topo.balances[(0, 1)][0] = 5
    assert route_shortest(topo, req) == [0, 2, 5]


# -- decentralized tables -------------------------------------------------------

def test_flare_tables_respect_radius_and_b0():
    topo = assign_attributes(gen_ws(120, 4, 0.3, seed=21), seed=22)
    tables = flare_build(topo, rho=2, beacons=0, seed=23)
    lengths = dict(nx.all_pairs_shortest_path_length(topo.graph))
    for t in tables.values():
        assert t.beacons == ()
        for target, path in t.neighborhood.items():
            assert len(path) - 1 <= 2
            assert len(path) - 1 == lengths[t.node][target]


def test_flare_beacons_close_to_global_optimum():
    topo = assign_attributes(gen_ws(50, 4, 0.3, seed=31), seed=32)
    tables = flare_build(topo, rho=2, beacons=5, seed=33)
    overlaps = []
    for n in topo.graph.nodes:
        mine = {b for b, _ in tables[n].beacons}
        want = set(sorted((v for v in topo.graph.nodes if v != n),
                          key=lambda v: xor_id(v) ^ xor_id(n))[:5])
        overlaps.append(len(mine & want) / 5)
    assert statistics.mean(overlaps) >= 0.8


def test_flare_route_zero_queries_and_exhaustion():
    topo = assign_attributes(gen_ws(120, 4, 0.3, seed=41), seed=42)
    tables = flare_build(topo, rho=2, beacons=4, seed=43)
    src = 0
    inside = next(iter(tables[src].neighborhood))
    req = PaymentRequest(sender=src, recipient=inside, amount=1)
    path, used = flare_route(tables, topo, req, 10, ignore_capacity=True)
    assert path is not None and used == 0
    # unreachable island: queries exhaust exactly
    topo.graph.add_edge(900, 901)
    topo.graph.add_edge(901, 902)
    topo._adj.update({900: (901,), 901: (900, 902), 902: (901,)})
    for key in [(900, 901), (901, 902)]:
        topo.balances[key] = {key[0]: 1000, key[1]: 1000}
    iso = flare_build(topo, rho=2, beacons=4, seed=43)
    req = PaymentRequest(sender=src, recipient=902, amount=1)
    path, used = flare_route(iso, topo, req, 7, ignore_capacity=True)
    assert path is None and used == 7


def test_flare_accessibility_rises_with_beacons():
    topo = assign_attributes(gen_ws(200, 4, 0.3, seed=51), seed=52)
    counts = {}
    for beacons in (0, 8):
        tables = flare_build(topo, rho=2, beacons=beacons, seed=53)
        ok = 0
        for src in list(topo.graph.nodes)[:5]:
            for dst in topo.graph.nodes:
                if dst == src:
                    continue
                req = PaymentRequest(sender=src, recipient=dst, amount=1)
                path, _ = flare_route(tables, topo, req, 3,
                                      ignore_capacity=True)
                ok += path is not None
        counts[beacons] = ok
    assert counts[8] > counts[0]


# -- lock schedules ---------------------------------------------------------------

def _cfg(**kw):
    base = dict(delta=20, proto_tick=1, complete_round_ticks=4,
                proto_hop_ticks=6, dispute_slack=3, ladder_headroom=8)
    base.update(kw)
    return RunConfig(**base)


def test_constant_expiry_hand_trace_all_honest():
    cfg = _cfg(model=SPRITES)
    route = [10, 11, 12, 13]
    honest = {v: True for v in route}
    lat = {v: 1 for v in route}
    hops, publish = hop_release_times(cfg, route, honest, lat, t0=100)
    assert publish is None
    reveal = 100 + 1                      # recipient multicast
    for i, info in enumerate(hops):
        assert not info.onchain
        assert info.claim == reveal + 1   # preimage reaches the opener
        assert info.release == info.claim + 4
    # one shared settlement horizon, independent of position
    assert len({h.release for h in hops}) == 1


def test_constant_expiry_petty_settles_at_shared_horizon():
    cfg = _cfg(model=SPRITES)
    route = [0, 1, 2, 3]
    honest = {0: True, 1: False, 2: True, 3: True}
    lat = {v: 1 for v in route}
    hops, publish = hop_release_times(cfg, route, honest, lat, t0=50)
    t_exp = 50 + 6 * 4 + 20
    assert publish == t_exp - 20          # last safe instant
    assert hops[0].onchain and hops[1].onchain and not hops[2].onchain
    # the stalling receiver is paid through a forced completion at expiry
    assert hops[0].release == t_exp + 2
    # the stalling opener forces the receiver through the full dispute
    assert hops[1].claim == t_exp - 20
    assert hops[1].release == t_exp + 2 * 20 + 6
    # the hop between two honest parties still completes fast
    assert hops[2].release < t_exp


def test_ladder_petty_holds_until_last_instant_per_rung():
    cfg = _cfg(model=HTLC)
    route = [0, 1, 2, 3]
    honest = {v: False for v in route}
    lat = {v: 1 for v in route}
    hops, publish = hop_release_times(cfg, route, honest, lat, t0=10)
    l = 3
    t_last = 10 + 6 * l + 20 + 8
    exps = [t_last + (l - 1 - i) * 21 for i in range(l)]
    for i, info in enumerate(hops):
        assert info.onchain
        assert info.claim == exps[i] - 20          # last possible instant
        assert info.release == exps[i] + 2 * 20 + 6
    # upstream hops stay locked strictly longer: linear-in-length ladder
    assert hops[0].release - hops[-1].release == (l - 1) * 21
    assert publish == min(e - 20 for e in exps)


def test_ladder_honest_completions_run_in_parallel():
    cfg = _cfg(model=HTLC)
    route = [0, 1, 2, 3]
    honest = {v: True for v in route}
    lat = {v: 1 for v in route}
    hops, publish = hop_release_times(cfg, route, honest, lat, t0=0)
    assert publish is None
    # the multicast preimage lets every opener complete at once
    assert len({h.release for h in hops}) == 1
    assert all(not h.onchain for h in hops)
    assert hops[0].release == 0 + 1 + 1 + 4


def test_ladder_petty_recipient_forces_every_hop_through_disputes():
    cfg = _cfg(model=HTLC)
    route = [0, 1, 2, 3]
    honest = {0: True, 1: True, 2: True, 3: False}
    lat = {v: 1 for v in route}
    hops, publish = hop_release_times(cfg, route, honest, lat, t0=0)
    l = 3
    t_last = 6 * l + 20 + 8
    exps = [t_last + (l - 1 - i) * 21 for i in range(l)]
    assert publish == exps[-1] - 20
    assert all(h.onchain for h in hops)
    # upstream hops settle one answered dispute after their own rung
    assert hops[0].release == exps[0] + 20 + 3 + 1
    assert hops[1].release == exps[1] + 20 + 3 + 1
    # the recipient's own claim arrives inside its dispute answer
    assert hops[2].release == exps[2] + 3 + 2


# -- world dynamics ------------------------------------------------------------

def _small_world(**kw):
    base = dict(n=50, topology="ws", warmup=100, measure=300, delta=20,
                proto_tick=2, seed=7)
    base.update(kw)
    return RunConfig(**base)


def test_world_runs_conserves_and_terminates():
    m = run_world(_small_world(), 1.0, seed=7)
    assert m.attempts > 200
    assert 0.0 <= m.success_rate <= 1.0
    assert m.onchain_txs >= 0 and m.collateral_integral > 0


def test_world_is_deterministic():
    a = run_world(_small_world(petty_rate=0.3, model=HTLC), 0.8, seed=9)
    b = run_world(_small_world(petty_rate=0.3, model=HTLC), 0.8, seed=9)
    assert repr(a) == repr(b)


def _resync_baseline(world):
    """Recompute the conservation baseline after a test edits balances."""
    world.initial_total = (
        sum(sum(b.values()) for b in world.topo.balances.values())
        + world.locked_out + world.pending_credit - world.injected)


def test_low_balance_triggers_topup_and_incremental_stays_usable():
    cfg = _small_world(incremental=True)
    world = World(cfg)
    key = sorted(world.topo.balances)[0]
    world.topo.balances[key][key[0]] = 1_500          # $15 < $20 watermark
    _resync_baseline(world)
    for _ in range(cfg.rebalance_interval + 1):
        world.step(admit_new=False)
    assert (key, key[0]) in world.pending_topups
    assert world.onchain_txs == 1
    assert key not in world.paused                    # channel still usable
    for _ in range(cfg.delta + 1):
        world.step(admit_new=False)
    assert world.topo.balances[key][key[0]] == cfg.top_up_to
    world.audit()


def test_non_incremental_topup_pauses_channel_and_defers_releases():
    cfg = _small_world(incremental=False)
    world = World(cfg)
    key = sorted(world.topo.balances)[0]
    u, v = key
    world.topo.balances[key][u] = 1_500
    _resync_baseline(world)
    for _ in range(cfg.rebalance_interval + 1):
        world.step(admit_new=False)
    assert world.paused[key] == world.now - 1 + cfg.delta
    # a payment that would release during the pause is deferred to reopen
    world.topo.balances[key][u] = 5_000
    _resync_baseline(world)
    world.topo.latency[u] = world.topo.latency[v] = 1
    world.honest[u] = world.honest[v] = True
    req = PaymentRequest(sender=u, recipient=v, amount=100,
                         created_at=world.now)
    world.topo.roles[u], world.topo.roles[v] = CONSUMER, MERCHANT
    world._open(req, [u, v])
    assert world.events[0][2] == "release"
    release_tick = world.events[0][0]
    reopen = world.paused[key]
    while world.now <= release_tick:
        world.step(admit_new=False)
    assert req.status == "pending"                    # still locked
    while world.now <= reopen:
        world.step(admit_new=False)
    assert req.status == "success"
    assert req.completed_at == reopen
    world.audit()


def test_revive_unwinds_symmetric_cycle_and_skips_acyclic():
    cfg = _small_world(revive=True)
    world = World(cfg)
    g = nx.Graph([(0, 1), (1, 2), (2, 0)])
    world.topo.graph = g
    world.topo.balances = {
        (0, 1): {0: 700, 1: 100},
        (1, 2): {1: 700, 2: 100},
        (0, 2): {2: 700, 0: 100},
    }
    worth = {n: sum(world.topo.balances[k][n]
                    for k in world.topo.balances if n in k) for n in range(3)}
    world._rebalance_revive()
    for bal in world.topo.balances.values():
        a, b = sorted(bal.values())
        assert a == b == 400                          # skews fully unwound
    for n in range(3):
        assert worth[n] == sum(world.topo.balances[k][n]
                               for k in world.topo.balances if n in k)
    # pure source->sink skew has no cycle: nothing changes
    world.topo.balances = {
        (0, 1): {0: 700, 1: 100},
        (1, 2): {1: 700, 2: 100},
        (0, 2): {0: 700, 2: 100},
    }
    before = {k: dict(v) for k, v in world.topo.balances.items()}
    world._rebalance_revive()
    assert world.topo.balances == before


def test_doubling_capacity_never_hurts_throughput():
    small = AttributeProfiles()
    big = AttributeProfiles(capacity_cents=(160_000, 10_000))
    rates = {}
    for name, prof in (("small", small), ("big", big)):
        cfg = RunConfig(n=40, topology="ws", warmup=100, measure=400,
                        delta=20, proto_tick=2, profiles=prof)
        rates[name] = measure_throughput_at_98(cfg, seed=3, lo=0.25, hi=8.0,
                                               iters=8).rate
    assert rates["big"] >= rates["small"]


def test_full_fidelity_validation_bridge():
    prof = AttributeProfiles(latency_ticks=(1, 1, 1))
    cfg = RunConfig(n=30, topology="ws", warmup=40, measure=160, delta=12,
                    proto_tick=1, fidelity="full", petty_rate=0.4,
                    profiles=prof, model=SPRITES)
    world = World(cfg)
    world.cfg = cfg
    metrics = World(cfg).run()            # raises NetsimInvariant on mismatch
    assert metrics.attempts > 0
    cfg_l = RunConfig(n=30, topology="ws", warmup=40, measure=160, delta=12,
                      proto_tick=1, fidelity="full", petty_rate=0.4,
                      profiles=prof, model=HTLC)
    World(cfg_l).run()


def test_sweep_rows_are_schema_stable_and_byte_identical():
    exp = ExperimentConfig(
        config_id="unit",
        base=RunConfig(n=40, topology="ws", warmup=50, measure=150, delta=15,
                       proto_tick=2),
        models=(SPRITES, HTLC), petty_rates=(0.0, 0.5), seeds=(1, 2),
        fixed_rate=0.6)
    first = rows_to_csv_text(sweep(exp))
    second = rows_to_csv_text(sweep(exp))
    assert first == second
    header = first.splitlines()[0].split(",")
    assert header == ["config_id", "seed", "model", "topology", "routing",
                      "incremental", "revive", "petty_rate", "request_rate",
                      "success_rate", "throughput_tps", "mean_duration",
                      "p99_duration", "collateral_integral", "onchain_txs"]
    assert len(first.splitlines()) == 1 + 2 * 2 * 2
