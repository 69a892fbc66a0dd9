"""Payment-channel-network experiment engine.

Generates random network topologies with per-node roles, latencies and
per-channel capacities, drives a payment workload over them under either a
constant-expiry or a decreasing-ladder locktime model, routes with global
shortest-path or table-based decentralized lookup, rebalances channels
on-chain or by cycle cancellation, and measures success rate, throughput,
payment durations and collateral lockup.
"""
from .topology import (Topology, PaymentRequest, AttributeProfiles,
                       gen_ba, gen_ws, assign_attributes, gen_request,
                       route_shortest)
from .flare import FlareTable, flare_build, flare_route, xor_id
from .engine import RunConfig, RunMetrics, World, hop_release_times
from .experiments import (ExperimentConfig, SearchResult, run_world,
                          measure_throughput_at_98, sweep, rows_to_csv_text,
                          write_csv, CSV_COLUMNS)

__all__ = [
    "Topology", "PaymentRequest", "AttributeProfiles",
    "gen_ba", "gen_ws", "assign_attributes", "gen_request", "route_shortest",
    "FlareTable", "flare_build", "flare_route", "xor_id",
    "RunConfig", "RunMetrics", "World", "hop_release_times",
    "ExperimentConfig", "SearchResult", "run_world",
    "measure_throughput_at_98", "sweep", "rows_to_csv_text", "write_csv",
    "CSV_COLUMNS",
]
