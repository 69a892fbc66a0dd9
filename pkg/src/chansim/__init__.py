"""Deterministic lab for duplex state channels with constant-locktime linked payments.

Layers, bottom up:

* ``simkernel``    — seeded discrete-event scheduler with bounded adversarial
  message delay;
* ``cryptosuite``  — deterministic signatures/hashes with a signing log;
* ``chainenv``     — simulated blockchain: confirmation bounds, escrow,
  contracts, coin conservation;
* ``statechannel`` — off-chain replicated state machine with on-chain
  dispute handler, plus its ideal-functionality oracle;
* ``paychannel``   — duplex payment channel as an application of the state
  channel;
* ``linkedpay``    — multi-hop conditional payments under a constant-expiry
  or decreasing-ladder locktime discipline, plus oracles;
* ``netsim``       — desk-scale payment-network worlds: topologies, routing,
  rebalancing, throughput search;
* ``trace``        — run-trace export and offline safety-check replay;
* ``xcli``         — the ``chansim`` command-line front end.
"""

__version__ = "0.1.0"

from .simkernel import Simulator
from .cryptosuite import CryptoSuite
from .chainenv import Chain, ChainFault, Contract
from .statechannel import (FStateOracle, HonestPolicy, LemmaMonitor,
                           StateChannelParty, Timing)
from .paychannel import FPayOracle, PayChannelParty, PayUpdate
from .linkedpay import (FLinkedOracle, HTLC, LinkedRunResult, PettySignPolicy,
                        SPRITES, run_linked_payment)
from .netsim import (ExperimentConfig, RunConfig, RunMetrics, World,
                     measure_throughput_at_98, sweep)
from .trace import (TraceReport, sample_runs, trace_lines, verify_trace_file,
                    verify_trace_lines, write_trace)

__all__ = [
    "__version__",
    "Simulator", "CryptoSuite", "Chain", "ChainFault", "Contract",
    "FStateOracle", "HonestPolicy", "LemmaMonitor", "StateChannelParty",
    "Timing", "FPayOracle", "PayChannelParty", "PayUpdate",
    "FLinkedOracle", "HTLC", "LinkedRunResult", "PettySignPolicy", "SPRITES",
    "run_linked_payment",
    "ExperimentConfig", "RunConfig", "RunMetrics", "World",
    "measure_throughput_at_98", "sweep",
    "TraceReport", "sample_runs", "trace_lines", "verify_trace_file",
    "verify_trace_lines", "write_trace",
]
