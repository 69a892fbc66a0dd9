"""Run-trace export and offline replay of the safety checks.

A trace is a JSON-lines file: one header line, then a few records per
recorded payment run.  Each record carries everything one check needs, so a
verifier re-derives the verdicts from the file alone — no simulation replay:

* ``coins``   — final holdings and escrow vs. the minted total (exact
  integer conservation);
* ``timing``  — per-contract dispute events and their answers; every dispute
  raised with deadline ``T`` must be answered by an off-chain evidence event
  by ``T + delta`` or an on-chain application by ``T + 2*delta``;
* ``payment`` — per-hop settlement facts for one linked payment: atomic
  value movement along the route, honest intermediaries breaking even,
  escrow identities, release deadlines, and — when everyone cooperated —
  the chain never being touched beyond the initial deposits.

Record layouts are versioned via the header; `verify_trace_lines` rejects
traces it cannot parse with a line-numbered diagnostic and reports every
failed check with the line number of the record that contradicts it.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .linkedpay import (COMPLETED, HTLC, SPRITES, TERMINAL, LinkedRunResult,
                        run_linked_payment)

TRACE_KIND = "chansim-trace"
TRACE_VERSION = 1


class TraceFormatError(ValueError):
    """The file is not a readable trace (syntax, schema, or version)."""


# --------------------------------------------------------------------------
# export


def records_for_run(res: LinkedRunResult, run_id: int) -> list[dict]:
    """Flatten one finished linked-payment run into check-ready records."""
    chain = res.chain
    recs: list[dict] = [{
        "kind": "run",
        "run": run_id,
        "n_parties": len(res.route),
        "honest": [bool(h) for h in res.honest],
        "delta": res.delta,
        "slack": res.slack,
        "start": res.start,
    }]
    recs.append({
        "kind": "coins",
        "run": run_id,
        "minted": chain.minted,
        "holdings": sorted(chain.balances.items()),
        "escrow": sorted(chain.escrow.items()),
    })
    for contract in res.contracts:
        disputes, offchain, onchain = [], [], []
        for tx in chain.tx_log:
            for ev in tx.events:
                if ev.emitter != contract.address:
                    continue
                if ev.name == "EventDispute":
                    disputes.append([ev.args[0], ev.args[1]])
                elif ev.name == "EventOffchain":
                    offchain.append([ev.args[0], ev.emitted_at])
                elif ev.name == "EventOnchain":
                    onchain.append([ev.args[0], ev.emitted_at])
        if disputes or offchain or onchain:
            recs.append({
                "kind": "timing",
                "run": run_id,
                "contract": contract.address,
                "delta": res.delta,
                "disputes": disputes,
                "offchain": offchain,
                "onchain": onchain,
            })
    channels = []
    for sid, contract in zip(res.sids, res.contracts):
        channels.append({
            "sid": sid,
            "deposits": list(contract.deposits),
            "adjudicated": contract.adjud_total,
            "paid": list(contract.paid),
            "escrow": chain.escrow[contract.address],
        })
    recs.append({
        "kind": "payment",
        "run": run_id,
        "amount": res.amount,
        "route": list(res.route),
        "honest": [bool(h) for h in res.honest],
        "expiries": list(res.expiries),
        "delta": res.delta,
        "slack": res.slack,
        "adversarial_chain": res.adversarial_chain,
        "capacity_ok": res.capacity_ok,
        "success": res.success,
        "engaged": res.engaged,
        "published_at": res.published_at,
        "hops": [{
            "paid": hop.paid,
            "status": hop.status,
            "t_open": hop.t_open,
            "t_release": hop.t_release,
        } for hop in res.hops],
        "nets": dict(sorted(res.nets.items())),
        "channels": channels,
        "chain_methods": [tx.method for tx in chain.tx_log],
    })
    return recs


def trace_lines(results: Sequence[LinkedRunResult]) -> list[str]:
    """Serialize runs to deterministic JSON lines (sorted keys, no floats)."""
    lines = [json.dumps({"kind": TRACE_KIND, "version": TRACE_VERSION,
                         "runs": len(results)}, sort_keys=True)]
    for i, res in enumerate(results):
        for rec in records_for_run(res, i):
            lines.append(json.dumps(rec, sort_keys=True))
    return lines


def write_trace(results: Sequence[LinkedRunResult], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in trace_lines(results):
            fh.write(line + "\n")


def sample_runs(count: int, *, max_parties: int = 5, delta: int = 6,
                amount: int = 250, seed: int = 0) -> list[LinkedRunResult]:
    """A deterministic mix of payment runs worth auditing.

    The first run is fully cooperative (exercising the purity checks), the
    second has a withholding middle party (exercising disputes and the
    timing bounds); the rest draw party count, honesty map, and expiry model
    from a seeded generator.
    """
    rng = random.Random(seed)
    out: list[LinkedRunResult] = []
    for i in range(count):
        if i == 0:
            n, honest, model = 3, (True, True, True), SPRITES
        elif i == 1:
            n, honest, model = 3, (True, False, True), HTLC
        else:
            n = rng.randint(2, max_parties)
            honest = tuple(rng.random() > 0.35 for _ in range(n))
            model = rng.choice((SPRITES, HTLC))
        out.append(run_linked_payment(
            n, amount, delta=delta, model=model, honest=honest, seed=seed + i))
    return out


# --------------------------------------------------------------------------
# replay


@dataclass
class TraceReport:
    runs: int = 0
    checks: int = 0
    problems: list = field(default_factory=list)   # (line_no, message)

    @property
    def ok(self) -> bool:
        return not self.problems

    def lines(self) -> list[str]:
        out = [f"runs: {self.runs}", f"checks: {self.checks}"]
        for line_no, msg in self.problems:
            out.append(f"FAIL line {line_no}: {msg}")
        out.append("result: " + ("PASS" if self.ok else "FAIL"))
        return out


def _parse(lines: Sequence[str]) -> list[tuple[int, dict]]:
    recs = []
    for i, raw in enumerate(lines, start=1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"line {i}: not valid JSON ({exc.msg})")
        if not isinstance(rec, dict) or "kind" not in rec:
            raise TraceFormatError(f"line {i}: record without a 'kind' field")
        recs.append((i, rec))
    if not recs:
        raise TraceFormatError("empty trace")
    head = recs[0][1]
    if head.get("kind") != TRACE_KIND:
        raise TraceFormatError("line 1: missing trace header")
    if head.get("version") != TRACE_VERSION:
        raise TraceFormatError(
            f"line 1: unsupported trace version {head.get('version')!r}")
    return recs


def _require(rec: dict, line_no: int, keys: Iterable[str]) -> None:
    for key in keys:
        if key not in rec:
            raise TraceFormatError(
                f"line {line_no}: {rec['kind']} record missing field {key!r}")


def _check_coins(line_no: int, rec: dict, report: TraceReport) -> None:
    _require(rec, line_no, ("minted", "holdings", "escrow"))
    held = (sum(v for _, v in rec["holdings"])
            + sum(v for _, v in rec["escrow"]))
    report.checks += 1
    if held != rec["minted"]:
        report.problems.append(
            (line_no, f"conservation: minted {rec['minted']} but ledger "
             f"holds {held}"))


def _check_timing(line_no: int, rec: dict, report: TraceReport) -> None:
    _require(rec, line_no, ("contract", "delta", "disputes", "offchain",
                            "onchain"))
    d = rec["delta"]
    for r, deadline in rec["disputes"]:
        report.checks += 1
        ok = any(rr >= r and t <= deadline + 2 * d
                 for rr, t in rec["offchain"] + rec["onchain"])
        if not ok:
            report.problems.append(
                (line_no, f"{rec['contract']}: dispute r={r} deadline="
                 f"{deadline} answered neither off-chain nor on-chain "
                 f"by +{2 * d}"))


def _check_payment(line_no: int, rec: dict, report: TraceReport) -> None:
    _require(rec, line_no, ("amount", "route", "honest", "expiries", "delta",
                            "slack", "adversarial_chain", "capacity_ok",
                            "success", "engaged", "published_at", "hops",
                            "nets", "channels", "chain_methods"))
    fail = lambda msg: report.problems.append((line_no, msg))
    amount = rec["amount"]
    route, honest, hops = rec["route"], rec["honest"], rec["hops"]
    delta, slack = rec["delta"], rec["slack"]
    extra = (5 * delta + 6) if rec["adversarial_chain"] else (2 * delta + 3)
    paid = [hop["paid"] for hop in hops]

    report.checks += 1
    for i, hop in enumerate(hops):
        if hop["t_open"] is None:
            if hop["status"] is not None:
                fail(f"hop {i}: status {hop['status']} without an open")
            continue
        if hop["status"] not in TERMINAL or paid[i] is None:
            fail(f"hop {i}: never settled (status {hop['status']})")
            continue
        deadline = rec["expiries"][i] + delta + slack + extra
        if hop["t_release"] is None or hop["t_release"] > deadline:
            fail(f"hop {i}: released at {hop['t_release']} past "
                 f"deadline {deadline}")

    report.checks += 1
    for i in range(len(hops) - 1):
        if paid[i + 1] is True and paid[i] is not True:
            fail(f"hop {i + 1} paid but upstream hop {i} was not")

    report.checks += 1
    settled = [p is True for p in paid]
    expected = {pid: 0 for pid in route}
    for i, pid in enumerate(route):
        if i > 0 and settled[i - 1]:
            expected[pid] += amount
        if i < len(hops) and settled[i]:
            expected[pid] -= amount
    for i, pid in enumerate(route):
        net = rec["nets"].get(pid, 0)
        if net != expected[pid]:
            fail(f"{pid}: net {net} != expected {expected[pid]}")
        if honest[i] and 0 < i < len(route) - 1 and net != 0:
            fail(f"honest intermediary {pid} net {net} != 0")
    if sum(rec["nets"].values()) != 0:
        fail(f"nets do not cancel: {rec['nets']}")
    if honest[-1] and rec["engaged"] and paid and paid[-1] is not True:
        fail("honest engaged recipient was not paid")

    report.checks += 1
    for ch in rec["channels"]:
        worth = sum(ch["deposits"]) - ch["adjudicated"] - sum(ch["paid"])
        if worth != ch["escrow"]:
            fail(f"{ch['sid']}: escrow {ch['escrow']} != deposits - "
                 f"adjudicated - paid = {worth}")

    if all(honest) and rec["capacity_ok"] and not rec["adversarial_chain"]:
        report.checks += 1
        if not rec["success"]:
            fail("cooperative payment did not complete")
        if rec["published_at"] is not None:
            fail("cooperative payment touched the preimage registry")
        if any(hop["status"] != COMPLETED for hop in hops):
            fail("cooperative run left a hop uncompleted")
        noisy = [m for m in rec["chain_methods"] if m != "deposit"]
        if noisy:
            fail(f"cooperative run used the chain beyond deposits: {noisy}")


_CHECKERS = {
    "coins": _check_coins,
    "timing": _check_timing,
    "payment": _check_payment,
}


def verify_trace_lines(lines: Sequence[str]) -> TraceReport:
    """Replay every check a trace carries; never re-runs the simulation."""
    recs = _parse(lines)
    report = TraceReport()
    seen_runs = set()
    for line_no, rec in recs[1:]:
        kind = rec.get("kind")
        if kind == "run":
            seen_runs.add(rec.get("run"))
            continue
        checker = _CHECKERS.get(kind)
        if checker is None:
            raise TraceFormatError(f"line {line_no}: unknown record kind "
                                   f"{kind!r}")
        checker(line_no, rec, report)
    report.runs = len(seen_runs)
    return report


def verify_trace_file(path: str) -> TraceReport:
    with open(path, "r", encoding="utf-8") as fh:
        return verify_trace_lines(fh.readlines())
