"""Simulated blockchain with Δ-bounded confirmation.

The chain is a single totally-ordered log of confirmed transactions.  A
submitted transaction confirms after an adversary-chosen delay in ``[1, Δ]``
(honest default 1); at confirmation its attached coins move into the target
contract's escrow and the contract method executes atomically.  A method can
reject its call by raising :class:`Discard` from a guard before writing any
state — the transaction then becomes a no-op and the attached coins are
refunded.  This mirrors guard-style contract pseudocode, not EVM revert:
contracts here are written so that no state is mutated before guards pass and
no external call happens before the contract's own writes are final, which
makes re-entrancy harmless.

Parties observe the chain through *views*: per-party read staleness is
adversary-chosen in ``[0, Δ]`` and monotone per party, so any two views are
prefixes of one another.  Contract events are delivered to subscribers after
an adversary-chosen delay in ``[1, Δ]``.

Coins are integers (minor units).  Conservation — minted == Σ party balances
+ Σ contract escrow — is asserted after every confirmed transaction.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .simkernel import Event, Simulator, Ticks

Money = int


class Discard(Exception):
    """Raised by a contract guard to reject the current call."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class ChainFault(RuntimeError):
    """An impossible condition: conservation breach, bad delay, etc."""


@dataclass(frozen=True)
class CallContext:
    sender: str            # party id, or contract address for contract calls
    coins: Money
    now: Ticks
    is_contract: bool = False


@dataclass(frozen=True)
class ChainEvent:
    emitter: str
    name: str
    args: tuple
    emitted_at: Ticks


@dataclass
class TxReceipt:
    tx_id: int
    submitter: str
    target: str
    method: str
    args: tuple
    coins: Money
    submitted_at: Ticks
    status: str = "pending"          # pending | confirmed | rejected
    confirmed_at: Optional[Ticks] = None
    ok: Optional[bool] = None        # method accepted (True) or discarded
    discard_reason: Optional[str] = None
    events: list[ChainEvent] = field(default_factory=list)


class Contract:
    """Base class; transaction-callable methods are named ``m_<name>``.

    Subclasses list the fields parties may read via ``Chain.read`` in
    ``READABLE``; the chain snapshots them after every confirmed transaction
    so stale views can be served.
    """

    READABLE: tuple[str, ...] = ()

    def __init__(self, address: str):
        self.address = address
        self.chain: "Chain" = None  # set at deploy

    def require(self, cond: bool, reason: str) -> None:
        if not cond:
            raise Discard(reason)

    def emit(self, name: str, *args: Any) -> None:
        self.chain._emit(self, name, args)

    def call(self, to: str, method: str, *args: Any) -> tuple[bool, Any]:
        """Synchronous cross-contract call within the current transaction."""
        return self.chain._contract_call(self.address, to, method, args)

    def pay_out(self, party: str, amount: Money) -> None:
        self.chain._pay_from_escrow(self.address, party, amount)


class Chain:
    def __init__(
        self,
        sim: Simulator,
        delta: int,
        *,
        tx_delay: Optional[Callable[[TxReceipt], int]] = None,
        event_delay: Optional[Callable[[str, ChainEvent], int]] = None,
        read_lag: Optional[Callable[[str, Ticks], int]] = None,
    ):
        if delta < 1:
            raise ValueError("delta must be >= 1")
        self.sim = sim
        self.delta = delta
        self.tx_delay = tx_delay or (lambda tx: 1)
        self.event_delay = event_delay or (lambda party, ev: 1)
        self.read_lag = read_lag or (lambda party, now: 0)
        self.balances: dict[str, Money] = {}
        self.escrow: dict[str, Money] = {}
        self.minted: Money = 0
        self.contracts: dict[str, Contract] = {}
        self._pending_attached: dict[str, Money] = {}
        self._subs: dict[str, list[tuple[str, Callable[[ChainEvent], None]]]] = {}
        self._tx_counter = 0
        self.tx_log: list[TxReceipt] = []
        # field history per (address, field): parallel time/value lists.
        self._history: dict[tuple[str, str], tuple[list[Ticks], list[Any]]] = {}
        self._view_time: dict[str, Ticks] = {}
        self._executing: Optional[TxReceipt] = None

    # -- setup ------------------------------------------------------------

    def mint(self, party: str, amount: Money) -> None:
        if amount < 0:
            raise ValueError("mint amount must be >= 0")
        self.balances[party] = self.balances.get(party, 0) + amount
        self.minted += amount

    def deploy(self, contract: Contract) -> Contract:
        if contract.address in self.contracts:
            raise ChainFault(f"address {contract.address!r} already deployed")
        contract.chain = self
        self.contracts[contract.address] = contract
        self.escrow.setdefault(contract.address, 0)
        self._snapshot(contract)
        return contract

    # -- transactions -----------------------------------------------------

    def submit(self, party: str, target: str, method: str, args: tuple = (),
               coins: Money = 0) -> TxReceipt:
        self._tx_counter += 1
        tx = TxReceipt(self._tx_counter, party, target, method, tuple(args),
                       coins, self.sim.now)
        if coins < 0:
            tx.status = "rejected"
            return tx
        if target not in self.contracts:
            tx.status = "rejected"
            self.sim.log_note("tx-reject", party, f"unknown contract {target}")
            return tx
        pending = self._pending_attached.get(party, 0)
        if self.balances.get(party, 0) - pending < coins:
            tx.status = "rejected"
            self.sim.log_note("tx-reject", party, f"insufficient coins for {method}")
            return tx
        self._pending_attached[party] = pending + coins
        d = self.tx_delay(tx)
        if not 1 <= d <= self.delta:
            raise ChainFault(f"tx delay {d} outside [1, {self.delta}]")
        self.sim.schedule(self.sim.now + d, tx, self._confirm,
                          kind="tx", source=party)
        return tx

    def _confirm(self, event: Event) -> None:
        tx: TxReceipt = event.payload
        tx.status = "confirmed"
        tx.confirmed_at = self.sim.now
        self._pending_attached[tx.submitter] -= tx.coins
        self.balances[tx.submitter] = self.balances.get(tx.submitter, 0) - tx.coins
        self.escrow[tx.target] += tx.coins
        contract = self.contracts[tx.target]
        ctx = CallContext(tx.submitter, tx.coins, self.sim.now)
        self._executing = tx
        try:
            handler = getattr(contract, "m_" + tx.method, None)
            if handler is None:
                raise Discard(f"no method {tx.method!r}")
            handler(ctx, *tx.args)
            tx.ok = True
        except Discard as d:
            tx.ok = False
            tx.discard_reason = d.reason
            # guard-style rejection: refund attached coins, keep state as-is
            self.escrow[tx.target] -= tx.coins
            self.balances[tx.submitter] += tx.coins
        finally:
            self._executing = None
        self.tx_log.append(tx)
        for c in self.contracts.values():
            self._snapshot(c)
        self.assert_conservation()

    def _contract_call(self, frm: str, to: str, method: str,
                       args: tuple) -> tuple[bool, Any]:
        contract = self.contracts.get(to)
        if contract is None:
            return False, None
        ctx = CallContext(frm, 0, self.sim.now, is_contract=True)
        handler = getattr(contract, "m_" + method, None)
        if handler is None:
            return False, None
        try:
            return True, handler(ctx, *args)
        except Discard:
            return False, None

    def _pay_from_escrow(self, address: str, party: str, amount: Money) -> None:
        if amount < 0 or self.escrow[address] < amount:
            raise ChainFault(
                f"escrow underflow paying {amount} from {address} (has {self.escrow[address]})"
            )
        self.escrow[address] -= amount
        self.balances[party] = self.balances.get(party, 0) + amount

    # -- events -----------------------------------------------------------

    def subscribe(self, party: str, address: str,
                  handler: Callable[[ChainEvent], None]) -> None:
        self._subs.setdefault(address, []).append((party, handler))

    def _emit(self, contract: Contract, name: str, args: tuple) -> None:
        ev = ChainEvent(contract.address, name, tuple(args), self.sim.now)
        if self._executing is not None:
            self._executing.events.append(ev)
        for party, handler in self._subs.get(contract.address, ()):
            d = self.event_delay(party, ev)
            if not 1 <= d <= self.delta:
                raise ChainFault(f"event delay {d} outside [1, {self.delta}]")
            self.sim.schedule(
                self.sim.now + d, ev,
                (lambda e, h=handler: h(e.payload)),
                kind="chain-event", source=contract.address,
            )

    # -- views ------------------------------------------------------------

    def _snapshot(self, contract: Contract) -> None:
        for name in contract.READABLE:
            value = getattr(contract, name)
            if isinstance(value, dict):
                value = dict(value)
            elif isinstance(value, (list, set)):
                value = tuple(sorted(value)) if isinstance(value, set) else tuple(value)
            key = (contract.address, name)
            times, values = self._history.setdefault(key, ([], []))
            if not values or values[-1] != value:
                times.append(self.sim.now)
                values.append(value)

    def read(self, party: str, address: str, fieldname: str) -> Any:
        """Party's possibly-stale view of a readable contract field."""
        lag = self.read_lag(party, self.sim.now)
        if not 0 <= lag <= self.delta:
            raise ChainFault(f"read lag {lag} outside [0, {self.delta}]")
        view = max(self.sim.now - lag, self._view_time.get(party, 0))
        self._view_time[party] = view
        return self._value_at(address, fieldname, view)

    def snapshot_view(self, party: str, address: str,
                      fields: tuple[str, ...]) -> tuple[Ticks, dict[str, Any]]:
        """Consistent multi-field view plus the chain time it reflects."""
        lag = self.read_lag(party, self.sim.now)
        if not 0 <= lag <= self.delta:
            raise ChainFault(f"read lag {lag} outside [0, {self.delta}]")
        view = max(self.sim.now - lag, self._view_time.get(party, 0))
        self._view_time[party] = view
        return view, {f: self._value_at(address, f, view) for f in fields}

    def read_fresh(self, address: str, fieldname: str) -> Any:
        return self._value_at(address, fieldname, self.sim.now)

    def _value_at(self, address: str, fieldname: str, t: Ticks) -> Any:
        key = (address, fieldname)
        if key not in self._history:
            raise ChainFault(f"unknown readable field {address}.{fieldname}")
        times, values = self._history[key]
        idx = bisect.bisect_right(times, t) - 1
        if idx < 0:
            raise ChainFault(f"no value for {address}.{fieldname} at t={t}")
        return values[idx]

    # -- accounting -------------------------------------------------------

    def balance(self, party: str) -> Money:
        return self.balances.get(party, 0)

    def assert_conservation(self) -> None:
        total = sum(self.balances.values()) + sum(self.escrow.values())
        if total != self.minted:
            raise ChainFault(
                f"coin conservation broken: minted={self.minted} held={total}"
            )

    def export_tx_log(self) -> list[str]:
        lines = []
        for tx in self.tx_log:
            lines.append(json.dumps({
                "t_submit": tx.submitted_at,
                "t_confirm": tx.confirmed_at,
                "submitter": tx.submitter,
                "contract": tx.target,
                "method": tx.method,
                "args": repr(tx.args),
                "coins": tx.coins,
                "ok": tx.ok,
                "events": [[e.name, repr(e.args), e.emitted_at] for e in tx.events],
            }, sort_keys=True))
        return lines
