"""Slot-based proof-of-stake chain with an EIP-1559 style fee market.

The model is deliberately small: one validator proposes per fixed 12-second
slot, chosen at random weighted by stake. Pending transactions wait in a
mempool; at each slot boundary the proposer packs the highest-tipping eligible
transactions into a block under the gas limit, the base fee adjusts with
utilisation, and transactions become final once their block is buried
`finality_depth` blocks deep. Everything is driven by derived seeds, so equal
(config, workload, seed) replays produce identical chains block by block.

Timing convention: block N carries timestamp N * slot_duration. A transaction
is eligible for a block only if it was submitted at least `inclusion_cutoff_s`
seconds before the block timestamp, which stands in for propagation and
proposer deadlines; latency therefore never collapses to zero even on an idle
chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .contracts import ContractCall, ContractWorld, GasReceipt, apply_call
from .rng import stream

GWEI_FLOOR = 1e-9  # one wei, in Gwei
TX_OVERHEAD_BYTES = 110
BLOCK_HEADER_BYTES = 600
MIN_TX_GAS = 21_000

BG_SENDER_POOL = 1024
BG_SENDER_BALANCE = 1e15
TIP_HISTORY_BLOCKS = 5


class ChainError(Exception):
    pass


class UnknownSender(ChainError):
    pass


class NonceGap(ChainError):
    pass


class InsufficientBalance(ChainError):
    pass


class NoValidators(ChainError):
    pass


class NotYetIncluded(ChainError):
    pass


class SimulationFailure(ChainError):
    """A contract call failed during block execution; the run is aborted."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class DistSpec:
    """Distribution descriptor: constant(value) | uniform(lo, hi) | lognormal(mu, sigma)."""

    kind: str
    a: float
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "uniform", "lognormal"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError("distribution parameters must be finite")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(n, self.a)
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, n)
        return rng.lognormal(self.a, self.b, n)


@dataclass(frozen=True, slots=True)
class BackgroundModel:
    """Ambient traffic from other users, injected every slot."""

    arrival_rate: float = 130.0
    gas_usage_dist: DistSpec = field(
        default_factory=lambda: DistSpec("uniform", 21_000, 300_000)
    )
    tip_dist: DistSpec = field(
        default_factory=lambda: DistSpec("lognormal", math.log(2.0), 1.0)
    )
    payload_bytes_dist: DistSpec = field(
        default_factory=lambda: DistSpec("lognormal", 7.2, 0.55)
    )

    def __post_init__(self):
        if self.arrival_rate < 0:
            raise ValueError("arrival_rate must be non-negative")


@dataclass(frozen=True, slots=True)
class ChainConfig:
    slot_duration_s: float = 12.0
    block_gas_limit: int = 30_000_000
    block_gas_target: int = 15_000_000
    base_fee_initial_gwei: float = 8.0
    base_fee_max_change_fraction: float = 0.125
    finality_depth: int = 1
    inclusion_cutoff_s: float = 6.0
    rng_seed: int = 0
    background: BackgroundModel = field(default_factory=BackgroundModel)

    def __post_init__(self):
        if self.slot_duration_s <= 0:
            raise ValueError("slot_duration_s must be positive")
        if self.block_gas_target > self.block_gas_limit:
            raise ValueError("block_gas_target must not exceed block_gas_limit")
        if self.base_fee_initial_gwei <= 0:
            raise ValueError("base_fee_initial_gwei must be positive")
        if not 0 <= self.inclusion_cutoff_s < self.slot_duration_s:
            raise ValueError("inclusion_cutoff_s must lie within one slot")


# ---------------------------------------------------------------------------
# Ledger objects
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class Account:
    address: str
    balance: float  # Gwei
    nonce: int = 0  # next nonce expected on-chain
    stake: float = 0.0
    role: str = "consumer"  # consumer | provider | validator | background


@dataclass(slots=True)
class Transaction:
    tx_id: int
    sender: str
    nonce: int
    call: ContractCall | None  # None for plain background transfers
    gas_limit: int
    max_fee: float  # Gwei per gas
    priority_fee: float  # Gwei per gas
    submit_time: float
    payload_bytes: int
    status: str = "submitted"
    block_number: int | None = None


@dataclass(slots=True)
class Block:
    number: int
    timestamp: float
    proposer: str
    transactions: list[int]
    gas_used: int
    byte_size: int
    base_fee: float


@dataclass(frozen=True, slots=True)
class SimEvent:
    slot: int
    kind: str
    data: dict


# ---------------------------------------------------------------------------
# Standalone operations
# ---------------------------------------------------------------------------

def select_proposer(validators: list[Account], slot: int, seed: int) -> str:
    """Stake-weighted proposer draw, deterministic in (slot, seed).

    Validator order matters for reproducibility; the chain always passes them
    sorted by address.
    """
    stakers = [v for v in validators if v.stake > 0]
    if not stakers:
        raise NoValidators("no validator with positive stake")
    total = sum(v.stake for v in stakers)
    pick = stream(seed, "proposer", slot).random() * total
    acc = 0.0
    for v in stakers:
        acc += v.stake
        if pick < acc:
            return v.address
    return stakers[-1].address


def update_base_fee(prev: Block, config: ChainConfig) -> float:
    """Next block's base fee from the previous block's utilisation."""
    if prev.base_fee <= 0:
        raise ValueError("previous base fee must be positive")
    target = config.block_gas_target
    fraction = config.base_fee_max_change_fraction
    new = prev.base_fee * (1.0 + fraction * (prev.gas_used - target) / target)
    return max(new, GWEI_FLOOR)


def effective_tip(tx: Transaction, base_fee: float) -> float:
    return min(tx.priority_fee, tx.max_fee - base_fee)


def build_block(
    mempool: list[Transaction],
    prev_block: Block,
    config: ChainConfig,
    *,
    proposer: str = "unassigned",
) -> Block:
    """Pack pending transactions into the next block.

    Candidates must clear the new base fee and have been submitted before the
    inclusion cutoff. They are ranked by effective tip (ties: earlier
    submission, then lower id) and packed first-fit against the gas limit,
    never out of nonce order for any one sender. gas_used here is the
    committed gas (sum of limits); the chain replaces it with executed gas.
    """
    number = prev_block.number + 1
    timestamp = number * config.slot_duration_s
    base_fee = update_base_fee(prev_block, config)
    deadline = timestamp - config.inclusion_cutoff_s

    next_nonce: dict[str, int] = {}
    for tx in mempool:
        cur = next_nonce.get(tx.sender)
        if cur is None or tx.nonce < cur:
            next_nonce[tx.sender] = tx.nonce

    eligible = [
        tx
        for tx in mempool
        if tx.submit_time <= deadline and tx.max_fee >= base_fee
    ]
    eligible.sort(key=lambda tx: (-effective_tip(tx, base_fee), tx.submit_time, tx.tx_id))

    packed: list[Transaction] = []
    gas_committed = 0
    deferred: dict[str, dict[int, Transaction]] = {}
    for tx in eligible:
        if gas_committed + tx.gas_limit > config.block_gas_limit:
            continue
        if tx.nonce != next_nonce[tx.sender]:
            deferred.setdefault(tx.sender, {})[tx.nonce] = tx
            continue
        packed.append(tx)
        gas_committed += tx.gas_limit
        next_nonce[tx.sender] += 1
        # A lower nonce may unblock queued higher nonces from the same sender.
        queue = deferred.get(tx.sender)
        while queue:
            follow = queue.pop(next_nonce[tx.sender], None)
            if follow is None or gas_committed + follow.gas_limit > config.block_gas_limit:
                break
            packed.append(follow)
            gas_committed += follow.gas_limit
            next_nonce[tx.sender] += 1

    byte_size = BLOCK_HEADER_BYTES + sum(tx.payload_bytes for tx in packed)
    return Block(
        number=number,
        timestamp=timestamp,
        proposer=proposer,
        transactions=[tx.tx_id for tx in packed],
        gas_used=gas_committed,
        byte_size=byte_size,
        base_fee=base_fee,
    )


def sample_background_arrivals(
    model: BackgroundModel, slot: int, seed: int, slot_duration: float
) -> list[tuple[float, int, float, int, int]]:
    """Draw one slot of background arrivals, sorted by arrival offset.

    Returns (offset_s, gas, tip_gwei, payload_bytes, sender_index) tuples.
    """
    rng = stream(seed, "background", slot)
    n = int(rng.poisson(model.arrival_rate)) if model.arrival_rate > 0 else 0
    if n == 0:
        return []
    offsets = rng.uniform(0.0, slot_duration, n)
    gas = np.maximum(MIN_TX_GAS, model.gas_usage_dist.sample(rng, n).astype(np.int64))
    tips = np.maximum(0.0, model.tip_dist.sample(rng, n))
    payload = np.maximum(
        TX_OVERHEAD_BYTES, model.payload_bytes_dist.sample(rng, n).astype(np.int64)
    )
    senders = rng.integers(0, BG_SENDER_POOL, n)
    order = np.argsort(offsets, kind="stable")
    return [
        (float(offsets[i]), int(gas[i]), float(tips[i]), int(payload[i]), int(senders[i]))
        for i in order
    ]


def inject_background_traffic(
    model: BackgroundModel, slot: int, seed: int, *, slot_duration: float = 12.0
) -> list[Transaction]:
    """Standalone form of the per-slot background draw.

    Builds transactions against a synthetic sender pool with zero-based ids;
    inside a Chain the same draws are mapped onto the chain's own background
    accounts and nonce sequence.
    """
    txs = []
    slot_start = (slot - 1) * slot_duration
    for i, (offset, gas, tip, payload, sender_idx) in enumerate(
        sample_background_arrivals(model, slot, seed, slot_duration)
    ):
        txs.append(
            Transaction(
                tx_id=i,
                sender=f"bg{sender_idx:04d}",
                nonce=0,
                call=None,
                gas_limit=gas,
                max_fee=tip + 1.0,
                priority_fee=tip,
                submit_time=slot_start + offset,
                payload_bytes=payload,
            )
        )
    return txs


def latency_of(tx: Transaction, chain: "Chain") -> float:
    """Seconds from submission to the including block's timestamp."""
    if tx.status not in ("included", "finalized"):
        raise NotYetIncluded(tx.tx_id)
    return chain.blocks[tx.block_number].timestamp - tx.submit_time


# ---------------------------------------------------------------------------
# The chain itself
# ---------------------------------------------------------------------------

class Chain:
    """Single-owner world: accounts, mempool, blocks, and the contract state."""

    def __init__(
        self,
        config: ChainConfig,
        accounts: list[Account],
        contracts: ContractWorld | None = None,
    ):
        self.config = config
        self.contracts = contracts if contracts is not None else ContractWorld()
        self.accounts: dict[str, Account] = {a.address: a for a in accounts}
        self.validators = sorted(
            (a for a in accounts if a.role == "validator"), key=lambda a: a.address
        )
        genesis = Block(
            number=0,
            timestamp=0.0,
            proposer="genesis",
            transactions=[],
            gas_used=0,
            byte_size=BLOCK_HEADER_BYTES,
            base_fee=config.base_fee_initial_gwei,
        )
        self.blocks: list[Block] = [genesis]
        self.mempool: list[Transaction] = []
        self.tx_index: dict[int, Transaction] = {}
        self.receipts: dict[int, GasReceipt] = {}
        self.inclusion_tip: dict[int, float] = {}
        self._next_tx_id = 0
        self._pending_count: dict[str, int] = {}
        self._finalized_upto = 0
        self._recent_tips: list[float] = []
        self._bg_total_gas = 0

        for a in accounts:
            if a.role == "validator" and a.stake <= 0:
                raise ValueError(f"validator {a.address} has no stake")

    # -- clock helpers ---------------------------------------------------------

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    @property
    def now(self) -> float:
        return self.head.timestamp

    def next_block_time(self) -> float:
        return (self.head.number + 1) * self.config.slot_duration_s

    # -- submission ------------------------------------------------------------

    def new_tx_id(self) -> int:
        tx_id = self._next_tx_id
        self._next_tx_id += 1
        return tx_id

    def next_nonce(self, address: str) -> int:
        """Next valid nonce for a sender, counting its pending transactions."""
        account = self.accounts.get(address)
        if account is None:
            raise UnknownSender(address)
        return account.nonce + self._pending_count.get(address, 0)

    def submit_transaction(self, tx: Transaction) -> dict:
        account = self.accounts.get(tx.sender)
        if account is None:
            raise UnknownSender(tx.sender)
        expected = account.nonce + self._pending_count.get(tx.sender, 0)
        if tx.nonce != expected:
            raise NonceGap(f"{tx.sender}: nonce {tx.nonce}, expected {expected}")
        if account.balance < tx.max_fee * tx.gas_limit:
            raise InsufficientBalance(tx.sender)
        if tx.priority_fee > tx.max_fee:
            raise ValueError("priority_fee must not exceed max_fee")
        if tx.gas_limit < MIN_TX_GAS:
            raise ValueError(f"gas_limit below the {MIN_TX_GAS} floor")
        if tx.submit_time < self.now:
            raise ValueError("submit_time lies before the chain head")

        tx.status = "pending"
        self.mempool.append(tx)
        self.tx_index[tx.tx_id] = tx
        self._pending_count[tx.sender] = self._pending_count.get(tx.sender, 0) + 1
        return {"tx_id": tx.tx_id, "submit_time": tx.submit_time}

    def suggest_tip(self, quantile: float, fallback: float) -> float:
        """Fee suggestion: a quantile of recently included effective tips."""
        if not self._recent_tips:
            return fallback
        return float(np.quantile(np.asarray(self._recent_tips), quantile))

    # -- background ------------------------------------------------------------

    def _bg_address(self, idx: int) -> str:
        addr = f"bg{idx:04d}"
        if addr not in self.accounts:
            self.accounts[addr] = Account(
                address=addr, balance=BG_SENDER_BALANCE, role="background"
            )
        return addr

    def _inject_background(self, slot: int, events: list[SimEvent]) -> None:
        model = self.config.background
        draws = sample_background_arrivals(
            model, slot, self.config.rng_seed, self.config.slot_duration_s
        )
        if not draws:
            return
        slot_start = (slot - 1) * self.config.slot_duration_s
        base = self.head.base_fee
        for offset, gas, tip, payload, sender_idx in draws:
            sender = self._bg_address(sender_idx)
            account = self.accounts[sender]
            tx = Transaction(
                tx_id=self.new_tx_id(),
                sender=sender,
                nonce=account.nonce + self._pending_count.get(sender, 0),
                call=None,
                gas_limit=gas,
                max_fee=2.0 * base + tip,
                priority_fee=tip,
                submit_time=slot_start + offset,
                payload_bytes=payload,
            )
            self.submit_transaction(tx)
            events.append(
                SimEvent(slot, "background_arrival", {"tx_id": tx.tx_id})
            )

    # -- slot advance ------------------------------------------------------------

    def advance_slot(self) -> list[SimEvent]:
        """Run one slot: arrivals, proposer draw, block build, execution,
        base-fee update, finality sweep. Returns the ordered event list."""
        events: list[SimEvent] = []
        slot = self.head.number + 1
        self._inject_background(slot, events)

        proposer = (
            select_proposer(self.validators, slot, self.config.rng_seed)
            if self.validators
            else "unassigned"
        )
        events.append(SimEvent(slot, "proposer_selected", {"proposer": proposer}))

        block = build_block(self.mempool, self.head, self.config, proposer=proposer)
        included = set(block.transactions)
        gas_used = 0
        slot_tips: list[float] = []
        for tx_id in block.transactions:
            tx = self.tx_index[tx_id]
            tip = effective_tip(tx, block.base_fee)
            if tx.call is not None:
                try:
                    receipt, event, trigger = apply_call(self.contracts, tx.call)
                except Exception as exc:
                    raise SimulationFailure(
                        f"tx {tx_id} ({tx.call.function}) rejected: {exc}"
                    ) from exc
                event.block_number = block.number
                event.tx_id = str(tx_id)
                self.receipts[tx_id] = receipt
                tx_gas = receipt.total
                if trigger is not None:
                    events.append(
                        SimEvent(
                            slot,
                            "penalty_trigger",
                            {"provider": trigger.provider, "tx_id": tx_id},
                        )
                    )
            else:
                tx_gas = tx.gas_limit
            gas_used += tx_gas
            tx.status = "included"
            tx.block_number = block.number
            self.inclusion_tip[tx_id] = tip
            slot_tips.append(tip)

            sender = self.accounts[tx.sender]
            sender.nonce += 1
            sender.balance -= tx_gas * (block.base_fee + tip)
            self._pending_count[tx.sender] -= 1
            if proposer in self.accounts:
                self.accounts[proposer].balance += tx_gas * tip
            events.append(
                SimEvent(slot, "tx_included", {"tx_id": tx_id, "block": block.number})
            )

        block.gas_used = gas_used
        self.mempool = [tx for tx in self.mempool if tx.tx_id not in included]
        self.blocks.append(block)
        events.append(
            SimEvent(
                slot,
                "block_built",
                {
                    "number": block.number,
                    "tx_count": len(block.transactions),
                    "gas_used": gas_used,
                    "base_fee": block.base_fee,
                },
            )
        )

        self._recent_tips.extend(slot_tips)
        if len(self._recent_tips) > TIP_HISTORY_BLOCKS * 400:
            self._recent_tips = self._recent_tips[-TIP_HISTORY_BLOCKS * 400:]

        # Finality sweep: everything buried finality_depth blocks deep.
        horizon = block.number - self.config.finality_depth
        while self._finalized_upto <= horizon:
            for tx_id in self.blocks[self._finalized_upto].transactions:
                tx = self.tx_index[tx_id]
                if tx.status == "included":
                    tx.status = "finalized"
                    events.append(SimEvent(slot, "tx_finalized", {"tx_id": tx_id}))
            self._finalized_upto += 1

        return events

    def latency_of(self, tx_id: int) -> float:
        return latency_of(self.tx_index[tx_id], self)

    def gas_price_of(self, tx_id: int) -> float:
        """Recorded gas price: base fee plus effective tip at inclusion."""
        tx = self.tx_index[tx_id]
        if tx.block_number is None:
            raise NotYetIncluded(tx_id)
        return self.blocks[tx.block_number].base_fee + self.inclusion_tip[tx_id]
