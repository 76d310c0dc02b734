"""Federated averaging over client pools.

Sign convention: a client delta is ``server_params - local_params``. The
aggregated delta is therefore a descent direction's negative, i.e. it is fed
to the server optimizer exactly like a gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Literal, Mapping, Optional, Sequence

import numpy as np

from .errors import DegeneratePool, EmptyClient, NothingToAggregate, PoolExhausted
from .numerics import Batch, MlpSpec, ParamVector, backprop
from .optim import AdamState, LinearSchedule, SgdConfig, adam_step, schedule_lr, sgd_step

DomainTag = Literal["domain_a", "domain_b", "mixed"]
Regime = Literal["capacity_subset", "domain_disjoint"]

# Independent rng streams derived from the master seed.
STREAMS = {
    "data": 0,
    "init_small": 1,
    "init_large": 2,
    "fed_small": 3,
    "fed_large": 4,
    "distill_small": 5,
    "distill_large": 6,
}


def stream_rng(seed: int, stream: str, *keys: int) -> np.random.Generator:
    """Generator that is a pure function of ``(seed, stream, *keys)``."""
    return np.random.default_rng([int(seed) % 2**64, STREAMS[stream], *map(int, keys)])


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    batch: Batch
    domain_tag: DomainTag = "mixed"

    def __post_init__(self):
        if self.batch.labels is None:
            raise ValueError("client data must be labeled")

    @property
    def num_examples(self) -> int:
        return len(self.batch)


@dataclass(frozen=True)
class ClientPool:
    """Full pool ``all_clients`` plus the high-capacity subset.

    In the ``capacity_subset`` regime the small model trains on every client;
    in ``domain_disjoint`` it trains only on the complement of the
    high-capacity subset.
    """

    all_clients: tuple[ClientDataset, ...]
    high_capacity_ids: frozenset[int]
    regime: Regime = "capacity_subset"

    def __post_init__(self):
        ids = [c.client_id for c in self.all_clients]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate client ids")
        if not self.high_capacity_ids <= set(ids):
            raise ValueError("high-capacity ids must be drawn from the pool")
        if not self.high_capacity_ids or len(self.high_capacity_ids) >= len(ids):
            raise DegeneratePool("high-capacity pool must be a non-empty proper subset")

    @property
    def ids(self) -> list[int]:
        return sorted(c.client_id for c in self.all_clients)

    @property
    def by_id(self) -> dict[int, ClientDataset]:
        return {c.client_id: c for c in self.all_clients}

    @property
    def small_pool_ids(self) -> list[int]:
        if self.regime == "domain_disjoint":
            return sorted(set(self.ids) - self.high_capacity_ids)
        return self.ids

    @property
    def large_pool_ids(self) -> list[int]:
        return sorted(self.high_capacity_ids)


@dataclass(frozen=True)
class RoundConfig:
    client_lr: float = 0.05
    clients_per_round: int = 20
    client_batch_size: int = 20
    local_epochs: int = 1
    # per-pool override for the high-capacity pool, which may hold fewer than
    # clients_per_round clients at desk scale
    clients_per_round_large: Optional[int] = None
    weighting: Literal["examples", "uniform"] = "examples"

    def __post_init__(self):
        if self.client_lr < 0:
            raise ValueError("client_lr must be non-negative")
        for name in ("clients_per_round", "client_batch_size", "local_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.clients_per_round_large is not None and self.clients_per_round_large < 1:
            raise ValueError("clients_per_round_large must be positive")
        if self.weighting not in ("examples", "uniform"):
            raise ValueError(f"unknown weighting {self.weighting!r}")

    @property
    def large_k(self) -> int:
        return self.clients_per_round_large or self.clients_per_round


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    delta: ParamVector
    num_examples: int


@dataclass(frozen=True)
class AggregatedGradient:
    value: ParamVector
    total_examples: int


def sample_clients(pool: Sequence[int], k: int, rng: np.random.Generator) -> list[int]:
    if k > len(pool):
        raise PoolExhausted(f"cannot sample {k} clients from a pool of {len(pool)}")
    if k < 1:
        raise ValueError("k must be positive")
    picks = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in picks]


def local_train(
    spec: MlpSpec,
    server_params: ParamVector,
    client: ClientDataset,
    config: RoundConfig,
    rng: np.random.Generator,
) -> tuple[ParamVector, int]:
    """Minibatch SGD on one client; returns ``(server - local, num_examples)``."""
    n = client.num_examples
    if n == 0:
        raise EmptyClient(f"client {client.client_id} has no data")
    sgd = SgdConfig(config.client_lr)
    params = server_params
    bs = config.client_batch_size
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            mb = client.batch.take(order[start : start + bs])
            _, grad = backprop(spec, params, mb, "cross_entropy")
            params = sgd_step(params, grad, sgd)
    return server_params - params, n


def aggregate(
    updates: Iterable[ClientUpdate], weighting: str = "examples"
) -> AggregatedGradient:
    """Weighted mean of client deltas, summed in ascending client-id order."""
    updates = sorted(updates, key=lambda u: u.client_id)
    if not updates:
        raise NothingToAggregate("no client updates")
    first = updates[0].delta
    total = 0
    acc = np.zeros_like(first.values)
    weight_sum = 0.0
    for u in updates:
        first.check_compatible(u.delta)
        w = float(u.num_examples) if weighting == "examples" else 1.0
        acc += w * u.delta.values
        weight_sum += w
        total += u.num_examples
    return AggregatedGradient(first.with_values(acc / weight_sum), total)


def server_apply(
    params: ParamVector, g: AggregatedGradient, state: AdamState, lr: float
) -> tuple[ParamVector, AdamState]:
    return adam_step(params, g.value, state, lr)


def client_gradient(
    spec: MlpSpec,
    params: ParamVector,
    pool_ids: Sequence[int],
    clients: Mapping[int, ClientDataset],
    round_cfg: RoundConfig,
    rng: np.random.Generator,
    k: Optional[int] = None,
) -> AggregatedGradient:
    """Sample ``k`` clients, train each locally and aggregate their deltas."""
    k = round_cfg.clients_per_round if k is None else k
    chosen = sample_clients(list(pool_ids), k, rng)
    # one child seed per sampled client so client work can run in any order
    seeds = rng.integers(0, 2**63 - 1, size=len(chosen))
    updates = []
    for cid, s in zip(chosen, seeds):
        delta, n = local_train(spec, params, clients[cid], round_cfg, np.random.default_rng(s))
        updates.append(ClientUpdate(cid, delta, n))
    return aggregate(updates, round_cfg.weighting)


def fedavg_round(
    spec: MlpSpec,
    params: ParamVector,
    pool_ids: Sequence[int],
    clients: Mapping[int, ClientDataset],
    round_cfg: RoundConfig,
    server_state: AdamState,
    server_lr: float,
    rng: np.random.Generator,
    k: Optional[int] = None,
) -> tuple[ParamVector, AdamState]:
    g = client_gradient(spec, params, pool_ids, clients, round_cfg, rng, k)
    return server_apply(params, g, server_state, server_lr)


# ---------------------------------------------------------------------------
# Dual-pool driver shared by the baseline and both codistillation strategies.


@dataclass
class ModelState:
    params: ParamVector
    server_state: AdamState


@dataclass
class DualState:
    small: ModelState
    large: ModelState

    def snapshot(self) -> "DualState":
        return DualState(
            ModelState(self.small.params, self.small.server_state),
            ModelState(self.large.params, self.large.server_state),
        )


@dataclass(frozen=True)
class DualPoolSetup:
    """Everything needed to train the small model on its pool and the large
    model on the high-capacity pool."""

    small_spec: MlpSpec
    large_spec: MlpSpec
    pool: ClientPool
    round_cfg: RoundConfig
    server_lr_small: LinearSchedule
    server_lr_large: LinearSchedule
    seed: int = 0
    clients: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.clients is None:
            object.__setattr__(self, "clients", self.pool.by_id)
        if self.small_spec.num_classes != self.large_spec.num_classes:
            raise ValueError("both models must predict the same classes")

    def initial_state(self, init_small: ParamVector, init_large: ParamVector) -> DualState:
        return DualState(
            ModelState(init_small, AdamState.fresh(init_small)),
            ModelState(init_large, AdamState.fresh(init_large)),
        )

    def server_lrs(self, t: int) -> tuple[float, float]:
        """Server learning rates for round ``t`` (1-based)."""
        return schedule_lr(self.server_lr_small, t - 1), schedule_lr(self.server_lr_large, t - 1)

    def client_gradients(self, state: DualState, t: int) -> tuple[AggregatedGradient, AggregatedGradient]:
        g_small = client_gradient(
            self.small_spec, state.small.params, self.pool.small_pool_ids, self.clients,
            self.round_cfg, stream_rng(self.seed, "fed_small", t),
        )
        g_large = client_gradient(
            self.large_spec, state.large.params, self.pool.large_pool_ids, self.clients,
            self.round_cfg, stream_rng(self.seed, "fed_large", t), k=self.round_cfg.large_k,
        )
        return g_small, g_large

    def apply(self, state: DualState, t: int, g_small: AggregatedGradient, g_large: AggregatedGradient) -> DualState:
        lr_s, lr_l = self.server_lrs(t)
        ps, ss = server_apply(state.small.params, g_small, state.small.server_state, lr_s)
        pl, sl = server_apply(state.large.params, g_large, state.large.server_state, lr_l)
        return DualState(ModelState(ps, ss), ModelState(pl, sl))

    def fedavg_step(self, state: DualState, t: int) -> DualState:
        return self.apply(state, t, *self.client_gradients(state, t))


RoundHook = Callable[[int, DualState, bool], None]
"""Called as ``hook(t, state, codistilled)`` after round ``t`` (and at t=0)."""


def run_dual_fedavg(
    setup: DualPoolSetup,
    init: DualState,
    total_rounds: int,
    hook: Optional[RoundHook] = None,
) -> DualState:
    state = init
    if hook:
        hook(0, state, False)
    for t in range(1, total_rounds + 1):
        state = setup.fedavg_step(state, t)
        if hook:
            hook(t, state, False)
    return state
