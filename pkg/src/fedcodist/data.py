"""Synthetic classification tasks, non-IID client partitioning, pool
construction and distillation-set assembly.

Every generated example carries an integer id unique within an experiment so
that split disjointness can be audited.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np

from .errors import DegeneratePool, NotEnoughExamples
from .fedcore import ClientDataset, ClientPool, Regime, stream_rng
from .numerics import Batch

Domain = Literal["domain_a", "domain_b", "mixed"]


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Gaussian mixture task: each class owns ``clusters_per_class`` centers.

    ``domain_shift_delta`` is added to every domain-b feature vector, and
    ``domain_b_class_weights`` optionally changes the domain-b label prior.
    """

    input_dim: int = 8
    num_classes: int = 5
    clusters_per_class: int = 3
    class_center_scale: float = 1.0
    noise_sigma: float = 0.5
    domain_shift_delta: tuple[float, ...] = ()
    domain_b_class_weights: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if min(self.input_dim, self.num_classes, self.clusters_per_class) < 1:
            raise ValueError("dimensions must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not (self.noise_sigma > 0 and self.class_center_scale > 0):
            raise ValueError("noise_sigma and class_center_scale must be positive")
        delta = tuple(float(x) for x in self.domain_shift_delta) or (0.0,) * self.input_dim
        if len(delta) != self.input_dim:
            raise ValueError("domain_shift_delta must have input_dim entries")
        object.__setattr__(self, "domain_shift_delta", delta)
        if self.domain_b_class_weights is not None:
            w = tuple(float(x) for x in self.domain_b_class_weights)
            if len(w) != self.num_classes or min(w) < 0 or sum(w) <= 0:
                raise ValueError("domain_b_class_weights must be num_classes non-negative weights")
            object.__setattr__(self, "domain_b_class_weights", w)


@dataclass(frozen=True)
class SyntheticTask:
    spec: SyntheticTaskSpec
    centers: np.ndarray  # [num_classes, clusters_per_class, input_dim]

    def shifted(self, shift) -> "SyntheticTask":
        """Same task with every center moved by ``shift``."""
        shift = np.broadcast_to(np.asarray(shift, dtype=np.float64), (self.spec.input_dim,))
        return SyntheticTask(self.spec, self.centers + shift)


def build_task(spec: SyntheticTaskSpec, rng: np.random.Generator) -> SyntheticTask:
    centers = rng.normal(
        0.0, spec.class_center_scale, size=(spec.num_classes, spec.clusters_per_class, spec.input_dim)
    )
    return SyntheticTask(spec, centers)


def generate_task(
    task: SyntheticTask,
    n: int,
    domain: Domain,
    rng: np.random.Generator,
    id_start: int = 0,
) -> Batch:
    """Draw ``n`` labeled examples; ids are ``id_start .. id_start + n - 1``.

    For ``mixed`` each example is domain b with probability 1/2. Draw order is
    labels, clusters, noise, domain flags, so domain a and b outputs from the
    same rng state differ exactly by the shift (given equal label priors).
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    spec = task.spec
    k = spec.num_classes
    if domain == "domain_b" and spec.domain_b_class_weights is not None:
        w = np.asarray(spec.domain_b_class_weights)
        labels = rng.choice(k, size=n, p=w / w.sum())
    else:
        labels = rng.integers(0, k, size=n)
    clusters = rng.integers(0, spec.clusters_per_class, size=n)
    noise = rng.normal(0.0, spec.noise_sigma, size=(n, spec.input_dim))
    features = task.centers[labels, clusters] + noise
    delta = np.asarray(spec.domain_shift_delta)
    if domain == "domain_b":
        features = features + delta
    elif domain == "mixed":
        is_b = rng.random(n) < 0.5
        features = features + is_b[:, None] * delta
    elif domain != "domain_a":
        raise ValueError(f"unknown domain {domain!r}")
    return Batch(features, labels, np.arange(id_start, id_start + n))


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int = 100
    examples_per_client: int = 50
    label_concentration: float = 0.5
    high_capacity_fraction: float = 0.1
    regime: Regime = "capacity_subset"

    def __post_init__(self):
        if self.num_clients < 2 or self.examples_per_client < 1:
            raise ValueError("need at least 2 clients and 1 example per client")
        if not self.label_concentration > 0:
            raise ValueError("label_concentration must be positive")
        if not 0.0 < self.high_capacity_fraction < 1.0:
            raise ValueError("high_capacity_fraction must lie in (0, 1)")
        if self.regime not in ("capacity_subset", "domain_disjoint"):
            raise ValueError(f"unknown regime {self.regime!r}")

    @property
    def num_high_capacity(self) -> int:
        return int(round(self.high_capacity_fraction * self.num_clients))


def _dirichlet_counts(
    need: int, props: np.ndarray, available: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Per-class counts summing to ``need`` drawn from ``props`` but never
    exceeding ``available``; overflow is re-drawn over classes with stock."""
    counts = np.zeros_like(available)
    while need > 0:
        left = available - counts
        p = np.where(left > 0, props, 0.0)
        if p.sum() <= 0:
            p = (left > 0).astype(np.float64)
        draw = rng.multinomial(need, p / p.sum())
        take = np.minimum(draw, left)
        counts += take
        need -= int(take.sum())
    return counts


def partition_clients(
    data: Batch,
    part: PartitionSpec,
    rng: np.random.Generator,
    num_clients: Optional[int] = None,
    first_client_id: int = 0,
    domain_tag: str = "mixed",
) -> list[ClientDataset]:
    """Dirichlet label-skew split of ``data`` into client datasets.

    Each client draws label proportions from ``Dirichlet(concentration * 1)``
    and receives ``examples_per_client`` examples without replacement.
    """
    if data.labels is None:
        raise ValueError("partitioning needs labels")
    num_clients = part.num_clients if num_clients is None else num_clients
    need = num_clients * part.examples_per_client
    if len(data) < need:
        raise NotEnoughExamples(f"need {need} examples for {num_clients} clients, have {len(data)}")
    k = int(data.labels.max()) + 1
    stock = [list(rng.permutation(np.flatnonzero(data.labels == c))) for c in range(k)]
    clients = []
    for i in range(num_clients):
        props = rng.dirichlet(np.full(k, part.label_concentration))
        if not np.all(np.isfinite(props)):
            props = np.full(k, 1.0 / k)
        available = np.array([len(s) for s in stock])
        counts = _dirichlet_counts(part.examples_per_client, props, available, rng)
        index = []
        for c, cnt in enumerate(counts):
            index.extend(stock[c][:cnt])
            del stock[c][:cnt]
        clients.append(ClientDataset(first_client_id + i, data.take(np.sort(index)), domain_tag))
    return clients


def split_pools(
    clients: Sequence[ClientDataset], part: PartitionSpec, rng: np.random.Generator
) -> ClientPool:
    if not clients:
        raise DegeneratePool("no clients")
    if part.regime == "domain_disjoint":
        high = frozenset(c.client_id for c in clients if c.domain_tag == "domain_b")
    else:
        m = int(round(part.high_capacity_fraction * len(clients)))
        if m == 0 or m >= len(clients):
            raise DegeneratePool(f"high-capacity pool of {m} out of {len(clients)} clients")
        ids = sorted(c.client_id for c in clients)
        high = frozenset(ids[i] for i in rng.choice(len(ids), size=m, replace=False))
    if not high or len(high) == len(clients):
        raise DegeneratePool("high-capacity pool must be a non-empty proper subset")
    return ClientPool(tuple(clients), high, part.regime)


@dataclass(frozen=True)
class DistillSet:
    batch: Batch
    provenance: Literal["in_domain_excised", "out_of_domain"]

    def __post_init__(self):
        if self.batch.labels is not None:
            raise ValueError("distillation data must be unlabeled")

    def __len__(self) -> int:
        return len(self.batch)


def make_distill_set(
    source: Literal["excise_from_train", "generate_out_of_domain"],
    size: int,
    task: SyntheticTask,
    rng: np.random.Generator,
    surplus: Optional[Batch] = None,
    ood_shift=1.0,
    id_start: int = 0,
) -> DistillSet:
    """Unlabeled distillation examples.

    ``excise_from_train`` takes ``size`` random rows of ``surplus`` (the part
    of the generated training data reserved away from the clients).
    ``generate_out_of_domain`` samples fresh examples from ``task`` with all
    centers moved by ``ood_shift``.
    """
    if size < 0:
        raise ValueError("size must be non-negative")
    if source == "excise_from_train":
        if surplus is None or len(surplus) < size:
            have = 0 if surplus is None else len(surplus)
            raise NotEnoughExamples(f"distillation set of {size} needs more than {have} surplus examples")
        pick = np.sort(rng.choice(len(surplus), size=size, replace=False))
        return DistillSet(surplus.take(pick).unlabeled(), "in_domain_excised")
    if source == "generate_out_of_domain":
        batch = generate_task(task.shifted(ood_shift), size, "mixed", rng, id_start)
        return DistillSet(batch.unlabeled(), "out_of_domain")
    raise ValueError(f"unknown distillation source {source!r}")


# ---------------------------------------------------------------------------
# Full experiment data plan.


@dataclass(frozen=True)
class DataPlan:
    """Sizes for the non-client splits.

    ``excise_fraction`` of the generated training data is reserved as surplus
    for in-domain distillation; ``train_slack`` oversizes the client allotment
    so Dirichlet draws are not forced by exhausted classes.
    """

    excise_fraction: float = 0.3
    train_slack: float = 1.25
    heldout_size: int = 1000
    test_size: int = 2000

    def __post_init__(self):
        if not 0.0 <= self.excise_fraction < 1.0:
            raise ValueError("excise_fraction must lie in [0, 1)")
        if self.train_slack < 1.0:
            raise ValueError("train_slack must be >= 1")
        if self.heldout_size < 1 or self.test_size < 1:
            raise ValueError("heldout_size and test_size must be positive")


@dataclass(frozen=True)
class ExperimentData:
    task: SyntheticTask
    pool: ClientPool
    allotment_ids: frozenset[int]
    surplus: Batch
    distill: DistillSet
    heldout: Batch
    tests: dict = field(default_factory=dict)  # split name -> labeled Batch

    def splits(self) -> dict[str, Batch]:
        return {"heldout": self.heldout, **self.tests}


def available_distill_size(part: PartitionSpec, plan: DataPlan) -> int:
    """Surplus size produced by :func:`build_experiment_data`."""
    return sum(_train_sizes(part, plan)[1].values())


def _train_sizes(part: PartitionSpec, plan: DataPlan) -> tuple[dict, dict]:
    if part.regime == "domain_disjoint":
        n_b = part.num_high_capacity
        groups = {"domain_a": part.num_clients - n_b, "domain_b": n_b}
    else:
        groups = {"mixed": part.num_clients}
    allot, surplus = {}, {}
    for dom, n_clients in groups.items():
        a = int(math.ceil(n_clients * part.examples_per_client * plan.train_slack))
        allot[dom] = a
        surplus[dom] = int(round(a * plan.excise_fraction / (1.0 - plan.excise_fraction)))
    return allot, surplus


def build_experiment_data(
    task_spec: SyntheticTaskSpec,
    part: PartitionSpec,
    plan: DataPlan,
    distill_source: str,
    distill_size: int,
    seed: int,
    ood_shift=1.0,
) -> ExperimentData:
    """Generate clients, pools, distillation, held-out and test splits.

    Pure function of its arguments. Domain-disjoint runs need a nonzero
    ``domain_shift_delta`` to be meaningful but do not require it.
    """
    rng = stream_rng(seed, "data")
    task = build_task(task_spec, rng)
    next_id = 0

    def gen(n, domain):
        nonlocal next_id
        batch = generate_task(task, n, domain, rng, next_id)
        next_id += n
        return batch

    allot_sizes, surplus_sizes = _train_sizes(part, plan)
    clients: list[ClientDataset] = []
    allot_ids: set[int] = set()
    surplus_parts = []
    for dom in allot_sizes:
        allotment = gen(allot_sizes[dom], dom)
        surplus_parts.append(gen(surplus_sizes[dom], dom))
        allot_ids.update(allotment.ids.tolist())
        n_clients = (
            part.num_clients if dom == "mixed"
            else part.num_high_capacity if dom == "domain_b"
            else part.num_clients - part.num_high_capacity
        )
        if n_clients < 1:
            raise DegeneratePool(f"no clients for {dom}")
        clients += partition_clients(
            allotment, part, rng, num_clients=n_clients, first_client_id=len(clients), domain_tag=dom
        )
    surplus = Batch.concat(surplus_parts)
    pool = split_pools(clients, part, rng)

    distill = make_distill_set(distill_source, distill_size, task, rng, surplus, ood_shift, next_id)
    next_id += len(distill) if distill.provenance == "out_of_domain" else 0
    heldout = gen(plan.heldout_size, "mixed")
    tests = {
        "test_mixed": gen(plan.test_size, "mixed"),
        "test_domain_a": gen(plan.test_size, "domain_a"),
        "test_domain_b": gen(plan.test_size, "domain_b"),
    }
    return ExperimentData(task, pool, frozenset(allot_ids), surplus, distill, heldout, tests)


def audit_disjointness(data: ExperimentData) -> None:
    """Raise ``AssertionError`` unless federated training, distillation,
    held-out and test examples are pairwise disjoint by id."""
    fed = np.concatenate([c.batch.ids for c in data.pool.all_clients])
    groups = {
        "federated": fed,
        "distill": data.distill.batch.ids,
        "heldout": data.heldout.ids,
        "test": np.concatenate([b.ids for b in data.tests.values()]),
    }
    for name, ids in groups.items():
        if ids is None:
            raise AssertionError(f"{name} examples carry no ids")
        if len(np.unique(ids)) != len(ids):
            raise AssertionError(f"duplicate ids inside {name}")
    names = list(groups)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            overlap = np.intersect1d(groups[a], groups[b])
            if overlap.size:
                raise AssertionError(f"{a} and {b} share {overlap.size} examples")
    if not set(fed.tolist()) <= data.allotment_ids:
        raise AssertionError("client examples outside the federated allotment")
    if data.distill.batch.labels is not None:
        raise AssertionError("distillation set carries labels")


# ---------------------------------------------------------------------------
# Columnar text export: header row, one example per line, features then label.


def write_columnar(data: ExperimentData, path) -> None:
    d = data.task.spec.input_dim
    rows = []
    for c in sorted(data.pool.all_clients, key=lambda c: c.client_id):
        rows.append(("train", c.client_id, c.batch))
    rows.append(("distill", "", data.distill.batch))
    for name, batch in data.splits().items():
        rows.append((name, "", batch))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "client_id", "example_id", *[f"x{j}" for j in range(d)], "label"])
        for split, cid, batch in rows:
            for r in range(len(batch)):
                label = "" if batch.labels is None else int(batch.labels[r])
                w.writerow([split, cid, int(batch.ids[r]), *map(repr, batch.features[r].tolist()), label])


def read_columnar(path) -> dict[tuple[str, str], Batch]:
    """Inverse of :func:`write_columnar`, keyed by ``(split, client_id)``."""
    groups: dict[tuple[str, str], list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = len(header) - 4
        for row in reader:
            groups.setdefault((row[0], row[1]), []).append(row)
    out = {}
    for key, rows in groups.items():
        feats = np.array([[float(x) for x in r[3 : 3 + d]] for r in rows]).reshape(len(rows), d)
        ids = np.array([int(r[2]) for r in rows])
        labels = None if rows[0][-1] == "" else np.array([int(r[-1]) for r in rows])
        out[key] = Batch(feats, labels, ids)
    return out
