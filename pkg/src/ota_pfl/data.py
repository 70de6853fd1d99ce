"""Dataset generation, partitioning and corruption.

Covers the experiment harness's data needs: a synthetic clustered binary
classification task (a desk-scale stand-in for heterogeneous image
benchmarks), IID and Dirichlet label partitioning, uniform label-flip
noise injection with per-client levels drawn above a configurable lower
bound, and a small CSV reader/writer for external datasets.

All operations are pure functions of their seed; identical seeds yield
bit-identical shards.
"""

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .seeding import LABEL_NOISE, PARTITION, SYNTH_DATA, SYNTH_MULTI, substream

# Norm of the shared base parameter in synth_clustered; heterogeneity is
# expressed relative to this scale.
_SYNTH_BASE_NORM = 2.0


@dataclass
class NoiseMeta:
    """Record of a label-noise injection on one shard."""

    is_noisy: bool
    noise_level: float
    flipped_indices: np.ndarray

    def __post_init__(self):
        self.flipped_indices = np.asarray(self.flipped_indices, dtype=np.int64)


@dataclass
class DataShard:
    """One client's local dataset: row-major features plus integer labels."""

    features: np.ndarray
    labels: np.ndarray
    client_id: int = 0
    noise_meta: NoiseMeta | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(
                f"label count {self.labels.shape} does not match row count {self.features.shape[0]}"
            )

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def subset(self, indices) -> "DataShard":
        indices = np.asarray(indices, dtype=np.int64)
        return DataShard(
            features=self.features[indices],
            labels=self.labels[indices],
            client_id=self.client_id,
        )


@dataclass
class PartitionPlan:
    """Assignment of pooled sample indices to clients plus realized class mix."""

    scheme: str
    alpha: float | None
    n_clients: int
    class_count: int
    proportions: np.ndarray  # (n_clients, class_count), rows sum to 1
    assignments: list  # client -> index array

    def shard_sizes(self) -> np.ndarray:
        return np.array([len(a) for a in self.assignments])

    def to_json_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "alpha": self.alpha,
            "n_clients": self.n_clients,
            "class_count": self.class_count,
            "assignments": {str(k): np.asarray(a).tolist() for k, a in enumerate(self.assignments)},
        }


def synth_clustered(
    n_clients: int,
    dim: int,
    n_per_client: int,
    heterogeneity: float,
    seed: int,
    intercept: bool = False,
) -> list[DataShard]:
    """Per-client binary logistic tasks with controllably divergent parameters.

    Client k draws features x ~ N(0, I) and labels y ~ Bernoulli(sigmoid(x.theta_k))
    with theta_k = theta_base + heterogeneity * delta_k, delta_k a unit Gaussian
    direction.  heterogeneity=0 makes every shard statistically identical.

    With ``intercept`` an all-ones column is appended (feature width dim+1)
    so downstream linear models can express class-prior bias.
    """
    if n_clients < 1 or dim < 1 or n_per_client < 1:
        raise ValueError("counts must be positive")
    if heterogeneity < 0:
        raise ValueError("heterogeneity must be nonnegative")
    base_rng = substream(seed, SYNTH_DATA)
    direction = base_rng.normal(size=dim)
    theta_base = _SYNTH_BASE_NORM * direction / np.linalg.norm(direction)
    shards = []
    for k in range(n_clients):
        rng = substream(seed, SYNTH_DATA, k + 1)
        delta = rng.normal(size=dim)
        theta = theta_base + heterogeneity * delta / np.linalg.norm(delta)
        x = rng.normal(size=(n_per_client, dim))
        probs = 0.5 * (1.0 + np.tanh(0.5 * (x @ theta)))
        y = (rng.random(n_per_client) < probs).astype(np.int64)
        if intercept:
            x = np.hstack([x, np.ones((n_per_client, 1))])
        shards.append(DataShard(features=x, labels=y, client_id=k))
    return shards


def synth_clustered_multiclass(
    n_clients: int,
    dim: int,
    n_per_client: int,
    n_classes: int,
    heterogeneity: float,
    seed: int,
    intercept: bool = False,
) -> list[DataShard]:
    """Multi-class analogue of :func:`synth_clustered`.

    Client k draws labels from a softmax over per-class prototype
    directions theta_{k,c} = theta_base_c + heterogeneity * delta_{k,c}.
    Needed for label-noise experiments where flip levels above one half
    must attenuate rather than invert the class signal.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if n_clients < 1 or dim < 1 or n_per_client < 1:
        raise ValueError("counts must be positive")
    if heterogeneity < 0:
        raise ValueError("heterogeneity must be nonnegative")
    base_rng = substream(seed, SYNTH_MULTI)
    base = base_rng.normal(size=(n_classes, dim))
    base *= _SYNTH_BASE_NORM / np.linalg.norm(base, axis=1, keepdims=True)
    shards = []
    for k in range(n_clients):
        rng = substream(seed, SYNTH_MULTI, k + 1)
        delta = rng.normal(size=(n_classes, dim))
        theta = base + heterogeneity * delta / np.linalg.norm(delta, axis=1, keepdims=True)
        x = rng.normal(size=(n_per_client, dim))
        logits = x @ theta.T
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        y = (probs.cumsum(axis=1) < rng.random((n_per_client, 1))).sum(axis=1).astype(np.int64)
        if intercept:
            x = np.hstack([x, np.ones((n_per_client, 1))])
        shards.append(DataShard(features=x, labels=y, client_id=k))
    return shards


def pool_shards(shards: list[DataShard]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate shards into one (features, labels) pool."""
    return (
        np.concatenate([s.features for s in shards], axis=0),
        np.concatenate([s.labels for s in shards]),
    )


def iid_partition(labels: np.ndarray, n_clients: int, seed: int) -> PartitionPlan:
    """Uniform random split into near-equal disjoint shards."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if n_clients < 1 or n_clients > n:
        raise ValueError(f"cannot split {n} samples across {n_clients} clients")
    rng = substream(seed, PARTITION)
    perm = rng.permutation(n)
    assignments = [np.sort(part) for part in np.array_split(perm, n_clients)]
    class_count = int(labels.max()) + 1
    return PartitionPlan(
        scheme="iid",
        alpha=None,
        n_clients=n_clients,
        class_count=class_count,
        proportions=_realized_proportions(labels, assignments, class_count),
        assignments=assignments,
    )


def dirichlet_partition(labels: np.ndarray, n_clients: int, alpha: float, seed: int) -> PartitionPlan:
    """Split each class across clients with proportions ~ Dirichlet(alpha * 1_K).

    Every sample is assigned exactly once.  Draws that leave a client empty
    are retried up to 100 times; if emptiness persists (tiny datasets or
    extreme alpha), single samples are moved from the largest shards.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if n_clients < 1 or n_clients > n:
        raise ValueError(f"cannot split {n} samples across {n_clients} clients")
    class_count = int(labels.max()) + 1
    class_indices = [np.flatnonzero(labels == c) for c in range(class_count)]
    if any(len(idx) == 0 for idx in class_indices):
        raise ValueError("every class must have at least one sample")
    rng = substream(seed, PARTITION)
    assignments = None
    for _ in range(100):
        buckets = [[] for _ in range(n_clients)]
        for idx in class_indices:
            shuffled = idx.copy()
            rng.shuffle(shuffled)
            props = rng.dirichlet(np.full(n_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * len(shuffled)).astype(np.int64)
            for k, part in enumerate(np.split(shuffled, cuts)):
                buckets[k].append(part)
        assignments = [np.sort(np.concatenate(parts)) for parts in buckets]
        if min(len(a) for a in assignments) > 0:
            break
    else:
        assignments = _fill_empty_shards(assignments)
    return PartitionPlan(
        scheme="dirichlet",
        alpha=float(alpha),
        n_clients=n_clients,
        class_count=class_count,
        proportions=_realized_proportions(labels, assignments, class_count),
        assignments=assignments,
    )


def _fill_empty_shards(assignments: list) -> list:
    assignments = [np.asarray(a, dtype=np.int64) for a in assignments]
    while min(len(a) for a in assignments) == 0:
        largest = max(range(len(assignments)), key=lambda k: len(assignments[k]))
        smallest = min(range(len(assignments)), key=lambda k: len(assignments[k]))
        moved, rest = assignments[largest][0], assignments[largest][1:]
        assignments[largest] = rest
        assignments[smallest] = np.array([moved], dtype=np.int64)
    return [np.sort(a) for a in assignments]


def _realized_proportions(labels, assignments, class_count) -> np.ndarray:
    props = np.zeros((len(assignments), class_count))
    for k, idx in enumerate(assignments):
        counts = np.bincount(labels[idx], minlength=class_count)
        props[k] = counts / max(1, len(idx))
    return props


def apply_partition(features: np.ndarray, labels: np.ndarray, plan: PartitionPlan) -> list[DataShard]:
    """Materialize shards from a pooled dataset and a partition plan."""
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    return [
        DataShard(features=features[idx], labels=labels[idx], client_id=k)
        for k, idx in enumerate(plan.assignments)
    ]


def inject_label_noise(
    shards: list[DataShard],
    noisy_client_ratio: float,
    level_lower_bound: float,
    seed: int,
    class_count: int | None = None,
) -> list[DataShard]:
    """Flip labels on ceil(ratio * K) uniformly chosen clients.

    Each selected client gets a level u ~ Uniform(lower_bound, 1) and has
    floor(u * n) of its labels flipped, uniformly, to a different class.
    Unselected shards are returned untouched (same objects).
    """
    if not 0.0 <= noisy_client_ratio <= 1.0:
        raise ValueError("noisy_client_ratio must lie in [0, 1]")
    if not 0.0 <= level_lower_bound <= 1.0:
        raise ValueError("level_lower_bound must lie in [0, 1]")
    if class_count is None:
        class_count = int(max(int(s.labels.max()) for s in shards)) + 1
    if class_count < 2:
        raise ValueError("label flipping requires at least two classes")
    n_noisy = math.ceil(noisy_client_ratio * len(shards))
    if n_noisy == 0:
        return list(shards)
    pick_rng = substream(seed, LABEL_NOISE)
    chosen = set(pick_rng.choice(len(shards), size=n_noisy, replace=False).tolist())
    out = []
    for pos, shard in enumerate(shards):
        if pos not in chosen:
            out.append(shard)
            continue
        rng = substream(seed, LABEL_NOISE, shard.client_id + 1)
        level = float(rng.uniform(level_lower_bound, 1.0))
        n_flip = int(level * shard.n)
        flip_idx = np.sort(rng.choice(shard.n, size=n_flip, replace=False))
        labels = shard.labels.copy()
        offsets = rng.integers(1, class_count, size=n_flip)
        labels[flip_idx] = (labels[flip_idx] + offsets) % class_count
        out.append(
            replace(
                shard,
                labels=labels,
                noise_meta=NoiseMeta(is_noisy=True, noise_level=level, flipped_indices=flip_idx),
            )
        )
    return out


def train_test_split(shard: DataShard, test_fraction: float, seed: int) -> tuple[DataShard, DataShard]:
    """Random row split of one shard into (train, test)."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    rng = substream(seed, PARTITION, shard.client_id + 1)
    perm = rng.permutation(shard.n)
    n_test = max(1, int(round(test_fraction * shard.n)))
    if n_test >= shard.n:
        raise ValueError(f"test fraction {test_fraction} leaves no training rows for n={shard.n}")
    return shard.subset(np.sort(perm[n_test:])), shard.subset(np.sort(perm[:n_test]))


def load_csv(path, label_column: str = "label", class_count: int | None = None) -> DataShard:
    """Read a headered numeric CSV into a shard; errors name the offending cell."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise ValueError(f"{path}: no column named {label_column!r} in header {header}")
        label_pos = header.index(label_column)
        features, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path} line {line_no}: expected {len(header)} cells, got {len(row)}")
            feat_row = []
            for pos, cell in enumerate(row):
                name = header[pos]
                try:
                    value = float(cell)
                except ValueError:
                    raise ValueError(
                        f"{path} line {line_no}, column {name!r}: not numeric: {cell.strip()!r}"
                    ) from None
                if pos == label_pos:
                    label = int(value)
                    if label != value:
                        raise ValueError(
                            f"{path} line {line_no}, column {name!r}: label must be an integer, got {cell.strip()!r}"
                        )
                    if label < 0 or (class_count is not None and label >= class_count):
                        raise ValueError(
                            f"{path} line {line_no}, column {name!r}: label {label} outside "
                            f"[0, {class_count})"
                        )
                    labels.append(label)
                else:
                    feat_row.append(value)
            features.append(feat_row)
    if not features:
        raise ValueError(f"{path}: no data rows")
    return DataShard(features=np.array(features, dtype=float), labels=np.array(labels, dtype=np.int64))


def write_csv(shard: DataShard, path, label_column: str = "label", feature_names=None) -> None:
    """Write a shard as headered CSV with 17-significant-digit floats."""
    p = shard.features.shape[1]
    if feature_names is None:
        feature_names = [f"f{i}" for i in range(p)]
    if len(feature_names) != p:
        raise ValueError(f"{len(feature_names)} feature names for {p} feature columns")
    with open(path, "w", newline="") as fh:
        fh.write(",".join([*feature_names, label_column]) + "\n")
        for row, label in zip(shard.features, shard.labels):
            cells = [f"{v:.17g}" for v in row]
            cells.append(str(int(label)))
            fh.write(",".join(cells) + "\n")
