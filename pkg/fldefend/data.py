"""
Synthetic tasks, non-IID partitioning and targeted label flipping.

Each helper is pure: it takes value inputs plus a seed and returns new
datasets. Class ids are 1..E.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from fldefend.errors import ConfigurationError

logger = logging.getLogger(__name__)

ATTACK_MODES = ("none", "static", "adaptive")


@dataclass(frozen=True)
class Dataset:
    """Feature rows with integer class labels in 1..E."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise ConfigurationError(f"features {features.shape} and labels {labels.shape} do not line up")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_features(self) -> int:
        return int(self.features.shape[1])

    @classmethod
    def empty(cls, num_features: int) -> "Dataset":
        return cls(np.zeros((0, num_features)), np.zeros(0, dtype=np.int64))

    def validate(self, num_classes: int) -> None:
        if len(self) and (self.labels.min() < 1 or self.labels.max() > num_classes):
            raise ConfigurationError(f"labels outside 1..{num_classes}")
        if not np.all(np.isfinite(self.features)):
            raise ConfigurationError("non-finite feature values")

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices])

    def class_counts(self, num_classes: int) -> np.ndarray:
        """Counts per class, index 0 is class 1."""
        return np.bincount(self.labels - 1, minlength=num_classes)[:num_classes]

    def to_frame(self) -> pd.DataFrame:
        columns = [f"f{i + 1}" for i in range(self.num_features)]
        df = pd.DataFrame(self.features, columns=columns)
        df["label"] = self.labels
        return df

    def to_csv(self, path: Union[str, Path]) -> None:
        """Export as CSV with header f1..fin,label."""
        self.to_frame().to_csv(Path(path), index=False, float_format="%.12g", lineterminator="\n")


@dataclass(frozen=True)
class TaskSpec:
    """Class-conditional Gaussian task.

    centers: optional (E, in) array; drawn from N(0, center_scale^2) when
    omitted. spread: one std-dev for all classes or one per class.
    center_gaps: (a, b, gap) entries, applied in order; each moves class
    b's center along the a -> b line until it sits exactly gap from a.
    """

    num_classes: int = 5
    num_features: int = 32
    samples_per_class: int = 600
    test_samples_per_class: int = 300
    spread: Union[float, Tuple[float, ...]] = 1.0
    center_scale: float = 1.0
    centers: Optional[Tuple[Tuple[float, ...], ...]] = None
    val_fraction: float = 0.1
    seed: int = 0
    center_gaps: Tuple[Tuple[int, int, float], ...] = ()

    def resolved_centers(self) -> np.ndarray:
        if self.centers is not None:
            centers = np.array(self.centers, dtype=np.float64)
        else:
            rng = np.random.default_rng(self.seed)
            centers = rng.normal(0.0, self.center_scale, size=(self.num_classes, self.num_features))
        if centers.ndim != 2 or centers.shape[0] != self.num_classes:
            return centers
        for a, b, gap in self.center_gaps:
            if not (1 <= a <= self.num_classes and 1 <= b <= self.num_classes) or a == b:
                continue
            direction = centers[b - 1] - centers[a - 1]
            length = np.linalg.norm(direction)
            if length > 0:
                centers[b - 1] = centers[a - 1] + gap * direction / length
        return centers

    def resolved_spreads(self) -> np.ndarray:
        spreads = np.asarray(self.spread, dtype=np.float64)
        if spreads.ndim == 0:
            spreads = np.full(self.num_classes, float(spreads))
        return spreads

    def validate(self) -> None:
        if self.num_classes < 3:
            raise ConfigurationError(f"num_classes must be >= 3, got {self.num_classes}")
        if self.num_features < 1:
            raise ConfigurationError(f"num_features must be >= 1, got {self.num_features}")
        if self.samples_per_class < 1 or self.test_samples_per_class < 1:
            raise ConfigurationError("samples_per_class and test_samples_per_class must be >= 1")
        if not 0.0 < self.val_fraction <= 1.0:
            raise ConfigurationError(f"val_fraction must be in (0, 1], got {self.val_fraction}")
        for a, b, gap in self.center_gaps:
            if not (1 <= a <= self.num_classes and 1 <= b <= self.num_classes) or a == b:
                raise ConfigurationError(f"center gap ({a}, {b}) needs two distinct classes in 1..{self.num_classes}")
            if not gap > 0:
                raise ConfigurationError(f"center gap ({a}, {b}) must be > 0, got {gap}")
        spreads = self.resolved_spreads()
        if spreads.shape != (self.num_classes,) or np.any(spreads <= 0):
            raise ConfigurationError("spread must be positive, one value or one per class")
        centers = self.resolved_centers()
        if centers.shape != (self.num_classes, self.num_features):
            raise ConfigurationError(
                f"centers shape {centers.shape} != ({self.num_classes}, {self.num_features})"
            )
        diffs = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(axis=-1)) + np.eye(self.num_classes)
        if np.any(dist == 0):
            raise ConfigurationError("class centers must be pairwise distinct")


@dataclass(frozen=True)
class FlipPair:
    """Relabel source -> target while start_round <= round <= end_round."""

    source: int
    target: int
    start_round: int = 1
    end_round: Optional[int] = None

    def __post_init__(self):
        if self.source < 1 or self.target < 1:
            raise ConfigurationError(f"class ids start at 1, got {self.source}->{self.target}")
        if not self.source < self.target:
            raise ConfigurationError(f"source class must be smaller than target, got {self.source}->{self.target}")
        if self.end_round is not None and self.end_round < self.start_round:
            raise ConfigurationError(f"empty round range {self.start_round}..{self.end_round}")

    def active(self, round: int) -> bool:
        return self.start_round <= round and (self.end_round is None or round <= self.end_round)

    def overlaps(self, other: "FlipPair") -> bool:
        end_a = self.end_round if self.end_round is not None else float("inf")
        end_b = other.end_round if other.end_round is not None else float("inf")
        return self.start_round <= end_b and other.start_round <= end_a


@dataclass(frozen=True)
class AttackSpec:
    mode: str = "none"
    pairs: Tuple[FlipPair, ...] = field(default_factory=tuple)
    flip_fraction: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if self.mode not in ATTACK_MODES:
            raise ConfigurationError(f"attack mode must be one of {ATTACK_MODES}, got {self.mode!r}")
        if not 0.0 < self.flip_fraction <= 1.0:
            raise ConfigurationError(f"flip_fraction must be in (0, 1], got {self.flip_fraction}")
        if self.mode == "static" and len(self.pairs) != 1:
            raise ConfigurationError("static attacks take exactly one flip pair")
        if self.mode == "adaptive":
            if not self.pairs:
                raise ConfigurationError("adaptive attacks need at least one flip pair")
            for i, a in enumerate(self.pairs):
                for b in self.pairs[i + 1:]:
                    if a.overlaps(b):
                        raise ConfigurationError(
                            f"adaptive pairs {a.source}->{a.target} and {b.source}->{b.target} have overlapping rounds"
                        )

    def validate(self, num_classes: int) -> None:
        for pair in self.pairs:
            if pair.target > num_classes:
                raise ConfigurationError(
                    f"flip pair {pair.source}->{pair.target} references a class above {num_classes}"
                )

    def active_pair(self, round: int) -> Optional[FlipPair]:
        if self.mode == "none":
            return None
        for pair in self.pairs:
            if pair.active(round):
                return pair
        return None


def _draw(rng: np.random.Generator, centers: np.ndarray, spreads: np.ndarray, per_class: int) -> Dataset:
    num_classes, num_features = centers.shape
    labels = np.repeat(np.arange(1, num_classes + 1), per_class)
    noise = rng.normal(size=(labels.shape[0], num_features))
    features = centers[labels - 1] + noise * spreads[labels - 1][:, None]
    order = rng.permutation(labels.shape[0])
    return Dataset(features[order], labels[order])


def generate_task(spec: TaskSpec) -> Tuple[Dataset, Dataset, Dataset]:
    """Train, server-validation and test splits from the same Gaussians.

    The validation split has val_fraction of the test size per class (at
    least one sample per class so every source class can be validated).
    """
    spec.validate()
    centers = spec.resolved_centers()
    spreads = spec.resolved_spreads()
    rng = np.random.default_rng([spec.seed, 1])

    val_per_class = max(1, int(round(spec.val_fraction * spec.test_samples_per_class)))
    train = _draw(rng, centers, spreads, spec.samples_per_class)
    server_val = _draw(rng, centers, spreads, val_per_class)
    test = _draw(rng, centers, spreads, spec.test_samples_per_class)
    return train, server_val, test


def dirichlet_partition(train: Dataset, num_clients: int, alpha: float, seed: int) -> List[Dataset]:
    """Split train across clients with per-class Dirichlet(alpha) proportions.

    Every sample lands in exactly one shard; shards keep the original
    sample order.
    """
    if num_clients < 1:
        raise ConfigurationError(f"num_clients must be >= 1, got {num_clients}")
    if not alpha > 0:
        raise ConfigurationError(f"alpha must be > 0, got {alpha}")
    if len(train) == 0:
        raise ConfigurationError("cannot partition an empty dataset")

    rng = np.random.default_rng(seed)
    assigned: List[List[np.ndarray]] = [[] for _ in range(num_clients)]
    for label in np.unique(train.labels):
        idx = np.flatnonzero(train.labels == label)
        rng.shuffle(idx)
        proportions = rng.dirichlet(np.full(num_clients, float(alpha)))
        cuts = (np.cumsum(proportions)[:-1] * idx.shape[0]).astype(np.int64)
        for client, part in enumerate(np.split(idx, cuts)):
            assigned[client].append(part)

    shards = []
    for parts in assigned:
        indices = np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
        shards.append(train.subset(indices))
    return shards


def apply_tlfa(
    shard: Dataset,
    spec: AttackSpec,
    round: int,
    num_classes: Optional[int] = None,
    seed: int = 0,
) -> Dataset:
    """Targeted label flip for the pair active at this round.

    Features are passed through untouched; only labels equal to the source
    class can change. With flip_fraction < 1 a seeded subset is flipped.
    """
    if num_classes is not None:
        spec.validate(num_classes)
    pair = spec.active_pair(round)
    if pair is None:
        return shard

    candidates = np.flatnonzero(shard.labels == pair.source)
    if spec.flip_fraction < 1.0:
        count = int(np.floor(spec.flip_fraction * candidates.shape[0]))
        rng = np.random.default_rng(seed)
        candidates = np.sort(rng.choice(candidates, size=count, replace=False))

    labels = shard.labels.copy()
    labels[candidates] = pair.target
    return Dataset(shard.features, labels)
