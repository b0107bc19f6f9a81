"""Synthetic multi-label datasets with client partitioning.

Samples carry 14 three-state labels (Positive / Negative / Uncertain) drawn
from a hierarchical generative process, plus features that are a noisy linear
mix of the label latents, so every label is learnable from the features. Two
partitioners distribute a training set across clients: a stratified uniform
one and a label-skewed one that concentrates each target pathology on one
client.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import NUM_LABELS

LABEL_NAMES = [
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
]

TARGET_LABELS = ["Atelectasis", "Cardiomegaly", "Consolidation", "Edema", "Pleural Effusion"]

# child label -> parent label; the child is much more likely when the parent
# is present, mirroring how some pathologies are subcategories of others.
CHILD_OF = {"Cardiomegaly": "Enlarged Cardiomediastinum", "Atelectasis": "Lung Opacity"}

_CHILD_PROB_GIVEN_PARENT = 0.75
_CHILD_PROB_WITHOUT_PARENT = 0.10
_UNCERTAIN_FRACTION = 0.10
_TARGET_PREVALENCE_RANGE = (0.10, 0.50)

# Disease co-occurrence is driven by a per-sample two-state severity factor.
# Non-target labels couple to it steeply (they act as strong case-mix markers
# that make the common signal quickly learnable at desk scale); target labels
# couple moderately so their positive pools stay distinct enough for the
# skewed partitioner to hit its majority threshold on every label.
_SEVERITY_HI_WEIGHT = 0.45
_SEVERITY_SLOPE = 10.0
_TARGET_SLOPE_FRACTION = 0.25

# Feature mixing: orthonormalized random directions, one per label, with the
# target labels' rows attenuated. This keeps the cross-label signal strength
# stable across seeds and keeps single-label residues from dominating.
_MIX_SCALE = 5.5
_TARGET_MIX_FRACTION = 0.15
DEFAULT_NOISE_SCALE = 2.2

# per-label base positive rates at neutral severity (children derive theirs
# from the parent conditionals instead)
_BASE_RATE = {
    "No Finding": 0.30,
    "Enlarged Cardiomediastinum": 0.35,
    "Lung Opacity": 0.38,
    "Lung Lesion": 0.20,
    "Edema": 0.26,
    "Consolidation": 0.33,
    "Pneumonia": 0.24,
    "Pneumothorax": 0.18,
    "Pleural Effusion": 0.40,
    "Pleural Other": 0.28,
    "Fracture": 0.22,
    "Support Devices": 0.36,
}


class LabelValue(enum.IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    UNCERTAIN = 2


_CODE_TO_CHAR = {LabelValue.NEGATIVE: "N", LabelValue.POSITIVE: "P", LabelValue.UNCERTAIN: "U"}
_CHAR_TO_CODE = {v: k for k, v in _CODE_TO_CHAR.items()}


@dataclass
class LabelPolicy:
    """U-Ones with smoothing: uncertain labels become a uniform draw in [low, high]."""

    smoothing_low: float = 0.55
    smoothing_high: float = 0.85

    def __post_init__(self) -> None:
        if not 0.0 <= self.smoothing_low < self.smoothing_high <= 1.0:
            raise ConfigError(
                f"need 0 <= low < high <= 1, got [{self.smoothing_low}, {self.smoothing_high}]"
            )


@dataclass(eq=False)
class Sample:
    id: int
    features: np.ndarray
    labels: list[LabelValue]


@dataclass(eq=False)
class Dataset:
    """Column storage for a sample collection; rows align across arrays."""

    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n, NUM_LABELS) int8, values are LabelValue codes
    ids: np.ndarray  # (n,) int64, unique
    label_names: list[str]
    target_labels: list[str]
    generation_seed: int

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        n = self.features.shape[0]
        if self.labels.shape != (n, NUM_LABELS):
            raise DimensionError(f"labels shape {self.labels.shape}, expected ({n}, {NUM_LABELS})")
        if self.ids.shape != (n,):
            raise DimensionError(f"ids shape {self.ids.shape}, expected ({n},)")
        if len(np.unique(self.ids)) != n:
            raise ConfigError("sample ids must be unique")
        if len(self.label_names) != NUM_LABELS:
            raise ConfigError(f"expected {NUM_LABELS} label names")
        if len(self.target_labels) != 5 or not set(self.target_labels) <= set(self.label_names):
            raise ConfigError("target_labels must be 5 of the label names")
        self._row_of: dict[int, int] | None = None

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def target_columns(self) -> list[int]:
        return [self.label_names.index(name) for name in self.target_labels]

    def sample(self, row: int) -> Sample:
        return Sample(
            id=int(self.ids[row]),
            features=self.features[row],
            labels=[LabelValue(int(c)) for c in self.labels[row]],
        )

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            features=self.features[rows].copy(),
            labels=self.labels[rows].copy(),
            ids=self.ids[rows].copy(),
            label_names=list(self.label_names),
            target_labels=list(self.target_labels),
            generation_seed=self.generation_seed,
        )

    def rows_for_ids(self, ids) -> np.ndarray:
        if self._row_of is None:
            self._row_of = {int(v): i for i, v in enumerate(self.ids)}
        return np.array([self._row_of[int(v)] for v in np.asarray(ids)], dtype=np.int64)

    def prevalence(self, label: str) -> float:
        """Fraction of samples positive for the label."""
        col = self.label_names.index(label)
        return float(np.mean(self.labels[:, col] == LabelValue.POSITIVE))


def _label_slopes() -> np.ndarray:
    slopes = np.zeros(NUM_LABELS)
    for j, name in enumerate(LABEL_NAMES):
        if name in CHILD_OF:
            continue  # children follow their parent, not the severity factor
        fraction = _TARGET_SLOPE_FRACTION if name in TARGET_LABELS else 1.0
        slopes[j] = _SEVERITY_SLOPE * fraction
    return slopes


def _mixing_matrix(rng: np.random.Generator, d: int) -> np.ndarray:
    raw = rng.normal(0.0, 1.0, size=(d, NUM_LABELS))
    if d >= NUM_LABELS:
        directions, _ = np.linalg.qr(raw)  # d x NUM_LABELS, orthonormal columns
    else:
        directions = raw / np.linalg.norm(raw, axis=0)
    row_scale = np.array(
        [_TARGET_MIX_FRACTION if name in TARGET_LABELS else 1.0 for name in LABEL_NAMES]
    )
    return (_MIX_SCALE * row_scale)[:, None] * directions.T


def _generate_once(rng: np.random.Generator, n: int, d: int, noise_scale: float, seed: int) -> Dataset:
    severity = np.where(rng.random(n) < _SEVERITY_HI_WEIGHT, 1.0, -1.0)
    slopes = _label_slopes()
    latent = np.zeros((n, NUM_LABELS), dtype=np.int8)
    for j, name in enumerate(LABEL_NAMES):
        if name in CHILD_OF:
            parent = latent[:, LABEL_NAMES.index(CHILD_OF[name])]
            prob = np.where(parent == 1, _CHILD_PROB_GIVEN_PARENT, _CHILD_PROB_WITHOUT_PARENT)
        else:
            base = _BASE_RATE[name]
            prob = 1.0 / (1.0 + np.exp(-(math.log(base / (1.0 - base)) + slopes[j] * severity)))
        latent[:, j] = rng.random(n) < prob

    features = latent.astype(np.float64) @ _mixing_matrix(rng, d)
    if noise_scale > 0.0:
        features += noise_scale * rng.normal(0.0, 1.0, size=(n, d))

    labels = latent.astype(np.int8)  # 0 -> Negative, 1 -> Positive
    for j in range(NUM_LABELS):
        positives = np.flatnonzero(labels[:, j] == LabelValue.POSITIVE)
        n_flip = int(math.floor(_UNCERTAIN_FRACTION * positives.size))
        if n_flip:
            flip = rng.choice(positives, size=n_flip, replace=False)
            labels[flip, j] = LabelValue.UNCERTAIN

    return Dataset(
        features=features,
        labels=labels,
        ids=np.arange(n, dtype=np.int64),
        label_names=list(LABEL_NAMES),
        target_labels=list(TARGET_LABELS),
        generation_seed=seed,
    )


def gen_synthetic(
    n_samples: int, d: int, label_correlation_seed: int, noise_scale: float = DEFAULT_NOISE_SCALE
) -> Dataset:
    """Generate a dataset whose every target label has prevalence in [0.1, 0.5].

    The generative parameters are redrawn (deterministically) until the
    prevalence constraint holds, so callers can rely on it.
    """
    if n_samples < 100:
        raise ConfigError(f"n_samples must be >= 100, got {n_samples}")
    if d < 8:
        raise ConfigError(f"d must be >= 8, got {d}")
    if noise_scale < 0.0:
        raise ConfigError(f"noise_scale must be >= 0, got {noise_scale}")
    lo, hi = _TARGET_PREVALENCE_RANGE
    for attempt in range(20):
        rng = np.random.default_rng([label_correlation_seed, attempt])
        ds = _generate_once(rng, n_samples, d, noise_scale, label_correlation_seed)
        if all(lo <= ds.prevalence(name) <= hi for name in ds.target_labels):
            return ds
    raise ConfigError("target prevalence constraint unreachable after 20 redraws")


def apply_label_policy(labels, policy: LabelPolicy, rng: np.random.Generator) -> np.ndarray:
    """Map one sample's labels to training targets: P -> 1, N -> 0,
    U -> uniform draw from [low, high]. The caller owns the rng."""
    codes = np.asarray(labels, dtype=np.int8)
    out = (codes == LabelValue.POSITIVE).astype(np.float64)
    uncertain = codes == LabelValue.UNCERTAIN
    if uncertain.any():
        out[uncertain] = rng.uniform(policy.smoothing_low, policy.smoothing_high, size=int(uncertain.sum()))
    return out


def smooth_labels(codes: np.ndarray, policy: LabelPolicy, rng: np.random.Generator) -> np.ndarray:
    """Vectorized apply_label_policy over a whole (n, NUM_LABELS) code matrix."""
    codes = np.asarray(codes, dtype=np.int8)
    out = (codes == LabelValue.POSITIVE).astype(np.float64)
    uncertain = codes == LabelValue.UNCERTAIN
    if uncertain.any():
        out[uncertain] = rng.uniform(policy.smoothing_low, policy.smoothing_high, size=int(uncertain.sum()))
    return out


def binary_truths(ds: Dataset) -> np.ndarray:
    """Binary ground truth for evaluation; Uncertain counts as positive."""
    return ((ds.labels == LabelValue.POSITIVE) | (ds.labels == LabelValue.UNCERTAIN)).astype(np.float64)


def split_train_val(ds: Dataset, train_fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Shuffled disjoint split; validation labels are binarized (U resolved to P)."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_train = int(round(train_fraction * len(ds)))
    train = ds.subset(perm[:n_train])
    val = ds.subset(perm[n_train:])
    val.labels[val.labels == LabelValue.UNCERTAIN] = LabelValue.POSITIVE
    return train, val


@dataclass(eq=False)
class PartitionPlan:
    """Exact set partition of a training set across clients."""

    scheme: str  # "uniform" | "skewed"
    assignments: list[np.ndarray]  # sample ids per client
    client_names: list[str]
    achieved_prevalence: np.ndarray  # (k, n_target_labels) fraction positive
    target_labels: list[str]
    seed: int
    majority_target: float | None = None
    majority_met: list[bool] | None = None

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]


@dataclass(eq=False)
class ClientDataset:
    """One client's shard, resolved from a plan against its parent dataset."""

    client_id: int
    name: str
    rows: np.ndarray  # row indices into the parent dataset

    @property
    def size(self) -> int:
        return len(self.rows)


def resolve_plan(ds: Dataset, plan: PartitionPlan) -> list[ClientDataset]:
    return [
        ClientDataset(client_id=i, name=plan.client_names[i], rows=ds.rows_for_ids(ids))
        for i, ids in enumerate(plan.assignments)
    ]


def _plan_prevalence(ds: Dataset, row_groups: list[np.ndarray]) -> np.ndarray:
    cols = ds.target_columns
    out = np.zeros((len(row_groups), len(cols)))
    for i, rows in enumerate(row_groups):
        for j, col in enumerate(cols):
            out[i, j] = np.mean(ds.labels[rows, col] == LabelValue.POSITIVE) if len(rows) else 0.0
    return out


def _deal_balanced(train: Dataset, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Assign each sample to the client lagging most on the sample's positive
    target labels, under equal-size capacities. Multi-positive samples go
    first because they are the hardest to balance."""
    n = len(train)
    positive = train.labels[:, train.target_columns] == LabelValue.POSITIVE
    order = sorted(rng.permutation(n), key=lambda r: -int(positive[r].sum()))

    base, extra = divmod(n, k)
    capacity = [base + (1 if c < extra else 0) for c in range(k)]
    sizes = [0] * k
    counts = [[0] * positive.shape[1] for _ in range(k)]
    alloc: list[list[int]] = [[] for _ in range(k)]
    for row in order:
        pos_labels = np.flatnonzero(positive[row])
        best = min(
            (c for c in range(k) if sizes[c] < capacity[c]),
            key=lambda c: (sum(counts[c][j] for j in pos_labels), sizes[c], c),
        )
        alloc[best].append(int(row))
        sizes[best] += 1
        for j in pos_labels:
            counts[best][j] += 1
    return [np.array(sorted(rows), dtype=np.int64) for rows in alloc]


def partition_uniform(train: Dataset, k: int = 5, seed: int = 0) -> PartitionPlan:
    """Label-balanced split: greedy assignment keeps client sizes within one
    sample and target-label prevalence within 2 points of the global value."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if len(train) < 10 * k:
        raise ConfigError(f"need at least {10 * k} samples for {k} clients, got {len(train)}")

    global_prev = np.array([train.prevalence(name) for name in train.target_labels])
    for attempt in range(10):
        rng = np.random.default_rng([seed, attempt])
        groups = _deal_balanced(train, k, rng)
        prevalence = _plan_prevalence(train, groups)
        if np.max(np.abs(prevalence - global_prev)) <= 0.02:
            # shards keep parent row order: a one-client plan resolves to
            # exactly the training set, row for row
            return PartitionPlan(
                scheme="uniform",
                assignments=[train.ids[rows] for rows in groups],
                client_names=[f"client_{c}" for c in range(k)],
                achieved_prevalence=prevalence,
                target_labels=list(train.target_labels),
                seed=seed,
            )
    raise ConfigError("uniform partition could not meet the 2-point prevalence bound")


def _slug(name: str) -> str:
    return name.lower().replace(" ", "_")


def partition_skewed(
    train: Dataset, k: int = 5, majority_target: float = 0.45, seed: int = 0
) -> PartitionPlan:
    """Concentrate each target label on one client.

    Greedy, rarest label first: route unassigned positives of the label to its
    client until the client's prevalence would reach `majority_target`, then
    top every client up to an equal share with the leftovers. When a label's
    global positives cannot reach the threshold, the shortfall is recorded in
    the plan instead of failing.
    """
    if k != len(train.target_labels):
        raise ConfigError(f"skewed partition needs k == {len(train.target_labels)}, got {k}")

    n = len(train)
    cols = train.target_columns
    rng = np.random.default_rng(seed)
    visit = rng.permutation(n)

    base = n // k
    intended = [base + (1 if c < n % k else 0) for c in range(k)]

    pos_counts = [int(np.sum(train.labels[:, col] == LabelValue.POSITIVE)) for col in cols]
    rarity_order = sorted(range(k), key=lambda c: (pos_counts[c], c))

    positive = train.labels[:, cols] == LabelValue.POSITIVE
    assigned = np.full(n, -1, dtype=np.int64)
    for c in rarity_order:
        needed = math.ceil(majority_target * intended[c])
        candidates = visit[(assigned[visit] == -1) & positive[visit, c]]
        take = candidates[: min(needed, intended[c])]
        assigned[take] = c

    # Top up to equal sizes, spreading each label's leftover positives evenly
    # so that co-occurring samples cannot push another client past a majority
    # client on its own label.
    sizes = [int(np.sum(assigned == c)) for c in range(k)]
    pos_counts = [[int(np.sum(positive[assigned == c, j])) for j in range(k)] for c in range(k)]
    leftovers = sorted(visit[assigned[visit] == -1], key=lambda r: -int(positive[r].sum()))
    for row in leftovers:
        pos_labels = np.flatnonzero(positive[row])
        best = min(
            (c for c in range(k) if sizes[c] < intended[c]),
            key=lambda c: (sum(pos_counts[c][j] for j in pos_labels), sizes[c], c),
        )
        assigned[row] = best
        sizes[best] += 1
        for j in pos_labels:
            pos_counts[best][j] += 1

    groups = [np.flatnonzero(assigned == c) for c in range(k)]  # already row-ordered
    prevalence = _plan_prevalence(train, groups)
    met = [bool(prevalence[c, c] >= majority_target) for c in range(k)]
    return PartitionPlan(
        scheme="skewed",
        assignments=[train.ids[rows] for rows in groups],
        client_names=[_slug(name) for name in train.target_labels],
        achieved_prevalence=prevalence,
        target_labels=list(train.target_labels),
        seed=seed,
        majority_target=majority_target,
        majority_met=met,
    )


def save_dataset(ds: Dataset, path) -> None:
    """Line-oriented text export; floats use shortest round-trippable decimals."""
    with open(path, "w") as f:
        f.write(
            f"d={ds.dim} labels={','.join(ds.label_names)} "
            f"targets={','.join(ds.target_labels)} seed={ds.generation_seed}\n"
        )
        for row in range(len(ds)):
            feats = ",".join(repr(float(v)) for v in ds.features[row])
            labs = ",".join(_CODE_TO_CHAR[LabelValue(int(c))] for c in ds.labels[row])
            f.write(f"{int(ds.ids[row])};{feats};{labs}\n")


def load_dataset(path) -> Dataset:
    with open(path) as f:
        header = f.readline().strip()
        # label names may contain spaces, so split on the fixed key markers
        match = re.fullmatch(r"d=(\d+) labels=(.+) targets=(.+) seed=(-?\d+)", header)
        if match is None:
            raise ConfigError(f"unparseable dataset header: {header!r}")
        d = int(match.group(1))
        label_names = match.group(2).split(",")
        target_labels = match.group(3).split(",")
        seed = int(match.group(4))

        ids, features, labels = [], [], []
        for line in f:
            line = line.strip()
            if not line:
                continue
            id_part, feat_part, label_part = line.split(";")
            ids.append(int(id_part))
            feats = [float(v) for v in feat_part.split(",")]
            if len(feats) != d:
                raise ConfigError(f"sample {id_part} has {len(feats)} features, header says {d}")
            features.append(feats)
            labels.append([_CHAR_TO_CODE[c] for c in label_part.split(",")])

    return Dataset(
        features=np.array(features, dtype=np.float64),
        labels=np.array(labels, dtype=np.int8),
        ids=np.array(ids, dtype=np.int64),
        label_names=label_names,
        target_labels=target_labels,
        generation_seed=seed,
    )
