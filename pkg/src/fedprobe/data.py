"""Dataset ingestion, synthetic data, non-i.i.d. partitioning and poisoning.

Datasets are value objects: every transform returns new arrays and never
mutates its input. All randomness is driven by explicit seeds.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

DTYPE = np.float64

IDX_IMAGES_MAGIC = 0x00000803  # 2051
IDX_LABELS_MAGIC = 0x00000801  # 2049


class IdxFormatError(ValueError):
    """Malformed IDX file (bad magic, truncated payload, ...)."""


@dataclass(frozen=True)
class Dataset:
    """Inputs shaped (n, channels, height, width), integer labels in [0, M)."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs/labels length mismatch")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx])


@dataclass(frozen=True)
class ClientShard:
    """One client's local data; poisoned part nonempty only for attackers."""

    client_id: int
    clean: Dataset
    poisoned: Dataset | None = None
    is_malicious: bool = False

    def __post_init__(self):
        if self.poisoned is not None and len(self.poisoned) and not self.is_malicious:
            raise ValueError("poisoned data on a non-malicious client")

    def training_data(self) -> tuple[np.ndarray, np.ndarray]:
        """clean ∪ poisoned as one (inputs, labels) pair."""
        if self.poisoned is None or len(self.poisoned) == 0:
            return self.clean.inputs, self.clean.labels
        return (np.concatenate([self.clean.inputs, self.poisoned.inputs]),
                np.concatenate([self.clean.labels, self.poisoned.labels]))


@dataclass(frozen=True)
class BackdoorTask:
    """A backdoor objective plus the test set used to score attack success."""

    target_label: int
    test_set: Dataset
    description: str = ""


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def _read_idx(path, magic: int, header_dims: int) -> tuple[np.ndarray, tuple[int, ...]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 * (1 + header_dims):
        raise IdxFormatError(f"{path}: truncated header")
    got = struct.unpack(">i", raw[:4])[0]
    if got != magic:
        raise IdxFormatError(f"{path}: magic {got:#010x}, expected {magic:#010x}")
    dims = struct.unpack(f">{header_dims}i", raw[4:4 + 4 * header_dims])
    payload = np.frombuffer(raw, dtype=np.uint8, offset=4 * (1 + header_dims))
    expect = int(np.prod(dims))
    if payload.size != expect:
        raise IdxFormatError(f"{path}: payload {payload.size} bytes, expected {expect}")
    return payload, dims


def load_idx(images_path, labels_path, name: str = "mnist") -> Dataset:
    """Load an IDX image/label file pair; pixels scaled to [0, 1]."""
    pixels, (n, h, w) = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels, (nl,) = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if n != nl:
        raise IdxFormatError(f"image count {n} != label count {nl}")
    inputs = pixels.reshape(n, 1, h, w).astype(DTYPE) / 255.0
    labels = labels.astype(np.int64)
    m = int(labels.max()) + 1 if n else 10
    return Dataset(inputs=inputs, labels=labels, num_classes=max(m, 10), name=name)


def write_idx(images_path, labels_path, inputs: np.ndarray, labels: np.ndarray) -> None:
    """Write a dataset back out in IDX format (inputs in [0,1] -> uint8)."""
    n, _, h, w = inputs.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, h, w))
        fh.write((np.clip(inputs[:, 0], 0, 1) * 255).round().astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABELS_MAGIC, n))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


def load_digits_images(side: int = 16, name: str = "digits") -> tuple[Dataset, Dataset]:
    """Bundled scikit-learn handwritten digits, upsampled to side x side.

    Offline stand-in for MNIST at desk scale: real 10-class digit images,
    deterministic train/test split (last 20% held out).
    """
    from sklearn.datasets import load_digits  # local import; optional dep

    raw = load_digits()
    imgs = raw.images / 16.0                           # (1797, 8, 8) in [0,1]
    reps = side // 8
    if side % 8:
        raise ValueError("side must be a multiple of 8")
    up = np.kron(imgs, np.ones((reps, reps)))[:, None, :, :].astype(DTYPE)
    labels = raw.target.astype(np.int64)
    n_test = len(labels) // 5
    train = Dataset(up[:-n_test], labels[:-n_test], 10, name=name)
    test = Dataset(up[-n_test:], labels[-n_test:], 10, name=name + "-test")
    return train, test


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def gen_synthetic(num_classes: int, n_per_class: int, dim: int, seed: int,
                  separation: float = 6.0, image_side: int | None = None) -> Dataset:
    """Gaussian blobs, one unit-variance blob per class.

    Class means are `separation` standard deviations apart along random
    orthogonal directions, so a linear model separates them easily. When
    `image_side` is given, dim must equal image_side**2 and inputs come out
    shaped (1, side, side) so image-style poisoning applies.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if num_classes > 2 * dim:
        raise ValueError("need dim >= num_classes / 2 for separated means")
    if image_side is not None and image_side * image_side != dim:
        raise ValueError("image_side**2 must equal dim")
    rng = np.random.default_rng(seed)
    basis = np.linalg.qr(rng.normal(size=(dim, dim)))[0]
    # +/- orthogonal directions: any two class means are >= `separation` apart
    dirs = np.array([basis[:, c % dim] * (1.0 if c < dim else -1.0)
                     for c in range(num_classes)])
    means = dirs * (separation / np.sqrt(2.0))
    xs, ys = [], []
    for c in range(num_classes):
        xs.append(rng.normal(0.0, 1.0, size=(n_per_class, dim)) + means[c])
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    if n_per_class == 0:
        inputs = np.zeros((0, dim))
        labels = np.zeros(0, dtype=np.int64)
    else:
        inputs = np.concatenate(xs)
        labels = np.concatenate(ys)
        order = rng.permutation(len(labels))
        inputs, labels = inputs[order], labels[order]
    side = image_side if image_side is not None else None
    if side is not None:
        inputs = inputs.reshape(-1, 1, side, side)
        # shift into [0,1]-ish range so trigger stamping (max intensity 1.0)
        # stays meaningful relative to the data
        inputs = 1.0 / (1.0 + np.exp(-inputs / 2.0))
    else:
        inputs = inputs.reshape(-1, 1, 1, dim)
    return Dataset(inputs=inputs.astype(DTYPE), labels=labels,
                   num_classes=num_classes, name=f"synthetic-{seed}")


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------

def dirichlet_partition(data: Dataset, num_clients: int, alpha: float,
                        seed: int) -> list[ClientShard]:
    """Non-i.i.d. split: per class, client proportions ~ Dirichlet(alpha).

    Returns a true partition (disjoint, exhaustive). If a client would end
    up empty, one example is moved from the largest shard.
    """
    if num_clients < 1:
        raise ValueError("need at least one client")
    if num_clients > len(data):
        raise ValueError("more clients than examples")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    rng = np.random.default_rng(seed)
    assignment: list[list[int]] = [[] for _ in range(num_clients)]
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.labels == c)
        if len(idx) == 0:
            continue
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(num_clients, alpha))
        counts = np.floor(props * len(idx)).astype(int)
        remainder = len(idx) - counts.sum()
        if remainder:
            extra = rng.choice(num_clients, size=remainder, replace=False,
                               p=props / props.sum())
            for e in extra:
                counts[e] += 1
        off = 0
        for client, k in enumerate(counts):
            assignment[client].extend(idx[off:off + k].tolist())
            off += k
    # no client may be empty: steal one example from the largest shard
    for client in range(num_clients):
        while not assignment[client]:
            donor = max(range(num_clients), key=lambda i: len(assignment[i]))
            assignment[client].append(assignment[donor].pop())
    return [
        ClientShard(client_id=i, clean=data.subset(np.array(sorted(ix), dtype=int)))
        for i, ix in enumerate(assignment)
    ]


# ---------------------------------------------------------------------------
# Poisoning
# ---------------------------------------------------------------------------

_CORNERS = ("tl", "tr", "bl", "br")


def _stamp(inputs: np.ndarray, block_size: int, corner: str) -> np.ndarray:
    _, _, h, w = inputs.shape
    if block_size < 1 or block_size > min(h, w):
        raise ValueError(f"block_size {block_size} does not fit {h}x{w} image")
    if corner not in _CORNERS:
        raise ValueError(f"corner must be one of {_CORNERS}")
    out = inputs.copy()
    rs = slice(0, block_size) if corner in ("tl", "tr") else slice(h - block_size, h)
    cs = slice(0, block_size) if corner in ("tl", "bl") else slice(w - block_size, w)
    out[:, :, rs, cs] = 1.0
    return out


def apply_trigger(data: Dataset, block_size: int, corner: str,
                  target_label: int, fraction: float) -> Dataset:
    """Poisoned copies of the first round(fraction * n) examples.

    A max-intensity block_size x block_size block is written in the chosen
    corner and the label is replaced by target_label. The source dataset is
    untouched.
    """
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must be in (0, 1]")
    if not (0 <= target_label < data.num_classes):
        raise ValueError("target_label out of range")
    k = int(round(fraction * len(data)))
    chosen = data.inputs[:k]
    poisoned = _stamp(chosen, block_size, corner)
    return Dataset(inputs=poisoned,
                   labels=np.full(k, target_label, dtype=np.int64),
                   num_classes=data.num_classes,
                   name=data.name + "-triggered")


def make_trigger_backdoor(test_data: Dataset, block_size: int, corner: str,
                          target_label: int) -> BackdoorTask:
    """Backdoor test set: every test example stamped with the trigger.

    Examples whose true label already equals the target are dropped, so the
    attack success rate measures induced mistakes only.
    """
    keep = test_data.labels != target_label
    stamped = _stamp(test_data.inputs[keep], block_size, corner)
    test = Dataset(inputs=stamped, labels=test_data.labels[keep],
                   num_classes=test_data.num_classes,
                   name=test_data.name + "-trigger-task")
    return BackdoorTask(target_label=target_label, test_set=test,
                        description=f"trigger {block_size}x{block_size}@{corner}->{target_label}")


def make_subpopulation_backdoor(data: Dataset, selector: np.ndarray,
                                target_label: int, test_fraction: float = 0.5,
                                seed: int = 0) -> tuple[Dataset, BackdoorTask]:
    """Relabel a naturally occurring subpopulation to the target class.

    `selector` is a boolean mask (or index array) picking the subpopulation.
    The selected examples are split into a train-side poison set (relabeled)
    and a held-out, disjoint test slice for scoring; returns
    (poison_train, task).
    """
    idx = np.flatnonzero(selector) if np.asarray(selector).dtype == bool else np.asarray(selector)
    if len(idx) == 0:
        raise ValueError("selector picks an empty subpopulation")
    if not (0 <= target_label < data.num_classes):
        raise ValueError("target_label out of range")
    if np.all(data.labels[idx] == target_label):
        raise ValueError("subpopulation already labeled with the target (no-op backdoor)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(idx))
    n_test = max(1, int(round(test_fraction * len(idx))))
    if n_test >= len(idx):
        n_test = len(idx) - 1
    test_idx, train_idx = idx[order[:n_test]], idx[order[n_test:]]
    poison = Dataset(inputs=data.inputs[train_idx],
                     labels=np.full(len(train_idx), target_label, dtype=np.int64),
                     num_classes=data.num_classes,
                     name=data.name + "-subpop-poison")
    test = Dataset(inputs=data.inputs[test_idx], labels=data.labels[test_idx],
                   num_classes=data.num_classes,
                   name=data.name + "-subpop-task")
    task = BackdoorTask(target_label=target_label, test_set=test,
                        description=f"subpopulation({len(idx)})->{target_label}")
    return poison, task


def poison_shards(shards: list[ClientShard], malicious_ids: set[int],
                  poison_source, **kwargs) -> list[ClientShard]:
    """Mark `malicious_ids` and attach poisoned data built by `poison_source`.

    `poison_source(shard_clean) -> Dataset` produces each attacker's poison
    from (or independent of) their clean shard.
    """
    out = []
    for shard in shards:
        if shard.client_id in malicious_ids:
            poisoned = poison_source(shard.clean, **kwargs)
            out.append(ClientShard(client_id=shard.client_id, clean=shard.clean,
                                   poisoned=poisoned, is_malicious=True))
        else:
            out.append(shard)
    return out
