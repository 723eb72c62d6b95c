"""Client population construction: ingestion, synthetic data, non-IID splits.

A Dataset holds raw 0-255 images (channel-first) plus labels; a Population
partitions example indices across clients, keeps each client's ground-truth
class-proportion vector, and separates clients into seen (training) and
unseen (evaluation-only) groups.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRAIN_FRAC, VAL_FRAC = 0.8, 0.1
SEEN_FRAC = 0.9


class DataError(ValueError):
    """Unparseable dataset file or impossible split request."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) uint8
    labels: np.ndarray  # (N,) int64
    C: int
    channel_mean: np.ndarray = field(default=None, repr=False)
    channel_std: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError("images and labels length mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.C):
            raise DataError("label outside [0, C)")
        if self.channel_mean is None:
            scaled = self.images.astype(np.float64) / 255.0
            self.channel_mean = scaled.mean(axis=(0, 2, 3)).astype(np.float32)
            self.channel_std = np.maximum(scaled.std(axis=(0, 2, 3)), 1e-6).astype(np.float32)

    def __len__(self):
        return len(self.labels)

    def normalized(self, idx: np.ndarray) -> np.ndarray:
        """Pixels scaled to [0,1] then standardized with dataset statistics."""
        x = self.images[idx].astype(np.float32) / np.float32(255.0)
        return (x - self.channel_mean[:, None, None]) / self.channel_std[:, None, None]


@dataclass
class ClientDataset:
    client_id: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    pi: np.ndarray  # ground-truth class proportions, sums to 1

    def all_idx(self) -> np.ndarray:
        return np.concatenate([self.train_idx, self.val_idx, self.test_idx])

    def label_set(self) -> np.ndarray:
        return np.flatnonzero(self.pi > 0)


@dataclass
class Population:
    clients: list[ClientDataset]
    seen_ids: list[int]
    unseen_ids: list[int]

    def client(self, cid: int) -> ClientDataset:
        return self.clients[cid]


def client_arrays(dataset: Dataset, client: ClientDataset, split: str = "train"):
    idx = {"train": client.train_idx, "val": client.val_idx,
           "test": client.test_idx, "all": client.all_idx()}[split]
    return dataset.normalized(idx), dataset.labels[idx]


def proportion_distance_matrix(population: Population) -> np.ndarray:
    """Pairwise Euclidean distances between ground-truth class proportions."""
    pis = np.stack([c.pi for c in population.clients])
    diff = pis[:, None, :] - pis[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1))


def _holdout_split(indices: np.ndarray, rng: np.random.Generator):
    """80/10/10 train/val/test split of one client's examples."""
    idx = rng.permutation(indices)
    m = len(idx)
    n_test = max(1, int(VAL_FRAC * m)) if m >= 3 else 0
    n_val = max(1, int(VAL_FRAC * m)) if m >= 5 else 0
    n_train = m - n_val - n_test
    return idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:]


def _seen_unseen(n: int, rng: np.random.Generator):
    order = rng.permutation(n)
    n_seen = int(round(SEEN_FRAC * n)) if n > 1 else 1
    return sorted(order[:n_seen].tolist()), sorted(order[n_seen:].tolist())


def _build_clients(per_client_indices, pis, labels, rng):
    clients = []
    for cid, (idx, pi) in enumerate(zip(per_client_indices, pis)):
        tr, va, te = _holdout_split(np.asarray(idx, dtype=np.int64), rng)
        clients.append(ClientDataset(cid, tr, va, te, np.asarray(pi, dtype=np.float64)))
    return clients


def _deal_classes(n: int, C: int, classes_per_client: int, rng) -> list[list[int]]:
    """Assign classes_per_client distinct classes to each client, covering all C."""
    slots = []
    while len(slots) < n * classes_per_client:
        slots.extend(rng.permutation(C).tolist())
    slots = slots[:n * classes_per_client]
    chunks = [slots[i * classes_per_client:(i + 1) * classes_per_client] for i in range(n)]
    # the first permutation guarantees coverage; fix duplicates within a chunk by swapping
    for i, chunk in enumerate(chunks):
        for a in range(classes_per_client):
            if chunk.count(chunk[a]) == 1:
                continue
            for j in range(n):
                if i == j:
                    continue
                other = chunks[j]
                for b in range(classes_per_client):
                    if other[b] not in chunk and chunk[a] not in other:
                        chunk[a], other[b] = other[b], chunk[a]
                        break
                if chunk.count(chunk[a]) == 1:
                    break
            else:
                raise DataError("could not assign distinct classes; lower classes_per_client")
    return chunks


def fixed_classes_split(dataset: Dataset, n: int, classes_per_client: int,
                        rng: np.random.Generator) -> Population:
    """Each client holds examples of a fixed random subset of the classes."""
    C = dataset.C
    if classes_per_client > C:
        raise DataError("classes_per_client exceeds class count")
    if n * classes_per_client < C:
        raise DataError("n * classes_per_client must cover all classes")
    assignments = _deal_classes(n, C, classes_per_client, rng)
    owners = {c: [i for i, a in enumerate(assignments) if c in a] for c in range(C)}
    per_client = [[] for _ in range(n)]
    for c in range(C):
        pool = rng.permutation(np.flatnonzero(dataset.labels == c))
        if len(pool) < len(owners[c]):
            raise DataError(f"class {c} has fewer examples than owners; reduce n")
        for share, cid in zip(np.array_split(pool, len(owners[c])), owners[c]):
            per_client[cid].extend(share.tolist())
    pis = []
    for idx in per_client:
        counts = np.bincount(dataset.labels[np.asarray(idx, dtype=np.int64)], minlength=C)
        pis.append(counts / counts.sum())
    clients = _build_clients(per_client, pis, dataset.labels, rng)
    seen, unseen = _seen_unseen(n, rng)
    return Population(clients, seen, unseen)


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of `total` proportional to weights (ties: lowest index)."""
    weights = np.maximum(np.asarray(weights, dtype=np.float64), 0.0)
    if weights.sum() == 0 or total == 0:
        return np.zeros(len(weights), dtype=np.int64)
    raw = weights / weights.sum() * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    order = np.lexsort((np.arange(len(weights)), -(raw - counts)))
    counts[order[:short]] += 1
    return counts


def _draw_by_proportions(pi: np.ndarray, quota: int, pools: list[list[int]],
                         cursors: np.ndarray) -> list[int]:
    """Take ~quota examples matching pi; shortfall is redrawn from what is left."""
    C = len(pi)
    remaining = np.array([len(pools[c]) - cursors[c] for c in range(C)], dtype=np.int64)
    want = np.minimum(_largest_remainder(pi, quota), remaining)
    taken: list[int] = []
    for c in range(C):
        k = int(want[c])
        taken.extend(pools[c][cursors[c]:cursors[c] + k])
        cursors[c] += k
        remaining[c] -= k
    deficit = quota - len(taken)
    while deficit > 0 and remaining.sum() > 0:
        extra = np.minimum(_largest_remainder(remaining, min(deficit, int(remaining.sum()))), remaining)
        for c in range(C):
            k = int(extra[c])
            taken.extend(pools[c][cursors[c]:cursors[c] + k])
            cursors[c] += k
            remaining[c] -= k
        deficit = quota - len(taken)
    return taken


def _dirichlet_population(dataset: Dataset, n: int, alphas: np.ndarray,
                          rng: np.random.Generator, per_client: int | None) -> Population:
    C = dataset.C
    quota = per_client if per_client is not None else len(dataset) // n
    if quota < 1:
        raise DataError("not enough examples for the requested client count")
    pools = [rng.permutation(np.flatnonzero(dataset.labels == c)).tolist() for c in range(C)]
    cursors = np.zeros(C, dtype=np.int64)
    pis, per_client_indices = [], []
    for i in range(n):
        # Gamma normalization keeps the draw seed-reproducible
        g = rng.gamma(shape=float(alphas[i]), scale=1.0, size=C)
        while g.sum() == 0:
            g = rng.gamma(shape=float(alphas[i]), scale=1.0, size=C)
        pi = g / g.sum()
        pis.append(pi)
        per_client_indices.append(_draw_by_proportions(pi, quota, pools, cursors))
    clients = _build_clients(per_client_indices, pis, dataset.labels, rng)
    seen, unseen = _seen_unseen(n, rng)
    return Population(clients, seen, unseen)


def dirichlet_split(dataset: Dataset, n: int, alpha: float, rng: np.random.Generator,
                    per_client: int | None = None) -> Population:
    """Per-client class proportions drawn from Dir(alpha, ..., alpha)."""
    if alpha <= 0:
        raise DataError("alpha must be positive")
    return _dirichlet_population(dataset, n, np.full(n, alpha), rng, per_client)


def extrapolation_population(dataset: Dataset, n: int, alpha_train: float, alpha_new: float,
                             rng: np.random.Generator, per_client: int | None = None) -> Population:
    """Seen clients drawn with alpha_train, unseen clients with alpha_new."""
    if alpha_train <= 0 or alpha_new <= 0:
        raise DataError("alpha must be positive")
    # fix the seen/unseen partition first so each group gets its own alpha
    seen, unseen = _seen_unseen(n, rng)
    alphas = np.full(n, alpha_train)
    alphas[unseen] = alpha_new
    pop = _dirichlet_population(dataset, n, alphas, rng, per_client)
    return Population(pop.clients, seen, unseen)


def synth_dataset(C: int, per_class: int, image_size: int = 32,
                  rng: np.random.Generator | None = None, *, noise: float = 80.0,
                  blob_amp: float = 95.0, blob_sigma: float = 5.0, base: float = 120.0,
                  margin: float = 250.0) -> Dataset:
    """Class-conditional Gaussian color-blob images.

    Each class is a colored Gaussian bump at a class-specific position over a
    flat background; pixels get i.i.d. Gaussian noise and are clipped to
    0-255.  Class mean images are resampled until all pairwise distances
    reach `margin`, so any two classes stay separable while the 10-way
    problem remains noisy.
    """
    if C < 2:
        raise DataError("need at least 2 classes")
    rng = np.random.default_rng(0) if rng is None else rng
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    means = []
    for _ in range(C):
        for _attempt in range(200):
            pos = rng.uniform(0.2 * image_size, 0.8 * image_size, size=2)
            color = rng.uniform(0.25, 1.0, size=3)
            bump = np.exp(-((yy - pos[0]) ** 2 + (xx - pos[1]) ** 2) / (2 * blob_sigma ** 2))
            mean = base + blob_amp * color[:, None, None] * bump[None, :, :]
            if all(np.linalg.norm(mean - m) >= margin for m in means):
                means.append(mean)
                break
        else:
            raise DataError("could not place class means at the requested margin")
    images = np.empty((C * per_class, 3, image_size, image_size), dtype=np.uint8)
    labels = np.repeat(np.arange(C), per_class).astype(np.int64)
    for c in range(C):
        block = means[c][None] + rng.normal(0.0, noise, size=(per_class, 3, image_size, image_size))
        images[c * per_class:(c + 1) * per_class] = np.clip(block, 0, 255).astype(np.uint8)
    return Dataset(images=images, labels=labels, C=C)


def class_mean_images(dataset: Dataset) -> np.ndarray:
    """Empirical per-class mean images (raw 0-255 scale)."""
    out = np.zeros((dataset.C,) + dataset.images.shape[1:], dtype=np.float64)
    for c in range(dataset.C):
        out[c] = dataset.images[dataset.labels == c].mean(axis=0)
    return out


def load_dataset(path: str | Path, format: str, C: int | None = None) -> Dataset:
    if format == "cifar-binary":
        return _load_cifar_binary(Path(path), C)
    if format == "idx-pair":
        return _load_idx_pair(Path(path), C)
    if format == "csv":
        return _load_csv(Path(path), C)
    raise DataError(f"unknown dataset format {format!r}")


def _load_cifar_binary(path: Path, C: int | None) -> Dataset:
    """One record per example: 1 label byte + 3072 pixel bytes (RGB planes)."""
    buf = path.read_bytes()
    record = 1 + 3072
    if len(buf) == 0 or len(buf) % record != 0:
        expected = (len(buf) // record + 1) * record
        raise DataError(f"{path}: expected a multiple of {record} bytes "
                        f"(e.g. {expected}), got {len(buf)}")
    n = len(buf) // record
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(n, record)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(n, 3, 32, 32).copy()
    return Dataset(images=images, labels=labels, C=C or int(labels.max()) + 1)


def _read_idx(path: Path, want_magic: int):
    buf = path.read_bytes()
    if len(buf) < 4:
        raise DataError(f"{path}: truncated header at byte 0")
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != want_magic:
        raise DataError(f"{path}: bad magic {magic:#010x} at byte 0, want {want_magic:#010x}")
    ndim = magic & 0xFF
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    data = np.frombuffer(buf, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise DataError(f"{path}: expected {int(np.prod(dims))} bytes of data, got {data.size}")
    return data.reshape(dims)


def _load_idx_pair(images_path: Path, C: int | None) -> Dataset:
    """MNIST-style idx images + labels; grayscale is padded to 32x32x3."""
    labels_path = Path(str(images_path).replace("images", "labels").replace("idx3", "idx1"))
    if labels_path == images_path or not labels_path.exists():
        raise DataError(f"cannot locate labels file next to {images_path}")
    imgs = _read_idx(images_path, 0x00000803)
    labels = _read_idx(labels_path, 0x00000801).astype(np.int64)
    if len(imgs) != len(labels):
        raise DataError("images/labels count mismatch")
    n, h, w = imgs.shape
    pad_h, pad_w = (32 - h) // 2, (32 - w) // 2
    padded = np.zeros((n, 32, 32), dtype=np.uint8)
    padded[:, pad_h:pad_h + h, pad_w:pad_w + w] = imgs
    images = np.repeat(padded[:, None, :, :], 3, axis=1)
    return Dataset(images=images, labels=labels, C=C or int(labels.max()) + 1)


def _load_csv(path: Path, C: int | None) -> Dataset:
    """Header 'label,p0,...,p3071', one example per row."""
    with open(path) as f:
        header = f.readline().strip()
        if header != "label," + ",".join(f"p{i}" for i in range(3072)):
            raise DataError(f"{path}: unexpected csv header")
        rows = np.loadtxt(f, delimiter=",", dtype=np.int64, ndmin=2)
    if rows.size == 0:
        raise DataError(f"{path}: no data rows")
    if rows.shape[1] != 3073:
        raise DataError(f"{path}: expected 3073 columns, got {rows.shape[1]}")
    labels = rows[:, 0]
    images = rows[:, 1:].astype(np.uint8).reshape(len(rows), 3, 32, 32)
    return Dataset(images=images, labels=labels, C=C or int(labels.max()) + 1)


def save_manifest(population: Population, path: str | Path) -> None:
    """Deterministic text manifest: client id -> indices and proportions."""
    lines = [f"clients={len(population.clients)}",
             "seen=" + ",".join(map(str, population.seen_ids)),
             "unseen=" + ",".join(map(str, population.unseen_ids))]
    for c in population.clients:
        pi = ",".join(repr(float(p)) for p in c.pi)
        for name, idx in (("train", c.train_idx), ("val", c.val_idx), ("test", c.test_idx)):
            lines.append(f"client={c.client_id} {name}=" + ",".join(map(str, idx.tolist())))
        lines.append(f"client={c.client_id} pi={pi}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> Population:
    lines = Path(path).read_text().splitlines()
    n = int(lines[0].split("=")[1])
    seen = [int(v) for v in lines[1].split("=")[1].split(",") if v]
    unseen = [int(v) for v in lines[2].split("=")[1].split(",") if v]
    parts: dict[int, dict[str, np.ndarray]] = {}
    for line in lines[3:]:
        head, payload = line.split(" ", 1)
        cid = int(head.split("=")[1])
        key, values = payload.split("=", 1)
        if key == "pi":
            arr = np.array([float(v) for v in values.split(",")], dtype=np.float64)
        else:
            arr = np.array([int(v) for v in values.split(",") if v], dtype=np.int64)
        parts.setdefault(cid, {})[key] = arr
    clients = [ClientDataset(cid, parts[cid]["train"], parts[cid]["val"],
                             parts[cid]["test"], parts[cid]["pi"]) for cid in range(n)]
    return Population(clients, seen, unseen)
