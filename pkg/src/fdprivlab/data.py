"""Datasets, the private/public split, Dirichlet client shards and MIA targets."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .rng import gaussian, stream


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with optional integer labels in ``[0, num_classes)``.

    ``classes`` records the original label values when labels were re-indexed
    on load (``classes[i]`` is the raw value mapped to ``i``).
    """

    features: np.ndarray
    labels: np.ndarray | None
    num_classes: int
    name: str = ""
    classes: tuple = ()

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim != 2:
            raise ValidationError("features must be a 2-D matrix")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (feats.shape[0],):
                raise ValidationError("labels length must equal the number of rows")
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ValidationError(f"labels must lie in [0, {self.num_classes})")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index, name: str | None = None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        labels = None if self.labels is None else self.labels[index]
        return Dataset(self.features[index], labels, self.num_classes,
                       self.name if name is None else name, self.classes)

    def without_labels(self) -> "Dataset":
        return Dataset(self.features, None, self.num_classes, self.name, self.classes)


def concat(parts: list[Dataset], name: str = "") -> Dataset:
    labelled = all(p.labels is not None for p in parts)
    return Dataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]) if labelled else None,
        parts[0].num_classes,
        name or parts[0].name,
        parts[0].classes,
    )


def label_distribution(labels, num_classes: int) -> np.ndarray:
    """Ground-truth label distribution ``|D^m| / |D|``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValidationError("label distribution of an empty shard is undefined")
    counts = np.bincount(labels, minlength=num_classes).astype(float)
    return counts / labels.size


def class_means(num_classes: int, dim: int, class_sep: float, seed: int) -> np.ndarray:
    """Blob centres with pairwise distance ``class_sep``.

    When ``dim >= num_classes`` the centres are a scaled random orthonormal
    frame, so every pair sits exactly ``class_sep`` apart; otherwise they are
    random unit directions scaled to the same radius.
    """
    rng = stream(seed, "class-means")
    raw = gaussian(rng, (dim, num_classes))
    if dim >= num_classes:
        q, r = np.linalg.qr(raw)
        directions = (q * np.sign(np.diag(r))).T
    else:
        directions = raw.T / np.linalg.norm(raw.T, axis=1, keepdims=True)
    return directions * (class_sep / math.sqrt(2.0))


def synth_gaussian_mixture(
    num_classes: int,
    dim: int,
    n: int,
    class_sep: float,
    seed: int,
    shift: float = 0.0,
    draw: str = "base",
    name: str = "gaussian-mixture",
) -> Dataset:
    """Balanced draw of ``n`` points from ``num_classes`` unit-variance blobs.

    The blob centres depend only on ``(num_classes, dim, class_sep, seed)``;
    ``draw`` selects an independent sample stream so train, test and public
    pools can come from the same mixture. ``shift`` translates every centre by
    ``shift`` along a fixed random direction, emulating a public set drawn
    from a neighbouring distribution.
    """
    if dim < 1:
        raise ValidationError("feature dimension must be at least 1")
    if num_classes < 2:
        raise ValidationError("need at least two classes")
    if n < num_classes:
        raise ValidationError("need at least one example per class")
    means = class_means(num_classes, dim, class_sep, seed)
    if shift:
        offset = gaussian(stream(seed, "shift-direction"), dim)
        means = means + shift * offset / np.linalg.norm(offset)
    rng = stream(seed, "samples", draw)
    labels = np.arange(n) % num_classes
    labels = labels[rng.permutation(n)]
    features = means[labels] + gaussian(rng, (n, dim))
    return Dataset(features, labels, num_classes, name)


def split_indices(n: int, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < ratio < 1:
        raise ValidationError("ratio must lie strictly between 0 and 1")
    first = int(round(n * ratio))
    if first == 0 or first == n:
        raise ValidationError(f"ratio {ratio} on {n} rows leaves one side empty")
    order = stream(seed, "split").permutation(n)
    return np.sort(order[:first]), np.sort(order[first:])


def split_train_public(
    ds: Dataset, ratio: float = 0.8, seed: int = 0, strip_public_labels: bool = False
) -> tuple[Dataset, Dataset]:
    """Shuffle then cut into a client pool (``ratio``) and a public pool."""
    train_idx, pub_idx = split_indices(len(ds), ratio, seed)
    public = ds.subset(pub_idx, f"{ds.name}-public")
    if strip_public_labels:
        public = public.without_labels()
    return ds.subset(train_idx, f"{ds.name}-train"), public


@dataclass(frozen=True)
class Partition:
    client_shards: list[np.ndarray]
    alpha: float
    seed: int

    @property
    def num_clients(self) -> int:
        return len(self.client_shards)

    def sizes(self) -> list[int]:
        return [len(s) for s in self.client_shards]


def dirichlet_partition(
    train: Dataset, num_clients: int, alpha: float, seed: int, max_retries: int = 100
) -> Partition:
    """Split each class across clients with proportions from ``Dir(alpha)``.

    Draws are repeated (at most ``max_retries`` times) until every client
    holds at least one example.
    """
    if num_clients < 2:
        raise ValidationError("need at least two clients")
    if not alpha > 0:
        raise ValidationError("alpha must be positive")
    if train.labels is None:
        raise ValidationError("Dirichlet partitioning needs labels")
    if len(train) < num_clients:
        raise ValidationError("fewer examples than clients")
    by_class = [np.flatnonzero(train.labels == m) for m in range(train.num_classes)]
    for attempt in range(max_retries):
        rng = stream(seed, "dirichlet", attempt)
        shards = [[] for _ in range(num_clients)]
        for members in by_class:
            if members.size == 0:
                continue
            members = members[rng.permutation(members.size)]
            props = rng.dirichlet(np.full(num_clients, float(alpha)))
            cuts = (np.cumsum(props)[:-1] * members.size).astype(np.int64)
            for client, part in enumerate(np.split(members, cuts)):
                shards[client].append(part)
        shards = [np.sort(np.concatenate(s)) for s in shards]
        if min(len(s) for s in shards) >= 1:
            return Partition(shards, float(alpha), int(seed))
    raise ValidationError(
        f"could not give every client an example after {max_retries} draws "
        f"(alpha={alpha}, N={num_clients})"
    )


@dataclass(frozen=True)
class EvalSplit:
    """Members (rows of the client pool) and non-members (rows of the test set)."""

    client_id: int
    members: np.ndarray
    non_members: np.ndarray
    member_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    non_member_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __len__(self) -> int:
        return len(self.members)


def make_eval_split(
    private_shard,
    train: Dataset,
    test: Dataset,
    k: int,
    seed: int,
    client_id: int = 0,
    stratified: bool = True,
    exclude_test=(),
) -> EvalSplit:
    """Sample ``k`` members from a client's shard and ``k`` non-members from ``test``.

    With ``stratified`` the non-members copy the members' class counts as far
    as the test pool allows; leftovers are filled uniformly. ``exclude_test``
    lists test rows already used by another client's split.
    """
    shard = np.asarray(private_shard, dtype=np.int64)
    available = np.setdiff1d(np.arange(len(test)), np.asarray(exclude_test, dtype=np.int64))
    if k < 0 or k > min(len(shard), len(available)):
        raise ValidationError(
            f"k={k} exceeds the shard ({len(shard)}) or free test pool ({len(available)})"
        )
    if k == 0:
        empty = np.zeros(0, np.int64)
        return EvalSplit(client_id, empty, empty, empty, empty)
    rng = stream(seed, "eval-split", client_id)
    members = np.sort(rng.choice(shard, size=k, replace=False))
    if stratified and test.labels is not None:
        chosen = []
        pool_labels = test.labels[available]
        wanted = np.bincount(train.labels[members], minlength=train.num_classes)
        for m in range(train.num_classes):
            cand = available[pool_labels == m]
            take = min(int(wanted[m]), cand.size)
            if take:
                chosen.append(rng.choice(cand, size=take, replace=False))
        chosen = np.concatenate(chosen) if chosen else np.zeros(0, np.int64)
        short = k - chosen.size
        if short:
            rest = np.setdiff1d(available, chosen)
            chosen = np.concatenate([chosen, rng.choice(rest, size=short, replace=False)])
        non_members = np.sort(chosen)
    else:
        non_members = np.sort(rng.choice(available, size=k, replace=False))
    nm_labels = test.labels[non_members] if test.labels is not None else np.zeros(0, np.int64)
    return EvalSplit(client_id, members, non_members, train.labels[members], nm_labels)


def load_csv(path, label_column: str | int | None = -1, name: str | None = None,
             classes: tuple | None = None) -> Dataset:
    """Parse a comma-separated file with a header row.

    Labels are re-indexed densely in sorted order of their raw values; the raw
    values are kept in ``Dataset.classes``. Pass ``classes`` (another file's
    mapping) to reuse that indexing instead. ``label_column=None`` loads an
    unlabeled matrix.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if not body:
        raise ValidationError(f"{path}: no data rows")
    if label_column is None:
        col = None
    elif isinstance(label_column, str):
        if label_column not in header:
            raise ValidationError(f"{path}: no column named {label_column!r}")
        col = header.index(label_column)
    else:
        col = label_column % len(header)
    values = np.empty((len(body), len(header)))
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ValidationError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
        for j, cell in enumerate(row):
            try:
                values[lineno - 2, j] = float(cell)
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: non-numeric cell {cell!r}") from None
    if col is None:
        return Dataset(values, None, 1, name or path.stem)
    raw = values[:, col]
    features = np.delete(values, col, axis=1)
    if classes is None:
        found, labels = np.unique(raw, return_inverse=True)
        classes = tuple(int(c) if float(c).is_integer() else float(c) for c in found)
    else:
        lookup = {float(c): i for i, c in enumerate(classes)}
        labels = np.empty(len(raw), dtype=np.int64)
        for i, v in enumerate(raw):
            if float(v) not in lookup:
                raise ValidationError(f"{path}:{i + 2}: label {v!r} not among the known classes")
            labels[i] = lookup[float(v)]
    return Dataset(features, labels, len(classes), name or path.stem, tuple(classes))


def write_csv(ds: Dataset, path, label_name: str = "label") -> None:
    """Write features (and raw labels, when present) with a header row."""
    path = Path(path)
    header = [f"x{j}" for j in range(ds.dim)]
    if ds.labels is not None:
        header.append(label_name)
        raw = np.asarray(ds.classes, dtype=object) if ds.classes else None
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, row in enumerate(ds.features):
            cells = [repr(float(v)) for v in row]
            if ds.labels is not None:
                lab = ds.labels[i]
                cells.append(str(raw[lab] if raw is not None else lab))
            writer.writerow(cells)
