"""Public-dataset-assisted federated distillation (FedMD, DS-FL, Cronus).

Each round runs three phases for all clients: local training on the private
shard, a communication phase in which clients publish their outputs on the
server-selected public rows ``S_t`` and the server aggregates them, and a
distillation phase in which clients fit the aggregated soft labels.

The server side only ever receives :class:`LogitRecord` objects and a
black-box :class:`ClientOracle`; private shards stay inside the simulation.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Callable, Protocol, Sequence

import numpy as np

from . import nn
from .data import Dataset, Partition
from .errors import PipelineError, ShapeError, TrainingError, ValidationError
from .nn import LossKind, ModelParams, TrainConfig
from .rng import client_seed, derive_seed, stream

log = logging.getLogger(__name__)


class Framework(str, Enum):
    FEDMD = "fedmd"
    DSFL = "dsfl"
    CRONUS = "cronus"


class ShareKind(str, Enum):
    LOGITS = "logits"
    PROBABILITIES = "probabilities"


_DEFAULT_SHARE = {
    Framework.FEDMD: ShareKind.LOGITS,
    Framework.DSFL: ShareKind.PROBABILITIES,
    Framework.CRONUS: ShareKind.PROBABILITIES,
}
_DEFAULT_DISTILL = {
    Framework.FEDMD: LossKind.DISTILL_MAE,
    Framework.DSFL: LossKind.DISTILL_KL,
    Framework.CRONUS: LossKind.DISTILL_MAE,
}


@dataclass(frozen=True)
class FDConfig:
    """Run configuration; ``None`` fields take the framework's default."""

    framework: Framework = Framework.DSFL
    num_clients: int = 10
    rounds: int = 5
    round_public_count: int = 2000
    first_round_epochs: int = 20
    local_epochs: int = 5
    distill_epochs: int = 10
    share_kind: ShareKind | None = None
    distill_loss: LossKind | None = None
    era_temperature: float = 0.1
    trim_fraction: float = 0.1
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    train: TrainConfig = field(default_factory=TrainConfig)
    distill_learning_rate: float | None = None
    pretrain_max_epochs: int = 50
    pretrain_patience: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "framework", Framework(self.framework))
        share = _DEFAULT_SHARE[self.framework] if self.share_kind is None else ShareKind(self.share_kind)
        object.__setattr__(self, "share_kind", share)
        loss = _DEFAULT_DISTILL[self.framework] if self.distill_loss is None else LossKind(self.distill_loss)
        object.__setattr__(self, "distill_loss", loss)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.framework is not Framework.FEDMD and share is not ShareKind.PROBABILITIES:
            raise ValidationError(f"{self.framework.value} clients must share probabilities")
        if loss is LossKind.CROSS_ENTROPY:
            raise ValidationError("distillation needs a soft-label loss")
        if self.num_clients < 1 or self.rounds < 0:
            raise ValidationError("num_clients must be >= 1 and rounds >= 0")
        if not 0 < self.era_temperature <= 1:
            raise ValidationError("era_temperature must lie in (0, 1]")
        if not 0 <= self.trim_fraction < 0.5:
            raise ValidationError("trim_fraction must lie in [0, 0.5)")

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("framework", "share_kind", "distill_loss"):
            out[key] = getattr(self, key).value
        out["hidden"] = list(self.hidden)
        return out


# --- aggregation --------------------------------------------------------------


def _stack(per_client) -> np.ndarray:
    try:
        arr = np.asarray(per_client, dtype=float)
    except ValueError as exc:
        raise ShapeError("client matrices have different shapes") from exc
    if arr.ndim != 3 or arr.shape[0] < 1:
        raise ShapeError("expected a (clients, rows, classes) stack")
    return arr


def aggregate_mean(per_client) -> np.ndarray:
    return _stack(per_client).mean(axis=0)


def aggregate_era(per_client, temperature: float = 0.1) -> np.ndarray:
    """Entropy reduction: average, then sharpen each row with ``1/temperature``."""
    arr = _stack(per_client)
    nn.check_simplex(arr, "ERA input")
    if not 0 < temperature <= 1:
        raise ValidationError("temperature must lie in (0, 1]")
    mean = arr.mean(axis=0)
    if temperature == 1:
        return mean
    return nn.softmax(np.log(np.maximum(mean, nn.PROB_FLOOR)) / temperature)


def aggregate_trimmed(per_client, trim_fraction: float = 0.1, renormalize: bool = False) -> np.ndarray:
    """Coordinate-wise mean after dropping ``ceil(trim_fraction*N)`` values per side."""
    arr = _stack(per_client)
    n = arr.shape[0]
    cut = math.ceil(trim_fraction * n - 1e-12)
    if cut == 0:
        out = arr.mean(axis=0)
    else:
        if 2 * cut >= n:
            raise ValidationError(f"trimming {cut} per side leaves nothing of {n} clients")
        out = np.sort(arr, axis=0)[cut:n - cut].mean(axis=0)
    if renormalize:
        out = out / out.sum(axis=-1, keepdims=True)
    return out


# --- records -----------------------------------------------------------------


@dataclass
class ClientState:
    id: int
    params: ModelParams
    private_shard: np.ndarray
    train_cfg: TrainConfig


@dataclass
class LogitRecord:
    """What the server sees in one communication phase."""

    round: int
    selection: np.ndarray
    per_client: np.ndarray
    aggregated: np.ndarray
    share_kind: ShareKind

    def __post_init__(self):
        n_sel = len(self.selection)
        if self.per_client.ndim != 3 or self.per_client.shape[1] != n_sel:
            raise ShapeError("per-client outputs must be (clients, |S_t|, M)")
        self._position = {int(k): i for i, k in enumerate(self.selection)}

    def position(self, public_index: int) -> int:
        try:
            return self._position[int(public_index)]
        except KeyError:
            raise ValidationError(f"public row {public_index} was not in S_{self.round}") from None

    def positions(self, public_indices) -> np.ndarray:
        return np.array([self.position(k) for k in public_indices], dtype=np.int64)

    def probabilities(self, client_id: int | None = None) -> np.ndarray:
        values = self.per_client if client_id is None else self.per_client[client_id]
        return nn.softmax(values) if self.share_kind is ShareKind.LOGITS else values


@dataclass
class RoundEntry:
    round: int
    local_accuracy: list[float]
    federated_accuracy: list[float]
    private_loss_before: list[float]
    private_loss_after: list[float]
    record: LogitRecord = field(repr=False)

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "local_accuracy": self.local_accuracy,
            "federated_accuracy": self.federated_accuracy,
            "private_loss_before": self.private_loss_before,
            "private_loss_after": self.private_loss_after,
            "selection_size": int(len(self.record.selection)),
        }


@dataclass
class RoundTrace:
    entries: list[RoundEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def to_ndjson(self) -> str:
        return "".join(json.dumps(e.to_json(), sort_keys=True) + "\n" for e in self.entries)


# --- server-facing interfaces -------------------------------------------------


class ClientOracle:
    """Black-box inference: the server may ask a client for its shared outputs."""

    def __init__(self, sim: "FederatedDistillation"):
        self._sim = sim

    @property
    def num_clients(self) -> int:
        return len(self._sim.clients)

    def query(self, client_id: int, features) -> np.ndarray:
        return self._sim.shared_outputs(client_id, np.asarray(features, dtype=float))


class CommunicationObserver(Protocol):
    def __call__(self, record: LogitRecord, oracle: ClientOracle) -> None: ...


class PlateauDetector:
    """Signals a stop once the loss has not improved for ``patience`` updates."""

    def __init__(self, patience: int = 3):
        self.patience = patience
        self.best = math.inf
        self.stale = 0

    def update(self, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


# --- simulation --------------------------------------------------------------


class FederatedDistillation:
    """All ``N`` clients plus the honest-but-curious aggregation server.

    ``pinned`` lists public rows the server forces into every ``S_t``;
    ``observers`` run at the communication barrier of every round, after
    aggregation and before distillation.
    """

    def __init__(
        self,
        cfg: FDConfig,
        train: Dataset,
        partition: Partition,
        public: Dataset,
        test: Dataset | None = None,
        pinned: Sequence[int] = (),
        observers: Sequence[CommunicationObserver] = (),
    ):
        if partition.num_clients != cfg.num_clients:
            raise ValidationError("partition and config disagree on the number of clients")
        if cfg.round_public_count > len(public):
            raise ValidationError(
                f"round_public_count {cfg.round_public_count} exceeds |D_pub| = {len(public)}"
            )
        self.cfg = cfg
        self.train = train
        self.public = public
        self.test = test
        self.pinned = np.unique(np.asarray(pinned, dtype=np.int64))
        self.observers = list(observers)
        self.oracle = ClientOracle(self)
        self.trace = RoundTrace()
        self._pretrained = False
        dims = [train.dim, *cfg.hidden, train.num_classes]
        self.clients = []
        for cid, shard in enumerate(partition.client_shards):
            cseed = client_seed(cfg.seed, cid)
            batch = min(cfg.train.batch_size, len(shard))
            self.clients.append(ClientState(
                cid,
                nn.init_mlp(dims, seed=cseed, activation=cfg.activation),
                np.asarray(shard, dtype=np.int64),
                replace(cfg.train, batch_size=batch, seed=cseed),
            ))

    # aggregation dispatch
    def aggregate(self, per_client: np.ndarray) -> np.ndarray:
        fw = self.cfg.framework
        if fw is Framework.DSFL:
            return aggregate_era(per_client, self.cfg.era_temperature)
        if fw is Framework.CRONUS:
            return aggregate_trimmed(per_client, self.cfg.trim_fraction,
                                     renormalize=self.cfg.share_kind is ShareKind.PROBABILITIES)
        return aggregate_mean(per_client)

    def shared_outputs(self, client_id: int, features: np.ndarray) -> np.ndarray:
        logits = nn.forward(self.clients[client_id].params, features)
        return nn.softmax(logits) if self.cfg.share_kind is ShareKind.PROBABILITIES else logits

    def select(self, t: int) -> np.ndarray:
        """Uniform sample of ``round_public_count`` free rows plus every pinned row."""
        free = np.setdiff1d(np.arange(len(self.public)), self.pinned)
        count = min(self.cfg.round_public_count, free.size)
        rng = stream(self.cfg.seed, "select", t)
        chosen = rng.choice(free, size=count, replace=False)
        return np.sort(np.concatenate([chosen, self.pinned]))

    def _private_loss(self, client: ClientState) -> float:
        x = self.train.features[client.private_shard]
        y = self.train.labels[client.private_shard]
        return nn.loss(LossKind.CROSS_ENTROPY, nn.forward(client.params, x), y)

    def _test_accuracy(self, client: ClientState) -> float:
        if self.test is None:
            return float("nan")
        return nn.accuracy(client.params, self.test.features, self.test.labels)

    def fedmd_pretrain(self) -> None:
        """FedMD only: fit every client on the labelled public set until the
        validation loss plateaus (or ``pretrain_max_epochs`` is reached)."""
        if self.cfg.framework is not Framework.FEDMD or self._pretrained:
            return
        self._pretrained = True
        if self.public.labels is None:
            log.warning("public dataset is unlabeled; skipping FedMD public pretraining")
            return
        order = stream(self.cfg.seed, "pretrain-split").permutation(len(self.public))
        n_val = max(1, len(order) // 10)
        val, fit = order[:n_val], order[n_val:]
        xf, yf = self.public.features[fit], self.public.labels[fit]
        xv, yv = self.public.features[val], self.public.labels[val]
        for client in self.clients:
            cfg = replace(client.train_cfg, batch_size=min(self.cfg.train.batch_size, len(fit)),
                          seed=derive_seed(client.train_cfg.seed, "pretrain"))
            detector = PlateauDetector(self.cfg.pretrain_patience)
            for epoch in range(self.cfg.pretrain_max_epochs):
                client.params, _ = nn.sgd_epoch(client.params, xf, yf, cfg,
                                                LossKind.CROSS_ENTROPY, epoch)
                val_loss = nn.loss(LossKind.CROSS_ENTROPY, nn.forward(client.params, xv), yv)
                if detector.update(val_loss):
                    break

    def _local_update(self, client: ClientState, t: int) -> None:
        epochs = self.cfg.first_round_epochs if t == 0 else self.cfg.local_epochs
        cfg = replace(client.train_cfg, epochs=epochs,
                      seed=derive_seed(client.train_cfg.seed, "local", t))
        x = self.train.features[client.private_shard]
        y = self.train.labels[client.private_shard]
        client.params, _ = nn.train(client.params, x, y, cfg, LossKind.CROSS_ENTROPY)

    def _distill(self, client: ClientState, t: int, x: np.ndarray, soft: np.ndarray) -> None:
        lr = self.cfg.distill_learning_rate
        cfg = replace(
            client.train_cfg,
            epochs=self.cfg.distill_epochs,
            batch_size=min(self.cfg.train.batch_size, len(x)),
            learning_rate=self.cfg.train.learning_rate if lr is None else lr,
            dp=None,
            seed=derive_seed(client.train_cfg.seed, "distill", t),
        )
        client.params, _ = nn.train(client.params, x, soft, cfg, self.cfg.distill_loss)

    def communicate(self, t: int, selection: np.ndarray) -> LogitRecord:
        x = self.public.features[selection]
        per_client = np.stack([self.shared_outputs(c.id, x) for c in self.clients])
        return LogitRecord(t, selection, per_client, self.aggregate(per_client), self.cfg.share_kind)

    def run_round(self, t: int) -> RoundEntry:
        if t == 0:
            self.fedmd_pretrain()
        before, after, local_acc = [], [], []
        for client in self.clients:
            before.append(self._private_loss(client))
            try:
                self._local_update(client, t)
            except TrainingError as exc:
                raise PipelineError("fd-sim", t, client.id, exc) from exc
            after.append(self._private_loss(client))
            local_acc.append(self._test_accuracy(client))

        selection = self.select(t)
        record = self.communicate(t, selection)
        for observer in self.observers:
            observer(record, self.oracle)

        soft = record.aggregated
        if self.cfg.share_kind is ShareKind.LOGITS:
            soft = nn.softmax(soft)
        x = self.public.features[selection]
        fed_acc = []
        for client in self.clients:
            try:
                self._distill(client, t, x, soft)
            except TrainingError as exc:
                raise PipelineError("fd-sim", t, client.id, exc) from exc
            fed_acc.append(self._test_accuracy(client))
        entry = RoundEntry(t, local_acc, fed_acc, before, after, record)
        self.trace.entries.append(entry)
        return entry

    def run(self, rounds: int | None = None,
            on_round: Callable[[RoundEntry], None] | None = None) -> RoundTrace:
        start = len(self.trace)
        for t in range(start, start + (self.cfg.rounds if rounds is None else rounds)):
            entry = self.run_round(t)
            if on_round is not None:
                on_round(entry)
        return self.trace
