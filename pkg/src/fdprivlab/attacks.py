"""Server-side attacks on the outputs clients share during distillation.

* Label distribution inference: average the target's posteriors over a
  class-balanced slice of the round's public rows, then average across rounds.
* Likelihood-ratio membership inference (offline LiRA) with two ways of
  obtaining "out" reference models: peers whose inferred label distribution
  is close to the target's (co-op), or students distilled from the target on
  public rows that exclude every planted target (distillation).
* Two fall-backs for clients that withhold outputs on their own samples: a
  distilled shadow of the target, or averaging over noisy neighbours.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import nn
from .data import Dataset
from .errors import PipelineError, ValidationError
from .fd import ClientOracle, LogitRecord, ShareKind
from .metrics import kl_divergence
from .nn import LossKind, ModelParams, TrainConfig
from .rng import derive_seed, gaussian, stream

PHI_CLAMP = 1e-9
SIGMA2_FLOOR = 1e-12


class NoUsableReferences(ValidationError):
    """Co-op selection found too few peers to fit the out-distribution."""


# --- label distribution inference --------------------------------------------


def ldia_round(shared, share_kind=ShareKind.LOGITS) -> np.ndarray:
    """Mean posterior over the inference rows of one client for one round."""
    shared = np.asarray(shared, dtype=float)
    if shared.ndim != 2 or shared.shape[0] == 0:
        raise ValidationError("LDIA needs at least one inference row")
    probs = shared if ShareKind(share_kind) is ShareKind.PROBABILITIES else nn.softmax(shared)
    return probs.mean(axis=0)


def ldia_final(per_round) -> np.ndarray:
    """Average of per-round inferred distributions, re-normalised."""
    arr = np.atleast_2d(np.asarray(per_round, dtype=float))
    if arr.shape[0] == 0:
        raise ValidationError("need at least one round")
    mean = arr.mean(axis=0)
    return mean / mean.sum()


def balanced_inference_rows(labels, seed: int = 0) -> np.ndarray:
    """Positions giving every class the same count (the rarest class's count).

    Classes absent from ``labels`` are ignored.
    """
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    per_class = min(int((labels == m).sum()) for m in present)
    rng = stream(seed, "ldia-balance")
    picks = [rng.choice(np.flatnonzero(labels == m), size=per_class, replace=False) for m in present]
    return np.sort(np.concatenate(picks))


# --- LiRA primitives ----------------------------------------------------------


def phi_scale(p):
    """Logit scaling ``log(p / (1 - p))`` with ``p`` clamped to ``[1e-9, 1 - 1e-9]``."""
    p = np.clip(np.asarray(p, dtype=float), PHI_CLAMP, 1.0 - PHI_CLAMP)
    out = np.log(p) - np.log1p(-p)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GaussianFit:
    mu_out: float
    sigma2_out: float
    sample_count: int

    @classmethod
    def from_scores(cls, scores) -> "GaussianFit":
        scores = np.asarray(scores, dtype=float)
        if scores.size < 2:
            raise ValidationError("a Gaussian fit needs at least two reference scores")
        # identical references fit exactly, so an equal target scores lambda = 0.5
        mu = float(scores[0]) if np.all(scores == scores[0]) else float(scores.mean())
        return cls(mu, float(scores.var(ddof=1)), int(scores.size))


def lira_test(target_scaled: float, fit: GaussianFit) -> float:
    """Membership probability ``Phi((target - mu) / sigma)``."""
    if fit.sample_count < 2:
        raise ValidationError("invalid fit: fewer than two reference scores")
    sigma = math.sqrt(max(fit.sigma2_out, SIGMA2_FLOOR))
    z = (target_scaled - fit.mu_out) / sigma
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


class LiraMode(str, Enum):
    COOP = "coop"
    DISTILLATION = "distillation"


@dataclass(frozen=True)
class LiraConfig:
    """``kl_threshold`` applies to co-op mode only, the ``distill_*`` and
    ``num_reference_models`` fields to distillation mode only."""

    mode: LiraMode = LiraMode.COOP
    kl_threshold: float = 0.1
    num_reference_models: int = 32
    distill_subset_fraction: float = 0.8
    distill_epochs: int = 60
    distill_learning_rate: float = 0.2
    distill_batch_size: int = 32
    symmetric_kl: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", LiraMode(self.mode))
        if not self.kl_threshold >= 0:
            raise ValidationError("kl_threshold must be non-negative")
        if self.num_reference_models < 1:
            raise ValidationError("need at least one reference model")
        if not 0 < self.distill_subset_fraction <= 1:
            raise ValidationError("distill_subset_fraction must lie in (0, 1]")


@dataclass
class MembershipVerdict:
    target_index: int
    lambda_: float
    scaled_score: float
    is_member_truth: bool
    client_id: int = -1
    reference_mean: float = float("nan")
    reference_std: float = float("nan")

    @property
    def z(self) -> float:
        return (self.scaled_score - self.reference_mean) / self.reference_std

    @property
    def rank_score(self) -> float:
        """Score used for ROC sweeps.

        ``lambda_`` is ``Phi(z)``, which rounds to exactly 1.0 once ``z``
        exceeds about 8.3 and would merge the most confident verdicts into one
        tie. ``z`` orders verdicts identically without saturating, so it is
        used whenever the reference fit is recorded.
        """
        z = self.z
        return z if math.isfinite(z) else self.lambda_

    def to_json(self) -> dict:
        return {
            "index": int(self.target_index),
            "client": int(self.client_id),
            "lambda": self.lambda_,
            "scaled_score": self.scaled_score,
            "truth": bool(self.is_member_truth),
            "reference_mean": self.reference_mean,
            "reference_std": self.reference_std,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MembershipVerdict":
        return cls(obj["index"], obj["lambda"], obj["scaled_score"], obj["truth"],
                   obj.get("client", -1), obj.get("reference_mean", float("nan")),
                   obj.get("reference_std", float("nan")))


# --- reference models ----------------------------------------------------------


def coop_select_references(
    target_id: int, distributions, beta: float = 0.1, symmetric: bool = False
) -> list[int]:
    """Peers ``n`` with ``KL(p_target || p_n) < beta``."""
    dists = np.asarray(distributions, dtype=float)
    chosen = []
    for n in range(dists.shape[0]):
        if n == target_id:
            continue
        div = kl_divergence(dists[target_id], dists[n])
        if symmetric:
            div = 0.5 * (div + kl_divergence(dists[n], dists[target_id]))
        if div < beta:
            chosen.append(n)
    return chosen


def distill_references(
    teacher_outputs,
    features,
    candidates,
    cfg: LiraConfig,
    seed: int,
    layer_dims: Sequence[int],
    activation: str = "relu",
    share_kind=ShareKind.PROBABILITIES,
    planted: Sequence[int] = (),
    num_models: int | None = None,
) -> ModelParams:
    """Distil ``K`` students from the target's shared outputs.

    ``teacher_outputs[i]`` is what the target shared for ``features[i]``;
    ``candidates`` are the rows students may train on. Each student draws its
    own ``distill_subset_fraction`` subset; rows in ``planted`` are refused.
    Returns the students stacked along a leading axis.
    """
    k_models = cfg.num_reference_models if num_models is None else num_models
    candidates = np.asarray(candidates, dtype=np.int64)
    planted = np.asarray(planted, dtype=np.int64)
    if planted.size and np.isin(candidates, planted).any():
        raise ValidationError("distillation candidates contain a planted target")
    size = max(1, int(round(cfg.distill_subset_fraction * candidates.size)))
    if size < cfg.distill_batch_size:
        raise ValidationError(
            f"distillation subset of {size} rows is smaller than batch size {cfg.distill_batch_size}"
        )
    rng = stream(seed, "distill-subsets")
    subsets = np.stack([np.sort(rng.choice(candidates, size=size, replace=False))
                        for _ in range(k_models)])
    soft = np.asarray(teacher_outputs, dtype=float)
    if ShareKind(share_kind) is ShareKind.LOGITS:
        soft = nn.softmax(soft)
    students = nn.init_mlp(layer_dims, seed=derive_seed(seed, "students"),
                           activation=activation, stack=k_models)
    tcfg = TrainConfig(cfg.distill_learning_rate, cfg.distill_epochs, cfg.distill_batch_size,
                       seed=derive_seed(seed, "student-train"))
    return nn.train_stacked(students, np.asarray(features, dtype=float), soft, subsets, tcfg,
                            LossKind.DISTILL_KL)


def student_scores(students: ModelParams, x, y) -> np.ndarray:
    """Scaled true-class scores, shape ``(K, len(x))``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    k = students.stack_shape[0]
    probs = nn.softmax(nn.forward(students, np.broadcast_to(x, (k,) + x.shape)))
    return phi_scale(probs[:, np.arange(len(y)), y])


# --- round context and the attack proper --------------------------------------


@dataclass
class TargetSet:
    """Planted targets of one client: public row, label and ground truth."""

    client_id: int
    public_index: np.ndarray
    labels: np.ndarray
    is_member: np.ndarray

    def __len__(self):
        return len(self.public_index)


@dataclass
class RoundContext:
    """Everything the server holds when it attacks one communication phase."""

    record: LogitRecord
    public: Dataset
    planted: np.ndarray
    distributions: np.ndarray
    layer_dims: list[int]
    activation: str = "relu"
    oracle: ClientOracle | None = None
    seed: int = 0
    _students: dict = field(default_factory=dict, repr=False)

    @property
    def share_kind(self) -> ShareKind:
        return self.record.share_kind

    def free_positions(self) -> np.ndarray:
        """Positions in ``S_t`` that are not planted targets."""
        mask = ~np.isin(self.record.selection, self.planted)
        return np.flatnonzero(mask)

    def students(self, client_id: int, cfg: LiraConfig) -> ModelParams:
        key = (client_id, cfg)
        if key not in self._students:
            sel = self.record.selection
            self._students[key] = distill_references(
                self.record.per_client[client_id],
                self.public.features[sel],
                self.free_positions(),
                cfg,
                derive_seed(self.seed, "references", self.record.round, client_id),
                self.layer_dims,
                self.activation,
                self.share_kind,
                planted=np.flatnonzero(np.isin(sel, self.planted)),
            )
        return self._students[key]


def _true_class_scores(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return phi_scale(probs[..., np.arange(len(labels)), labels])


def _verdicts(targets: TargetSet, target_scores, ref_scores) -> list[MembershipVerdict]:
    out = []
    for i in range(len(targets)):
        refs = ref_scores[:, i]
        fit = GaussianFit.from_scores(refs)
        out.append(MembershipVerdict(
            int(targets.public_index[i]),
            lira_test(float(target_scores[i]), fit),
            float(target_scores[i]),
            bool(targets.is_member[i]),
            targets.client_id,
            fit.mu_out,
            math.sqrt(max(fit.sigma2_out, SIGMA2_FLOOR)),
        ))
    return out


def reference_scores(targets: TargetSet, cfg: LiraConfig, ctx: RoundContext,
                     num_models: int | None = None, features=None) -> np.ndarray:
    """Reference-model scores on the targets, shape ``(references, targets)``.

    ``features`` overrides the target rows (used for neighbour queries).
    """
    if cfg.mode is LiraMode.COOP:
        refs = coop_select_references(targets.client_id, ctx.distributions, cfg.kl_threshold,
                                      cfg.symmetric_kl)
        if len(refs) < 2:
            raise NoUsableReferences(
                f"client {targets.client_id}: {len(refs)} peers under beta={cfg.kl_threshold}"
            )
        if features is None:
            pos = ctx.record.positions(targets.public_index)
            return _true_class_scores(ctx.record.probabilities()[refs][:, pos], targets.labels)
        probs = np.stack([_as_probs(ctx.oracle.query(n, features), ctx.share_kind) for n in refs])
        return _true_class_scores(probs, targets.labels)
    students = ctx.students(targets.client_id, cfg)
    if num_models is not None:
        students = ModelParams([w[:num_models] for w in students.weights],
                               [b[:num_models] for b in students.biases], students.activation)
    x = ctx.public.features[targets.public_index] if features is None else features
    return student_scores(students, x, targets.labels)


def _as_probs(values, share_kind) -> np.ndarray:
    return values if ShareKind(share_kind) is ShareKind.PROBABILITIES else nn.softmax(values)


def target_scores(targets: TargetSet, ctx: RoundContext) -> np.ndarray:
    pos = ctx.record.positions(targets.public_index)
    probs = ctx.record.probabilities(targets.client_id)[pos]
    return _true_class_scores(probs, targets.labels)


def run_mia(targets: TargetSet, cfg: LiraConfig, ctx: RoundContext,
            num_models: int | None = None) -> list[MembershipVerdict]:
    """LiRA verdicts for every planted target of one client.

    Raises :class:`ValidationError` if a target is missing from ``S_t`` and
    :class:`NoUsableReferences` if co-op selection leaves fewer than two peers.
    """
    scores = target_scores(targets, ctx)
    refs = reference_scores(targets, cfg, ctx, num_models)
    return _verdicts(targets, scores, refs)


# --- countermeasures against evasive clients -----------------------------------


def evade_shadow_target(targets: TargetSet, cfg: LiraConfig, ctx: RoundContext,
                        shadow_cfg: LiraConfig | None = None) -> list[MembershipVerdict]:
    """The target withholds its outputs on the planted targets.

    A single shadow student is distilled from the outputs it did share (the
    non-planted rows of ``S_t``) and stands in for the target's score.
    References come from ``cfg`` as usual.
    """
    shadow_cfg = shadow_cfg or LiraConfig(mode=LiraMode.DISTILLATION, distill_subset_fraction=1.0)
    sel = ctx.record.selection
    shadow = distill_references(
        ctx.record.per_client[targets.client_id],
        ctx.public.features[sel],
        ctx.free_positions(),
        shadow_cfg,
        derive_seed(ctx.seed, "shadow-target", ctx.record.round, targets.client_id),
        ctx.layer_dims,
        ctx.activation,
        ctx.share_kind,
        planted=np.flatnonzero(np.isin(sel, ctx.planted)),
        num_models=1,
    )
    surrogate = student_scores(shadow, ctx.public.features[targets.public_index], targets.labels)[0]
    refs = reference_scores(targets, cfg, ctx)
    return _verdicts(targets, surrogate, refs)


def neighbours(x, noise_scale: float, count: int, seed: int, clip: float = 0.7) -> np.ndarray:
    """``count`` perturbed copies of each row: ``x + clip(N(0, noise_scale^2), -clip, clip)``.

    Returns shape ``(count, len(x), d)``.
    """
    if count < 1:
        raise ValidationError("need at least one neighbour")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    noise = np.clip(gaussian(stream(seed, "neighbours"), (count,) + x.shape, scale=noise_scale),
                    -clip, clip)
    return x[None] + noise


def _neighbour_mean(scores: np.ndarray, axis: int) -> np.ndarray:
    # centred on the first neighbour so identical neighbours average exactly
    first = np.take(scores, [0], axis=axis)
    return np.squeeze(first, axis=axis) + (scores - first).mean(axis=axis)


def evade_indirect_query(targets: TargetSet, cfg: LiraConfig, ctx: RoundContext,
                         noise_scale: float = 0.5, count: int = 8,
                         clip: float = 0.7) -> list[MembershipVerdict]:
    """The target withholds its outputs on the planted targets; the server
    plants ``count`` noisy neighbours of each one instead and averages the
    target's scaled scores over them. Reference scores are averaged over the
    same neighbours so both sides of the test see identical inputs.
    """
    if ctx.oracle is None:
        raise ValidationError("indirect queries need a client oracle")
    x = ctx.public.features[targets.public_index]
    nbrs = neighbours(x, noise_scale, count,
                      derive_seed(ctx.seed, "indirect", ctx.record.round, targets.client_id), clip)
    flat = nbrs.reshape(-1, x.shape[1])
    tiled = np.tile(targets.labels, count)
    probs = _as_probs(ctx.oracle.query(targets.client_id, flat), ctx.share_kind)
    surrogate = _neighbour_mean(_true_class_scores(probs, tiled).reshape(count, -1), axis=0)
    ref_tiled = TargetSet(targets.client_id, np.tile(targets.public_index, count), tiled,
                          np.tile(targets.is_member, count))
    refs = reference_scores(ref_tiled, cfg, ctx, features=flat)
    refs = _neighbour_mean(refs.reshape(refs.shape[0], count, -1), axis=1)
    return _verdicts(targets, surrogate, refs)


def indirect_query_score(oracle: ClientOracle, client_id: int, x, y, share_kind,
                         noise_scale: float, count: int, seed: int, clip: float = 0.7) -> np.ndarray:
    """Surrogate scaled scores for rows ``x`` from neighbour queries alone."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    nbrs = neighbours(x, noise_scale, count, seed, clip).reshape(-1, x.shape[1])
    probs = _as_probs(oracle.query(client_id, nbrs), share_kind)
    return _neighbour_mean(_true_class_scores(probs, np.tile(y, count)).reshape(count, -1), axis=0)


# --- the curious server ---------------------------------------------------------


@dataclass(frozen=True)
class EvasionConfig:
    noise_scale: float = 0.5
    count: int = 8
    clip: float = 0.7


class AttackServer:
    """Observer that runs LDIA every round and LiRA at ``attack_rounds``.

    ``public`` is the server's copy of the public pool (with labels when it
    has them). Results accumulate in ``ldia_rounds`` (client -> list of
    per-round distributions) and ``results`` (attack -> round -> client ->
    verdict list, or a status string when the attack abstained).
    """

    def __init__(
        self,
        public: Dataset,
        targets: Sequence[TargetSet],
        layer_dims: Sequence[int],
        activation: str = "relu",
        seed: int = 0,
        lira: dict[str, LiraConfig] | None = None,
        attack_rounds: Sequence[int] = (0,),
        evade_shadow: LiraConfig | None = None,
        evade_indirect: EvasionConfig | None = None,
        k_sweep: Sequence[int] = (),
    ):
        self.public = public
        self.targets = list(targets)
        self.planted = (np.unique(np.concatenate([t.public_index for t in self.targets]))
                        if self.targets else np.zeros(0, np.int64))
        self.layer_dims = list(layer_dims)
        self.activation = activation
        self.seed = seed
        self.lira = dict(lira or {})
        self.attack_rounds = set(int(r) for r in attack_rounds)
        self.evade_shadow = evade_shadow
        self.evade_indirect = evade_indirect
        self.k_sweep = [int(k) for k in k_sweep]
        self.ldia_rounds: dict[int, list[np.ndarray]] = {}
        self.ldia_rows: dict[int, int] = {}
        self.results: dict[str, dict[int, dict[int, object]]] = {}
        self.references: dict[int, dict[int, list[int]]] = {}

    def inference_positions(self, record: LogitRecord) -> np.ndarray:
        free = np.flatnonzero(~np.isin(record.selection, self.planted))
        if self.public.labels is None:
            return free
        labels = self.public.labels[record.selection[free]]
        return free[balanced_inference_rows(labels, derive_seed(self.seed, "ldia", record.round))]

    def distributions(self) -> np.ndarray:
        return np.stack([ldia_final(self.ldia_rounds[c]) for c in sorted(self.ldia_rounds)])

    def __call__(self, record: LogitRecord, oracle: ClientOracle) -> None:
        rows = self.inference_positions(record)
        self.ldia_rows[record.round] = int(rows.size)
        for c in range(record.per_client.shape[0]):
            self.ldia_rounds.setdefault(c, []).append(
                ldia_round(record.per_client[c][rows], record.share_kind))
        if record.round in self.attack_rounds and self.targets:
            self._attack(record, oracle)

    def _store(self, name, t, client, value):
        self.results.setdefault(name, {}).setdefault(t, {})[client] = value

    def _attack(self, record: LogitRecord, oracle: ClientOracle) -> None:
        t = record.round
        ctx = RoundContext(record, self.public, self.planted, self.distributions(),
                           self.layer_dims, self.activation, oracle, self.seed)
        coop_cfg = self.lira.get("coop", LiraConfig(mode=LiraMode.COOP))
        self.references[t] = {
            ts.client_id: coop_select_references(ts.client_id, ctx.distributions,
                                                 coop_cfg.kl_threshold, coop_cfg.symmetric_kl)
            for ts in self.targets
        }
        jobs = list(self.lira.items())
        for ts in self.targets:
            if len(ts) == 0:
                continue
            for name, cfg in jobs:
                self._run(name, t, ts, lambda: run_mia(ts, cfg, ctx))
                if cfg.mode is LiraMode.DISTILLATION:
                    for k in self.k_sweep:
                        self._run(f"{name}@K={k}", t, ts, lambda k=k: run_mia(ts, cfg, ctx, num_models=k))
            if self.evade_shadow is not None:
                self._run("evade_shadow", t, ts,
                          lambda: evade_shadow_target(ts, coop_cfg, ctx, self.evade_shadow))
            if self.evade_indirect is not None:
                ev = self.evade_indirect
                self._run("evade_indirect", t, ts,
                          lambda: evade_indirect_query(ts, coop_cfg, ctx, ev.noise_scale, ev.count, ev.clip))

    def _run(self, name, t, ts, fn):
        try:
            self._store(name, t, ts.client_id, fn())
        except NoUsableReferences:
            self._store(name, t, ts.client_id, "no usable references")
        except Exception as exc:
            raise PipelineError(f"attacks/{name}", t, ts.client_id, exc) from exc
