"""Experiment runner: data -> federated distillation -> attacks -> metrics.

An experiment is described by a JSON document (see ``README.md`` for the
schema). :func:`run_experiment` executes it and returns a report dict;
:func:`write_outputs` persists ``report.json``, ``trace.ndjson``,
``attacks.json`` and one ``roc_<attack>.csv`` per attack.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .attacks import AttackServer, ldia_final, EvasionConfig, LiraConfig, LiraMode, MembershipVerdict, TargetSet
from .data import (Dataset, concat, dirichlet_partition, label_distribution, load_csv,
                   make_eval_split, split_train_public, synth_gaussian_mixture)
from .errors import PipelineError, ValidationError
from .fd import FDConfig, FederatedDistillation, RoundEntry
from .metrics import LdiaScore, random_ldia_baseline, roc, summarize
from .nn import DPConfig, TrainConfig
from .rng import derive_seed

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
REPORT_SCHEMA = "fdprivlab.report/v1"
ATTACK_NAMES = ("ldia", "coop", "distillation", "evade_shadow", "evade_indirect")
SWEEP_AXES = {
    "public_size": "fd.round_public_count",
    "num_reference_models": "attacks.distillation.num_reference_models",
    "local_epochs": "fd.local_epochs",
    "dp_noise": "fd.train.dp.noise_multiplier",
    "alpha": "data.alpha",
    "framework": "fd.framework",
    "public_shift": "data.public_shift",
}


class ConfigError(ValidationError):
    """The experiment document is malformed."""


@dataclass
class DataSpec:
    source: str = "synthetic"
    num_classes: int = 10
    dim: int = 32
    n: int = 20000
    n_test: int = 5000
    class_sep: float = 2.5
    public_shift: float = 0.0
    train_ratio: float = 0.8
    alpha: float = 1.0
    targets_per_client: int = 250
    stratified: bool = True
    strip_public_labels: bool = False
    train_path: str | None = None
    test_path: str | None = None
    label_column: str | int = -1


@dataclass
class ExperimentSpec:
    data: DataSpec = field(default_factory=DataSpec)
    fd: FDConfig = field(default_factory=FDConfig)
    attacks: dict[str, dict] = field(default_factory=dict)
    attack_rounds: tuple[int, ...] = (0,)
    k_sweep: tuple[int, ...] = ()
    output_dir: str = "runs/default"
    seed: int = 0
    name: str = "experiment"

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data": asdict(self.data),
            "fd": self.fd.to_dict(),
            "attacks": copy.deepcopy(self.attacks),
            "attack_rounds": list(self.attack_rounds),
            "k_sweep": list(self.k_sweep),
        }


def _build(cls, obj: dict, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls) if f.init}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _train_config(obj: dict) -> TrainConfig:
    obj = dict(obj)
    dp = obj.pop("dp", None)
    if dp is not None:
        obj["dp"] = _build(DPConfig, dp, "fd.train.dp")
    return _build(TrainConfig, obj, "fd.train")


def spec_from_dict(doc: dict) -> ExperimentSpec:
    """Validate and convert a parsed JSON document."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}")
    extra = set(doc) - {"schema_version", "name", "seed", "output_dir", "data", "fd", "attacks",
                        "attack_rounds", "k_sweep"}
    if extra:
        raise ConfigError(f"unknown top-level keys {sorted(extra)}")
    data = _build(DataSpec, doc.get("data", {}), "data")
    if data.source not in ("synthetic", "csv"):
        raise ConfigError("data.source must be 'synthetic' or 'csv'")
    if data.source == "csv":
        for key in ("train_path", "test_path"):
            path = getattr(data, key)
            if not path or not Path(path).exists():
                raise ConfigError(f"data.{key} {path!r} does not exist")
    fd_doc = dict(doc.get("fd", {}))
    if "train" in fd_doc:
        fd_doc["train"] = _train_config(fd_doc["train"])
    if "hidden" in fd_doc:
        fd_doc["hidden"] = tuple(fd_doc["hidden"])
    fd = _build(FDConfig, fd_doc, "fd")
    raw_attacks = doc.get("attacks", {})
    if isinstance(raw_attacks, list):
        raw_attacks = {name: {} for name in raw_attacks}
    if not isinstance(raw_attacks, dict):
        raise ConfigError("attacks must be a list of names or an object")
    for name, opts in raw_attacks.items():
        if name not in ATTACK_NAMES:
            raise ConfigError(f"unknown attack {name!r}; valid: {', '.join(ATTACK_NAMES)}")
        if not isinstance(opts, dict):
            raise ConfigError(f"attacks.{name} must be an object")
    spec = ExperimentSpec(
        data=data,
        fd=fd,
        attacks={k: dict(v) for k, v in raw_attacks.items()},
        attack_rounds=tuple(int(r) for r in doc.get("attack_rounds", (0,))),
        k_sweep=tuple(int(k) for k in doc.get("k_sweep", ())),
        output_dir=str(doc.get("output_dir", "runs/default")),
        seed=int(doc.get("seed", 0)),
        name=str(doc.get("name", "experiment")),
    )
    _lira_configs(spec)  # validate attack options early
    return spec


def load_spec(path) -> ExperimentSpec:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return spec_from_dict(doc)


def _lira_configs(spec: ExperimentSpec) -> dict[str, LiraConfig]:
    out = {}
    for name, mode in (("coop", LiraMode.COOP), ("distillation", LiraMode.DISTILLATION)):
        if name in spec.attacks:
            out[name] = _build(LiraConfig, {**spec.attacks[name], "mode": mode}, f"attacks.{name}")
    return out


# --- data assembly -------------------------------------------------------------


@dataclass
class ExperimentData:
    train: Dataset
    public: Dataset
    test_eval: Dataset
    partition: Any
    targets: list[TargetSet]
    planted: np.ndarray


def build_data(spec: ExperimentSpec) -> ExperimentData:
    """Client pool, public pool with planted targets, and held-out test rows."""
    d = spec.data
    seed = spec.seed
    if d.source == "synthetic":
        full = synth_gaussian_mixture(d.num_classes, d.dim, d.n, d.class_sep, seed, name="synthetic")
        test = synth_gaussian_mixture(d.num_classes, d.dim, d.n_test, d.class_sep, seed,
                                      draw="test", name="synthetic-test")
        train, public = split_train_public(full, d.train_ratio, derive_seed(seed, "split"))
        if d.public_shift:
            public = synth_gaussian_mixture(d.num_classes, d.dim, len(public), d.class_sep, seed,
                                            shift=d.public_shift, draw="public",
                                            name="synthetic-public-shifted")
    else:
        pool = load_csv(d.train_path, d.label_column)
        test = load_csv(d.test_path, d.label_column, classes=pool.classes)
        if pool.dim != test.dim:
            raise ConfigError("train and test CSV files have different feature counts")
        train, public = split_train_public(pool, d.train_ratio, derive_seed(seed, "split"))
    partition = dirichlet_partition(train, spec.fd.num_clients, d.alpha, derive_seed(seed, "partition"))

    splits, used = [], np.zeros(0, np.int64)
    for cid, shard in enumerate(partition.client_shards):
        k = min(d.targets_per_client, len(shard), len(test) - used.size)
        split = make_eval_split(shard, train, test, k, derive_seed(seed, "targets"), cid,
                                d.stratified, exclude_test=used)
        used = np.concatenate([used, split.non_members])
        splits.append(split)
    test_eval = test.subset(np.setdiff1d(np.arange(len(test)), used), "test-eval")

    parts, targets, offset = [public], [], len(public)
    for split in splits:
        k = len(split)
        parts.append(train.subset(split.members))
        parts.append(test.subset(split.non_members))
        idx = np.arange(offset, offset + 2 * k)
        offset += 2 * k
        labels = np.concatenate([split.member_labels, split.non_member_labels])
        truth = np.r_[np.ones(k, bool), np.zeros(k, bool)]
        targets.append(TargetSet(split.client_id, idx, labels, truth))
    public_aug = concat(parts, name="public+targets")
    planted = np.arange(len(public), len(public_aug))
    return ExperimentData(train, public_aug, test_eval, partition, targets, planted)


# --- run -----------------------------------------------------------------------


def _mean(values):
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return math.fsum(vals) / len(vals) if vals else None


# an abstaining attack is scored as a coin flip in ``effective_mean``
_MEAN_KEYS = {"auc": 0.5, "tpr@1%fpr": 0.01, "tpr@0.1%fpr": 0.001, "balanced_accuracy": 0.5}


def _attack_section(name: str, by_round: dict, references: dict, seed: int) -> dict:
    rounds = {}
    for t in sorted(by_round):
        clients = []
        pooled = []
        for cid in sorted(by_round[t]):
            value = by_round[t][cid]
            row = {"client": cid, "round": t, "seed": seed}
            if isinstance(value, str):
                row["status"] = value
            else:
                row["status"] = "ok"
                row.update(summarize(value).to_json())
                pooled.extend(value)
            if name.startswith("coop") or name.startswith("evade"):
                row["references"] = references.get(t, {}).get(cid, [])
            clients.append(row)
        ok = [c for c in clients if c["status"] == "ok"]
        rounds[str(t)] = {
            "per_client": clients,
            "mean": {k: _mean([c[k] for c in ok]) for k in _MEAN_KEYS},
            "effective_mean": {k: _mean([c[k] if c["status"] == "ok" else chance
                                         for c in clients]) for k, chance in _MEAN_KEYS.items()},
            "coverage": len(ok) / len(clients) if clients else 0.0,
            "pooled": summarize(pooled).to_json() if pooled else None,
        }
    return rounds


def run_experiment(spec: ExperimentSpec, out_dir=None, timestamp: bool = True) -> dict:
    """Execute one experiment; returns the report (and writes it if ``out_dir``).

    With ``out_dir`` set, ``trace.ndjson`` is appended after every round so an
    interrupted run can be inspected.
    """
    started = time.time()
    data = build_data(spec)
    fd_cfg = replace(spec.fd, seed=spec.seed)
    lira = _lira_configs(spec)
    attacking = bool(spec.attacks)
    server = None
    observers = []
    if attacking:
        ev_shadow = ev_ind = None
        if "evade_shadow" in spec.attacks:
            ev_shadow = _build(LiraConfig, {"mode": "distillation", "distill_subset_fraction": 1.0,
                                            **spec.attacks["evade_shadow"]}, "attacks.evade_shadow")
        if "evade_indirect" in spec.attacks:
            ev_ind = _build(EvasionConfig, spec.attacks["evade_indirect"], "attacks.evade_indirect")
        server = AttackServer(
            data.public, data.targets if (lira or ev_shadow or ev_ind) else [],
            [data.train.dim, *fd_cfg.hidden, data.train.num_classes], fd_cfg.activation,
            spec.seed, lira, spec.attack_rounds, ev_shadow, ev_ind, spec.k_sweep,
        )
        observers.append(server)
    public_for_clients = data.public.without_labels() if spec.data.strip_public_labels else data.public
    sim = FederatedDistillation(fd_cfg, data.train, data.partition, public_for_clients,
                                data.test_eval, pinned=data.planted if attacking else (),
                                observers=observers)

    trace_file = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trace_file = out / "trace.ndjson"
        trace_file.write_text("")

    def flush(entry: RoundEntry):
        if trace_file is not None:
            with trace_file.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")

    try:
        trace = sim.run(on_round=flush)
    except (PipelineError, ValidationError):
        raise
    except Exception as exc:
        raise PipelineError("fd-sim", len(sim.trace), None, exc) from exc

    rounds = [e.to_json() for e in trace]
    report: dict[str, Any] = {
        "schema": REPORT_SCHEMA,
        "version": __version__,
        "config": spec.to_dict(),
        "seed": spec.seed,
        "fd": {
            "rounds": rounds,
            "local_accuracy_round0": _mean(rounds[0]["local_accuracy"]) if rounds else None,
            "federated_accuracy_final": _mean(rounds[-1]["federated_accuracy"]) if rounds else None,
            "shard_sizes": data.partition.sizes(),
        },
    }
    if timestamp:
        report["created_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    if server is not None:
        report.update(_attack_report(spec, data, server))
    report["wall_seconds"] = round(time.time() - started, 3) if timestamp else None
    if out_dir is not None:
        write_outputs(report, server, out_dir, trace_ndjson=trace.to_ndjson(), truths=_truths(data))
    return report


def _ldia_section(per_round: dict, truths: dict, num_classes: int, seed: int, rows: dict) -> dict:
    """LDIA scores from per-round inferred distributions (client -> list)."""
    out = []
    for cid in sorted(per_round):
        truth = np.asarray(truths[cid], dtype=float)
        inferred = ldia_final(per_round[cid])
        guess = random_ldia_baseline(num_classes, derive_seed(seed, "random-ldia", cid))
        score, base = LdiaScore.of(inferred, truth), LdiaScore.of(guess, truth)
        out.append({
            "client": cid, "seed": seed, "rounds": len(per_round[cid]),
            "inferred": inferred.tolist(), "truth": truth.tolist(), "random": guess.tolist(),
            "kl": score.kl, "chebyshev": score.chebyshev,
            "random_kl": base.kl, "random_chebyshev": base.chebyshev,
            "argmax_match": bool(np.argmax(inferred) == np.argmax(truth)),
        })
    return {
        "per_client": out,
        "inference_rows": {str(k): v for k, v in sorted(rows.items())},
        "mean_kl": _mean([r["kl"] for r in out]),
        "mean_chebyshev": _mean([r["chebyshev"] for r in out]),
        "random_mean_kl": _mean([r["random_kl"] for r in out]),
        "random_mean_chebyshev": _mean([r["random_chebyshev"] for r in out]),
        "argmax_match_rate": _mean([float(r["argmax_match"]) for r in out]),
    }


def _attack_report(spec: ExperimentSpec, data: ExperimentData, server: AttackServer) -> dict:
    out: dict[str, Any] = {}
    if "ldia" in spec.attacks and server.ldia_rounds:
        out["ldia"] = _ldia_section(server.ldia_rounds, _truths(data), data.train.num_classes,
                                    spec.seed, server.ldia_rows)
    attacks = {}
    for name in sorted(server.results):
        attacks[name] = _attack_section(name, server.results[name], server.references, spec.seed)
    if attacks:
        out["attacks"] = attacks
    return out


def _truths(data: ExperimentData) -> dict[int, np.ndarray]:
    m = data.train.num_classes
    return {cid: label_distribution(data.train.labels[shard], m)
            for cid, shard in enumerate(data.partition.client_shards)}


def attack_records(server: AttackServer) -> dict:
    """Raw verdicts, JSON-ready: attack -> round -> client -> list or status."""
    out: dict[str, Any] = {}
    for name, by_round in sorted(server.results.items()):
        out[name] = {
            str(t): {str(c): (v if isinstance(v, str) else [x.to_json() for x in v])
                     for c, v in sorted(clients.items())}
            for t, clients in sorted(by_round.items())
        }
    return out


def write_outputs(report: dict, server: AttackServer | None, out_dir, trace_ndjson: str,
                  truths: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    (out / "trace.ndjson").write_text(trace_ndjson, encoding="utf-8")
    if server is None:
        return
    records = attack_records(server)
    meta = {"schema": "fdprivlab.attacks/v1", "seed": report["seed"],
            "config": report["config"]["attacks"], "records": records}
    if "ldia" in report:
        meta["ldia"] = {
            "num_classes": len(report["ldia"]["per_client"][0]["truth"]),
            "rows": {str(k): v for k, v in sorted(server.ldia_rows.items())},
            "truth": {str(c): np.asarray(v).tolist() for c, v in sorted((truths or {}).items())},
            "per_round": {str(c): [np.asarray(d).tolist() for d in ds]
                          for c, ds in sorted(server.ldia_rounds.items())},
        }
    (out / "attacks.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n",
                                      encoding="utf-8")
    for name, by_round in server.results.items():
        pooled = [v for clients in by_round.values() for x in clients.values()
                  if not isinstance(x, str) for v in x]
        if pooled and len({v.is_member_truth for v in pooled}) == 2:
            safe = name.replace("@", "_").replace("=", "")
            (out / f"roc_{safe}.csv").write_text(roc(pooled).to_csv(), encoding="utf-8")


def recompute_metrics(out_dir) -> dict:
    """Rebuild the report's derived sections from the persisted trace and
    attack records alone; the result compares equal to the matching parts of
    ``report.json``."""
    out_dir = Path(out_dir)
    report = json.loads((out_dir / "report.json").read_text(encoding="utf-8"))
    rounds = [json.loads(line) for line in
              (out_dir / "trace.ndjson").read_text(encoding="utf-8").splitlines() if line]
    rebuilt: dict[str, Any] = {"fd": {
        "rounds": rounds,
        "local_accuracy_round0": _mean(rounds[0]["local_accuracy"]) if rounds else None,
        "federated_accuracy_final": _mean(rounds[-1]["federated_accuracy"]) if rounds else None,
        "shard_sizes": report["fd"]["shard_sizes"],
    }}
    path = out_dir / "attacks.json"
    if not path.exists():
        return rebuilt
    meta = json.loads(path.read_text(encoding="utf-8"))
    if "ldia" in meta:
        ld = meta["ldia"]
        rebuilt["ldia"] = _ldia_section(
            {int(c): [np.asarray(d) for d in ds] for c, ds in ld["per_round"].items()},
            {int(c): v for c, v in ld["truth"].items()}, ld["num_classes"], meta["seed"],
            {int(k): v for k, v in ld["rows"].items()})
    results = {
        name: {int(t): {int(c): (v if isinstance(v, str) else [MembershipVerdict.from_json(x) for x in v])
                        for c, v in clients.items()}
               for t, clients in by_round.items()}
        for name, by_round in meta["records"].items()
    }
    references = {}
    for by_round in report.get("attacks", {}).values():
        for t, section in by_round.items():
            for row in section["per_client"]:
                if "references" in row:
                    references.setdefault(int(t), {})[row["client"]] = row["references"]
    if results:
        rebuilt["attacks"] = {name: _attack_section(name, by_round, references, meta["seed"])
                              for name, by_round in sorted(results.items())}
    return rebuilt


# --- sweeps ----------------------------------------------------------------------


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for key in keys[:-1]:
        if node.get(key) is None:
            node[key] = {}
        node = node[key]
    node[keys[-1]] = value


def sweep_specs(spec: ExperimentSpec, axis: str, values) -> list[ExperimentSpec]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; valid axes: {', '.join(sorted(SWEEP_AXES))}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = []
    for value in values:
        doc = spec.to_dict()
        if axis == "dp_noise":
            dp = doc["fd"].setdefault("train", {}).get("dp") or {"clip_bound": 10.0}
            dp["noise_multiplier"] = value
            doc["fd"]["train"]["dp"] = dp
        elif axis == "num_reference_models":
            doc["attacks"].setdefault("distillation", {})["num_reference_models"] = value
        else:
            _set_path(doc, SWEEP_AXES[axis], value)
        doc["name"] = f"{spec.name}[{axis}={value}]"
        out.append(spec_from_dict(doc))
    return out


def run_sweep(spec: ExperimentSpec, axis: str, values, out_dir=None, timestamp: bool = True) -> list[dict]:
    """One report per value of ``axis``; all points share ``spec.seed``."""
    reports = []
    for value, point in zip(values, sweep_specs(spec, axis, values)):
        sub = None if out_dir is None else Path(out_dir) / f"{axis}={value}"
        report = run_experiment(point, sub, timestamp=timestamp)
        report["sweep"] = {"axis": axis, "value": value}
        if sub is not None:
            (sub / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
        reports.append(report)
    return reports
