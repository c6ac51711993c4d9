"""Open-world experiment harnesses on synthetic embeddings and plates.

Everything here is deterministic given the config.  The CLI is a thin
shell over these functions.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .losses import LossParams, mode_from_flag
from .lpr_eval import oracle_detector, run_item, template_recognizer
from .ood import auroc, calibrate_threshold, fpr_at_tpr, knn_scores, mahalanobis_fit
from .plates.synth import ManifestRow, PlateConfig, SceneConfig, iter_specs, make_scene
from .retrieval import EmbeddingDatabase, LabeledSet, classify_many, evaluate, normalize_rows, precision_at_k
from .simdata import HierarchySpec, SyntheticDataset, generate, split_per_class
from .trainer import ProjectionHead, TrainConfig, TrainResult, train

ROLES = ("seen_db", "seen_query", "unseen_db", "unseen_query")


class ConfigError(ValueError):
    """Invalid or unknown configuration values."""


def _known(cls, data: dict, where: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {', '.join(unknown)}")
    return {k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()}


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 2.0
    beta: float = 50.0
    margin: float = 1.0
    mining_epsilon: float = 0.1
    tau: float = 0.1
    mode: str = "hi-ms-min"

    def params(self) -> LossParams:
        return LossParams(
            alpha=self.alpha,
            beta=self.beta,
            margin=self.margin,
            mining_epsilon=self.mining_epsilon,
            tau=self.tau,
            mode=mode_from_flag(self.mode),
        )


@dataclass(frozen=True)
class SystemConfig:
    retrieval_stage: str = "model"  # model | oracle
    ood_stage: str = "knn"  # knn | oracle
    recognizer_stage: str = "template"  # template | oracle
    detector_jitter: float = 0.0
    cer_threshold: float = 0.2
    count_ood_false_positives: bool = True

    def __post_init__(self):
        if self.retrieval_stage not in ("model", "oracle"):
            raise ConfigError(f"retrieval_stage must be model or oracle, got {self.retrieval_stage!r}")
        if self.ood_stage not in ("knn", "oracle"):
            raise ConfigError(f"ood_stage must be knn or oracle, got {self.ood_stage!r}")
        if self.recognizer_stage not in ("template", "oracle"):
            raise ConfigError(f"recognizer_stage must be template or oracle, got {self.recognizer_stage!r}")
        if self.detector_jitter < 0 or self.cer_threshold <= 0:
            raise ConfigError("detector_jitter must be >= 0 and cer_threshold > 0")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    spec: HierarchySpec = field(default_factory=HierarchySpec)
    n_per_leaf: int = 40
    db_fraction: float = 0.5
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_steps=200))
    k: int = 1
    k_values: tuple[int, ...] = (1, 2, 4, 8)
    levels: tuple[int, ...] = (1, 2, 3)
    tpr: float = 0.95
    runs: int = 20
    spc_grid: tuple[int, ...] = (1, 2, 4, 8)
    ingest_grid: tuple[int, ...] = (0, 1, 2, 4, 8)
    n_plates: int = 200
    plates: PlateConfig = field(default_factory=PlateConfig)
    system: SystemConfig = field(default_factory=SystemConfig)

    def __post_init__(self):
        if self.n_per_leaf < 4:
            raise ConfigError("n_per_leaf must be at least 4")
        if not 0 < self.db_fraction < 1:
            raise ConfigError("db_fraction must lie in (0, 1)")
        if self.runs < 1:
            raise ConfigError("runs must be positive")
        if not self.k_values or min(self.k_values) < 1 or self.k < 1:
            raise ConfigError("k values must be positive and non-empty")
        if not self.spc_grid or min(self.spc_grid) < 1:
            raise ConfigError("spc_grid must be non-empty with positive sizes")
        if not self.ingest_grid or min(self.ingest_grid) < 0:
            raise ConfigError("ingest_grid must be non-empty and non-negative")
        if not 0 < self.tpr <= 1:
            raise ConfigError("tpr must lie in (0, 1]")
        if self.n_plates < 1:
            raise ConfigError("n_plates must be positive")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Propagate one master seed to data generation, splitting and training."""
        return replace(self, seed=seed, spec=replace(self.spec, seed=seed), train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = _known(cls, data, "config")
        try:
            if "spec" in data:
                data["spec"] = HierarchySpec(**_known(HierarchySpec, data["spec"], "spec"))
            if "loss" in data:
                data["loss"] = LossConfig(**_known(LossConfig, data["loss"], "loss"))
                data["loss"].params()
            if "train" in data:
                data["train"] = TrainConfig(**_known(TrainConfig, data["train"], "train"))
            if "plates" in data:
                data["plates"] = PlateConfig(**_known(PlateConfig, data["plates"], "plates"))
            if "system" in data:
                data["system"] = SystemConfig(**_known(SystemConfig, data["system"], "system"))
            return cls(**data)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


# -- data preparation -------------------------------------------------------


def split_open_world(dataset: SyntheticDataset, db_fraction: float, seed: int) -> dict[str, LabeledSet]:
    """Per-class database/query split of the seen and the unseen part."""
    seen_db, seen_q = split_per_class(dataset.seen, db_fraction, seed)
    out = {"seen_db": seen_db, "seen_query": seen_q}
    if dataset.unseen_leaves:
        out["unseen_db"], out["unseen_query"] = split_per_class(dataset.unseen, db_fraction, seed + 1)
    else:
        empty = LabeledSet(ids=[], vectors=np.zeros((0, dataset.spec.dim)), labels=[])
        out["unseen_db"] = out["unseen_query"] = empty
    return out


def role_map(roles: dict[str, LabeledSet]) -> dict[str, str]:
    return {i: role for role in ROLES for i in roles[role].ids}


def roles_from_map(data: LabeledSet, mapping: dict[str, str]) -> dict[str, LabeledSet]:
    missing = [i for i in data.ids if i not in mapping]
    if missing:
        raise ValueError(f"split file lacks {len(missing)} id(s), e.g. {missing[0]!r}")
    out = {}
    for role in ROLES:
        idx = [n for n, i in enumerate(data.ids) if mapping[i] == role]
        out[role] = data.subset(idx) if idx else LabeledSet(ids=[], vectors=np.zeros((0, data.vectors.shape[1])), labels=[])
    return out


def embed_set(data: LabeledSet, head: ProjectionHead | None) -> LabeledSet:
    if len(data) == 0:
        dim = head.out_dim if head is not None else data.vectors.shape[1]
        return LabeledSet(ids=[], vectors=np.zeros((0, dim)), labels=[])
    if head is None:
        return LabeledSet(ids=list(data.ids), vectors=normalize_rows(data.vectors), labels=list(data.labels))
    return LabeledSet(ids=list(data.ids), vectors=head.embed(data.vectors), labels=list(data.labels))


@dataclass
class OpenWorld:
    """Embedded database/query sets for seen and unseen classes."""

    seen_db: LabeledSet
    seen_query: LabeledSet
    unseen_db: LabeledSet
    unseen_query: LabeledSet

    @classmethod
    def from_roles(cls, roles: dict[str, LabeledSet], head: ProjectionHead | None) -> "OpenWorld":
        return cls(**{r: embed_set(roles[r], head) for r in ROLES})

    @property
    def unseen_classes(self) -> list[str]:
        return sorted({lab.leaf for lab in self.unseen_db.labels} | {lab.leaf for lab in self.unseen_query.labels})


def train_head(roles: dict[str, LabeledSet], cfg: ExperimentConfig) -> TrainResult:
    return train(roles["seen_db"], cfg.loss.params(), cfg.train)


def prepare(cfg: ExperimentConfig) -> tuple[OpenWorld, TrainResult]:
    """Generate data, split it, train the head on the seen database split and embed everything."""
    dataset = generate(cfg.spec, cfg.n_per_leaf)
    roles = split_open_world(dataset, cfg.db_fraction, cfg.seed)
    result = train_head(roles, cfg)
    return OpenWorld.from_roles(roles, result.head), result


# -- retrieval and OOD tables -----------------------------------------------


def _concat(*parts: LabeledSet) -> LabeledSet:
    return LabeledSet.concat(parts)


def retrieval_sections(world: OpenWorld, k: int = 1, levels: Sequence[int] = (), scenarios: Sequence[str] = ("seen", "unseen", "combined")) -> dict:
    """Prec@k / mAP@R for the seen-only, unseen-only and combined database scenarios."""
    out = {}
    if "seen" in scenarios:
        out["seen"] = evaluate(EmbeddingDatabase.from_set(world.seen_db), world.seen_query, k, levels).to_dict()
    has_unseen = len(world.unseen_db) > 0 and len(world.unseen_query) > 0
    if "unseen" in scenarios and has_unseen:
        out["unseen"] = evaluate(EmbeddingDatabase.from_set(world.unseen_db), world.unseen_query, k, levels).to_dict()
    if "combined" in scenarios and has_unseen:
        db = EmbeddingDatabase.from_set(_concat(world.seen_db, world.unseen_db))
        out["combined"] = evaluate(db, _concat(world.seen_query, world.unseen_query), k, levels).to_dict()
        out["combined_seen"] = evaluate(db, world.seen_query, k, levels).to_dict()
        out["combined_unseen"] = evaluate(db, world.unseen_query, k, levels).to_dict()
    return out


def ood_table(world: OpenWorld, k_values: Sequence[int], tpr: float = 0.95) -> list[dict]:
    """KNN+ per k and the Mahalanobis baseline; ID = seen queries, OOD = all unseen samples."""
    if len(world.seen_query) == 0:
        raise ValueError("no in-distribution queries")
    ood = _concat(world.unseen_db, world.unseen_query)
    db = EmbeddingDatabase.from_set(world.seen_db)
    rows = []
    for k in k_values:
        id_s = knn_scores(db, world.seen_query.vectors, k)
        ood_s = knn_scores(db, ood.vectors, k)
        rows.append({"method": "knn+", "k": k, "fpr95": fpr_at_tpr(id_s, ood_s, tpr), "auroc": auroc(id_s, ood_s)})
    model = mahalanobis_fit(world.seen_db.vectors, world.seen_db.keys())
    id_s, ood_s = model.scores(world.seen_query.vectors), model.scores(ood.vectors)
    rows.append({"method": "mahalanobis", "k": None, "fpr95": fpr_at_tpr(id_s, ood_s, tpr), "auroc": auroc(id_s, ood_s)})
    return rows


# -- sweeps -------------------------------------------------------------------


def _by_class(data: LabeledSet) -> dict[str, np.ndarray]:
    groups: dict[str, list[int]] = {}
    for i, lab in enumerate(data.labels):
        groups.setdefault(lab.leaf, []).append(i)
    return {k: np.array(v) for k, v in sorted(groups.items())}


def _run_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def _mean(values: list) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def samples_per_class(world: OpenWorld, grid: Sequence[int], runs: int, seed: int, k: int = 1) -> list[dict]:
    """Unseen Prec@1 when each unseen class has only ``n`` database samples next to the seen database."""
    pools = _by_class(world.unseen_db)
    if not pools or len(world.unseen_query) == 0:
        raise ValueError("samples-per-class needs unseen classes with database and query samples")
    smallest = min(len(v) for v in pools.values())
    if max(grid) > smallest:
        raise ValueError(f"grid size {max(grid)} exceeds the smallest unseen pool ({smallest})")
    per_size: dict[int, list[float]] = {n: [] for n in grid}
    for run in range(runs):
        rng = _run_rng(seed, run)
        perms = {c: rng.permutation(idx) for c, idx in pools.items()}
        for n in grid:
            pick = np.sort(np.concatenate([p[:n] for p in perms.values()]))
            db = EmbeddingDatabase.from_set(_concat(world.seen_db, world.unseen_db.subset(pick)))
            per_size[n].append(precision_at_k(db, world.unseen_query, k))
    return [
        {"samples_per_class": n, "precision_at_1": float(np.mean(v)), "std": float(np.std(v)), "runs": runs}
        for n, v in per_size.items()
    ]


def add_classes(world: OpenWorld, runs: int, seed: int, k: int = 1, tpr: float = 0.95) -> list[dict]:
    """Add half of the unseen classes one at a time; the other half stays out as OOD.

    Tracks Prec@1 over queries of the classes in the database and the KNN+
    FPR95/AUROC of the held-out classes.
    """
    classes = world.unseen_classes
    db_groups, q_groups = _by_class(world.unseen_db), _by_class(world.unseen_query)
    n_add = len(classes) - len(classes) // 2
    totals: dict[int, dict[str, list]] = {}
    for run in range(runs if classes else 1):
        order = [classes[i] for i in _run_rng(seed, run).permutation(len(classes))]
        added, held = order[:n_add], order[n_add:]
        held_q = [i for c in held for i in q_groups.get(c, [])]
        for t in range(n_add + 1):
            db_idx = sorted(i for c in added[:t] for i in db_groups.get(c, []))
            q_idx = sorted(i for c in added[:t] for i in q_groups.get(c, []))
            db = EmbeddingDatabase.from_set(_concat(world.seen_db, world.unseen_db.subset(db_idx)))
            queries = _concat(world.seen_query, world.unseen_query.subset(q_idx))
            rec = totals.setdefault(t, {"p": [], "fpr": [], "auc": []})
            rec["p"].append(precision_at_k(db, queries, k))
            if held_q:
                id_s = knn_scores(db, queries.vectors, k)
                ood_s = knn_scores(db, world.unseen_query.vectors[sorted(held_q)], k)
                rec["fpr"].append(fpr_at_tpr(id_s, ood_s, tpr))
                rec["auc"].append(auroc(id_s, ood_s))
    return [
        {
            "classes_added": t,
            "precision_at_1": _mean(r["p"]),
            "fpr95": _mean(r["fpr"]),
            "auroc": _mean(r["auc"]),
            "runs": len(r["p"]),
        }
        for t, r in sorted(totals.items())
    ]


def ood_ingest(
    world: OpenWorld,
    grid: Sequence[int],
    k_values: Sequence[int],
    runs: int,
    seed: int,
    tpr: float = 0.95,
) -> list[dict]:
    """Recall (fraction judged in-distribution) of a new class's queries after ingesting ``n`` of its samples.

    The KNN+ threshold is calibrated once on the seen queries against the seen database.
    """
    pools, q_groups = _by_class(world.unseen_db), _by_class(world.unseen_query)
    if not pools:
        raise ValueError("ood-ingest needs unseen classes")
    smallest = min(len(v) for v in pools.values())
    if max(grid) > smallest:
        raise ValueError(f"grid size {max(grid)} exceeds the smallest unseen pool ({smallest})")
    seen_db = EmbeddingDatabase.from_set(world.seen_db)
    rows = []
    for k in k_values:
        threshold = calibrate_threshold(seen_db, world.seen_query.vectors, k, tpr)
        recall: dict[int, list[float]] = {n: [] for n in grid}
        for run in range(runs):
            rng = _run_rng(seed, run)
            for ci, (c, idx) in enumerate(pools.items()):
                queries = world.unseen_query.vectors[q_groups.get(c, np.zeros(0, dtype=int))]
                if len(queries) == 0:
                    continue
                perm = rng.permutation(idx)
                for n in grid:
                    db = EmbeddingDatabase.from_set(_concat(world.seen_db, world.unseen_db.subset(np.sort(perm[:n]))))
                    recall[n].append(float(np.mean(knn_scores(db, queries, k) <= threshold)))
        rows.extend({"k": k, "samples_ingested": n, "recall": _mean(v), "threshold": threshold} for n, v in recall.items())
    return rows


# -- full-system roll-up ----------------------------------------------------


@dataclass
class SampleOutcome:
    id: str
    row: str
    retrieval_ok: bool
    plate_exact: bool
    plate_cer: float
    ood_flagged: bool

    def correct(self, variant: str, cer_threshold: float) -> bool:
        if variant == "no_lp":
            return self.retrieval_ok
        if variant == "cer":
            return self.retrieval_ok and self.plate_cer < cer_threshold
        return self.retrieval_ok and self.plate_exact


VARIANTS = ("exact", "cer", "no_lp")


def _plate_outcomes(n: int, offset: int, cfg: ExperimentConfig) -> list[tuple[bool, float]]:
    sysc = cfg.system
    if sysc.recognizer_stage == "oracle":
        return [(True, 0.0)] * n
    detector = oracle_detector(sysc.detector_jitter)
    out = []
    for i, spec in iter_specs(offset + n, cfg.seed, cfg.plates):
        if i < offset:
            continue
        scene = make_scene(spec, _run_rng(cfg.seed, i, 1), SceneConfig())
        row = ManifestRow(file=Path(f"sample_{i}"), text=scene.text, spec=spec, box=scene.box)
        item = run_item(scene.image, row, detector, template_recognizer, _run_rng(cfg.seed, i, 2))
        out.append((item.exact, item.cer))
    return out


def system_eval(world: OpenWorld, cfg: ExperimentConfig) -> dict:
    """Total system accuracy: retrieval AND plate reading, gated by OOD detection.

    Row ``seen/seen``: seen queries against the seen database; queries the OOD
    stage flags are false positives and count as errors (or are dropped when
    ``count_ood_false_positives`` is off).  Row ``seen&unseen/unseen``: unseen
    database samples flagged OOD are ingested with their true labels, then
    unseen queries are retrieved against the grown database.
    """
    sysc = cfg.system
    seen_db = EmbeddingDatabase.from_set(world.seen_db)

    def flags(db: EmbeddingDatabase, data: LabeledSet, known: set[str]) -> np.ndarray:
        if len(data) == 0:
            return np.zeros(0, dtype=bool)
        if sysc.ood_stage == "oracle":
            return np.array([lab.leaf not in known for lab in data.labels])
        thr = calibrate_threshold(seen_db, world.seen_query.vectors, cfg.k, cfg.tpr)
        return knn_scores(db, data.vectors, cfg.k) > thr

    def retrieved(db: EmbeddingDatabase, data: LabeledSet) -> np.ndarray:
        if sysc.retrieval_stage == "oracle":
            return np.ones(len(data), dtype=bool)
        pred = classify_many(db, data.vectors, cfg.k)
        return np.array([p == lab.leaf for p, lab in zip(pred, data.labels)])

    seen_known = {lab.leaf for lab in world.seen_db.labels}
    plates = _plate_outcomes(len(world.seen_query) + len(world.unseen_query), 0, cfg)
    outcomes: list[SampleOutcome] = []

    fp = flags(seen_db, world.seen_query, seen_known)
    ok = retrieved(seen_db, world.seen_query)
    for i, sid in enumerate(world.seen_query.ids):
        exact, c = plates[i]
        outcomes.append(SampleOutcome(sid, "seen/seen", bool(ok[i]), exact, c, bool(fp[i])))

    ingest_flags = flags(seen_db, world.unseen_db, seen_known)
    ingested = world.unseen_db.subset(np.flatnonzero(ingest_flags)) if ingest_flags.any() else None
    grown = EmbeddingDatabase.from_set(_concat(world.seen_db, ingested) if ingested is not None else world.seen_db)
    offset = len(world.seen_query)
    if len(world.unseen_query):
        ok = retrieved(grown, world.unseen_query)
        for i, sid in enumerate(world.unseen_query.ids):
            exact, c = plates[offset + i]
            outcomes.append(SampleOutcome(sid, "seen&unseen/unseen", bool(ok[i]), exact, c, False))

    rows = {}
    for name in ("seen/seen", "seen&unseen/unseen"):
        items = [o for o in outcomes if o.row == name]
        if not items:
            continue
        scored = [o for o in items if sysc.count_ood_false_positives or not o.ood_flagged]
        entry = {"n": len(items), "n_scored": len(scored), "ood_flagged": sum(o.ood_flagged for o in items)}
        for v in VARIANTS:
            good = sum(o.correct(v, sysc.cer_threshold) and not o.ood_flagged for o in scored)
            entry[f"total_{v}"] = good / len(scored) if scored else None
        entry["retrieval_accuracy"] = sum(o.retrieval_ok for o in items) / len(items)
        entry["lpr_accuracy"] = sum(o.plate_exact for o in items) / len(items)
        entry["avg_cer"] = float(np.mean([o.plate_cer for o in items]))
        rows[name] = entry
    return {
        "rows": rows,
        "ingested": int(ingest_flags.sum()),
        "unseen_db_size": len(world.unseen_db),
        "cer_threshold": sysc.cer_threshold,
    }


# -- output helpers -----------------------------------------------------------


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path: str | Path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in columns])


def is_monotone(values: Sequence[float], tol: float = 0.0) -> bool:
    return all(b >= a - tol for a, b in zip(values, values[1:]))


__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "LossConfig",
    "OpenWorld",
    "ROLES",
    "SystemConfig",
    "add_classes",
    "embed_set",
    "is_monotone",
    "ood_ingest",
    "ood_table",
    "prepare",
    "retrieval_sections",
    "role_map",
    "roles_from_map",
    "samples_per_class",
    "split_open_world",
    "system_eval",
    "train_head",
    "write_csv",
    "write_json",
]
