"""Synthetic hierarchical Gaussian embeddings standing in for backbone features.

Every tree node sits at its parent's centre plus an isotropic Gaussian offset
whose scale is set per level; samples scatter around their leaf centre.  A
fraction of leaves is held out as unseen classes.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fileio import read_embeddings, write_embeddings
from .hierarchy import HierarchicalLabel, parse_label, read_manifest, write_manifest
from .retrieval import LabeledSet


@dataclass(frozen=True)
class HierarchySpec:
    branching: tuple[int, ...] = (4, 2, 2, 2)
    dim: int = 32
    level_scales: tuple[float, ...] = (4.0, 2.0, 1.0, 0.5)
    leaf_noise: float = 0.3
    seed: int = 0
    unseen_fraction: float = 0.1875

    def __post_init__(self):
        object.__setattr__(self, "branching", tuple(int(b) for b in self.branching))
        object.__setattr__(self, "level_scales", tuple(float(s) for s in self.level_scales))
        if not self.branching or any(b < 1 for b in self.branching):
            raise ValueError("branching must be a non-empty list of positive integers")
        if len(self.level_scales) != len(self.branching):
            raise ValueError("need one level scale per level")
        if any(s <= 0 for s in self.level_scales):
            raise ValueError("level scales must be positive")
        if self.leaf_noise < 0:
            raise ValueError("leaf_noise must be non-negative")
        if not 0 <= self.unseen_fraction < 1:
            raise ValueError("unseen_fraction must lie in [0, 1)")
        if self.dim < 1:
            raise ValueError("dim must be positive")

    @property
    def depth(self) -> int:
        return len(self.branching)

    @property
    def n_leaves(self) -> int:
        return int(np.prod(self.branching))

    @property
    def n_unseen(self) -> int:
        return int(round(self.unseen_fraction * self.n_leaves))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "HierarchySpec":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class SyntheticDataset:
    spec: HierarchySpec
    data: LabeledSet
    unseen_leaves: tuple[str, ...]
    centers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def seen_mask(self) -> np.ndarray:
        unseen = set(self.unseen_leaves)
        return np.array([lab.leaf not in unseen for lab in self.data.labels])

    @property
    def seen(self) -> LabeledSet:
        return self.data.subset(np.flatnonzero(self.seen_mask))

    @property
    def unseen(self) -> LabeledSet:
        return self.data.subset(np.flatnonzero(~self.seen_mask))


def _segment(level: int, index: int) -> str:
    return f"l{level}n{index}"


def generate(spec: HierarchySpec, n_per_leaf: int) -> SyntheticDataset:
    """Draw ``n_per_leaf`` samples for every leaf of the tree described by ``spec``."""
    if n_per_leaf < 2:
        raise ValueError("n_per_leaf must be at least 2")
    rng = np.random.default_rng(spec.seed)
    centers: dict[str, np.ndarray] = {}
    frontier = [("", np.zeros(spec.dim))]
    for level, (branch, scale) in enumerate(zip(spec.branching, spec.level_scales), 1):
        nxt = []
        for name, center in frontier:
            for child in range(branch):
                key = f"{name}/{_segment(level, child)}" if name else _segment(level, child)
                c = center + rng.normal(0.0, scale, size=spec.dim)
                centers[key] = c
                nxt.append((key, c))
        frontier = nxt

    leaves = [name for name, _ in frontier]
    ids, vecs, labels = [], [], []
    width = len(str(len(leaves) * n_per_leaf - 1))
    for li, (leaf, center) in enumerate(frontier):
        label = parse_label(leaf, spec.depth)
        noise = rng.normal(0.0, spec.leaf_noise, size=(n_per_leaf, spec.dim))
        for s in range(n_per_leaf):
            ids.append(f"s{li * n_per_leaf + s:0{width}d}")
            vecs.append(center + noise[s])
            labels.append(label)

    unseen_idx = rng.choice(len(leaves), size=spec.n_unseen, replace=False) if spec.n_unseen else []
    unseen = tuple(sorted(leaves[i] for i in unseen_idx))
    return SyntheticDataset(
        spec=spec,
        data=LabeledSet(ids=ids, vectors=np.array(vecs), labels=labels),
        unseen_leaves=unseen,
        centers=centers,
    )


def split_per_class(data: LabeledSet, fraction: float, seed: int) -> tuple[LabeledSet, LabeledSet]:
    """Split every leaf class into a ``fraction`` part and the rest.

    Each class keeps at least one sample on both sides when it has two or more.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[int]] = {}
    for i, lab in enumerate(data.labels):
        by_class.setdefault(lab.leaf, []).append(i)
    first, second = [], []
    for leaf in sorted(by_class):
        idx = np.array(by_class[leaf])
        idx = idx[rng.permutation(len(idx))]
        n_first = int(round(fraction * len(idx)))
        if len(idx) >= 2:
            n_first = min(max(n_first, 1), len(idx) - 1)
        first.extend(idx[:n_first].tolist())
        second.extend(idx[n_first:].tolist())
    return data.subset(sorted(first)), data.subset(sorted(second))


def save(dataset: SyntheticDataset, out_dir: str | Path) -> None:
    """Write ``embeddings.emb``, ``labels.jsonl`` and ``partition.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(out / "embeddings.emb", dataset.data.vectors)
    write_manifest(out / "labels.jsonl", zip(dataset.data.ids, dataset.data.labels))
    meta = {"spec": dataset.spec.to_dict(), "unseen_leaves": list(dataset.unseen_leaves)}
    (out / "partition.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load(out_dir: str | Path) -> SyntheticDataset:
    out = Path(out_dir)
    vectors = read_embeddings(out / "embeddings.emb")
    labels = read_manifest(out / "labels.jsonl")
    if len(labels) != vectors.shape[0]:
        raise ValueError(f"{out}: {len(labels)} labels for {vectors.shape[0]} embeddings")
    meta = json.loads((out / "partition.json").read_text(encoding="utf-8"))
    ids = list(labels)
    return SyntheticDataset(
        spec=HierarchySpec.from_dict(meta["spec"]),
        data=LabeledSet(ids=ids, vectors=vectors, labels=[labels[i] for i in ids]),
        unseen_leaves=tuple(meta["unseen_leaves"]),
    )


def load_labeled(embeddings_path: str | Path, manifest_path: str | Path) -> LabeledSet:
    """Join an embedding file with a label manifest on row order / id."""
    vectors = read_embeddings(embeddings_path)
    labels = read_manifest(manifest_path)
    if len(labels) != vectors.shape[0]:
        raise ValueError(f"{len(labels)} labels for {vectors.shape[0]} embeddings")
    ids = list(labels)
    return LabeledSet(ids=ids, vectors=vectors, labels=[labels[i] for i in ids])


def leaf_paths(branching) -> list[HierarchicalLabel]:
    """All leaf labels of a complete tree, in generation order."""
    levels = [[_segment(lvl, c) for c in range(b)] for lvl, b in enumerate(branching, 1)]
    return [parse_label("/".join(p), len(branching)) for p in itertools.product(*levels)]
