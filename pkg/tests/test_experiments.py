import dataclasses

import numpy as np
import pytest

from hiretrieval import experiments as ex
from hiretrieval.simdata import HierarchySpec, generate
from hiretrieval.trainer import TrainConfig

SMALL = dict(n_per_leaf=12, train={"max_steps": 30, "out_dim": 32}, runs=4)


@pytest.fixture(scope="module")
def world():
    cfg = ex.ExperimentConfig.from_dict(SMALL)
    return ex.prepare(cfg)[0]


@pytest.fixture(scope="module")
def raw_world():
    ds = generate(HierarchySpec(seed=1), 12)
    return ex.OpenWorld.from_roles(ex.split_open_world(ds, 0.5, 1), None)


def test_config_round_trip_and_errors():
    cfg = ex.ExperimentConfig.from_dict(SMALL)
    assert ex.ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ex.ConfigError):
        ex.ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ex.ConfigError):
        ex.ExperimentConfig.from_dict({"loss": {"mode": "nope"}})
    with pytest.raises(ex.ConfigError):
        ex.ExperimentConfig.from_dict({"runs": 0})
    with pytest.raises(ex.ConfigError):
        ex.ExperimentConfig.from_dict({"system": {"ood_stage": "magic"}})


def test_with_seed_propagates():
    cfg = ex.ExperimentConfig().with_seed(7)
    assert cfg.seed == cfg.spec.seed == cfg.train.seed == 7


def test_split_roles_partition_ids():
    ds = generate(HierarchySpec(seed=3), 8)
    roles = ex.split_open_world(ds, 0.5, 3)
    ids = [i for r in ex.ROLES for i in roles[r].ids]
    assert sorted(ids) == sorted(ds.data.ids)
    unseen = set(ds.unseen_leaves)
    assert all(lab.leaf not in unseen for lab in roles["seen_db"].labels + roles["seen_query"].labels)
    assert all(lab.leaf in unseen for lab in roles["unseen_db"].labels + roles["unseen_query"].labels)
    back = ex.roles_from_map(ds.data, ex.role_map(roles))
    assert all(back[r].ids == roles[r].ids for r in ex.ROLES)


def test_retrieval_sections_shape(world):
    rep = ex.retrieval_sections(world, 1, (1, 2, 3))
    assert set(rep) == {"seen", "unseen", "combined", "combined_seen", "combined_unseen"}
    assert rep["seen"]["precision_at_1"] >= 0.9


def test_duplicate_queries_are_perfect(raw_world):
    dup = dataclasses.replace(raw_world.seen_db, ids=[f"q{i}" for i in raw_world.seen_db.ids])
    w = dataclasses.replace(raw_world, seen_query=dup)
    assert ex.retrieval_sections(w, 1, (), ("seen",))["seen"]["precision_at_1"] == 1.0


def test_ood_table_rows(world):
    rows = ex.ood_table(world, (1, 2, 4, 8))
    assert [r["k"] for r in rows if r["method"] == "knn+"] == [1, 2, 4, 8]
    assert rows[-1]["method"] == "mahalanobis"
    assert rows[0]["fpr95"] <= 0.1 and rows[0]["auroc"] >= 0.95


def test_ood_table_null_distribution():
    ds = generate(HierarchySpec(seed=5), 100)
    perm = np.random.default_rng(0).permutation(len(ds.data))
    shuffled = dataclasses.replace(ds, data=dataclasses.replace(ds.data, vectors=ds.data.vectors[perm]))
    w = ex.OpenWorld.from_roles(ex.split_open_world(shuffled, 0.5, 5), None)
    row = ex.ood_table(w, (1,))[0]
    assert abs(row["auroc"] - 0.5) <= 0.05


def test_samples_per_class(world):
    rows = ex.samples_per_class(world, (1, 2, 4, 6), runs=4, seed=0)
    assert [r["samples_per_class"] for r in rows] == [1, 2, 4, 6]
    assert rows[-1]["precision_at_1"] >= rows[0]["precision_at_1"]
    with pytest.raises(ValueError):
        ex.samples_per_class(world, (100,), runs=1, seed=0)


def test_add_classes_rows(world):
    rows = ex.add_classes(world, runs=3, seed=0)
    n_add = len(world.unseen_classes) - len(world.unseen_classes) // 2
    assert [r["classes_added"] for r in rows] == list(range(n_add + 1))
    assert all(r["runs"] == 3 for r in rows)
    assert all(r["fpr95"] is not None for r in rows)


def test_add_classes_without_unseen():
    ds = generate(HierarchySpec(unseen_fraction=0.0), 6)
    w = ex.OpenWorld.from_roles(ex.split_open_world(ds, 0.5, 0), None)
    rows = ex.add_classes(w, runs=5, seed=0)
    assert len(rows) == 1 and rows[0]["classes_added"] == 0
    assert rows[0]["fpr95"] is None


def test_ood_ingest_recall_grows(world):
    rows = ex.ood_ingest(world, (0, 1, 4), (1,), runs=3, seed=0)
    rec = [r["recall"] for r in rows]
    assert len(rows) == 3
    assert rec[-1] >= rec[0]


def test_system_oracle_is_perfect(world):
    cfg = ex.ExperimentConfig(system=ex.SystemConfig("oracle", "oracle", "oracle"))
    rep = ex.system_eval(world, cfg)
    for row in rep["rows"].values():
        assert row["total_exact"] == row["total_cer"] == row["total_no_lp"] == 1.0
    assert rep["ingested"] == rep["unseen_db_size"]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_system_variant_ordering(world, seed):
    rng = np.random.default_rng(seed)
    sysc = ex.SystemConfig(
        retrieval_stage="model",
        ood_stage=["knn", "oracle"][int(rng.integers(2))],
        detector_jitter=float(rng.uniform(0, 0.3)),
        cer_threshold=float(rng.uniform(0.05, 0.5)),
        count_ood_false_positives=bool(rng.integers(2)),
    )
    cfg = ex.ExperimentConfig(seed=seed, plates=ex.PlateConfig(p_blur=0.8), system=sysc)
    rep = ex.system_eval(world, cfg)
    for row in rep["rows"].values():
        assert row["total_no_lp"] >= row["total_cer"] >= row["total_exact"]


def test_excluding_false_positives_never_hurts(world):
    base = ex.ExperimentConfig(system=ex.SystemConfig(recognizer_stage="oracle"))
    counted = ex.system_eval(world, base)["rows"]["seen/seen"]
    dropped = ex.system_eval(world, dataclasses.replace(base, system=dataclasses.replace(base.system, count_ood_false_positives=False)))["rows"]["seen/seen"]
    assert dropped["n_scored"] == counted["n"] - counted["ood_flagged"]
    assert dropped["total_no_lp"] >= counted["total_no_lp"]


def test_write_csv_format(tmp_path):
    ex.write_csv(tmp_path / "x.csv", [{"a": 0.1, "b": None, "c": 3}])
    assert (tmp_path / "x.csv").read_text() == "a,b,c\n0.1,,3\n"


def test_is_monotone():
    assert ex.is_monotone([0.1, 0.2, 0.2])
    assert not ex.is_monotone([0.3, 0.2])
    assert ex.is_monotone([0.3, 0.29], tol=0.02)
