"""Command-line front end: ``hiretrieval <command> [options]``.

Every command prints its effective configuration as one JSON line before
doing any work.  Exit codes: 0 success, 2 invalid config, 3 data error or
missing artifact, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments as ex
from . import simdata
from .fileio import FormatError, read_head, write_head
from .hierarchy import InvalidHierarchyError, MalformedLabelError
from .losses import mode_from_flag
from .lpr_eval import evaluate_pipeline, oracle_detector, template_recognizer, truth_recognizer, write_report
from .ood import SingularCovarianceError, knn_scores, write_score_dump
from .plates.synth import generate_plates, generate_scenes, read_manifest
from .retrieval import DimensionMismatchError, DuplicateIdError, EmbeddingDatabase, EmptyDatabaseError, evaluate
from .trainer import ProjectionHead, TrainingDivergenceError, train, write_history

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

logger = logging.getLogger("hiretrieval")


class DataError(RuntimeError):
    """Missing or inconsistent input artifact."""


# -- config and artifacts ---------------------------------------------------


def load_config(args: argparse.Namespace) -> ex.ExperimentConfig:
    data = {}
    path = getattr(args, "config", None)
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ex.ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ex.ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ex.ConfigError("config file must hold a JSON object")
    cfg = ex.ExperimentConfig.from_dict(data)
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(getattr(args, "out", None) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def announce(command: str, cfg: ex.ExperimentConfig, **extra) -> None:
    record = {"command": command, "config": cfg.to_dict()}
    record.update({k: (str(v) if isinstance(v, Path) else v) for k, v in extra.items()})
    print(json.dumps(record, sort_keys=True), flush=True)


def load_roles(data_dir: str | Path, cfg: ex.ExperimentConfig) -> dict:
    """Dataset written by ``gen embeddings`` plus its ``split.json`` role map."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"data directory {data_dir} does not exist")
    dataset = simdata.load(data_dir)
    split_path = data_dir / "split.json"
    if split_path.exists():
        mapping = json.loads(split_path.read_text(encoding="utf-8"))["roles"]
        return ex.roles_from_map(dataset.data, mapping)
    return ex.split_open_world(dataset, cfg.db_fraction, cfg.seed)


def load_head(path: str | Path | None) -> ProjectionHead | None:
    if path is None:
        return None
    if not Path(path).exists():
        raise DataError(f"head checkpoint {path} does not exist")
    return ProjectionHead(read_head(path))


def build_world(args: argparse.Namespace, cfg: ex.ExperimentConfig) -> ex.OpenWorld:
    """Use ``--data``/``--head`` when given; otherwise generate and train from the config."""
    if getattr(args, "data", None):
        roles = load_roles(args.data, cfg)
        head = load_head(getattr(args, "head", None))
        if head is None and not getattr(args, "raw", False):
            head = ex.train_head(roles, cfg).head
        return ex.OpenWorld.from_roles(roles, head)
    if getattr(args, "head", None):
        raise DataError("--head needs --data")
    world, _ = ex.prepare(cfg)
    return world


# -- commands -----------------------------------------------------------------


def cmd_gen(args: argparse.Namespace, cfg: ex.ExperimentConfig) -> int:
    out = _out_dir(args)
    if args.kind == "embeddings":
        if args.n_per_leaf is not None:
            cfg = replace(cfg, n_per_leaf=args.n_per_leaf)
        announce("gen", cfg, kind=args.kind, out=out)
        dataset = simdata.generate(cfg.spec, cfg.n_per_leaf)
        simdata.save(dataset, out)
        roles = ex.split_open_world(dataset, cfg.db_fraction, cfg.seed)
        ex.write_json(out / "split.json", {"db_fraction": cfg.db_fraction, "seed": cfg.seed, "roles": ex.role_map(roles)})
        print(
            f"gen embeddings: {len(dataset.data)} samples, {cfg.spec.n_leaves} leaves "
            f"({len(dataset.unseen_leaves)} unseen), seed {cfg.spec.seed} -> {out}"
        )
        return EXIT_OK
    n = args.n if args.n is not None else cfg.n_plates
    cfg = replace(cfg, n_plates=n)
    announce("gen", cfg, kind=args.kind, out=out)
    if args.kind == "plates":
        generate_plates(out, n, cfg.seed, cfg.plates)
    else:
        generate_scenes(out, n, cfg.seed, cfg.plates)
    print(f"gen {args.kind}: {n} images, seed {cfg.seed} -> {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, cfg: ex.ExperimentConfig) -> int:
    try:
        if args.mode:
            cfg = replace(cfg, loss=replace(cfg.loss, mode=mode_from_flag(args.mode)))
        tc = cfg.train
        if args.epochs is not None:
            tc = replace(tc, epochs=args.epochs)
        if args.max_steps is not None:
            tc = replace(tc, max_steps=args.max_steps)
        cfg = replace(cfg, train=tc)
    except ValueError as exc:
        raise ex.ConfigError(str(exc)) from None
    out = _out_dir(args)
    announce("train", cfg, data=args.data, out=out)
    roles = load_roles(args.data, cfg)
    result = train(roles["seen_db"], cfg.loss.params(), cfg.train)
    write_head(out / "head.bin", result.head.weight)
    write_history(out / "history.csv", result.history)
    ex.write_json(
        out / "train.json",
        {
            "steps": len(result.history),
            "steps_per_epoch": result.steps_per_epoch,
            "cycle_steps": result.cycle_steps,
            "mode": cfg.loss.params().mode,
            "final_loss": result.history[-1].loss if result.history else None,
        },
    )
    print(f"train: {len(result.history)} steps, mode {cfg.loss.params().mode} -> {out / 'head.bin'}")
    return EXIT_OK


def cmd_eval_retrieval(args: argparse.Namespace, cfg: ex.ExperimentConfig) -> int:
    out = _out_dir(args)
    k = args.k or cfg.k
    levels = tuple(args.levels) if args.levels else cfg.levels
    announce("eval-retrieval", cfg, k=k, levels=list(levels), scenario=args.scenario, out=out)
    head = load_head(args.head)
    if args.db or args.queries:
        if not (args.db and args.queries):
            raise DataError("--db and --queries must be given together")
        db_set = ex.embed_set(simdata.load_labeled(*args.db), head)
        q_set = ex.embed_set(simdata.load_labeled(*args.queries), head)
        report = {"custom": evaluate(EmbeddingDatabase.from_set(db_set), q_set, k, levels).to_dict()}
    else:
        if not args.data:
            raise DataError("need --data, or --db together with --queries")
        world = ex.OpenWorld.from_roles(load_roles(args.data, cfg), head)
        scenarios = ("seen", "unseen", "combined") if args.scenario == "all" else (args.scenario,)
        report = ex.retrieval_sections(world, k, levels, scenarios)
    ex.write_json(out / "retrieval.json", report)
    for name, sec in report.items():
        print(f"{name}: prec@{k} {sec[f'precision_at_{k}']:.4f} map@r {sec['map_at_r']:.4f}")
    return EXIT_OK


def cmd_eval_ood(args: argparse.Namespace, cfg: ex.ExperimentConfig) -> int:
    out = _out_dir(args)
    k_values = tuple(args.k) if args.k else cfg.k_values
    announce("eval-ood", cfg, k=list(k_values), out=out)
    world = ex.OpenWorld.from_roles(load_roles(args.data, cfg), load_head(args.head))
    if len(world.seen_query) == 0 or len(world.unseen_db) + len(world.unseen_query) == 0:
        raise DataError("OOD evaluation needs in-distribution queries and unseen samples")
    rows = ex.ood_table(world, k_values, cfg.tpr)
    ex.write_json(out / "ood.json", rows)
    ex.write_csv(out / "ood_table.csv", rows, ["method", "k", "fpr95", "auroc"])
    ex.write_csv(out / "knn_sweep.csv", [r for r in rows if r["method"] == "knn+"], ["k", "fpr95", "auroc"])
    db = EmbeddingDatabase.from_set(world.seen_db)
    unseen = ex.LabeledSet.concat([world.unseen_db, world.unseen_query])
    ids = world.seen_query.ids + unseen.ids
    scores = list(knn_scores(db, world.seen_query.vectors, cfg.k)) + list(knn_scores(db, unseen.vectors, cfg.k))
    write_score_dump(out / "scores.csv", ids, scores, [True] * len(world.seen_query) + [False] * len(unseen))
    for r in rows:
        print(f"{r['method']} k={r['k']}: fpr95 {r['fpr95']:.4f} auroc {r['auroc']:.4f}")
    return EXIT_OK


def cmd_eval_lpr(args: argparse.Namespace, cfg: ex.ExperimentConfig) -> int:
    out = _out_dir(args)
    announce("eval-lpr", cfg, manifest=args.manifest, jitter=args.jitter, recognizer=args.recognizer, out=out)
    path = Path(args.manifest)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    rows = read_manifest(path)
    if not rows:
        raise DataError(f"manifest {path} is empty")
    recognizer = truth_recognizer() if args.recognizer == "oracle" else template_recognizer
    report, items = evaluate_pipeline(rows, oracle_detector(args.jitter), recognizer, seed=cfg.seed, keep_fraction=args.keep)
    write_report(out, report, items)
    print(
        f"eval-lpr: n {report.n} lpd {report.lpd_accuracy:.4f} lpr {report.lpr_accuracy:.4f} "
        f"cer {report.avg_cer:.4f}"
    )
    return EXIT_OK


def cmd_experiment(args: argparse.Namespace, cfg: ex.ExperimentConfig) -> int:
    out = _out_dir(args)
    if args.runs is not None:
        cfg = replace(cfg, runs=args.runs)
    announce("experiment", cfg, id=args.id, data=args.data, head=args.head, out=out)
    world = build_world(args, cfg)
    if args.id == "add-classes":
        rows = ex.add_classes(world, cfg.runs, cfg.seed, cfg.k, cfg.tpr)
        name = "add_classes.csv"
    elif args.id == "samples-per-class":
        rows = ex.samples_per_class(world, cfg.spc_grid, cfg.runs, cfg.seed, cfg.k)
        name = "samples_per_class.csv"
    else:
        rows = ex.ood_ingest(world, cfg.ingest_grid, cfg.k_values, cfg.runs, cfg.seed, cfg.tpr)
        name = "ood_ingest.csv"
    ex.write_csv(out / name, rows)
    print(f"experiment {args.id}: {len(rows)} rows -> {out / name}")
    return EXIT_OK


def cmd_eval_system(args: argparse.Namespace, cfg: ex.ExperimentConfig) -> int:
    out = _out_dir(args)
    sysc = cfg.system
    if args.oracle:
        sysc = replace(sysc, retrieval_stage="oracle", ood_stage="oracle", recognizer_stage="oracle", detector_jitter=0.0)
    if args.exclude_ood_fp:
        sysc = replace(sysc, count_ood_false_positives=False)
    cfg = replace(cfg, system=sysc)
    announce("eval-system", cfg, data=args.data, head=args.head, out=out)
    world = build_world(args, cfg)
    report = ex.system_eval(world, cfg)
    ex.write_json(out / "system.json", report)
    for name, row in report["rows"].items():
        print(
            f"{name}: exact {row['total_exact']:.4f} cer<{cfg.system.cer_threshold} {row['total_cer']:.4f} "
            f"no-lp {row['total_no_lp']:.4f}"
        )
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides the config)")
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="hiretrieval", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate embeddings, plates or scenes")
    p.add_argument("kind", choices=["embeddings", "plates", "scenes"])
    p.add_argument("--n", type=int, help="number of plates/scenes")
    p.add_argument("--n-per-leaf", type=int, help="samples per leaf class")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train the projection head")
    p.add_argument("--data", required=True, help="directory written by 'gen embeddings'")
    p.add_argument("--mode", help="ms, hisupcon, hims-max or hims-min")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-retrieval", parents=[common], help="Prec@k, mAP@R and fallback accuracy")
    p.add_argument("--data", help="directory written by 'gen embeddings'")
    p.add_argument("--db", nargs=2, metavar=("EMB", "LABELS"), help="database embeddings and label manifest")
    p.add_argument("--queries", nargs=2, metavar=("EMB", "LABELS"), help="query embeddings and label manifest")
    p.add_argument("--head", help="head checkpoint; raw embeddings when omitted")
    p.add_argument("--k", type=int)
    p.add_argument("--levels", type=int, nargs="*")
    p.add_argument("--scenario", choices=["seen", "unseen", "combined", "all"], default="all")
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-ood", parents=[common], help="KNN+ and Mahalanobis OOD table")
    p.add_argument("--data", required=True)
    p.add_argument("--head")
    p.add_argument("--k", type=int, nargs="+")
    p.set_defaults(func=cmd_eval_ood)

    p = sub.add_parser("eval-lpr", parents=[common], help="plate detection + recognition metrics on a scene manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--recognizer", choices=["template", "oracle"], default="template")
    p.add_argument("--keep", type=float, default=0.6, help="centre-crop keep fraction")
    p.set_defaults(func=cmd_eval_lpr)

    p = sub.add_parser("experiment", parents=[common], help="class addition, samples-per-class, OOD ingestion sweeps")
    p.add_argument("id", choices=["add-classes", "samples-per-class", "ood-ingest"])
    p.add_argument("--data")
    p.add_argument("--head")
    p.add_argument("--raw", action="store_true", help="skip the head; use normalised inputs")
    p.add_argument("--runs", type=int)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("eval-system", parents=[common], help="full-system total accuracy")
    p.add_argument("--data")
    p.add_argument("--head")
    p.add_argument("--raw", action="store_true", help="skip the head; use normalised inputs")
    p.add_argument("--oracle", action="store_true", help="oracle retrieval, OOD and plate stages")
    p.add_argument("--exclude-ood-fp", action="store_true", help="drop OOD-flagged seen queries instead of scoring them wrong")
    p.set_defaults(func=cmd_eval_system)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    for attr in ("seed", "config", "out"):
        if not hasattr(args, attr):
            setattr(args, attr, None)
    try:
        cfg = load_config(args)
    except ex.ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args, cfg)
    except ex.ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergenceError, FloatingPointError) as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (
        DataError,
        FileNotFoundError,
        FormatError,
        MalformedLabelError,
        InvalidHierarchyError,
        DimensionMismatchError,
        DuplicateIdError,
        EmptyDatabaseError,
        SingularCovarianceError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
