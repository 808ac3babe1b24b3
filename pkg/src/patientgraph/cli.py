"""Command-line entry point: generate, encode, build-graph, train, evaluate, ablate."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline as P
from .ehr import ValidationError, generate_cohort, save_cohort
from .encoding import SchemaError
from .similarity import GraphError
from .training import TrainingDiverged, load_checkpoint, save_checkpoint


class CLIError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    # SUPPRESS so a flag given before the subcommand is not reset by the subparser
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="master seed for cohort, split and initialisation")
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("--cohort", help="cohort CSV to use instead of generating one")
    common.add_argument("--n", type=int, dest="n_patients", help="synthetic cohort size")
    common.add_argument("--mortality-rate", type=float)
    common.add_argument("--signal", type=float, dest="signal_strength")
    common.add_argument("--missing-rate", type=float)

    parser = argparse.ArgumentParser(prog="patientgraph", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="write a synthetic cohort CSV")

    sub.add_parser("encode", parents=[common], help="fit the feature schema and encode the cohort")

    b = sub.add_parser("build-graph", parents=[common], help="build the similarity graph")
    _similarity_flags(b)

    t = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    _similarity_flags(t)
    _train_flags(t)

    e = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", help="checkpoint path (default: <out-dir>/checkpoint.json)")
    e.add_argument("--threshold", type=float)

    a = sub.add_parser("ablate", parents=[common], help="graph-construction and architecture ablations")
    a.add_argument("--seeds", type=int)
    a.add_argument("--only", choices=["graph", "architecture"])
    _train_flags(a)
    return parser


def _similarity_flags(p):
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau-percentile", type=float)
    p.add_argument("--tau-override", type=float)


def _train_flags(p):
    p.add_argument("--architecture", choices=sorted(P.ARCHITECTURES))
    p.add_argument("--epochs", type=int, dest="max_epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--hidden", type=int)


def _config(args) -> P.ExperimentConfig:
    opt = vars(args)
    cfg = P.ExperimentConfig.load(opt["config"]) if opt.get("config") else P.ExperimentConfig()
    if opt.get("seed") is not None:
        cfg = cfg.with_seed(opt["seed"])
    if opt.get("out_dir"):
        cfg.out_dir = opt["out_dir"]
    if opt.get("cohort"):
        cfg.cohort.csv = opt["cohort"]
    for name in ("n_patients", "mortality_rate", "signal_strength", "missing_rate"):
        if opt.get(name) is not None:
            setattr(cfg.cohort, name, opt[name])
    for name in ("alpha", "tau_percentile", "tau_override"):
        if opt.get(name) is not None:
            setattr(cfg.similarity, name, opt[name])
    for name in ("max_epochs", "patience", "learning_rate", "lambda1", "lambda2"):
        if opt.get(name) is not None:
            cfg.train[name] = opt[name]
    if opt.get("architecture"):
        cfg.model.architecture = opt["architecture"]
    if opt.get("hidden"):
        cfg.model.hidden = opt["hidden"]
    if opt.get("seeds") is not None:
        cfg.ablation.seeds = opt["seeds"]
    if opt.get("only") == "graph":
        cfg.ablation.architecture = False
    elif opt.get("only") == "architecture":
        cfg.ablation.graph = False
    if opt.get("threshold") is not None:
        cfg.threshold = opt["threshold"]
    cfg.validate()
    return cfg


def _out(cfg) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _inputs(cfg):
    return [cfg.cohort.csv] if cfg.cohort.csv else []


def cmd_generate(cfg):
    if cfg.cohort.csv:
        raise CLIError("generate writes a synthetic cohort; drop --cohort / cohort.csv")
    out = _out(cfg)
    records = generate_cohort(cfg.cohort.spec())
    path = out / "cohort.csv"
    save_cohort(records, path)
    deaths = sum(r.died_in_icu for r in records)
    P.write_manifest(out, "generate", cfg, outputs=[path])
    print(f"wrote {path}: {len(records)} patients, {deaths} deaths")


def cmd_encode(cfg):
    out = _out(cfg)
    data = P.prepare(cfg)
    (out / "schema.json").write_text(data.schema.to_json() + "\n", encoding="utf-8")
    np.save(out / "features.npy", data.X)
    splits = {name: [i for i, m in zip(data.ids, mask) if m]
              for name, mask in zip(("train", "val", "test"), data.masks)}
    (out / "splits.json").write_text(json.dumps(splits, indent=1) + "\n", encoding="utf-8")
    P.write_manifest(out, "encode", cfg, _inputs(cfg),
                     [out / "schema.json", out / "features.npy", out / "splits.json"])
    print(f"encoded {len(data.ids)} patients into {data.X.shape[1]} features "
          f"({len(data.schema.codes)} diagnosis codes); schema {data.schema.hash()}")


def cmd_build_graph(cfg):
    out = _out(cfg)
    data = P.prepare(cfg)
    graph = P.make_graph(data, cfg.similarity.params())
    graph.write_edge_list(out / "edges.csv")
    graph.write_sidecar(out / "graph.json")
    P.write_manifest(out, "build-graph", cfg, _inputs(cfg), [out / "edges.csv", out / "graph.json"])
    isolated = graph.n_nodes - len({k for e in graph.edges for k in e})
    print(f"graph: {graph.n_nodes} nodes, {graph.n_edges} edges, tau={graph.tau:.6g}, "
          f"{isolated} isolated")


def _train_and_save(cfg, out: Path):
    data = P.prepare(cfg)
    graph = P.make_graph(data, cfg.similarity.params())

    def log(row):
        if row["epoch"] % 25 == 0:
            print(f"epoch {row['epoch']:4d}  train {row['train_loss']:.4f}  val {row['val_loss']:.4f}",
                  file=sys.stderr)

    params, history = P.fit(cfg, data, graph, log=log)
    # the output location is not part of the experiment, keep it out of the checkpoint bytes
    run_cfg = {k: v for k, v in cfg.to_dict().items() if k != "out_dir"}
    digest = save_checkpoint(out / "checkpoint.json", params, data.schema.hash(), run_cfg)
    history.write_csv(out / "history.csv")
    return data, graph, params, history, digest


def cmd_train(cfg):
    out = _out(cfg)
    data, graph, params, history, digest = _train_and_save(cfg, out)
    auc = P.train_auc(data, graph, params)
    P.write_manifest(out, "train", cfg, _inputs(cfg), [out / "checkpoint.json", out / "history.csv"])
    print(f"trained {cfg.model.architecture} for {len(history.rows)} epochs "
          f"(best epoch {history.best_epoch}); train AUC {auc:.4f}; checkpoint sha256 {digest}")


def cmd_evaluate(cfg, checkpoint):
    out = _out(cfg)
    path = Path(checkpoint) if checkpoint else out / "checkpoint.json"
    params, meta = load_checkpoint(path)
    run_cfg = P.ExperimentConfig.from_dict(meta["config"])
    run_cfg.threshold = cfg.threshold
    data = P.prepare(run_cfg)
    if data.schema.hash() != meta["schema_hash"]:
        raise CLIError(f"schema hash {data.schema.hash()} does not match checkpoint {meta['schema_hash']}")
    graph = P.make_graph(data, run_cfg.similarity.params())
    report, attention, _ = P.assess(run_cfg, data, graph, params)
    report.write_json(out / "metrics.json")
    report.write_roc_csv(out / "roc.csv")
    written = [out / "metrics.json", out / "roc.csv"]
    if attention is not None:
        attention.write_json(out / "attention.json", data.ids)
        written.append(out / "attention.json")
    P.write_manifest(out, "evaluate", run_cfg, [path] + _inputs(run_cfg), written)
    rho = "n/a" if report.spearman_rho is None else f"{report.spearman_rho:.3f}"
    print(f"test: AUC {report.auc_roc:.4f}  acc {report.accuracy:.4f}  precision {report.precision:.4f}  "
          f"recall {report.recall:.4f}  F1 {report.f1:.4f}  spearman {rho}  n={report.n_evaluated}")


def cmd_ablate(cfg):
    out = _out(cfg)

    def log(row):
        print(f"seed {row['seed']} {row['study']:<12} {row['variant']:<18} "
              f"AUC {row['auc']:.4f} F1 {row['f1']:.4f}", file=sys.stderr)

    summary, per_seed = P.run_ablation(cfg, log=log)
    (out / "ablation.csv").write_text(P.rows_to_csv(summary, P.SUMMARY_COLUMNS), encoding="utf-8")
    (out / "ablation_seeds.csv").write_text(
        P.rows_to_csv(per_seed, ["study", "variant", "seed", "auc", "f1"]), encoding="utf-8")
    checks = P.ordering_report(summary)
    (out / "ordering.json").write_text(json.dumps(checks, indent=2) + "\n", encoding="utf-8")
    P.write_manifest(out, "ablate", cfg, _inputs(cfg),
                     [out / "ablation.csv", out / "ablation_seeds.csv", out / "ordering.json"])
    for r in summary:
        print(f"{r['study']:<12} {r['variant']:<18} AUC {r['auc_mean']:.4f} ± {r['auc_std']:.4f}  "
              f"F1 {r['f1_mean']:.4f} ± {r['f1_std']:.4f}")
    for c in checks:
        mark = "ok  " if c["holds"] else "FAIL"
        print(f"{mark} {c['ours']} ({c['ours_auc']:.4f}) >= {c['other']} ({c['other_auc']:.4f})")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _config(args)
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "encode":
            cmd_encode(cfg)
        elif args.command == "build-graph":
            cmd_build_graph(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, vars(args).get("checkpoint"))
        elif args.command == "ablate":
            cmd_ablate(cfg)
    except TrainingDiverged as err:
        _fail("diverged", str(err), epoch=err.epoch)
        return 3
    except FileNotFoundError as err:
        _fail("not_found", str(err))
        return 2
    except (CLIError, P.ConfigError, ValidationError, SchemaError, GraphError, ValueError) as err:
        _fail(type(err).__name__, str(err))
        return 2
    return 0


def _fail(kind: str, message: str, **extra):
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
