"""Command-line entry point: ``rearev <command> [options]``.

Every setting resolves as flag > config file > default, and the resolved
values with their provenance are written into each artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import synthetic as syn
from .autodiff import NonFiniteError
from .checkpoint import Checkpoint, IncompatibleCheckpointError, build_id, relation_digest
from .data import (DatasetError, QuestionInstance, attach_subgraphs, default_data_dir, load_dataset_dir,
                   write_jsonl)
from .encoder import EmptyQuestionError
from .evaluation import (MatrixSetup, evaluate, matrix_markdown, run_matrix, subsample, write_matrix_csv)
from .kg import (FactParseError, UnknownEntityError, coverage, drop_facts, extract_many, extract_subgraph_ppr,
                 write_subgraphs)
from .metrics import F1_RULES, ranking
from .optim import PoisonedGradientError
from .reasoner import GraphBatch, ModeError, NoSeedError, forward
from .training import ConfigError, TrainConfig, TrainingDivergedError, params_from_arrays, train

log = logging.getLogger("rearev")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# every setting a command can read; the matrix command takes lists for MATRIX_LISTS
DEFAULTS: dict[str, Any] = {
    "data": None, "out": None, "seed": 0,
    "T": 2, "K": 3, "L": 3, "d": 50, "lr": 5e-4, "batch": 16, "epochs": 30, "dropout": 0.1,
    "mode": "bfs", "allow_any": False, "kg_keep": 1.0, "train_frac": 1.0,
    "m": 200, "alpha": 0.5, "iters": 30, "jobs": 1, "f1_rule": "cumulative", "tau": 0.95,
    "movies": 500, "cities": 0, "questions": 5000, "templates": None, "alias_prob": 0.0,
    "split": "test", "checkpoint": None, "qid": None, "text": None, "seeds": None,
    "trace": None, "top_k": 5, "run_seeds": None,
}
MATRIX_LISTS = ("kg_keep", "train_frac", "T", "K", "L")
TRACE_TOP = 10


@dataclass
class RunConfig:
    values: dict[str, Any]
    provenance: dict[str, str]
    command: str = ""
    build: str = field(default_factory=build_id)

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    def to_dict(self) -> dict:
        return {"command": self.command, "values": self.values, "provenance": self.provenance, "build": self.build}


def load_config_file(path: str | Path) -> tuple[dict, dict]:
    """Values and any recorded provenance from a YAML/JSON file.

    A file holding an embedded run config (``values`` plus ``provenance``)
    keeps its recorded provenance, so replaying an artifact's config
    reproduces the artifact exactly.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    if "values" in data and isinstance(data["values"], dict):
        values = data["values"]
        return values, dict(data.get("provenance", {}))
    return {k.replace("-", "_"): v for k, v in data.items()}, {}


def resolve(command: str, flags: dict[str, Any], config_path: str | None) -> RunConfig:
    file_values, file_prov = load_config_file(config_path) if config_path else ({}, {})
    unknown = set(file_values) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    values, prov = {}, {}
    for name, default in DEFAULTS.items():
        if flags.get(name) is not None:
            values[name], prov[name] = flags[name], "flag"
        elif name in file_values:
            values[name], prov[name] = file_values[name], file_prov.get(name, "file")
        else:
            values[name], prov[name] = default, "default"
    if values["data"] is None and default_data_dir() is not None:
        values["data"], prov["data"] = str(default_data_dir()), "env"
    return RunConfig(values, prov, command)


def _single(value, name):
    if isinstance(value, (list, tuple)):
        if len(value) != 1:
            raise ConfigError(f"--{name.replace('_', '-')} takes one value for this command")
        return value[0]
    return value


def train_config(rc: RunConfig) -> TrainConfig:
    try:
        return TrainConfig(
            dim=int(rc.d), T=int(_single(rc.T, "T")), K=int(_single(rc.K, "K")), L=int(_single(rc.L, "L")),
            lr=float(rc.lr), batch_size=int(rc.batch), epochs=int(rc.epochs), dropout=float(rc.dropout),
            seed=int(rc.seed), mode=rc.mode, allow_any=bool(rc.allow_any),
        )
    except ModeError as exc:
        raise ConfigError(str(exc)) from None


def _data_dir(rc: RunConfig) -> Path:
    if rc.data is None:
        raise DatasetError("no dataset directory: pass --data or set REAREV_DATA_DIR")
    return Path(rc.data)


def _out_dir(rc: RunConfig, fallback: Path) -> Path:
    out = Path(rc.out) if rc.out else fallback
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# commands -------------------------------------------------------------------

def cmd_gen_data(rc: RunConfig) -> int:
    out = _out_dir(rc, Path(rc.data) if rc.data else Path("data"))
    gen = syn.GenConfig(movies=int(rc.movies), cities=int(rc.cities), questions=int(rc.questions),
                        templates=tuple(rc.templates) if rc.templates else None,
                        alias_prob=float(rc.alias_prob), seed=int(rc.seed))
    world = syn.generate_kg(gen)
    questions = syn.generate_questions(world, gen.questions, gen.templates, gen.seed)
    kg = world.kg
    if gen.alias_prob > 0:
        kg = syn.alias_relations(kg, gen.alias_prob, gen.seed)
    kg = drop_facts(kg, float(_single(rc.kg_keep, "kg_keep")), int(rc.seed))
    report = syn.emit_dataset(kg, questions, out, m=int(rc.m), alpha=float(rc.alpha), iters=int(rc.iters),
                              meta={"generator": syn.config_dict(gen), "run_config": rc.to_dict()})
    print(f"wrote {out}: {kg.num_facts} facts, {len(questions)} questions, coverage {report['coverage']:.4f}")
    return EXIT_OK


def cmd_extract(rc: RunConfig) -> int:
    root = _data_dir(rc)
    bundle = load_dataset_dir(root)
    qs = [q for name in ("train", "dev", "test") for q in bundle.splits.get(name, [])]
    subs = extract_many(bundle.kg, [q.seeds for q in qs], int(rc.m), float(rc.alpha), int(rc.iters))
    write_subgraphs(root / "subgraphs.jsonl", ((q.qid, s) for q, s in zip(qs, subs)))
    meta = dict(bundle.meta)
    meta.update({"m": int(rc.m), "alpha": float(rc.alpha), "iters": int(rc.iters), "extract_config": rc.to_dict()})
    _write_json(root / "meta.json", meta)
    cov = coverage([q.answers for q in qs], subs)
    _write_json(root / "coverage.json", {"m": int(rc.m), "alpha": float(rc.alpha), "iters": int(rc.iters),
                                         "coverage": cov, "questions": len(qs),
                                         "avg_edges": float(np.mean([s.num_edges for s in subs])) if subs else 0.0})
    print(f"extracted {len(subs)} subgraphs, coverage {cov:.4f}")
    return EXIT_OK


def _prepared(rc: RunConfig):
    """Dataset with the KG fact-drop and subgraph settings of ``rc`` applied."""
    bundle = load_dataset_dir(_data_dir(rc))
    keep = float(_single(rc.kg_keep, "kg_keep"))
    refresh = keep < 1.0 or any(rc.provenance.get(k) != "default" for k in ("m", "alpha", "iters"))
    if refresh:
        meta = bundle.meta
        m = int(rc.m) if rc.provenance.get("m") != "default" else int(meta.get("m", rc.m))
        alpha = float(rc.alpha) if rc.provenance.get("alpha") != "default" else float(meta.get("alpha", rc.alpha))
        iters = int(rc.iters) if rc.provenance.get("iters") != "default" else int(meta.get("iters", rc.iters))
        kg = drop_facts(bundle.kg, keep, int(rc.seed))
        attach_subgraphs([q for qs in bundle.splits.values() for q in qs], kg, m, alpha, iters)
    return bundle


def cmd_train(rc: RunConfig) -> int:
    config = train_config(rc)
    bundle = _prepared(rc)
    out = _out_dir(rc, Path("runs") / "latest")
    tr = subsample(bundle.splits.get("train", []), float(_single(rc.train_frac, "train_frac")), int(rc.seed))
    dev = bundle.splits.get("dev", [])
    if not tr or not dev:
        raise DatasetError("train and dev splits must be nonempty")
    result = train(tr, dev, config, vocab_size=len(bundle.vocab), num_relations=bundle.kg.num_relations,
                   vocab_hash=bundle.vocab.digest(), relation_hash=relation_digest(bundle.kg.relations),
                   log_path=out / "train_log.csv", checkpoint_path=out / "checkpoint.json",
                   run_config=rc.to_dict())
    _write_json(out / "run_config.json", rc.to_dict())
    print(f"best epoch {result.checkpoint.epoch}: val hits@1 {result.checkpoint.best_metric:.4f}; "
          f"skipped {result.skipped}; checkpoint {out / 'checkpoint.json'}")
    return EXIT_OK


def _load_checkpoint(rc: RunConfig, bundle) -> Checkpoint:
    if rc.checkpoint is None:
        raise DatasetError("--checkpoint is required")
    ckpt = Checkpoint.load(rc.checkpoint)
    ckpt.check_compatible(bundle.vocab.digest(), relation_digest(bundle.kg.relations))
    return ckpt


def cmd_eval(rc: RunConfig) -> int:
    bundle = _prepared(rc)
    ckpt = _load_checkpoint(rc, bundle)
    if rc.split not in bundle.splits:
        raise DatasetError(f"split {rc.split!r} not found")
    report = evaluate(ckpt, bundle.splits[rc.split], tau=float(rc.tau), rule=rc.f1_rule, top_k=int(rc.top_k))
    report.config = {**report.config, "run_config": rc.to_dict()}
    out = _out_dir(rc, Path(rc.checkpoint).parent)
    report.write_json(out / f"eval_{rc.split}.json")
    report.write_csv(out / f"eval_{rc.split}.csv", bundle.kg)
    print(f"{rc.split}: hits@1 {report.hits1:.4f}  f1 {report.f1:.4f}  ({len(report.records)} questions)")
    return EXIT_OK


def cmd_infer(rc: RunConfig) -> int:
    bundle = _prepared(rc)
    ckpt = _load_checkpoint(rc, bundle)
    kg = bundle.kg
    if rc.qid is not None:
        q = bundle.question(rc.qid)
    elif rc.text is not None and rc.seeds:
        seeds = [kg.entity_id(s) for s in rc.seeds]
        m = int(bundle.meta.get("m", rc.m))
        sub = extract_subgraph_ppr(kg, seeds, m, float(bundle.meta.get("alpha", rc.alpha)),
                                   int(bundle.meta.get("iters", rc.iters)))
        q = QuestionInstance("adhoc", rc.text, seeds, [], bundle.vocab.encode(rc.text), sub)
    else:
        raise ConfigError("infer needs --qid, or --text together with --seeds")
    config = TrainConfig.from_dict({**ckpt.config, "allow_any": True}).reasoner()
    params = params_from_arrays(ckpt.params)
    out = forward(GraphBatch.from_subgraphs([q.subgraph]), [q.token_ids], params, config, None)
    ents = q.subgraph.entities
    tokens = [bundle.vocab.tokens[t] for t in q.token_ids]
    stages = []
    for t, stage in enumerate(out.trace):
        order = ranking(stage.p, ents)[:max(int(rc.top_k), TRACE_TOP)]
        stages.append({"stage": t, "p_top": [[kg.entities[ents[i]], float(stage.p[i])] for i in order],
                       "attn": [[float(x) for x in a] for a in stage.attention]})
    print(f"{q.qid}: {q.text}")
    if q.answers:
        print("gold:", ", ".join(kg.entities[a] for a in q.answers))
    for rec in stages:
        shown = ", ".join(f"{e} ({p:.3f})" for e, p in rec["p_top"][:int(rc.top_k)])
        print(f"stage {rec['stage'] + 1}: {shown}")
    if rc.trace:
        line = {"qid": q.qid, "tokens": tokens, "stages": stages}
        if rc.trace == "-":
            print(json.dumps(line, sort_keys=True))
        else:
            write_jsonl(rc.trace, [line])
    return EXIT_OK


def cmd_matrix(rc: RunConfig) -> int:
    bundle = load_dataset_dir(_data_dir(rc))
    meta = bundle.meta
    pick = lambda k, cast: cast(rc.values[k]) if rc.provenance.get(k) != "default" else cast(meta.get(k, rc.values[k]))
    setup = MatrixSetup(
        kg=bundle.kg, train=bundle.splits.get("train", []), dev=bundle.splits.get("dev", []),
        test=bundle.splits.get("test", []), vocab_size=len(bundle.vocab), vocab_hash=bundle.vocab.digest(),
        relation_hash=relation_digest(bundle.kg.relations), m=pick("m", int), alpha=pick("alpha", float),
        iters=pick("iters", int), tau=float(rc.tau), f1_rule=rc.f1_rule,
    )
    as_list = lambda v: list(v) if isinstance(v, (list, tuple)) else [v]
    configs = []
    for T in as_list(rc.T):
        for K in as_list(rc.K):
            for L in as_list(rc.L):
                one = replace_values(rc, T=T, K=K, L=L)
                configs.append(train_config(one))
    seeds = as_list(rc.run_seeds) if rc.run_seeds is not None else [int(rc.seed)]
    rows = run_matrix(setup, [float(k) for k in as_list(rc.kg_keep)], [float(f) for f in as_list(rc.train_frac)],
                      configs, [int(s) for s in seeds], jobs=int(rc.jobs))
    out = _out_dir(rc, Path("runs") / "matrix")
    write_matrix_csv(rows, out / "matrix.csv")
    (out / "matrix.md").write_text(matrix_markdown(rows))
    _write_json(out / "run_config.json", rc.to_dict())
    print(matrix_markdown(rows), end="")
    return EXIT_OK


def replace_values(rc: RunConfig, **values) -> RunConfig:
    return RunConfig({**rc.values, **values}, rc.provenance, rc.command, rc.build)


COMMANDS = {
    "gen-data": cmd_gen_data, "extract": cmd_extract, "train": cmd_train,
    "eval": cmd_eval, "infer": cmd_infer, "matrix": cmd_matrix,
}


# argument parsing -----------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON file with default settings")
    p.add_argument("--data", help="dataset directory (default: $REAREV_DATA_DIR)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _hyper(p: argparse.ArgumentParser, many: bool = False) -> None:
    nargs = "+" if many else None
    p.add_argument("--T", type=int, nargs=nargs, help="adaptive stages")
    p.add_argument("--K", type=int, nargs=nargs, help="instructions")
    p.add_argument("--L", type=int, nargs=nargs, help="reasoning layers per stage")
    p.add_argument("--d", type=int, help="hidden size")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--mode", choices=("bfs", "sequential"))
    p.add_argument("--allow-any", dest="allow_any", action="store_const", const=True,
                   help="accept hyperparameters outside the tuning grid")


def _subgraph_flags(p: argparse.ArgumentParser, many: bool = False) -> None:
    p.add_argument("--kg-keep", dest="kg_keep", type=float, nargs="+" if many else None,
                   help="fraction of KG facts kept")
    p.add_argument("--m", type=int, help="entities kept per subgraph")
    p.add_argument("--alpha", type=float, help="PageRank restart probability")
    p.add_argument("--iters", type=int, help="power iterations")


def _metric_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--f1-rule", dest="f1_rule", choices=F1_RULES)
    p.add_argument("--tau", type=float, help="F1 probability threshold")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rearev", description="Adaptive multi-instruction KGQA reasoner")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic movie benchmark")
    _common(p)
    _subgraph_flags(p)
    p.add_argument("--movies", type=int)
    p.add_argument("--cities", type=int, help="birthplace pool size (0: no person facts)")
    p.add_argument("--questions", type=int)
    p.add_argument("--templates", nargs="+", help="template names or groups")
    p.add_argument("--alias-prob", dest="alias_prob", type=float)

    p = sub.add_parser("extract", help="re-extract question subgraphs")
    _common(p)
    p.add_argument("--m", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--iters", type=int)

    p = sub.add_parser("train", help="train and keep the best-validation checkpoint")
    _common(p)
    _hyper(p)
    _subgraph_flags(p)
    p.add_argument("--train-frac", dest="train_frac", type=float)

    for name in ("eval", "infer"):
        p = sub.add_parser(name, help="evaluate a checkpoint" if name == "eval" else "answer one question")
        _common(p)
        _subgraph_flags(p)
        _metric_flags(p)
        p.add_argument("--checkpoint", required=False)
        p.add_argument("--top-k", dest="top_k", type=int)
        if name == "eval":
            p.add_argument("--split", choices=("train", "dev", "test"))
        else:
            p.add_argument("--qid")
            p.add_argument("--text")
            p.add_argument("--seeds", nargs="+", help="seed entity names for --text")
            p.add_argument("--trace", nargs="?", const="-", help="write per-stage JSONL (stdout when no path)")

    p = sub.add_parser("matrix", help="incomplete-KG / low-data experiment grid")
    _common(p)
    _hyper(p, many=True)
    _subgraph_flags(p, many=True)
    _metric_flags(p)
    p.add_argument("--train-frac", dest="train_frac", type=float, nargs="+")
    p.add_argument("--seeds", dest="run_seeds", type=int, nargs="+", help="run seeds per cell")
    p.add_argument("--jobs", type=int, help="parallel worker processes")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k in DEFAULTS}
    try:
        rc = resolve(args.command, flags, args.config)
        return COMMANDS[args.command](rc)
    except (ConfigError, ModeError, EmptyQuestionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, TrainingDivergedError, PoisonedGradientError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, FactParseError, UnknownEntityError, IncompatibleCheckpointError, NoSeedError,
            KeyError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
