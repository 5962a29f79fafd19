"""Command line entry point: train, datagen, eval, inspect."""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import subprocess
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, read_manifest
from .config import Config, load_config
from .datagen.io import atomic_write_text, read_jsonl, write_json, write_jsonl
from .qformer import ConfigError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

# Published full-scale values the toy defaults stand in for.
PUBLISHED_SCALE = {"batch_size": 2048, "max_steps": 90000}


class UsageError(Exception):
    pass


class ValidationError(Exception):
    """Bad user input: exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"zvforge-{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"zvforge-{__version__}"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _dump(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2) + "\n"


# -- train -------------------------------------------------------------------------

def cmd_train(args, cfg: Config, run: dict) -> None:
    from .adaptation import Stage
    from .evalkit.retrieval import retrieval_at_k
    from .trainer.stages import corpus_for, run_stage

    out = Path(args.out)
    stage = Stage(args.stage)
    report = run_stage(stage, args.profile, corpus_for(cfg.qformer, cfg.train), cfg.train, cfg.qformer,
                       cfg.objectives, cfg.lora, out_dir=out, resume=args.resume,
                       log=None if args.quiet else (lambda m: print(m, file=sys.stderr)))
    final_row = report.trace[-1]
    sim_path = out / f"{stage.value}-{args.profile}.similarity.json"
    sim = _eval_similarity(report.checkpoint_path, stage, args.profile, cfg)
    write_json(sim_path, {"sim": sim.tolist()})
    ir, tr = retrieval_at_k(sim, 1)
    metrics = {**report.final_losses, "ir_at_1": ir, "tr_at_1": tr, "r_at_1": final_row["r_at_1"],
               "steps": report.steps}
    doc = {"stage": stage.value, "profile": args.profile, "steps": report.steps, "metrics": metrics,
           "frozen_groups_unchanged": report.frozen_hashes_before == report.frozen_hashes_after,
           "frozen_group_hashes": report.frozen_hashes_after,
           "trace": report.trace}
    report_path = write_json(out / f"{stage.value}-{args.profile}.report.json", doc)
    run["artifacts"] += [str(report.checkpoint_path), str(report.trace_path), str(sim_path), str(report_path)]
    run["final_metrics"] = metrics
    print(_dump(metrics), end="")


def _eval_similarity(ckpt, stage, profile, cfg: Config) -> np.ndarray:
    from . import tensor as T
    from .objectives import itc_features, similarity_matrix
    from .trainer.stages import corpus_for, prepare_model

    model = prepare_model(stage, profile, cfg.qformer, cfg.train, cfg.objectives, cfg.lora, resume=ckpt)
    batch = corpus_for(cfg.qformer, cfg.train).eval_batch()
    with T.no_grad():
        img, txt = itc_features(model, batch)
        return np.asarray(similarity_matrix(img, txt).data, dtype=np.float64)


# -- datagen -----------------------------------------------------------------------

def cmd_datagen(args, cfg: Config, run: dict) -> None:
    from .datagen import (HashingScorer, HttpTeacherClient, MockTeacherClient, clean_corpus, generate_pairs,
                          make_jobs, translate_pairs)
    from .datagen.io import load_seed_exemplars, read_images
    from .datagen.synthetic import synthetic_images
    from .datagen.types import RecordError

    d = cfg.datagen
    try:
        images = read_images(args.inp) if args.inp else synthetic_images(d.num_images, d.seed)
    except FileNotFoundError:
        raise ValidationError(f"input file not found: {args.inp}") from None
    except (RecordError, ValueError, KeyError) as exc:
        raise ValidationError(f"{args.inp}: {exc}") from None
    if d.client == "http":
        if not d.endpoint or not d.model:
            raise ValidationError("datagen.endpoint and datagen.model are required for the http client")
        client = HttpTeacherClient(d.endpoint, d.model, d.key_env)
    else:
        client = MockTeacherClient()
    pool = load_seed_exemplars(args.exemplars)
    jobs = make_jobs(images, pool, d.kind, d.rewrite, d.exemplars_per_job, d.seed, d.target_language)
    result = generate_pairs(jobs, client, retries=d.retries, workers=d.workers, rate_limit=d.rate_limit,
                            timestamp=d.timestamp)
    summary = {"generation": result.counts()}
    if d.translate:
        tr = translate_pairs(result.passed, client, "zh", d.retries, d.workers, d.timestamp)
        summary["translation"] = tr.counts()
        result.passed += tr.passed
        result.rejected += tr.rejected
        result.failed += tr.failed
    records = [(img.image_id, c) for img in images for c in img.captions]
    cleaned = clean_corpus(records, HashingScorer(salt=str(d.seed)), d.threshold)
    summary["cleaning"] = {"original": len(records), "cleaned": len(cleaned.kept),
                           "retention": cleaned.retention, "threshold": d.threshold}
    out = Path(args.out)
    paths = [write_jsonl(out / "pairs.jsonl", [p.to_dict() for p in result.passed]),
             write_jsonl(out / "rejects.jsonl", [r.to_dict() for r in result.rejected]),
             write_jsonl(out / "failed.jsonl", [f.to_dict() for f in result.failed]),
             write_json(out / "summary.json", summary)]
    run["artifacts"] += [str(p) for p in paths]
    run["final_metrics"] = summary
    print(_dump(summary), end="")


# -- eval --------------------------------------------------------------------------

def _load_jsonl(path, what):
    if path is None:
        raise ValidationError(f"--{what} is required for this metric")
    try:
        return read_jsonl(path)
    except FileNotFoundError:
        raise ValidationError(f"input file not found: {path}") from None
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def _load_similarity(path) -> np.ndarray:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValidationError(f"input file not found: {path}") from None
    try:
        doc = json.loads(text)
        rows = doc["sim"] if isinstance(doc, dict) else doc
    except (json.JSONDecodeError, KeyError):
        rows = [r["scores"] if isinstance(r, dict) else r for r in _load_jsonl(path, "in")]
    return np.asarray(rows, dtype=np.float64)


def cmd_eval(args, cfg: Config, run: dict) -> None:
    from . import evalkit as E

    metric = args.metric
    k = args.k or cfg.eval.k
    text = None
    try:
        if metric == "retrieval":
            ir, tr = E.retrieval_at_k(_load_similarity(args.inp), k)
            report = {f"IR@{k}": ir, f"TR@{k}": tr}
        elif metric == "cider":
            cands = _load_jsonl(args.inp, "in")
            refs = {r["image_id"]: r["references"] for r in _load_jsonl(args.refs, "refs")}
            missing = [c["image_id"] for c in cands if c["image_id"] not in refs]
            if missing:
                raise ValidationError(f"no references for image(s) {missing[:5]}")
            res = E.cider(E.CaptionCorpus([refs[c["image_id"]] for c in cands],
                                          [c["candidate"] for c in cands], cfg.eval.cider_n))
            report = {"cider": res.mean,
                      "per_image": {c["image_id"]: s for c, s in zip(cands, res.per_image)}}
        elif metric == "vqa":
            recs = [E.VQARecord(r["question"], r["answers"], r["prediction"]) for r in _load_jsonl(args.inp, "in")]
            scores = [E.vqa_score(r) for r in recs]
            report = {"vqa_score": sum(scores) / len(scores) if scores else None, "count": len(scores)}
        elif metric == "em":
            rows = _load_jsonl(args.inp, "in")
            preds = [(E.choose_option(r["options"], r["scores"]) if "options" in r else r["prediction"], r["target"])
                     for r in rows]
            report = {"accuracy": E.accuracy(preds), "count": len(preds)}
        else:
            insts = [E.JudgedInstance(r["id"], r["category"], r.get("context", ""), r["question"], r["reference"])
                     for r in _load_jsonl(args.refs, "refs")]
            cands = {r["id"]: r["candidate"] for r in _load_jsonl(args.inp, "in")}
            judge_name = args.judge or cfg.eval.judge
            rep = E.judged_benchmark(insts, cands, E.judged.JUDGES[judge_name]())
            report = json.loads(rep.to_json())
            text = rep.table(judge_name)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed {metric} input: missing or bad field {exc}") from None
    except (E.CiderError, E.EmptyOptionsError) as exc:
        raise ValidationError(str(exc)) from None
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(str(exc)) from None
    report = {"metric": metric, **report}
    if args.out:
        path = write_json(Path(args.out) / f"eval-{metric}.json", report)
        run["artifacts"].append(str(path))
    run["final_metrics"] = report
    print(text if text is not None else _dump(report), end="\n" if text is not None else "")


# -- inspect -----------------------------------------------------------------------

def cmd_inspect(args, cfg: Config, run: dict) -> None:
    try:
        manifest = read_manifest(args.checkpoint)
    except FileNotFoundError:
        raise ValidationError(f"checkpoint not found: {args.checkpoint}") from None
    except CheckpointError as exc:
        raise ValidationError(str(exc)) from None
    run["final_metrics"] = {"parameters": len(manifest["params"])}
    print(_dump(manifest), end="")


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="zvforge", description="Desk-scale querying-transformer training stack.")
    p.add_argument("--version", action="version", version=f"zvforge {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="{train,datagen,eval,inspect}")

    def common(sp):
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--seed", type=int, help="overrides every section's seed")
        sp.add_argument("--manifest", help="run manifest path (default: OUT/run_manifest.json)")

    t = sub.add_parser("train", help="run one training stage")
    common(t)
    t.add_argument("--stage", required=True, choices=["pretrain", "multitask", "scene"])
    t.add_argument("--profile", default="base", choices=["base", "chat"])
    t.add_argument("--resume", help="checkpoint of the previous stage")
    t.add_argument("--steps", type=int, help="overrides the stage's step budget")
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--out", default="runs")
    t.add_argument("--quiet", action="store_true")

    d = sub.add_parser("datagen", help="generate instruction-response pairs")
    common(d)
    d.add_argument("--kind", choices=["Conversation", "DetailDescription", "ComplexReasoning"])
    d.add_argument("--rewrite", choices=["Deepening", "Concretizing", "IncreasingReasoning", "AddingConstraints"])
    d.add_argument("--in", dest="inp", help="SymbolicImage JSONL (default: synthetic scenes)")
    d.add_argument("--out", default="runs/datagen")
    d.add_argument("--client", choices=["mock", "http"])
    d.add_argument("--threshold", type=float)
    d.add_argument("--num-images", type=int)
    d.add_argument("--target-language", choices=["en", "zh"])
    d.add_argument("--translate", action="store_true", default=None, help="also translate passed pairs to zh")
    d.add_argument("--workers", type=int)
    d.add_argument("--exemplars", help="exemplar JSONL (default: shipped seed file)")

    e = sub.add_parser("eval", help="score predictions")
    common(e)
    e.add_argument("--metric", required=True, choices=["cider", "vqa", "em", "retrieval", "judged"])
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--refs")
    e.add_argument("--judge", choices=["mock-constant", "mock-length", "mock-overlap"])
    e.add_argument("--k", type=int)
    e.add_argument("--out", default="runs/eval")

    i = sub.add_parser("inspect", help="print a checkpoint manifest")
    i.add_argument("checkpoint")
    i.add_argument("--manifest", help="optional run manifest path")
    return p


def _config_for(args) -> Config:
    cmd = args.command
    over = {}
    if cmd == "train":
        over["train"] = {"seed": args.seed, "lr": args.lr, "batch_size": args.batch_size}
        if args.steps is not None:
            key = {"pretrain": "max_steps", "multitask": "multitask_steps", "scene": "scene_steps"}[args.stage]
            over["train"][key] = args.steps
    elif cmd == "datagen":
        over["datagen"] = {"seed": args.seed, "kind": args.kind, "rewrite": args.rewrite, "client": args.client,
                           "threshold": args.threshold, "num_images": args.num_images,
                           "target_language": args.target_language, "translate": args.translate,
                           "workers": args.workers}
    elif cmd == "eval":
        over["eval"] = {"judge": args.judge}
    return load_config(getattr(args, "config", None), over)


def _manifest_path(args) -> Optional[Path]:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    out = getattr(args, "out", None)
    return None if out is None else Path(out) / "run_manifest.json"


def dispatch(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_INVALID
    run = {"command": ["zvforge"] + argv, "build_id": build_id(), "started": _now(), "artifacts": [],
           "final_metrics": None}
    status, cfg = EXIT_OK, None
    handlers = {"train": cmd_train, "datagen": cmd_datagen, "eval": cmd_eval, "inspect": cmd_inspect}
    try:
        cfg = _config_for(args)
        handlers[args.command](args, cfg, run)
    except (ConfigError, ValidationError, FileNotFoundError, CheckpointError) as exc:
        print(f"zvforge {args.command}: {exc}", file=sys.stderr)
        status = EXIT_INVALID
    except Exception as exc:
        print(f"zvforge {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        status = EXIT_RUNTIME
    path = _manifest_path(args)
    if path is not None:
        run.update({"config_hash": None if cfg is None else cfg.hash(),
                    "config_source": None if cfg is None else cfg.source,
                    "seed": _seed_of(args, cfg), "finished": _now(), "exit_status": status})
        if cfg is not None and args.command == "train":
            run["scale"] = {"batch_size": cfg.train.batch_size, "max_steps": cfg.train.steps_for(args.stage),
                            "published": PUBLISHED_SCALE}
        try:
            atomic_write_text(path, _dump(run))
        except OSError as exc:
            print(f"zvforge: could not write run manifest {path}: {exc}", file=sys.stderr)
            status = status or EXIT_RUNTIME
    return status


def _seed_of(args, cfg: Optional[Config]):
    if cfg is None:
        return getattr(args, "seed", None)
    if args.command == "train":
        return cfg.train.seed
    if args.command == "datagen":
        return cfg.datagen.seed
    return getattr(args, "seed", None)


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
