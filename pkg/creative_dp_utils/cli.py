"""
Command-line entry point: one subcommand per pipeline stage.

    python -m creative_dp_utils.cli --config study.json [--seed N] <subcommand> ...

Explicit subcommands always run: stage skip triggers are reset in memory only.
Logs go to stderr; data goes to the files named by the flags (or the study's
default locations). Exit code 0 on success, 1 on a failed stage, 2 on usage errors.
"""

import argparse
import json
import sys
from typing import List, Optional

from creative_dp_utils.datamodel import GenerationMode
from creative_dp_utils.workflow_manager import CreativeWorkflowManager

MODES = [mode.value for mode in GenerationMode]


def build_argparser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="creative", description="Hierarchical personalized creative generation")
    ap.add_argument("--config", required=True, help="study JSON run configuration")
    ap.add_argument("--seed", type=int, default=None, help="override every seed in the configuration")
    sub = ap.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("datagen", help="build the CoT dataset from raw logs")
    p.add_argument("--logs", help="raw log rows (JSON lines)")
    p.add_argument("--out", help="dataset output path")

    p = sub.add_parser("train", help="jointly train all networks")
    p.add_argument("--data", help="training dataset")
    p.add_argument("--out", help="final checkpoint path")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--stop-after", type=int, help="stop at this global step")

    p = sub.add_parser("embed-users", help="extract user embeddings")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--out")

    p = sub.add_parser("cluster", help="k-means over user embeddings")
    p.add_argument("--embeddings")
    p.add_argument("--k", help="number of clusters, or 'inf' for no clustering")
    p.add_argument("--out")

    for name, help_text in (("plan", "select top-k clusters per ad"), ("generate", "decode titles from plans")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--mode", choices=MODES, required=True)
        p.add_argument("--ckpt")
        p.add_argument("--clusters")
        p.add_argument("--ads")
        p.add_argument("--out")
        if name == "generate":
            p.add_argument("--plans")

    p = sub.add_parser("filter", help="badcase filter into the creative library")
    p.add_argument("--candidates", nargs="+")
    p.add_argument("--ads")
    p.add_argument("--library")

    p = sub.add_parser("library", help="creative library access")
    library_sub = p.add_subparsers(dest="library_command", metavar="library_command", required=True)
    q = library_sub.add_parser("query", help="stored creatives for an ad")
    q.add_argument("--ad-id", required=True)
    q.add_argument("--mode", choices=MODES, required=True)
    q.add_argument("--library")
    q.add_argument("--out", help="write JSON lines here instead of stdout")

    p = sub.add_parser("evaluate", help="offline evaluation reports")
    eval_sub = p.add_subparsers(dest="evaluate_command", metavar="evaluate_command", required=True)
    q = eval_sub.add_parser("gsb", help="dual-order GSB judging of two title files")
    q.add_argument("--a", required=True)
    q.add_argument("--b", required=True)
    q.add_argument("--context", required=True, help="records aligned with the title files")
    q.add_argument("--out")
    q = eval_sub.add_parser("hallucination", help="hallucination pass rate of a candidates file")
    q.add_argument("--titles", required=True)
    q.add_argument("--ads")
    q.add_argument("--out")
    q = eval_sub.add_parser("ablation", help="aux-loss or cluster-count ablation table")
    q.add_argument("--grid", help="grid JSON (default: auxiliary-loss grid)")
    q.add_argument("--data")
    q.add_argument("--eval-data")
    q.add_argument("--checkpoint-dir")
    q.add_argument("--train-missing", action="store_true")
    q.add_argument("--out")
    q = eval_sub.add_parser("workflow", help="evaluate the trained study end to end")
    q.add_argument("--eval-data")
    return ap


def _library_query(manager: CreativeWorkflowManager, args: argparse.Namespace) -> bool:
    hits = manager.query_library(args.ad_id, args.mode, args.library)
    lines = [json.dumps(hit.model_dump(mode="json"), ensure_ascii=False) for hit in hits]
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.writelines(line + "\n" for line in lines)
    else:
        sys.stdout.writelines(line + "\n" for line in lines)
    manager.logger.info(f"Library returned {len(hits)} creatives for ad {args.ad_id} ({args.mode})")
    return True


def dispatch(manager: CreativeWorkflowManager, args: argparse.Namespace) -> bool:
    command = args.command
    if command == "datagen":
        return manager.construct_dataset(args.logs, args.out)
    if command == "train":
        return manager.train_model(args.data, args.out, args.resume, args.stop_after)
    if command == "embed-users":
        return manager.extract_embeddings(args.data, args.ckpt, args.out)
    if command == "cluster":
        return manager.cluster_users(args.embeddings, args.out, args.k)
    if command == "plan":
        return manager.plan_creatives(args.mode, args.ads, args.ckpt, args.clusters, args.out)
    if command == "generate":
        return manager.generate_creatives(args.mode, args.plans, args.ads, args.ckpt, args.clusters, args.out)
    if command == "filter":
        return manager.filter_creatives(args.candidates, args.ads, args.library)
    if command == "library":
        return _library_query(manager, args)
    if args.evaluate_command == "gsb":
        return manager.evaluate_gsb_files(args.a, args.b, args.context, args.out)
    if args.evaluate_command == "hallucination":
        return manager.evaluate_hallucination_file(args.titles, args.ads, args.out)
    if args.evaluate_command == "ablation":
        return manager.run_ablation(args.grid, args.data, args.eval_data, args.checkpoint_dir,
                                    args.train_missing, args.out)
    return manager.evaluate_creatives(args.eval_data)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_argparser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    try:
        manager = CreativeWorkflowManager(args.config, seed=args.seed, persist_triggers=False)
        manager.reset_all_triggers()
        manager.create_workflow_structure()
        ok = dispatch(manager, args)
    except Exception as e:
        print(f"error: {type(e).__name__}: {' '.join(str(e).split())}", file=sys.stderr)
        return 1
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
