import argparse
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Type

from app.backend.config.config import (
    DataPaths,
    EvalConfig,
    PostprocessConfig,
    SynthConfig,
    TrainConfig,
    configure_logging,
    describe_keys,
    load_config_file,
    parse_overrides,
    split_config,
)
from app.backend.exceptions import ConfigError, NwsdError
from app.backend.factories import create_executor
from app.backend.services import (
    OutputTracker,
    read_video_list,
    run_eval,
    run_generate,
    run_infer,
    run_postprocess,
    run_report,
    run_train,
)


logger = logging.getLogger(__name__)

Handler = Callable[[argparse.Namespace, List[Any], OutputTracker, Optional[ThreadPoolExecutor]], None]


def _generate(args: argparse.Namespace, configs: List[Any], tracker: OutputTracker,
              executor: Optional[ThreadPoolExecutor]) -> None:
    (synth_cfg,) = configs
    run_generate(synth_cfg, args.out, tracker, executor)


def _train(args: argparse.Namespace, configs: List[Any], tracker: OutputTracker,
           executor: Optional[ThreadPoolExecutor]) -> None:
    train_cfg, post_cfg, eval_cfg, paths = configs
    run_train(train_cfg, post_cfg, eval_cfg, paths, tracker, executor)


def _videos(args: argparse.Namespace) -> Optional[List[str]]:
    return read_video_list(args.videos) if args.videos else None


def _infer(args: argparse.Namespace, configs: List[Any], tracker: OutputTracker,
           executor: Optional[ThreadPoolExecutor]) -> None:
    run_infer(args.checkpoint, args.features, args.out, tracker, executor, video_ids=_videos(args))


def _postprocess(args: argparse.Namespace, configs: List[Any], tracker: OutputTracker,
                 executor: Optional[ThreadPoolExecutor]) -> None:
    (post_cfg,) = configs
    run_postprocess(args.scores, args.out, post_cfg, tracker, executor)


def _eval(args: argparse.Namespace, configs: List[Any], tracker: OutputTracker,
          executor: Optional[ThreadPoolExecutor]) -> None:
    (eval_cfg,) = configs
    run_eval(args.detections, args.ground_truth, args.out, eval_cfg, tracker)


def _parse_runs(pairs: Sequence[str]) -> Dict[str, Path]:
    runs: Dict[str, Path] = {}
    for pair in pairs:
        name, sep, path = pair.partition("=")
        if not sep or not name or not path:
            raise ConfigError("run must look like name=checkpoint", key=pair)
        if name in runs:
            raise ConfigError("duplicate run name", key=name)
        runs[name] = Path(path)
    return runs


def _report(args: argparse.Namespace, configs: List[Any], tracker: OutputTracker,
            executor: Optional[ThreadPoolExecutor]) -> None:
    post_cfg, eval_cfg = configs
    run_report(_parse_runs(args.run or []), args.features, args.ground_truth, args.out, post_cfg, eval_cfg,
               tracker, executor, video_ids=_videos(args), top_k=args.top_k)


COMMANDS: Dict[str, Tuple[str, Tuple[Type[Any], ...], Handler]] = {
    "generate": ("write a synthetic narrated-video dataset", (SynthConfig,), _generate),
    "train": ("train one detector variant and keep the best validation checkpoint",
              (TrainConfig, PostprocessConfig, EvalConfig, DataPaths), _train),
    "infer": ("dump per-frame class scores of a checkpoint (NWSS)", (), _infer),
    "postprocess": ("turn a score dump into ranked detections (JSON Lines)", (PostprocessConfig,), _postprocess),
    "eval": ("score detections against ground truth (CSV + JSON report)", (EvalConfig,), _eval),
    "report": ("compare several checkpoints on the same videos", (PostprocessConfig, EvalConfig), _report),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nwsd", description="Narration-supervised temporal action detection.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (summary, models, _) in COMMANDS.items():
        epilog = "config keys (key = default):\n" + describe_keys(*models) if models else "no config keys"
        p = sub.add_parser(name, help=summary, description=summary, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--threads", type=int, help="worker threads (default: NWSD_THREADS)")

    commands = sub.choices
    commands["generate"].add_argument("--out", type=Path, required=True, help="output directory")
    commands["infer"].add_argument("--checkpoint", type=Path, required=True)
    commands["infer"].add_argument("--features", type=Path, required=True, help="directory of .nwsd files")
    commands["infer"].add_argument("--out", type=Path, required=True, help="score dump to write")
    commands["infer"].add_argument("--videos", type=Path, help="file with one video id per line")
    commands["postprocess"].add_argument("--scores", type=Path, required=True)
    commands["postprocess"].add_argument("--out", type=Path, required=True, help="detections .jsonl to write")
    commands["eval"].add_argument("--detections", type=Path, required=True)
    commands["eval"].add_argument("--ground-truth", type=Path, required=True)
    commands["eval"].add_argument("--out", type=Path, required=True, help="report prefix (.csv and .json)")
    commands["report"].add_argument("--run", action="append", metavar="NAME=CHECKPOINT", help="repeatable")
    commands["report"].add_argument("--features", type=Path, required=True)
    commands["report"].add_argument("--ground-truth", type=Path, required=True)
    commands["report"].add_argument("--out", type=Path, required=True, help="output prefix")
    commands["report"].add_argument("--videos", type=Path, help="restrict to these video ids (e.g. a .split.txt)")
    commands["report"].add_argument("--top-k", type=int, default=5, help="best classes listed per run")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parses `argv`, runs one command and maps failures to exit codes
    (2 config, 3 I/O or format, 4 numeric). Outputs of a failed command are removed.
    """
    args = build_parser().parse_args(argv)
    _, models, handler = COMMANDS[args.command]
    tracker = OutputTracker()
    executor: Optional[ThreadPoolExecutor] = None
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1", key="threads")
        raw = {**load_config_file(args.config), **parse_overrides(args.set)}
        configs = split_config(raw, *models)
        executor = create_executor(args.threads)
        handler(args, configs, tracker, executor)
    except NwsdError as e:
        logger.error(f"{args.command} failed: {e.message}", exc_info=True)
        tracker.cleanup()
        return e.exit_code
    finally:
        if executor is not None:
            executor.shutdown()
    logger.info(f"{args.command} completed successfully")
    return 0


def main() -> None:
    configure_logging()
    raise SystemExit(run())
