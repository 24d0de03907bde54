"""Command surface: track, train, eval, export, sweep and scenario subcommands."""
import argparse
import asyncio
import csv
import json
import logging
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

from sture import __version__, metrics, mot_io, mutual_trainer, screen
from sture.associator import AffinityScorer, CosineScorer, HeadScorer
from sture.config import ScenarioSpec, TrackerConfig, settings
from sture.errors import DimensionError, DivergenceError, UsageError
from sture.features import OracleEmbedder
from sture.scenario import build_scenario, write_scenario
from sture.tracker import (
    TELEMETRY_HEADER, ConstantVelocitySOT, OracleSOT, SequenceInputs, SequenceResult, run_sequence,
)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
SWEEP_DEFAULTS = {"T": "2,4,8,16"}


@dataclass
class RunManifest:
    """What produced an output directory."""

    subcommand: str
    inputs: List[str]
    config: Optional[str]
    seed: Optional[int]
    output_dir: str
    options: Dict[str, Any] = field(default_factory=dict)

    def write(self, path: Path) -> None:
        payload = dict(asdict(self), version=__version__)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class RunOutput:
    """Output directory staged beside its target and moved into place on success."""

    def __init__(self, out: Union[str, Path], force: bool = False):
        self.out = Path(out)
        if self.out.exists() and not force:
            raise UsageError(f"Output directory {self.out} already exists (use --force to replace it)")
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.staging = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.", dir=self.out.parent))
        self.committed = False

    def path(self, name: str) -> Path:
        return self.staging / name

    def commit(self) -> None:
        if self.committed:
            return
        if self.out.exists():
            shutil.rmtree(self.out)
        os.replace(self.staging, self.out)
        self.committed = True
        logger.info(f"Outputs written to {self.out}")

    def discard(self) -> None:
        shutil.rmtree(self.staging, ignore_errors=True)

    def __enter__(self) -> "RunOutput":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.commit()
        elif not self.committed:
            self.discard()


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_report(output: RunOutput, reports: Sequence[metrics.MetricsReport], title: str,
                 status: Optional[Tuple[str, str]] = None) -> str:
    rows = metrics.report_rows(reports)
    write_csv(output.path("report.csv"), metrics.REPORT_COLUMNS, rows)
    text = screen.format_report(title, metrics.REPORT_COLUMNS, rows, status)
    output.path("report.txt").write_text(text, encoding="utf-8")
    return text


def _output_dir(args: argparse.Namespace) -> Path:
    return Path(args.out) if args.out else Path(settings.OUTPUT_DIR) / args.command_name


# ---------------------------------------------------------------------------
# track
# ---------------------------------------------------------------------------

def build_scorer(args: argparse.Namespace, config: TrackerConfig) -> AffinityScorer:
    if args.no_sture:
        return CosineScorer(config.T, attention=False)
    if args.checkpoint and not args.cosine_fallback:
        if not Path(args.checkpoint).is_file():
            raise UsageError(f"Checkpoint {args.checkpoint} does not exist")
        model = mutual_trainer.load_checkpoint(args.checkpoint)
        if model.dim != config.D:
            raise DimensionError(f"Checkpoint head expects D={model.dim}, run configuration has D={config.D}")
        return HeadScorer(model.head, config.T, attention=not args.no_attention)
    return CosineScorer(config.T, attention=not args.no_attention)


def _track_one(seq_dir: str, args: argparse.Namespace, output: RunOutput) -> SequenceResult:
    inputs = SequenceInputs.from_dir(seq_dir, args.embeddings)
    config = mot_io.load_config(args.config, inputs.info.frame_rate, seed=args.seed)
    needs_gt = [flag for flag, on in (("--sot oracle", args.sot == "oracle"),
                                       ("--oracle-embedder", args.oracle_embedder)) if on]
    if needs_gt and inputs.gt is None:
        raise UsageError(f"{', '.join(needs_gt)} needs ground truth in {Path(seq_dir) / 'gt' / 'gt.txt'}")
    embedder = None
    if args.oracle_embedder:
        embedder = OracleEmbedder(len(inputs.gt_identities()), config.D, args.oracle_noise, config.seed)
    sot = OracleSOT() if args.sot == "oracle" else ConstantVelocitySOT()
    name = inputs.info.name
    result = run_sequence(inputs, config, build_scorer(args, config), sot, embedder,
                          out_path=output.path(f"{name}.txt"), timing=args.timing)
    write_csv(output.path(f"{name}.telemetry.csv"), TELEMETRY_HEADER, [f.row() for f in result.frames])
    return result


async def cmd_track(args: argparse.Namespace) -> int:
    """Track every sequence directory; sequences run in parallel with --jobs > 1."""
    jobs = max(1, args.jobs if args.jobs is not None else settings.JOBS)
    out = _output_dir(args)
    with RunOutput(out, args.force) as output:
        semaphore = asyncio.Semaphore(jobs)

        async def track(seq_dir: str) -> SequenceResult:
            async with semaphore:
                if jobs == 1:
                    return _track_one(seq_dir, args, output)
                return await asyncio.to_thread(_track_one, seq_dir, args, output)

        results = await asyncio.gather(*(track(d) for d in args.seq_dirs))
        names = [r.name for r in results]
        if len(set(names)) != len(names):
            raise UsageError(f"Sequence names must be unique, got {names}")

        reports = [r.report for r in results if r.report is not None]
        if reports:
            frames = sum(len(r.frames) for r in results)
            text = write_report(output, reports + [metrics.aggregate(reports)], "TRACKING REPORT",
                                status=(f"sequences: {len(results)}", f"frames: {frames}"))
            print(text, end="")
        RunManifest("track", list(args.seq_dirs), args.config, args.seed, str(out), {
            "embeddings": args.embeddings, "checkpoint": args.checkpoint, "sot": args.sot,
            "oracle_embedder": args.oracle_embedder, "cosine_fallback": args.cosine_fallback,
            "no_attention": args.no_attention, "no_sture": args.no_sture, "timing": args.timing,
        }).write(output.path(MANIFEST))
    return 0


# ---------------------------------------------------------------------------
# train / export
# ---------------------------------------------------------------------------

def _write_training(output: RunOutput, state: mutual_trainer.TrainState) -> None:
    mutual_trainer.save_checkpoint(state.model, output.path("checkpoint.stu"))
    write_csv(output.path("telemetry.csv"), mutual_trainer.TELEMETRY_HEADER, [r.row() for r in state.telemetry])


def cmd_train(args: argparse.Namespace) -> int:
    spec = mot_io.load_dataset_spec(args.dataset_spec)
    config = mot_io.load_train_config(
        args.config, seed=args.seed, epochs=args.epochs, attention=False if args.no_attention else None,
    )
    dataset = mutual_trainer.generate_dataset(spec, "train")
    out = _output_dir(args)
    manifest = RunManifest("train", [args.dataset_spec], args.config, config.seed, str(out), {
        "epochs": config.epochs, "attention": config.attention,
    })
    with RunOutput(out, args.force) as output:
        try:
            state = mutual_trainer.train(dataset, config)
        except DivergenceError as e:
            if e.last_good is not None:
                _write_training(output, e.last_good)
                manifest.write(output.path(MANIFEST))
                output.commit()
                logger.error(f"Training diverged; last good checkpoint kept in {out}")
            raise
        _write_training(output, state)

        if spec.sequences >= 2:
            probe = mutual_trainer.generate_dataset(spec, "probe")
            model_name = "sture" if config.attention else "no_attention"
            rows = [
                [model_name, repr(mutual_trainer.retrieval_accuracy(state.model, probe, config.T, config.M, seed=config.seed))],
                ["raw", repr(mutual_trainer.retrieval_accuracy(None, probe, config.T, config.M, seed=config.seed))],
            ]
            write_csv(output.path("retrieval.csv"), ["features", "accuracy"], rows)
            print(screen.format_report("RETRIEVAL", ["features", "accuracy"], rows), end="")
        else:
            logger.warning("Dataset has fewer than 2 sequences per identity; skipping retrieval")
        manifest.write(output.path(MANIFEST))
    return 0


def cmd_export_embeddings(args: argparse.Namespace) -> int:
    model = mutual_trainer.load_checkpoint(args.checkpoint)
    spec = mot_io.load_dataset_spec(args.dataset_spec)
    config = mot_io.load_train_config(args.config, seed=args.seed)
    dataset = mutual_trainer.generate_dataset(spec, args.split)
    rows = mutual_trainer.export_embeddings(model, dataset, config.T, config.M, seed=config.seed)
    out = _output_dir(args)
    with RunOutput(out, args.force) as output:
        header = ["identity", "split", "index"] + [f"e{i}" for i in range(model.dim)]
        write_csv(output.path("embeddings.csv"), header, [
            [row.identity, row.split, row.index] + [mot_io.format_real(float(v)) for v in row.vector]
            for row in rows
        ])
        RunManifest("export", [args.checkpoint, args.dataset_spec], args.config, config.seed, str(out),
                    {"split": args.split}).write(output.path(MANIFEST))
    logger.info(f"Exported {len(rows)} embeddings")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args: argparse.Namespace) -> int:
    gt = [r for r in mot_io.parse_detections(args.gt) if r.confidence != 0]
    hyp = mot_io.parse_detections(args.results)
    frames = max([r.frame for r in gt + hyp], default=0)
    report = metrics.evaluate(gt, hyp, name=Path(args.results).stem, frames=frames)
    out = _output_dir(args)
    with RunOutput(out, args.force) as output:
        print(write_report(output, [report], "EVALUATION REPORT"), end="")
        RunManifest("eval", [args.gt, args.results], None, None, str(out)).write(output.path(MANIFEST))
    return 0


# ---------------------------------------------------------------------------
# scenario / sweep
# ---------------------------------------------------------------------------

def _scenario_spec(args: argparse.Namespace, **defaults) -> ScenarioSpec:
    values = dict(defaults)
    for key in ("identities", "frames", "noise", "occlusion", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    return ScenarioSpec.from_mapping(values)


def cmd_scenario(args: argparse.Namespace) -> int:
    spec = _scenario_spec(args)
    out = Path(args.out_dir)
    with RunOutput(out, args.force) as output:
        write_scenario(build_scenario(spec, name=out.name), output.staging)
        RunManifest("scenario", [], None, spec.seed, str(out), spec.to_dict()).write(output.path(MANIFEST))
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    """Track the synthetic scenario once per value of one tracker parameter."""
    param = args.param
    if param not in TrackerConfig.valid_keys():
        raise UsageError(f"Unknown sweep parameter '{param}' (valid: {', '.join(TrackerConfig.valid_keys())})")
    raw_values = args.values or SWEEP_DEFAULTS.get(param)
    if not raw_values:
        raise UsageError(f"--values is required when sweeping '{param}'")
    values = [v.strip() for v in raw_values.split(",") if v.strip()]
    spec = _scenario_spec(args, noise=0.05)
    out = _output_dir(args)
    with RunOutput(out, args.force) as output:
        scenario_dir = write_scenario(build_scenario(spec), output.path("scenario"))
        inputs = SequenceInputs.from_dir(scenario_dir)
        rows = []
        for value in values:
            config = mot_io.load_config(args.config, inputs.info.frame_rate, seed=args.seed, **{param: value})
            result = run_sequence(inputs, config, build_scorer(args, config))
            report = result.report
            logger.info(f"sweep {param}={value}: MOTA={report.mota} IDS={report.ids}")
            rows.append([param, value] + [metrics.format_value(c, report.values()[c])
                                          for c in ("MOTA", "MOTP", "IDF1", "IDS")])
        write_csv(output.path("sweep.csv"), ["param", "value", "MOTA", "MOTP", "IDF1", "IDS"], rows)
        print(screen.format_report(f"SWEEP {param}", ["value", "MOTA", "MOTP", "IDF1", "IDS"],
                                   [row[1:] for row in rows]), end="")
        RunManifest("sweep", [], args.config, args.seed, str(out), {"param": param, "values": values}).write(
            output.path(MANIFEST))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

Handler = Callable[[argparse.Namespace], Any]

COMMANDS: Dict[str, Handler] = {
    "track": cmd_track,
    "train": cmd_train,
    "eval": cmd_eval,
    "export": cmd_export_embeddings,
    "sweep": cmd_sweep,
    "scenario": cmd_scenario,
}

ALIASES = {
    "eval": ["evaluate"],
    "export": ["export-embeddings"],
}


def _shared_flags() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="INI file with tracker keys and optional [train] section")
    shared.add_argument("--seed", type=int, help="seed for all randomness (overrides the config)")
    shared.add_argument("--out", help="output directory (default: $STURE_OUTPUT_DIR/<subcommand>)")
    shared.add_argument("--force", action="store_true", help="replace an existing output directory")
    shared.add_argument("--jobs", type=int, help="sequences tracked in parallel (default: $STURE_JOBS)")
    return shared


def _scorer_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", help="STU1 checkpoint whose affinity head scores candidates")
    parser.add_argument("--cosine-fallback", action="store_true", help="score with cosine similarity")
    parser.add_argument("--no-attention", action="store_true", help="pool histories without temporal attention")
    parser.add_argument("--no-sture", action="store_true", help="raw-feature cosine association")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sture", description="Online multi-object tracking with mutual representations")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    shared = _shared_flags()

    def add(name: str, **kwargs) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[shared], aliases=ALIASES.get(name, []), **kwargs)
        p.set_defaults(handler=COMMANDS[name], command_name=name)
        return p

    p = add("track", help="track MOTChallenge sequence directories")
    p.add_argument("seq_dirs", nargs="+", metavar="SEQ_DIR")
    p.add_argument("--embeddings", help="EMB1 file (single sequence); default <SEQ_DIR>/det/det.emb")
    p.add_argument("--sot", choices=["cv", "oracle"], default="cv", help="single-object tracker")
    p.add_argument("--oracle-embedder", action="store_true", help="one-hot embeddings from ground truth")
    p.add_argument("--oracle-noise", type=float, default=0.0, help="noise of the oracle embedder")
    p.add_argument("--timing", action="store_true", help="measure Hz")
    _scorer_flags(p)

    p = add("train", help="train the mutual representation model")
    p.add_argument("dataset_spec", metavar="DATASET_SPEC")
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-attention", action="store_true", help="train without temporal attention")

    p = add("eval", help="evaluate a result file against ground truth")
    p.add_argument("gt", metavar="GT")
    p.add_argument("results", metavar="RESULTS")

    p = add("export", help="export learned embeddings as CSV")
    p.add_argument("checkpoint", metavar="CHECKPOINT")
    p.add_argument("dataset_spec", metavar="DATASET_SPEC")
    p.add_argument("--split", choices=["train", "probe"], default="train")

    p = add("sweep", help="sweep one tracker parameter on the synthetic scenario")
    p.add_argument("--param", default="T")
    p.add_argument("--values", help="comma-separated values (default for T: 2,4,8,16)")
    for flag, kind in (("--identities", int), ("--frames", int), ("--noise", float), ("--occlusion", int)):
        p.add_argument(flag, type=kind)
    _scorer_flags(p)

    p = add("scenario", help="write a synthetic sequence directory")
    p.add_argument("out_dir", metavar="OUT_DIR")
    for flag, kind in (("--identities", int), ("--frames", int), ("--noise", float), ("--occlusion", int)):
        p.add_argument(flag, type=kind)
    return parser


async def run_command(args: argparse.Namespace) -> int:
    result = args.handler(args)
    if asyncio.iscoroutine(result):
        result = await result
    return result
