"""Command-line surface: synthetic data, training, benchmarking, evaluation, gradient checks and data download."""

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from src.audiofuse.checkpoint import canonical_json, load_checkpoint, save_checkpoint
from src.audiofuse.dsp import MelConfig
from src.audiofuse.errors import AudioFuseError, NumericError, UsageError
from src.audiofuse.gradcheck import SIZES, format_table, run_gradcheck
from src.audiofuse.model import ARCH_FLAGS, AudioFuseModel, ModelConfig, parameter_table
from src.audiofuse.run_config import RunConfig, load_run_config
from src.audiofuse.signal_io import (
    CUE_MODES,
    SPLITS,
    ManifestEntry,
    SynthSpec,
    load_manifest,
    split_by_patient,
    write_synthetic_dataset,
)
from src.audiofuse.training import (
    EvalReport,
    FeatureSet,
    TrainConfig,
    aggregate,
    build_feature_set,
    compare_architectures,
    evaluate,
    format_comparison,
    select_split,
    train,
    write_history,
)
from src.utils.app_logger import AppLogger, setup_logging
from src.utils.config_variables import Config
from src.utils.physionet_client import TRAINING_SUBSETS, PhysioNetClient

CONFIG_FILE = "config.json"
HISTORY_FILE = "history.csv"
CHECKPOINT_FILE = "best.ckpt"
REPORT_FILE = "report.json"
BENCHMARK_FILE = "benchmark.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser(config: Config) -> argparse.ArgumentParser:
    parser = _Parser(prog="audiofuse", description="Dual-branch heart sound classifier")
    parser.add_argument(
        "--workers", type=int, default=config.workers, help="featurization threads (default %(default)s)"
    )
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    synth = commands.add_parser("synth", help="write a synthetic phonocardiogram dataset")
    synth.add_argument("--out", required=True)
    synth.add_argument("--n-per-class", type=int, required=True)
    synth.add_argument("--seed", type=int, default=None)
    synth.add_argument("--cue-mode", choices=CUE_MODES, default="both")
    synth.add_argument("--val-fraction", type=float, default=0.2)
    synth.add_argument("--force", action="store_true")

    train_cmd = commands.add_parser("train", help="train one architecture from a run configuration")
    train_cmd.add_argument("--config", required=True)
    train_cmd.add_argument("--arch", choices=sorted(ARCH_FLAGS), default=None)
    train_cmd.add_argument("--seed", type=int, default=None)
    train_cmd.add_argument("--seeds", default=None, help="comma-separated seeds for a multi-seed run")
    train_cmd.add_argument("--output-dir", default=None)

    benchmark = commands.add_parser("benchmark", help="compare architectures over several seeds on one split")
    benchmark.add_argument("--config", required=True)
    benchmark.add_argument("--archs", default="fuse-concat,vit,cnn", help="comma-separated arch flags")
    benchmark.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    benchmark.add_argument("--output-dir", default=None)

    eval_cmd = commands.add_parser("eval", help="evaluate a checkpoint on one manifest split")
    eval_cmd.add_argument("--checkpoint", required=True)
    eval_cmd.add_argument("--manifest", required=True)
    eval_cmd.add_argument("--split", choices=SPLITS, default="validation")
    eval_cmd.add_argument("--out", default=None)

    finetune = commands.add_parser("finetune", help="re-train the final dense layers of a checkpoint")
    finetune.add_argument("--checkpoint", required=True)
    finetune.add_argument("--config", required=True)
    finetune.add_argument("--output-dir", default=None)

    gradcheck = commands.add_parser("gradcheck", help="finite-difference check of every backward rule")
    gradcheck.add_argument("--size", choices=sorted(SIZES), default="mini")
    gradcheck.add_argument("--seeds", type=int, default=20)

    fetch = commands.add_parser("fetch", help="download the PhysioNet 2016 heart sound database")
    fetch.add_argument("--out", required=True)
    fetch.add_argument("--subsets", default=",".join(TRAINING_SUBSETS))
    fetch.add_argument("--force", action="store_true")

    commands.add_parser("params", help="print parameter counts of every architecture")
    return parser


def _parse_seeds(raw: str) -> List[int]:
    try:
        return [int(token) for token in raw.split(",") if token.strip()]
    except ValueError:
        raise UsageError(f"--seeds expects comma-separated integers, got {raw!r}") from None


def _write_json(path: Path, document) -> None:
    path.write_text(json.dumps(document, sort_keys=True, indent=2) + "\n", encoding="utf-8")


class AudioFuseCli:
    """
    Dispatch parsed arguments to the experiment commands
    """

    def __init__(self, config: Optional[Config] = None):
        self.config = config or Config()
        self.logger = AppLogger(__name__)
        self.workers = self.config.workers

    # Data preparation

    def _splits(self, run: RunConfig) -> Tuple[List[ManifestEntry], Path]:
        manifest = Path(run.data.manifest)
        entries = load_manifest(manifest)
        if not any(e.split == "validation" for e in entries):
            entries = split_by_patient(entries, run.data.val_fraction, run.data.split_seed)
        return entries, manifest.parent

    def _features(self, entries, manifest_dir: Path, cfg: ModelConfig, run: RunConfig, split: str) -> FeatureSet:
        return build_feature_set(
            select_split(entries, split),
            manifest_dir,
            need_spectrograms=cfg.arch != "cnn_only",
            need_waveforms=cfg.arch != "vit_only",
            stft_cfg=run.stft,
            mel_cfg=MelConfig(image_size=cfg.image_size),
            workers=self.workers,
            split=split,
            wave_len=cfg.wave_len,
            cache_dir=run.data.cache_dir or None,
        )

    def _fit(
        self,
        model: AudioFuseModel,
        run: RunConfig,
        train_cfg: TrainConfig,
        data: Tuple[FeatureSet, FeatureSet],
        out_dir: Path,
    ) -> EvalReport:
        out_dir.mkdir(parents=True, exist_ok=True)
        resolved = dataclasses.replace(run, model=model.cfg, train=train_cfg, output_dir=str(out_dir))
        (out_dir / CONFIG_FILE).write_text(resolved.to_json(), encoding="utf-8")
        result = train(model, data[0], data[1], train_cfg)
        write_history(result.history, out_dir / HISTORY_FILE)
        save_checkpoint(
            out_dir / CHECKPOINT_FILE,
            model,
            {"best_epoch": result.best_epoch, "eval_batch_size": train_cfg.batch_size},
        )
        _, report = evaluate(model, data[1], train_cfg.batch_size)
        _write_json(
            out_dir / REPORT_FILE,
            {
                "arch": model.cfg.arch_flag,
                "seed": train_cfg.seed,
                "best_epoch": result.best_epoch,
                "epochs_run": len(result.history),
                "parameters": model.num_parameters(),
                "validation": report.to_dict(),
            },
        )
        return report

    # Commands

    def cmd_synth(self, args) -> int:
        seed = self.config.seed if args.seed is None else args.seed
        spec = SynthSpec(n_per_class=args.n_per_class, rng_seed=seed, cue_mode=args.cue_mode)
        entries = write_synthetic_dataset(spec, args.out, force=args.force, val_fraction=args.val_fraction)
        print(f"wrote {len(entries)} clips to {args.out}")
        return 0

    def cmd_train(self, args) -> int:
        overrides = {}
        if args.seed is not None:
            overrides["train"] = {"seed": args.seed}
        if args.output_dir is not None:
            overrides["output_dir"] = args.output_dir
        run = load_run_config(args.config, overrides, default_seed=self.config.seed)
        model_cfg = run.model.with_arch_flag(args.arch) if args.arch else run.model
        entries, manifest_dir = self._splits(run)
        data = (
            self._features(entries, manifest_dir, model_cfg, run, "train"),
            self._features(entries, manifest_dir, model_cfg, run, "validation"),
        )
        out_dir = Path(run.output_dir)
        seeds = _parse_seeds(args.seeds) if args.seeds else [run.train.seed]

        if len(seeds) == 1:
            train_cfg = dataclasses.replace(run.train, seed=seeds[0])
            report = self._fit(AudioFuseModel(model_cfg, seeds[0]), run, train_cfg, data, out_dir)
            print(canonical_json(report.to_dict()))
            return 0

        reports = []
        for seed in seeds:
            train_cfg = dataclasses.replace(run.train, seed=seed)
            reports.append(
                self._fit(AudioFuseModel(model_cfg, seed), run, train_cfg, data, out_dir / f"seed-{seed}")
            )
        summary = aggregate(seeds, reports).to_dict()
        summary["arch"] = model_cfg.arch_flag
        _write_json(out_dir / REPORT_FILE, summary)
        print(canonical_json({"arch": summary["arch"], "mean": summary["mean"], "std": summary["std"]}))
        return 0

    def cmd_benchmark(self, args) -> int:
        flags = [token.strip() for token in args.archs.split(",") if token.strip()]
        unknown = sorted(set(flags) - set(ARCH_FLAGS))
        if unknown:
            raise UsageError(f"--archs has unknown architectures {unknown}, expected {sorted(ARCH_FLAGS)}")
        seeds = _parse_seeds(args.seeds)
        overrides = {"output_dir": args.output_dir} if args.output_dir else {}
        run = load_run_config(args.config, overrides, default_seed=self.config.seed)
        entries, manifest_dir = self._splits(run)
        # features for both branches serve every architecture
        both = run.model.with_arch_flag("fuse-concat")
        data = (
            self._features(entries, manifest_dir, both, run, "train"),
            self._features(entries, manifest_dir, both, run, "validation"),
        )
        out_dir = Path(run.output_dir)

        def run_one(flag: str, seed: int) -> EvalReport:
            train_cfg = dataclasses.replace(run.train, seed=seed)
            model = AudioFuseModel(run.model.with_arch_flag(flag), seed)
            return self._fit(model, run, train_cfg, data, out_dir / flag / f"seed-{seed}")

        results = compare_architectures(run_one, flags, seeds)
        _write_json(
            out_dir / BENCHMARK_FILE,
            {"seeds": seeds, "archs": {flag: result.to_dict() for flag, result in results.items()}},
        )
        print(format_comparison(results))
        return 0

    def cmd_eval(self, args) -> int:
        model, header = load_checkpoint(args.checkpoint)
        manifest = Path(args.manifest)
        entries = load_manifest(manifest)
        run = RunConfig(model=model.cfg)
        checkpoint_dir = Path(args.checkpoint).parent
        if (checkpoint_dir / CONFIG_FILE).is_file():
            run = load_run_config(checkpoint_dir / CONFIG_FILE)
        data = self._features(entries, manifest.parent, model.cfg, run, args.split)
        _, report = evaluate(model, data, int(header.get("eval_batch_size", 32)))
        document = {"arch": model.cfg.arch_flag, "split": args.split, "report": report.to_dict()}
        out = Path(args.out) if args.out else checkpoint_dir / f"eval-{args.split}.json"
        _write_json(out, document)
        self.logger.info("[EVAL] Checkpoint evaluated", {"checkpoint": args.checkpoint, "split": args.split})
        print(canonical_json(document))
        return 0

    def cmd_finetune(self, args) -> int:
        overrides = {"output_dir": args.output_dir} if args.output_dir else {}
        run = load_run_config(args.config, overrides, default_seed=self.config.seed)
        model, _ = load_checkpoint(args.checkpoint)
        entries, manifest_dir = self._splits(run)
        data = (
            self._features(entries, manifest_dir, model.cfg, run, "train"),
            self._features(entries, manifest_dir, model.cfg, run, "validation"),
        )
        train_cfg = dataclasses.replace(run.train, trainable="head")
        report = self._fit(model, run, train_cfg, data, Path(run.output_dir))
        print(canonical_json(report.to_dict()))
        return 0

    def cmd_gradcheck(self, args) -> int:
        rows = run_gradcheck(args.size, args.seeds)
        print(format_table(rows))
        failed = [row.component for row in rows if not row.passed]
        if failed:
            raise NumericError(f"gradient check failed for {', '.join(failed)}")
        return 0

    def cmd_fetch(self, args) -> int:
        client = PhysioNetClient(self.config)
        entries = client.fetch_dataset(args.out, args.subsets.split(","), force=args.force)
        print(f"wrote {len(entries)} records to {args.out}")
        return 0

    def cmd_params(self, args) -> int:
        for name, count in parameter_table().items():
            print(f"{name:<14} {count:>10,}")
        return 0

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        """
        Parse arguments and execute one command
        :param argv: Arguments without the program name; defaults to sys.argv
        :return: Process exit code
        """
        args = build_parser(self.config).parse_args(argv)
        self.workers = max(1, args.workers)
        handler = getattr(self, f"cmd_{args.command}")
        self.logger.debug("[CLI] Running command", {"command": args.command, "workers": self.workers})
        return handler(args)


def main(argv: Optional[Sequence[str]] = None, config: Optional[Config] = None) -> int:
    """Run the CLI and map expected failures to one `ERROR <category>:` line and an exit code."""
    config = config or Config()
    setup_logging(config.log_level, config.json_logging)
    try:
        return AudioFuseCli(config).run(argv)
    except AudioFuseError as err:
        print(err.one_line(), file=sys.stderr)
        return err.exit_code
