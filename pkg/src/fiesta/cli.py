"""Pipeline orchestration over files.

Six subcommands cover the whole workflow: `phantom` emits a synthetic
dataset, `train` fits the autoencoder on a tractogram, `calibrate` derives
per-bundle distance thresholds from labeled data, `segment` splits
tractograms into bundles, `generate` densifies segmented bundles and
concatenates the result, and `evaluate` scores bundle sets across repeat
timepoints.

Settings come from an optional JSON config file (--config) with command
line flags taking precedence; every flag mirrors a config key of the same
name. The only environment input is FIESTA_LOG, one of error, warn, info,
or debug (default warn). Any pipeline failure prints a single
"error: <reason>" line to stderr and exits nonzero; outputs are pure
functions of inputs plus the seed, so re-running a subcommand rewrites
identical files.

Dataset directories written by `phantom` hold atlas.stf, one
timepoint_<jj>.stf per repeat, wm_mask.vgf, peaks.vgf, and
ground_truth.json; downstream subcommands locate those files by name.
Segment and generate write one bundle_<label>.stf per bundle under per-
timepoint subdirectories, which is the layout evaluate scans.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .autoenc import ModelConfig, TrainConfig, init_model, train
from .calibrate import calibrate
from .core import Bundle, Tractogram, resample_streamline
from .errors import ConfigError, FiestaError
from .generate import (
    DEFAULT_N_SEEDS,
    DEFAULT_N_TARGET,
    FilterParams,
    generate_bundle,
)
from .metrics import test_retest_report
from .phantom import PhantomConfig, default_bundles, make_phantom
from .qbx import DEFAULT_THRESHOLDS, quickbundlesx
from .segment import build_atlas_index, canonical_orientation, segment_tractogram

__all__ = ["PipelineConfig", "main", "run"]

logger = logging.getLogger(__name__)

LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

BUNDLE_FILE = re.compile(r"^bundle_(\d+)\.stf$")


def _parse_ratio(value):
    """Seed mix as a float fraction or an 'a:b' split."""
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, (tuple, list)):
        if len(value) != 2:
            raise ValueError(f"ratio list must have two parts, got {value!r}")
        return (float(value[0]), float(value[1]))
    text = str(value)
    if ":" in text:
        left, _, right = text.partition(":")
        return (float(left), float(right))
    return float(text)


def _parse_float_list(value):
    if isinstance(value, (tuple, list)):
        return tuple(float(v) for v in value)
    return tuple(float(part) for part in str(value).split(",") if part.strip())


def _parse_int_list(value):
    if isinstance(value, (tuple, list)):
        return tuple(int(v) for v in value)
    return tuple(int(part) for part in str(value).split(",") if part.strip())


@dataclasses.dataclass
class PipelineConfig:
    """Every tunable of every subcommand, with pipeline-wide defaults.

    Fields irrelevant to the running subcommand are ignored. Path fields
    default to None and each subcommand raises a ConfigError naming the
    missing key it needs.
    """

    seed: int = 0
    threads: int | None = None
    deterministic: bool = False
    output: str | None = None
    lam: float = 400.0
    margin: float = 1.25
    latent_dim: int = 32
    input_points: int = 256
    channel_plan: tuple[int, ...] | None = None
    qbx_thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    gmm_components: int = 11
    n_target: int = DEFAULT_N_TARGET
    n_seeds: int = DEFAULT_N_SEEDS
    ratio: object = 0.5
    thresholds: str | None = None
    model: str | None = None
    dataset: str | None = None
    tractogram: str | None = None
    bundles: str | None = None
    subject: str = "s1"
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-3
    pairs_per_batch: int = 128
    pair_level: int | None = None
    timepoints: int = 1
    n_streamlines: int = 200
    n_implausible: int = 400
    translation_sigma_mm: float = 0.5
    rotation_sigma_deg: float = 0.5


# JSON key -> (dataclass field, caster). Flags reuse the same keys, so the
# merge logic below treats both sources uniformly.
CONFIG_SCHEMA = {
    "seed": ("seed", int),
    "threads": ("threads", int),
    "deterministic": ("deterministic", bool),
    "output": ("output", str),
    "lambda": ("lam", float),
    "margin": ("margin", float),
    "latent_dim": ("latent_dim", int),
    "input_points": ("input_points", int),
    "channel_plan": ("channel_plan", _parse_int_list),
    "qbx_thresholds": ("qbx_thresholds", _parse_float_list),
    "gmm_components": ("gmm_components", int),
    "n_target": ("n_target", int),
    "n_seeds": ("n_seeds", int),
    "ratio": ("ratio", _parse_ratio),
    "thresholds": ("thresholds", str),
    "model": ("model", str),
    "dataset": ("dataset", str),
    "tractogram": ("tractogram", str),
    "bundles": ("bundles", str),
    "subject": ("subject", str),
    "epochs": ("epochs", int),
    "batch_size": ("batch_size", int),
    "learning_rate": ("learning_rate", float),
    "pairs_per_batch": ("pairs_per_batch", int),
    "pair_level": ("pair_level", int),
    "timepoints": ("timepoints", int),
    "n_streamlines": ("n_streamlines", int),
    "n_implausible": ("n_implausible", int),
    "translation_sigma_mm": ("translation_sigma_mm", float),
    "rotation_sigma_deg": ("rotation_sigma_deg", float),
}


def load_config(path) -> PipelineConfig:
    """Read a JSON config file; unknown keys and bad values are errors."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    config = PipelineConfig()
    apply_settings(config, raw)
    return config


def apply_settings(config: PipelineConfig, settings: dict) -> PipelineConfig:
    for key, value in settings.items():
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f'unknown config key "{key}"')
        field, caster = CONFIG_SCHEMA[key]
        try:
            setattr(config, field, caster(value))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f'bad value for config key "{key}": {exc}') from None
    return config


def _threads_context(config: PipelineConfig):
    limit = 1 if config.deterministic else config.threads
    if limit is None:
        return contextlib.nullcontext()
    return threadpool_limits(limits=limit)


def _require(value, key: str, hint: str):
    if value is None:
        raise ConfigError(f'{hint} (config key or flag "{key}")')
    return value


def _output_dir(config: PipelineConfig) -> Path:
    out = Path(_require(config.output, "output", "an output directory is required"))
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------ dataset files


def _dataset_dir(config: PipelineConfig) -> Path:
    dataset = Path(_require(config.dataset, "dataset", "a dataset directory is required"))
    if not dataset.is_dir():
        raise ConfigError(f"dataset directory {dataset} does not exist")
    return dataset


def _timepoint_files(dataset: Path) -> list[Path]:
    files = sorted(dataset.glob("timepoint_*.stf"))
    if not files:
        raise ConfigError(f"dataset {dataset} holds no timepoint_*.stf files")
    return files


def _read_names(dataset: Path) -> dict[int, str]:
    truth = io.read_report(dataset / "ground_truth.json")
    names = truth.get("names", {})
    return {int(label): str(name) for label, name in names.items()}


def _read_atlas(dataset: Path) -> list[Bundle]:
    tractogram = io.read_tractogram(dataset / "atlas.stf")
    if tractogram.labels is None:
        raise ConfigError(f"atlas file in {dataset} carries no labels")
    names = _read_names(dataset)
    bundles = []
    for label in np.unique(tractogram.labels):
        members = [
            s for s, l in zip(tractogram.streamlines, tractogram.labels) if l == label
        ]
        bundles.append(
            Bundle(
                label=int(label),
                name=names.get(int(label), f"bundle{label}"),
                streamlines=members,
                reference=tractogram.reference,
            )
        )
    return bundles


def _child_seed(*parts) -> int:
    return int(np.random.SeedSequence(tuple(int(p) for p in parts)).generate_state(1)[0])


# ------------------------------------------------------------- subcommands


def _cmd_phantom(config: PipelineConfig) -> int:
    out = _output_dir(config)
    phantom_config = PhantomConfig(
        bundles=default_bundles(n_streamlines=config.n_streamlines),
        n_implausible=config.n_implausible,
        n_timepoints=config.timepoints,
        translation_sigma_mm=config.translation_sigma_mm,
        rotation_sigma_deg=config.rotation_sigma_deg,
        seed=config.seed,
    )
    result = make_phantom(phantom_config)
    atlas_lines = [s for bundle in result.atlas for s in bundle.streamlines]
    atlas_labels = np.concatenate(
        [np.full(len(b.streamlines), b.label, dtype=np.int64) for b in result.atlas]
    )
    io.write_tractogram(
        Tractogram(streamlines=atlas_lines, reference=result.reference, labels=atlas_labels),
        out / "atlas.stf",
    )
    for j, timepoint in enumerate(result.timepoints):
        io.write_tractogram(timepoint, out / f"timepoint_{j:02d}.stf")
    io.write_volume(result.wm_mask, out / "wm_mask.vgf", dtype="u8")
    io.write_volume(result.peaks, out / "peaks.vgf", dtype="f32")
    io.write_report(
        {
            "labels": {str(i): int(label) for i, label in enumerate(result.labels)},
            "names": {str(label): name for label, name in result.names.items()},
            "timepoints": config.timepoints,
        },
        out / "ground_truth.json",
    )
    logger.info("phantom dataset written to %s", out)
    print(out)
    return 0


def _prepared_streamlines(tractogram: Tractogram, n_points: int) -> np.ndarray:
    lines = [
        resample_streamline(canonical_orientation(np.asarray(s, dtype=np.float64)), n_points)
        for s in tractogram.streamlines
    ]
    return np.asarray(lines)


def _cmd_train(config: PipelineConfig) -> int:
    out = _output_dir(config)
    if config.tractogram is not None:
        source = Path(config.tractogram)
    else:
        source = _timepoint_files(_dataset_dir(config))[0]
    tractogram = io.read_tractogram(source)
    prepared = _prepared_streamlines(tractogram, config.input_points)
    model_config = ModelConfig(
        input_points=config.input_points,
        latent_dim=config.latent_dim,
        channel_plan=config.channel_plan or ModelConfig().channel_plan,
        seed=config.seed,
    )
    model = init_model(model_config)
    train_config = TrainConfig(
        lam=config.lam,
        margin=config.margin,
        batch_size=config.batch_size,
        epochs=config.epochs,
        learning_rate=config.learning_rate,
        pairs_per_batch=config.pairs_per_batch,
        pair_level=config.pair_level,
        seed=config.seed,
        deterministic=config.deterministic,
    )
    tree = None
    if train_config.lam > 0:
        tree = quickbundlesx(prepared, thresholds=config.qbx_thresholds, seed=config.seed)
    with _threads_context(config):
        model, history = train(model, prepared, tree, train_config)
    io.write_model(model, out / "model.fae")
    io.write_report(
        {
            "n_streamlines": int(prepared.shape[0]),
            "epochs": config.epochs,
            "first": history[0],
            "last": history[-1],
            "history": history,
        },
        out / "train_report.json",
    )
    logger.info("model written to %s", out / "model.fae")
    print(out / "model.fae")
    return 0


def _cmd_calibrate(config: PipelineConfig) -> int:
    out = _output_dir(config)
    model = io.read_model(_require(config.model, "model", "calibration needs a trained model"))
    dataset = _dataset_dir(config)
    atlas = _read_atlas(dataset)
    labeled = io.read_tractogram(_timepoint_files(dataset)[0])
    if labeled.labels is None:
        raise ConfigError("calibration tractogram must carry ground-truth labels")
    names = {bundle.label: bundle.name for bundle in atlas}
    positives = []
    for label in np.unique(labeled.labels):
        if label == 0:
            continue
        members = [
            s for s, l in zip(labeled.streamlines, labeled.labels) if l == label
        ]
        positives.append(
            Bundle(
                label=int(label),
                name=names.get(int(label), f"bundle{label}"),
                streamlines=members,
                reference=labeled.reference,
            )
        )
    negatives = [
        s for s, l in zip(labeled.streamlines, labeled.labels) if l == 0
    ]
    index = build_atlas_index(model, atlas)
    with _threads_context(config):
        table, report = calibrate(model, index, positives, negatives)
    io.write_threshold_table(table, out / "thresholds.json")
    io.write_report(report, out / "calibration_report.json")
    logger.info("thresholds written to %s", out / "thresholds.json")
    print(out / "thresholds.json")
    return 0


def _cmd_segment(config: PipelineConfig) -> int:
    if config.thresholds is None:
        raise ConfigError("segment requires --thresholds (path to a threshold table)")
    out = _output_dir(config)
    model = io.read_model(_require(config.model, "model", "segmentation needs a trained model"))
    dataset = _dataset_dir(config)
    atlas = _read_atlas(dataset)
    table = io.read_threshold_table(config.thresholds)
    index = build_atlas_index(model, atlas)
    summary = {}
    for j, path in enumerate(_timepoint_files(dataset)):
        tractogram = io.read_tractogram(path)
        unlabeled = Tractogram(
            streamlines=tractogram.streamlines, reference=tractogram.reference
        )
        with _threads_context(config):
            result = segment_tractogram(model, index, table, unlabeled)
        timepoint_dir = out / f"t{j:02d}"
        timepoint_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "source": path.name,
            "n_input": len(tractogram.streamlines),
            "n_rejected": int(result.rejected.shape[0]),
            "bundles": {},
        }
        for label, bundle in sorted(result.bundles.items()):
            filename = f"bundle_{label}.stf"
            io.write_tractogram(
                Tractogram(streamlines=bundle.streamlines, reference=bundle.reference),
                timepoint_dir / filename,
            )
            manifest["bundles"][str(label)] = {
                "name": bundle.name,
                "count": len(bundle.streamlines),
                "file": filename,
            }
        io.write_report(manifest, timepoint_dir / "manifest.json")
        summary[f"t{j:02d}"] = {
            "n_input": manifest["n_input"],
            "n_rejected": manifest["n_rejected"],
            "n_kept": manifest["n_input"] - manifest["n_rejected"],
        }
    io.write_report(summary, out / "segment_report.json")
    logger.info("segmented bundles written to %s", out)
    print(out)
    return 0


def _timepoint_dirs(root: Path) -> list[Path]:
    dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not dirs:
        raise ConfigError(f"no timepoint directories under {root}")
    return dirs


def _bundle_files(directory: Path) -> dict[int, Path]:
    found = {}
    for path in sorted(directory.iterdir()):
        match = BUNDLE_FILE.match(path.name)
        if match:
            found[int(match.group(1))] = path
    return found


def _cmd_generate(config: PipelineConfig) -> int:
    out = _output_dir(config)
    model = io.read_model(_require(config.model, "model", "generation needs a trained model"))
    dataset = _dataset_dir(config)
    atlas = {bundle.label: bundle for bundle in _read_atlas(dataset)}
    wm = io.read_volume(dataset / "wm_mask.vgf")
    peaks = io.read_volume(dataset / "peaks.vgf")
    bundles_root = Path(
        _require(config.bundles, "bundles", "generation needs segmented bundles")
    )
    if not bundles_root.is_dir():
        raise ConfigError(f"bundle directory {bundles_root} does not exist")
    for j, timepoint_dir in enumerate(_timepoint_dirs(bundles_root)):
        generated_dir = out / "generated" / timepoint_dir.name
        fiesta_dir = out / "fiesta" / timepoint_dir.name
        generated_dir.mkdir(parents=True, exist_ok=True)
        fiesta_dir.mkdir(parents=True, exist_ok=True)
        reports = {}
        for label, path in sorted(_bundle_files(timepoint_dir).items()):
            if label not in atlas:
                raise ConfigError(f"bundle label {label} from {path} is not in the atlas")
            segmented = io.read_tractogram(path)
            subject_bundle = Bundle(
                label=label,
                name=atlas[label].name,
                streamlines=segmented.streamlines,
                reference=segmented.reference,
            )
            with _threads_context(config):
                generated, report = generate_bundle(
                    model,
                    subject_bundle,
                    atlas[label],
                    peaks,
                    wm,
                    params=FilterParams(),
                    n_target=config.n_target,
                    n_seeds=config.n_seeds,
                    gmm_components=config.gmm_components,
                    ratio=config.ratio,
                    seed=_child_seed(config.seed, j, label),
                )
            io.write_tractogram(
                Tractogram(streamlines=generated.streamlines, reference=generated.reference),
                generated_dir / path.name,
            )
            combined = subject_bundle.streamlines + generated.streamlines
            io.write_tractogram(
                Tractogram(streamlines=combined, reference=generated.reference),
                fiesta_dir / path.name,
            )
            report["n_segmented"] = len(subject_bundle.streamlines)
            report["n_combined"] = len(combined)
            reports[str(label)] = report
        io.write_report(reports, out / f"generation_report_{timepoint_dir.name}.json")
    logger.info("generated bundles written to %s", out)
    print(out)
    return 0


def _cmd_evaluate(config: PipelineConfig) -> int:
    out = _output_dir(config)
    root = Path(_require(config.bundles, "bundles", "evaluation needs bundle directories"))
    if not root.is_dir():
        raise ConfigError(f"bundle directory {root} does not exist")
    # Two layouts: <root>/<timepoint>/bundle_*.stf for a single subject, or
    # <root>/<subject>/<timepoint>/bundle_*.stf for several.
    first_level = _timepoint_dirs(root)
    single_subject = any(_bundle_files(d) for d in first_level)
    if single_subject:
        subjects = {config.subject: first_level}
    else:
        subjects = {d.name: _timepoint_dirs(d) for d in first_level}
    table = {}
    reference = None
    for subject, timepoint_dirs in sorted(subjects.items()):
        for timepoint_dir in timepoint_dirs:
            for label, path in sorted(_bundle_files(timepoint_dir).items()):
                tractogram = io.read_tractogram(path)
                if reference is None:
                    reference = tractogram.reference
                table[(subject, timepoint_dir.name, label)] = Bundle(
                    label=label,
                    name=f"bundle{label}",
                    streamlines=tractogram.streamlines,
                    reference=tractogram.reference,
                )
    if not table:
        raise ConfigError(f"no bundle_<label>.stf files found under {root}")
    report = test_retest_report(table, reference)
    io.write_report(report, out / "metrics_report.json")
    logger.info("metrics written to %s", out / "metrics_report.json")
    print(out / "metrics_report.json")
    return 0


COMMANDS = {
    "phantom": _cmd_phantom,
    "train": _cmd_train,
    "calibrate": _cmd_calibrate,
    "segment": _cmd_segment,
    "generate": _cmd_generate,
    "evaluate": _cmd_evaluate,
}


def run(command: str, config: PipelineConfig) -> int:
    """Execute one subcommand against a fully merged config."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    return COMMANDS[command](config)


# ------------------------------------------------------------ entry point


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--threads", type=int, metavar="N")
    common.add_argument("--deterministic", action="store_true", default=None)
    common.add_argument("--output", metavar="DIR")
    common.add_argument("--lambda", dest="lambda_", type=float, metavar="X")
    common.add_argument("--margin", type=float, metavar="X")
    common.add_argument("--latent-dim", type=int, metavar="D")
    common.add_argument("--qbx-thresholds", metavar="MM,MM,...")
    common.add_argument("--gmm-components", type=int, metavar="K")
    common.add_argument("--n-target", type=int, metavar="N")
    common.add_argument("--ratio", metavar="A:B")
    common.add_argument("--thresholds", metavar="PATH")
    parser = argparse.ArgumentParser(
        prog="fiesta",
        description="Streamline bundle segmentation and completion pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("phantom", "emit a synthetic ground-truth dataset"),
        ("train", "train the streamline autoencoder"),
        ("calibrate", "derive per-bundle segmentation thresholds"),
        ("segment", "split tractograms into atlas bundles"),
        ("generate", "densify segmented bundles"),
        ("evaluate", "score bundles across repeat timepoints"),
    ):
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


FLAG_KEYS = {
    "seed": "seed",
    "threads": "threads",
    "deterministic": "deterministic",
    "output": "output",
    "lambda_": "lambda",
    "margin": "margin",
    "latent_dim": "latent_dim",
    "qbx_thresholds": "qbx_thresholds",
    "gmm_components": "gmm_components",
    "n_target": "n_target",
    "ratio": "ratio",
    "thresholds": "thresholds",
}


def _configure_logging():
    name = os.environ.get("FIESTA_LOG", "warn").strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(
            f"FIESTA_LOG must be one of {', '.join(sorted(LOG_LEVELS))}, got {name!r}"
        )
    logging.basicConfig(
        level=LOG_LEVELS[name],
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _configure_logging()
        if args.config is not None:
            config = load_config(args.config)
        else:
            config = PipelineConfig()
        overrides = {
            FLAG_KEYS[attr]: value
            for attr, value in vars(args).items()
            if attr in FLAG_KEYS and value is not None
        }
        apply_settings(config, overrides)
        return run(args.command, config)
    except (FiestaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
