"""Command-line harness: synth-data, train, eval, ablate, params.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

if TYPE_CHECKING:
    from .evaluation import EvalReport

from .checkpoint import read_checkpoint
from .config import RunConfig, field_types, load_config, load_samples
from .datagen import ImageSample, dataset_hash, write_mvtec_layout
from .decoder import PAPER_SCALE, ParamLedger, count_parameters
from .errors import ConfigurationError, IngestionError, MetricError, NumericalError, UsageError
from .model import ProAD
from .training import load_model_state, train

log = logging.getLogger("proad")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

CONFIG_FILE = "config.txt"
CHECKPOINT_FILE = "checkpoint.bin"
REPORT_FILE = "report.txt"
ABLATION_FILE = "ablation.txt"

# Fields that fix the network; eval refuses to change them relative to the checkpoint.
MODEL_FIELDS = (
    "image_size", "patch_size", "dim", "encoder_layers", "fuse_from", "fuse_to", "encoder_seed",
    "drop_prob", "decoder_layers", "prototypes", "normalize_attention", "phi", "anb", "dynamic", "constraint",
)

ABLATION_ROWS = (
    (False, False, False),
    (True, False, False),
    (True, True, False),
    (True, True, True),
)
METRIC_COLUMNS = ("image_auroc", "image_ap", "image_f1_max", "pixel_auroc", "pixel_ap", "pixel_f1_max",
                  "pixel_aupro")

FLAG_ALIASES = {"decoder_layers": ["--layers"], "data_root": ["--data"]}
FIELD_HELP = {
    "data_root": "MVTec-layout dataset directory; empty means the synthetic benchmark",
    "resize_to": "resize side before center-cropping to image_size (0: image_size)",
    "prototypes": "number of prototypes M (0: one per patch)",
    "drop_prob": "bottleneck dropout on image features",
    "anb": "adaptive noisy bottleneck (dropout on features only)",
    "dynamic": "per-layer prototype updates",
    "constraint": "prototype-based constraint on the reconstruction",
    "tau": "decay exponent of the distance-weighted loss",
    "out": "output directory",
    "seed": "global seed (falls back to $PROAD_SEED)",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config assembly ---------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="key = value config file; flags override it")
    group = p.add_argument_group("run configuration")
    types = field_types()
    defaults = RunConfig()
    for f in fields(RunConfig):
        flags = [f"--{f.name.replace('_', '-')}"] + FLAG_ALIASES.get(f.name, [])
        kind = types[f.name]
        default = getattr(defaults, f.name)
        shown = ",".join(default) if isinstance(default, tuple) else default
        help_text = f"{FIELD_HELP.get(f.name, f.name.replace('_', ' '))} (default: {shown})"
        if kind == "bool":
            group.add_argument(*flags, dest=f.name, action=argparse.BooleanOptionalAction,
                               default=argparse.SUPPRESS, help=help_text)
        else:
            group.add_argument(*flags, dest=f.name, default=argparse.SUPPRESS, metavar=kind.upper().split("[")[0],
                               help=help_text)


def _explicit_values(args: argparse.Namespace) -> dict[str, str]:
    names = {f.name for f in fields(RunConfig)}
    out = {}
    for k, v in vars(args).items():
        if k in names:
            out[k] = ("true" if v else "false") if isinstance(v, bool) else str(v)
    return out


def resolve_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    """Defaults, then $PROAD_SEED, then the config file, then explicit flags."""
    cfg = base or RunConfig()
    env_seed = os.environ.get("PROAD_SEED")
    if base is None and env_seed:
        cfg = cfg.with_strings({"seed": env_seed})
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    return cfg.with_strings(_explicit_values(args))


def _snapshot(cfg: RunConfig) -> RunConfig:
    return cfg.replace(out="")


def _require_out(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise UsageError("--out is required")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- library-level runners ---------------------------------------------------

def run_training(cfg: RunConfig, run_dir: str | Path, samples: Sequence[ImageSample] | None = None,
                 features=None) -> ProAD:
    """Train one model into ``run_dir`` (config snapshot, log, checkpoint)."""
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snap = _snapshot(cfg)
    cfg_path = run_dir / CONFIG_FILE
    if (run_dir / CHECKPOINT_FILE).exists() and cfg_path.exists():
        _check_same(load_config(cfg_path), snap, fields=[f.name for f in fields(RunConfig)],
                    what=f"existing run in {run_dir}")
    cfg_path.write_text(snap.to_text())
    samples = load_samples(cfg) if samples is None else samples
    model = ProAD(cfg.model_config())
    meta = {"config": snap.to_text(), "dataset_hash": dataset_hash(samples)}
    train(model, samples, cfg.train_config(), run_dir=run_dir, meta=meta, features=features, progress=log.info)
    return model


def _check_same(expected: RunConfig, actual: RunConfig, fields: Sequence[str], what: str) -> None:
    for name in fields:
        a, b = getattr(expected, name), getattr(actual, name)
        if a != b:
            raise ConfigurationError(f"config field {name!r} differs from the {what}: {a!r} there, {b!r} here")


def load_trained(run_dir: str | Path) -> tuple[ProAD, RunConfig, dict]:
    path = Path(run_dir) / CHECKPOINT_FILE
    if not path.exists():
        raise IngestionError(f"no checkpoint at {path}")
    tensors, meta = read_checkpoint(path)
    ckpt_cfg = RunConfig.from_text(meta["config"])
    model = ProAD(ckpt_cfg.model_config())
    if meta.get("encoder_hash") not in (None, model.encoder.parameter_hash()):
        raise ConfigurationError("checkpoint was trained against a different encoder")
    load_model_state(model, tensors)
    return model, ckpt_cfg, meta


def run_eval(cfg: RunConfig, run_dir: str | Path, out_dir: str | Path | None = None, dump_maps: bool = False,
             samples: Sequence[ImageSample] | None = None) -> EvalReport:
    # scipy.stats is slow to import; keep it off the path of cheap commands.
    from .evaluation import evaluate, infer_maps, save_map_png

    model, ckpt_cfg, _ = load_trained(run_dir)
    _check_same(ckpt_cfg, cfg, MODEL_FIELDS, "checkpoint")
    samples = load_samples(cfg) if samples is None else samples
    test = [s for s in samples if s.split == "test"]
    maps = infer_maps(model, test)
    report = evaluate(model, test, cfg.fpr_limit, _snapshot(cfg).digest(), maps=maps)
    out = Path(out_dir or run_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / REPORT_FILE).write_text(report.to_text())
    if dump_maps:
        map_dir = out / "maps"
        map_dir.mkdir(exist_ok=True)
        for m in maps:
            save_map_png(m, map_dir)
    return report


@dataclass
class AblationResult:
    seeds: list[int]
    dataset_hash: str
    reports: dict[tuple[int, int], "EvalReport"]  # (row index, seed) -> report
    configs: dict[tuple[int, int], RunConfig]
    seconds: dict[tuple[int, int], float] = field(default_factory=dict)  # train + eval wall time

    def mean(self, row: int, key: str) -> float:
        vals = []
        for s in self.seeds:
            rep = self.reports[(row, s)]
            flat = {f"image_{k}": v for k, v in rep.image.items()}
            flat.update({f"pixel_{k}": v for k, v in rep.pixel.items()})
            flat.update(rep.extra)
            vals.append(flat[key])
        return float(np.mean(vals))

    def table(self) -> str:
        mark = {True: "yes", False: "no"}
        head = f"{'row':<4}{'anb':<5}{'dynamic':<9}{'constraint':<12}" + "".join(f"{c:>14}" for c in METRIC_COLUMNS)
        lines = [f"dataset_hash: {self.dataset_hash}", f"seeds: {','.join(map(str, self.seeds))}", head]
        for r, (anb, dyn, con) in enumerate(ABLATION_ROWS):
            cells = "".join(f"{self.mean(r, c):>14.6f}" for c in METRIC_COLUMNS)
            lines.append(f"{r + 1:<4}{mark[anb]:<5}{mark[dyn]:<9}{mark[con]:<12}{cells}")
        return "\n".join(lines) + "\n"


def ablation_config(cfg: RunConfig, row: int, seed: int) -> RunConfig:
    anb, dyn, con = ABLATION_ROWS[row]
    return cfg.replace(anb=anb, dynamic=dyn, constraint=con, seed=seed)


def run_ablation(cfg: RunConfig, seeds: Sequence[int], out_dir: str | Path,
                 progress: Callable[[str], None] | None = None) -> AblationResult:
    """Train and evaluate the four toggle rows for every seed, sequentially."""
    out_dir = Path(out_dir)
    samples = load_samples(cfg)
    data_hash = dataset_hash(samples)
    train_samples = [s for s in samples if s.split == "train"]
    features = None
    reports, configs, seconds = {}, {}, {}
    for seed in seeds:
        for r in range(len(ABLATION_ROWS)):
            start = time.perf_counter()
            run_cfg = ablation_config(cfg, r, seed)
            run_dir = out_dir / f"seed{seed}" / f"row{r + 1}"
            model = run_training(run_cfg, run_dir, samples, features)
            if features is None:
                features = model.encode(np.stack([s.pixels for s in train_samples]))
            reports[(r, seed)] = run_eval(run_cfg, run_dir, samples=samples)
            configs[(r, seed)] = run_cfg
            seconds[(r, seed)] = time.perf_counter() - start
            if progress is not None:
                progress(f"seed {seed} row {r + 1}: pixel_auroc={reports[(r, seed)].pixel['auroc']:.4f}")
    result = AblationResult(list(seeds), data_hash, reports, configs, seconds)
    (out_dir / ABLATION_FILE).write_text(result.table())
    return result


def format_ledger(ledger: ParamLedger) -> str:
    return "".join(f"{k.capitalize()}: {v:,}\n" for k, v in ledger.as_dict().items())


# -- commands ----------------------------------------------------------------

def cmd_synth_data(args, cfg: RunConfig) -> int:
    out = _require_out(cfg)
    cfg.dataset_spec().validate(cfg.patch_size)
    samples = load_samples(cfg.replace(data_root=""))
    write_mvtec_layout(samples, out)
    print(f"wrote {len(samples)} images to {out} (dataset_hash {dataset_hash(samples)})")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = _require_out(cfg)
    run_training(cfg, out)
    print(f"checkpoint: {out / CHECKPOINT_FILE}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    run_dir = Path(args.run or cfg.out or "")
    if not args.run and not cfg.out:
        raise UsageError("eval needs --run RUN_DIR (or --out pointing at one)")
    if args.config is None:
        # Unless a config file is given, start from the run's own snapshot.
        _, ckpt_cfg, _ = load_trained(run_dir)
        cfg = resolve_config(args, base=ckpt_cfg)
    report = run_eval(cfg, run_dir, cfg.out or run_dir, args.dump_maps)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = _require_out(cfg)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise UsageError("--seeds needs at least one seed")
    cfg.validate()
    result = run_ablation(cfg, seeds, out, progress=log.info)
    sys.stdout.write(result.table())
    return EXIT_OK


def cmd_params(args, cfg: RunConfig) -> int:
    if args.paper_scale:
        ledger = count_parameters(PAPER_SCALE["dim"], PAPER_SCALE["decoder_layers"], PAPER_SCALE["prototypes"])
    else:
        mc = cfg.model_config()
        mc.validate()
        ledger = count_parameters(mc.encoder.dim, mc.decoder_layers, mc.num_prototypes, mc.mlp_ratio)
    text = format_ledger(ledger)
    sys.stdout.write(text)
    if cfg.out:
        (_require_out(cfg) / "params.txt").write_text(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="proad", description="Prototype-based anomaly detection toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="write the synthetic benchmark in MVTec layout")
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train one model into --out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run")
    p.add_argument("--run", metavar="DIR", help="run directory holding the checkpoint")
    p.add_argument("--dump-maps", action="store_true", help="write <sample_id>_amap.png per test image")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the four component-toggle rows")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default: 0,1,2)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("params", help="print the parameter ledger")
    p.add_argument("--paper-scale", action="store_true", help="C=768, 8 decoder layers, M=789")
    _add_config_flags(p)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except (IngestionError, MetricError, OSError) as exc:
        print(f"proad: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"proad: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ConfigurationError) as exc:
        print(f"proad: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
