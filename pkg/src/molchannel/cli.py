"""Command-line entry point: train, eval, check, encode, gen-data.

Exit codes: 0 success, 1 usage error, 2 validation/data error,
3 divergence or failed check.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checks
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataError, Manifest, SyntheticSpec, TargetTransform, load_jsonl, write_dataset
from .encodings2d import encode_graph
from .encodings3d import gbf_features, pairwise_distances
from .model import Model, ModelConfig
from .molecule import ALL_MODES, Mode, ModeError, MoleculeError, available_modes
from .training import DivergedError, ModeDistribution, StepMetrics, TrainConfig, TrainState, evaluate, fit

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FAIL = 0, 1, 2, 3
RUN_CONFIG = "run_config.json"
METRICS = "metrics.csv"
FINAL = "final.ckpt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# configuration ------------------------------------------------------------------------------


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    n_molecules: int = 64
    data: str | None = None
    out: str | None = None
    checkpoint_every: int = 500

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "synthetic": self.synthetic.to_dict(),
            "n_molecules": self.n_molecules,
            "data": self.data,
            "out": self.out,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"model", "train", "synthetic", "n_molecules", "data", "out", "checkpoint_every"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            model=ModelConfig.from_dict(d.get("model", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            synthetic=SyntheticSpec.from_dict(d.get("synthetic", {})),
            n_molecules=int(d.get("n_molecules", 64)),
            data=d.get("data"),
            out=d.get("out"),
            checkpoint_every=int(d.get("checkpoint_every", 500)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _replace(obj, **changes):
    d = obj.to_dict()
    d.update(changes)
    return type(obj).from_dict(d)


def resolve_config(args) -> RunConfig:
    """Config file values, then command-line flags on top."""
    raw = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"config {args.config} is not valid JSON ({exc.msg})") from None
    try:
        cfg = RunConfig.from_dict(raw)
        train = {}
        if getattr(args, "seed", None) is not None:
            train["seed"] = args.seed
        if getattr(args, "steps", None) is not None:
            train["steps"] = args.steps
        if train:
            cfg.train = _replace(cfg.train, **train)
        if getattr(args, "data", None):
            cfg.data = args.data
        if getattr(args, "out", None):
            cfg.out = args.out
        if getattr(args, "n", None) is not None:
            cfg.n_molecules = args.n
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid configuration: {exc}") from None
    return cfg


def _mode(args) -> Mode | None:
    return None if getattr(args, "mode", None) is None else Mode.parse(args.mode)


def load_dataset(path) -> tuple[list, TargetTransform | None]:
    """Molecules from a JSON-lines file or a directory written by ``gen-data``.

    Returns the stored standardisation when a manifest sits next to the data.
    """
    if path is None:
        raise DataError("no dataset given (use --data or the config's 'data' key)")
    p = Path(path)
    manifest = None
    if p.is_dir():
        if (p / "manifest.json").exists():
            manifest = Manifest.load(p / "manifest.json")
            p = p / manifest.dataset
        else:
            p = p / "dataset.jsonl"
    elif (p.parent / "manifest.json").exists():
        m = Manifest.load(p.parent / "manifest.json")
        if m.dataset == p.name:
            manifest = m
    if not p.is_file():
        raise DataError(f"dataset not found: {path}")
    mols = load_jsonl(p)
    transform = None
    if manifest is not None and manifest.standardization:
        transform = TargetTransform(**manifest.standardization)
    return mols, transform


def _common_modes(mols) -> list[Mode]:
    sets = [set(available_modes(m)) for m in mols]
    common = set.intersection(*sets) if sets else set()
    return [m for m in ALL_MODES if m in common]


def _check_compatible(model: Model, mols) -> None:
    for k, m in enumerate(mols):
        try:
            model._check_vocab(m)
        except ValueError as exc:
            raise DataError(f"molecule {k}: {exc}") from None


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# commands -------------------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    mols, transform = load_dataset(cfg.data)
    if not mols:
        raise DataError("training set is empty")
    mode = _mode(args)
    if mode is not None:
        cfg.train = _replace(cfg.train, modes=ModeDistribution.only(mode).__dict__)
    if cfg.out is None:
        raise UsageError("train needs --out")
    state = None
    if args.resume:
        ck = load_checkpoint(args.resume)
        model = ck.model()
        cfg.model = ck.config
        state = ck.train_state()
        if "transform" in ck.extra:
            transform = TargetTransform(**ck.extra["transform"])
    else:
        model = Model(cfg.model, rng=np.random.default_rng(cfg.train.seed))
    _check_compatible(model, mols)
    transform = transform or TargetTransform.fit(mols)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    cfg.save(out / RUN_CONFIG)
    extra = {"transform": transform.to_dict(), "train": cfg.train.to_dict()}

    start = 0 if state is None else state.step
    rows = []
    metrics_path = out / METRICS
    if start and metrics_path.exists():
        with open(metrics_path, newline="") as fh:
            rows = [r for r in csv.reader(fh)][1:]
        rows = [r for r in rows if int(r[0]) < start]
    fh = open(metrics_path, "w", newline="")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(StepMetrics.FIELDS)
    writer.writerows(rows)
    last = {}

    def on_step(m: StepMetrics, st: TrainState):
        writer.writerow(m.row())
        last["metrics"] = m
        if cfg.checkpoint_every and st.step % cfg.checkpoint_every == 0 and st.step < cfg.train.steps:
            fh.flush()
            save_checkpoint(out / "checkpoints" / f"step_{st.step:06d}.ckpt", model, st, extra)

    try:
        state = fit(model, mols, cfg.train, transform, state, on_step)
    except DivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        fh.close()
    save_checkpoint(out / FINAL, model, state, extra)
    summary = {"steps": state.step, "final": None, "train_eval": []}
    if "metrics" in last:
        m = last["metrics"]
        summary["final"] = {f: getattr(m, f) for f in StepMetrics.FIELDS}
    labelled = [m for m in mols if m.target is not None]
    if labelled:
        summary["train_eval"] = [evaluate(model, labelled, md, transform) for md in _common_modes(labelled)]
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(_dump({"steps": state.step, "final": summary["final"]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    mols, transform = load_dataset(args.data)
    ck = load_checkpoint(args.checkpoint)
    model = ck.model()
    _check_compatible(model, mols)
    if "transform" in ck.extra:
        transform = TargetTransform(**ck.extra["transform"])
    transform = transform or TargetTransform()
    labelled = [m for m in mols if m.target is not None]
    if not labelled:
        raise DataError("dataset has no labelled molecules")
    mode = _mode(args)
    modes = [mode] if mode is not None else _common_modes(labelled)
    report = [evaluate(model, labelled, md, transform) for md in modes]
    for r in report:
        print(_dump(r))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def _model_for(args) -> Model:
    if args.checkpoint:
        return load_checkpoint(args.checkpoint).model()
    cfg = resolve_config(args)
    return Model(cfg.model, rng=np.random.default_rng(cfg.train.seed))


def cmd_check(args) -> int:
    model = _model_for(args)
    seed = 0 if args.seed is None else args.seed
    names = list(checks.SUITES) if args.suite == "all" else [args.suite]
    failed = []
    for name in names:
        for res in checks.SUITES[name](model, seed):
            print(res.line(), flush=True)
            if not res.passed:
                failed.append(res.name)
    if failed:
        print("failing: " + "; ".join(failed), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def encoding_record(model: Model, index: int, m) -> dict:
    cfg = model.config
    g = encode_graph(m, cfg.max_dist, cfg.max_degree)
    rec = {
        "index": index,
        "n_atoms": m.n_atoms,
        "spd_buckets": g.buckets.tolist(),
        "path_length": g.path_length.tolist(),
        "degrees": g.degree.tolist(),
    }
    if m.coords is not None:
        coords = np.asarray(m.coords, dtype=np.float64)
        rec["distances"] = pairwise_distances(coords).tolist()
        rec["psi"] = gbf_features(m, model.params.gbf).data.tolist()
    return rec


def cmd_encode(args) -> int:
    mols, _ = load_dataset(args.data)
    model = _model_for(args)
    _check_compatible(model, mols)
    lines = [_dump(encoding_record(model, k, m)) + "\n" for k, m in enumerate(mols)]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "encodings.jsonl").write_text("".join(lines), encoding="utf-8")
    else:
        sys.stdout.write("".join(lines))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    if cfg.out is None:
        raise UsageError("gen-data needs --out")
    cfg.synthetic.check()
    if cfg.n_molecules < 0:
        raise DataError("n_molecules must be non-negative")
    manifest = write_dataset(cfg.out, cfg.n_molecules, cfg.train.seed, cfg.synthetic)
    print(_dump({"out": str(cfg.out), "n_molecules": manifest.n_molecules,
                 "standardization": manifest.standardization}))
    return EXIT_OK


# parser ------------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="molchannel", description="Two-channel molecular transformer toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    modes = [m.value for m in ALL_MODES]

    def common(p, mode_help="channel mode"):
        p.add_argument("--config", help="JSON run configuration; flags override its keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", choices=modes, help=mode_help)

    p = sub.add_parser("train", help="train on a dataset")
    common(p, "train in this mode only (default: sample modes per instance)")
    p.add_argument("--data", help="dataset file or gen-data directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="MAE/MSE of a checkpoint on a dataset")
    common(p, "evaluate in this mode only (default: every mode the data supports)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="also write eval.json here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run invariant suites")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint to check (default: fresh init)")
    p.add_argument("--suite", choices=[*checks.SUITES, "all"], default="all")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("encode", help="dump structural encodings as JSON lines")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="kernel parameters for psi (default: fresh init)")
    p.add_argument("--out", help="directory for encodings.jsonl (default: stdout)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("gen-data", help="write a synthetic dataset and manifest")
    common(p)
    p.add_argument("--n", type=int, help="number of molecules")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MoleculeError, ModeError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
