"""Command-line surface for batch experimentation.

Subcommands: gen-data, pretrain, adapt, eval, ablate, grad-check,
project. Flags mirror the adaptation config field names one-to-one;
a config file (JSON or key=value lines) supplies defaults that
explicit flags override. Progress goes to stderr, artifacts to files,
and every artifact-producing run drops a config-echo JSON that is
sufficient to reproduce it.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from . import __version__
from .data import (
    DATASET_VERSION,
    DEFAULT_SHIFT,
    ShiftConfig,
    generate_domain_pair,
    load_dataset,
    save_dataset,
)
from .gradcheck import DEFAULT_POINTS, gradient_suite
from .nets import (
    CKPT_VERSION,
    BaseNetwork,
    ExaminerNetwork,
    load_checkpoint,
    save_checkpoint,
)
from .pipeline import (
    VARIANTS,
    AdaptationConfig,
    ablation_run,
    evaluate,
    export_feature_projection,
    pretrain_source,
    run_adaptation,
)

logger = logging.getLogger("cin")

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class CliError(RuntimeError):
    """Runtime failure that should exit with code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def default_out_dir() -> str:
    return os.environ.get("CIN_OUT_DIR", "cin-runs")


def load_config_file(path: str) -> dict:
    """JSON object, or key=value lines with JSON-style scalar values."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc}") from exc
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return json.loads(text)
    config = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            config[key] = json.loads(value)
        except json.JSONDecodeError:
            config[key] = value
    return config


def build_adaptation_config(args: argparse.Namespace) -> AdaptationConfig:
    """defaults <- config file <- explicit flags."""
    values: dict = {}
    if getattr(args, "config", None):
        file_values = load_config_file(args.config)
        known = {f.name for f in fields(AdaptationConfig)}
        unknown = set(file_values) - known
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        values.update(file_values)
    for f in fields(AdaptationConfig):
        if hasattr(args, f.name):
            values[f.name] = getattr(args, f.name)
    try:
        cfg = AdaptationConfig(**values)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from exc
    return cfg


def write_config_echo(out_dir: str, command: str, payload: dict) -> None:
    echo = {
        "command": command,
        "package_version": __version__,
        "format_versions": {"checkpoint": CKPT_VERSION, "dataset": DATASET_VERSION},
        **payload,
    }
    with open(os.path.join(out_dir, "config-echo.json"), "w") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)


def _require_file(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise CliError(f"{what} not found: {path}")
    return path


def _load_dataset(path: str, what: str):
    _require_file(path, what)
    return load_dataset(path)


def _save_network(net, path: str) -> None:
    save_checkpoint(path, net.parameters())
    with open(path + ".json", "w") as fh:
        json.dump({"arch": net.arch_config(), "kind": type(net).__name__}, fh, indent=2)


def _load_base_network(path: str) -> BaseNetwork:
    _require_file(path, "checkpoint")
    sidecar = path + ".json"
    _require_file(sidecar, "checkpoint arch sidecar")
    with open(sidecar) as fh:
        meta = json.load(fh)
    net = BaseNetwork.from_config(meta["arch"])
    net.load_state_dict(load_checkpoint(path))
    return net


# -- subcommands ----------------------------------------------------------


def cmd_gen_data(args) -> int:
    shift = ShiftConfig(args.rotation, args.blur, args.noise, args.intensity)
    source, target = generate_domain_pair(args.k, args.n_source, args.n_target, shift, args.seed)
    os.makedirs(args.out, exist_ok=True)
    src_path = os.path.join(args.out, "source.dataset")
    tgt_path = os.path.join(args.out, "target.dataset")
    save_dataset(source, src_path)
    save_dataset(target, tgt_path)
    payload = {
        "k": args.k,
        "n_source": args.n_source,
        "n_target": args.n_target,
        "shift": asdict(shift),
        "seed": args.seed,
    }
    with open(os.path.join(args.out, "gen-config.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    write_config_echo(args.out, "gen-data", payload)
    print(f"gen-data k={args.k} n={args.n_source}/{args.n_target} out={args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = build_adaptation_config(args)
    source = _load_dataset(args.source, "source dataset")
    os.makedirs(args.out, exist_ok=True)
    net = BaseNetwork(source.num_classes, seed=cfg.seed)
    net, accuracy = pretrain_source(net, source, cfg)
    ckpt = os.path.join(args.out, "base.ckpt")
    _save_network(net, ckpt)
    write_config_echo(args.out, "pretrain", {"config": asdict(cfg), "source": args.source})
    with open(os.path.join(args.out, "pretrain-report.json"), "w") as fh:
        json.dump({"source_test_accuracy": accuracy, "checkpoint": ckpt}, fh, indent=2)
    print(f"pretrain source_test_accuracy={accuracy:.4f} out={args.out}")
    return 0


def cmd_adapt(args) -> int:
    cfg = build_adaptation_config(args)
    target = _load_dataset(args.target, "target dataset")
    base = _load_base_network(args.base_ckpt)
    source = None
    if cfg.variant == "cin_pretrained":
        if not args.source:
            raise CliError("--source is required for variant cin_pretrained")
        source = _load_dataset(args.source, "source dataset")
    os.makedirs(args.out, exist_ok=True)

    base, examiner, report = run_adaptation(base, target, cfg, source=source)
    _save_network(base, os.path.join(args.out, "adapted.ckpt"))
    if examiner is not None:
        save_checkpoint(os.path.join(args.out, "examiner.ckpt"), examiner.parameters())
    report.save(os.path.join(args.out, "report.json"))
    write_config_echo(
        args.out,
        "adapt",
        {"config": asdict(cfg), "target": args.target, "base_ckpt": args.base_ckpt},
    )
    print(
        f"adapt variant={cfg.variant} final_accuracy={report.final_accuracy:.4f} out={args.out}"
    )
    return 0


def cmd_eval(args) -> int:
    ds = _load_dataset(args.dataset, "dataset")
    net = _load_base_network(args.ckpt)
    result = evaluate(net, ds)
    summary = {
        "accuracy": result.accuracy,
        "per_class_accuracy": [float(a) for a in result.per_class_accuracy],
        "confusion": result.confusion.tolist(),
    }
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.json"), "w") as fh:
            json.dump(summary, fh, indent=2)
        write_config_echo(
            args.out, "eval", {"ckpt": args.ckpt, "dataset": args.dataset}
        )
    print(f"eval accuracy={result.accuracy:.4f} dataset={args.dataset}")
    return 0


def cmd_ablate(args) -> int:
    cfg = build_adaptation_config(args)
    source = _load_dataset(args.source, "source dataset")
    target = _load_dataset(args.target, "target dataset")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    os.makedirs(args.out, exist_ok=True)
    result = ablation_run(source, target, cfg, seeds, out_dir=args.out)
    write_config_echo(
        args.out,
        "ablate",
        {"config": asdict(cfg), "seeds": seeds, "source": args.source, "target": args.target},
    )
    for row in result.rows:
        print(f"ablate {row['name']}: {row['mean']:.4f} +/- {row['std']:.4f}")
    return 0


def cmd_grad_check(args) -> int:
    results = gradient_suite(points=args.points, eps=args.eps)
    failed = 0
    for name in sorted(results):
        entry = results[name]
        ok = entry["max_error"] < entry["tolerance"]
        failed += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'} {name}: max_rel_error={entry['max_error']:.3e}")
    print(f"grad-check {len(results) - failed}/{len(results)} ops passed")
    return 0 if failed == 0 else RUNTIME_ERROR


def cmd_project(args) -> int:
    ds = _load_dataset(args.dataset, "dataset")
    net = _load_base_network(args.ckpt)
    out_dir = os.path.dirname(args.out_csv)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    coords = export_feature_projection(net, ds, args.out_csv)
    print(f"project rows={coords.shape[0]} out={args.out_csv}")
    return 0


# -- argument wiring --------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser, *, adaptation: bool) -> None:
    p.add_argument("--config", help="config file (JSON or key=value lines)")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    if not adaptation:
        return
    suppress = {"default": argparse.SUPPRESS}
    p.add_argument("--batch-size", type=int, dest="batch_size", **suppress)
    p.add_argument("--epochs-source", type=int, dest="epochs_source", **suppress)
    p.add_argument("--epochs-adapt", type=int, dest="epochs_adapt", **suppress)
    p.add_argument("--lr-source", type=float, dest="lr_source", **suppress)
    p.add_argument("--lr-adapt", type=float, dest="lr_adapt", **suppress)
    p.add_argument("--momentum", type=float, **suppress)
    p.add_argument("--lambda1", type=float, **suppress)
    p.add_argument("--lambda2", type=float, **suppress)
    p.add_argument("--curriculum-stages", type=int, dest="curriculum_stages", **suppress)
    p.add_argument("--triplets-per-batch", type=int, dest="triplets_per_batch", **suppress)
    p.add_argument("--examiner-epochs", type=int, dest="examiner_epochs", **suppress)
    p.add_argument(
        "--examiner-epochs-source", type=int, dest="examiner_epochs_source", **suppress
    )
    p.add_argument(
        "--cmc", action=argparse.BooleanOptionalAction, dest="enable_cmc", **suppress
    )
    p.add_argument(
        "--ac", action=argparse.BooleanOptionalAction, dest="enable_ac", **suppress
    )
    p.add_argument(
        "--stop-grad-examiner",
        action=argparse.BooleanOptionalAction,
        dest="stop_grad_examiner",
        **suppress,
    )
    p.add_argument(
        "--eq4-literal", action=argparse.BooleanOptionalAction, dest="eq4_literal", **suppress
    )
    p.add_argument(
        "--rescale-cosine",
        action=argparse.BooleanOptionalAction,
        dest="rescale_cosine",
        **suppress,
    )
    p.add_argument(
        "--symmetrize-examiner-corr",
        action=argparse.BooleanOptionalAction,
        dest="symmetrize_examiner_corr",
        **suppress,
    )
    p.add_argument(
        "--augment-rotation-deg", type=float, dest="augment_rotation_deg", **suppress
    )
    p.add_argument(
        "--augment-noise-sigma", type=float, dest="augment_noise_sigma", **suppress
    )
    p.add_argument(
        "--track-accuracy",
        action=argparse.BooleanOptionalAction,
        dest="track_accuracy",
        **suppress,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cin", description=__doc__)
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic source/target pair")
    p.add_argument("--out", default=default_out_dir())
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--n-source", type=int, dest="n_source", default=2000)
    p.add_argument("--n-target", type=int, dest="n_target", default=2000)
    p.add_argument("--rotation", type=float, default=DEFAULT_SHIFT.rotation_deg)
    p.add_argument("--blur", type=float, default=DEFAULT_SHIFT.blur_sigma)
    p.add_argument("--noise", type=float, default=DEFAULT_SHIFT.noise_sigma)
    p.add_argument("--intensity", type=float, default=DEFAULT_SHIFT.intensity_scale)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train the classifier on labeled source data")
    p.add_argument("--source", required=True)
    p.add_argument("--out", default=default_out_dir())
    _add_config_flags(p, adaptation=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="adapt a pre-trained classifier to a target dataset")
    p.add_argument("--variant", choices=VARIANTS, default=argparse.SUPPRESS)
    p.add_argument("--base-ckpt", dest="base_ckpt", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--source", help="labeled source set (cin_pretrained only)")
    p.add_argument("--out", default=default_out_dir())
    _add_config_flags(p, adaptation=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset (read-only)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="optional directory for eval.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="full / w-o AC / w-o CMC / baseline grid over seeds")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seed list")
    p.add_argument("--out", default=default_out_dir())
    _add_config_flags(p, adaptation=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference check of every op and loss")
    p.add_argument("--points", type=int, default=DEFAULT_POINTS)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("project", help="2-D feature projection CSV for plotting")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-csv", dest="out_csv", required=True)
    p.set_defaults(func=cmd_project)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CliError as exc:
        print(f"cin {args.command}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    except Exception as exc:  # runtime failures map to exit 2
        logger.exception("unhandled failure: %s", exc)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
