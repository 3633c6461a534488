"""Command-line entry point: ``histpetl <command> [options]``.

Every command resolves its configuration (defaults, then an optional TOML or
JSON file, then ``--section.key value`` overrides, then shorthand flags),
writes that resolved copy next to its outputs, and exits with 0 on success,
1 on a validation error and 2 on an I/O or compatibility error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import statistics
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .analysis import (PRESETS, SimilarityReport, audit_preset, count_params, format_table,
                       get_preset, similarity_report)
from .data import SPLITS, SyntheticSpec, gen_synthetic, read_dataset, write_dataset
from .errors import CompatibilityError, ConfigError, ContractError, DimensionError, SerializationError
from .gradcheck import FAMILIES, GRAD_TOLERANCE, run_gradcheck
from .model import EncoderModel, ModelConfig, load_checkpoint, save_checkpoint
from .petl import PetlConfig
from .training import TrainConfig, evaluate, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

OUTPUT_ROOT_ENV = "HISTPETL_OUTPUT_ROOT"
EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2
SECTIONS = ("model", "method", "train", "data", "output")
DATA_KEYS = {"path", "generator"}
OUTPUT_KEYS = {"dir"}


# -- run configuration ---------------------------------------------------


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    method: PetlConfig = field(default_factory=PetlConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data_path: str | None = None
    generator: SyntheticSpec = field(default_factory=SyntheticSpec)
    output_dir: str | None = None

    def to_dict(self) -> dict:
        data = {"generator": self.generator.to_dict()}
        if self.data_path is not None:
            data["path"] = self.data_path
        out = {"model": self.model.to_dict(), "method": self.method.to_dict(),
               "train": self.train.to_dict(), "data": data}
        if self.output_dir is not None:
            out["output"] = {"dir": self.output_dir}
        return out


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(section: str, table: dict, allowed: set[str]) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}; "
                          f"allowed: {', '.join(sorted(allowed))}")


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        if path.suffix == ".json":
            table = json.loads(raw)
        else:
            table = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from exc
    if not isinstance(table, dict):
        raise ConfigError(f"{path}: top level must be a table")
    return table


def _merge(base: dict, extra: dict) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def build_config(table: dict) -> RunConfig:
    """Validate a nested table (file contents plus overrides) into a RunConfig."""
    # resolved manifests carry a "command" tag; it is informational only
    _check_keys("top level", table, set(SECTIONS) | {"command"})
    model_t = dict(table.get("model", {}))
    method_t = dict(table.get("method", {}))
    train_t = dict(table.get("train", {}))
    data_t = dict(table.get("data", {}))
    out_t = dict(table.get("output", {}))
    _check_keys("model", model_t, _field_names(ModelConfig))
    _check_keys("method", method_t, _field_names(PetlConfig))
    _check_keys("train", train_t, _field_names(TrainConfig))
    _check_keys("data", data_t, DATA_KEYS)
    _check_keys("output", out_t, OUTPUT_KEYS)
    gen_t = dict(data_t.get("generator", {}))
    _check_keys("data.generator", gen_t, _field_names(SyntheticSpec))
    try:
        method = PetlConfig(**method_t)
        train_cfg = TrainConfig.for_method(method.kind, **train_t)
        model = ModelConfig(**model_t)
        gen = SyntheticSpec(**gen_t)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if gen.classes != model.classes:
        raise ConfigError(f"generator classes={gen.classes} but model classes={model.classes}")
    method.validate(model.dim)
    return RunConfig(model, method, train_cfg, data_t.get("path"), gen, out_t.get("dir"))


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return json.loads(text)
    except ValueError:
        return text


def parse_overrides(tokens: list[str]) -> dict:
    """Turn ``--section.key value`` pairs (or ``--section.key=value``) into a nested table."""
    table: dict = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognised argument {tok!r}")
        key, eq, val = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override {tok} needs a value")
            val = tokens[i + 1]
            i += 1
        i += 1
        parts = key.split(".")
        if parts[0] not in SECTIONS:
            raise ConfigError(f"override {tok}: unknown section {parts[0]!r}")
        node = table
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(val)
    return table


def resolve_config(args, overrides: list[str]) -> RunConfig:
    table = load_config_file(args.config) if getattr(args, "config", None) else {}
    table = _merge(table, parse_overrides(overrides))
    method = table.setdefault("method", {})
    if getattr(args, "method", None):
        # the lr default follows the kind unless train.lr is given explicitly
        method["kind"] = args.method
    for flag in ("bins", "rate", "rank", "placement", "insertions"):
        val = getattr(args, flag, None)
        if val is not None:
            method[flag] = val
    if getattr(args, "shared", None) is not None:
        method["shared"] = args.shared
    if getattr(args, "seed", None) is not None:
        table.setdefault("train", {})["seed"] = args.seed
    if getattr(args, "data", None):
        table.setdefault("data", {})["path"] = args.data
    if getattr(args, "out", None):
        table.setdefault("output", {})["dir"] = args.out
    return build_config(table)


def output_dir(explicit: str | None, default_name: str) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / default_name


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_data(cfg: RunConfig):
    if cfg.data_path:
        return read_dataset(cfg.data_path)
    return gen_synthetic(cfg.generator)


# -- commands --------------------------------------------------------------


def cmd_gen_data(args, overrides) -> int:
    cfg = resolve_config(args, overrides)
    spec = cfg.generator
    out = output_dir(cfg.output_dir, f"data-seed{spec.seed}")
    bundle = gen_synthetic(spec)
    paths = write_dataset(bundle, out)
    write_json(out / "config.json", {"command": "gen-data", **cfg.to_dict()})
    rows = [[name, len(bundle.split(name)), str(paths[name])] for name in SPLITS]
    print(format_table(["split", "sequences", "file"], rows))
    return EXIT_OK


def cmd_train(args, overrides) -> int:
    cfg = resolve_config(args, overrides)
    out = output_dir(cfg.output_dir, f"train-{cfg.method.label}-seed{cfg.train.seed}")
    data = _load_data(cfg)
    if data.classes != cfg.model.classes:
        raise ConfigError(f"dataset has {data.classes} classes but model expects {cfg.model.classes}")
    if data.train.frames.shape[2] != cfg.model.in_features:
        raise ConfigError(f"dataset frames have {data.train.frames.shape[2]} features, "
                          f"model expects {cfg.model.in_features}")
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": "train", **cfg.to_dict()}
    write_json(out / "config.json", manifest)
    model = EncoderModel(cfg.model, cfg.method, seed=cfg.train.seed)
    log = print if args.verbose else None
    report = train(model, data, cfg.train, log=log)
    report.config = manifest
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "loss.csv").write_text(report.loss_csv())
    save_checkpoint(model, out / "checkpoint.zip", extra={"data": manifest["data"], "train": manifest["train"]})
    print(format_table(["method", "trainable", "best_epoch", "stop_epoch", "test_loss", "test_acc"],
                       [[cfg.method.label, report.trainable_params, report.best_epoch, report.stop_epoch,
                         f"{report.test_loss:.6f}", f"{report.test_accuracy:.4f}"]]))
    print(f"wrote {out}")
    return EXIT_OK


def _checkpoint_data(manifest: dict, data_path: str | None):
    if data_path:
        return read_dataset(data_path)
    data = manifest.get("data", {})
    if data.get("path"):
        return read_dataset(data["path"])
    if "generator" in data:
        return gen_synthetic(SyntheticSpec(**data["generator"]))
    raise ConfigError("checkpoint manifest names no dataset; pass --data")


def _require_checkpoint(path: str) -> None:
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")


def cmd_eval(args, overrides) -> int:
    if overrides:
        raise ConfigError(f"eval takes no config overrides, got {overrides}")
    _require_checkpoint(args.checkpoint)
    model, manifest = load_checkpoint(args.checkpoint)
    data = _checkpoint_data(manifest, args.data)
    split = data.split(args.split)
    if split.frames.shape[2] != model.config.in_features or data.classes != model.config.classes:
        raise CompatibilityError(
            f"dataset (F={split.frames.shape[2]}, C={data.classes}) does not fit the checkpoint "
            f"(F={model.config.in_features}, C={model.config.classes})")
    loss, acc = evaluate(model, split)
    result = {"command": "eval", "checkpoint": str(args.checkpoint), "split": args.split,
              "data": args.data or manifest.get("data"), "loss": loss, "accuracy": acc}
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    write_json(out / f"eval-{args.split}.json", result)
    print(format_table(["split", "loss", "accuracy"], [[args.split, f"{loss:.6f}", f"{acc:.4f}"]]))
    return EXIT_OK


def cmd_count_params(args, overrides) -> int:
    if args.list_presets:
        print("\n".join(sorted(PRESETS)))
        return EXIT_OK
    if args.preset:
        audits = audit_preset(args.preset)  # unknown names raise with the preset list
        name = args.preset
        resolved = {"command": "count-params", "preset": name,
                    "method": get_preset(name).method.to_dict()}
    else:
        cfg = resolve_config(args, overrides)
        audits = [count_params(EncoderModel(cfg.model, cfg.method), trainable_only=not args.all)]
        name = cfg.method.label
        resolved = {"command": "count-params", **cfg.to_dict()}
    out = output_dir(args.out, f"count-{name}")
    write_json(out / "config.json", resolved)
    rows = []
    for i, audit in enumerate(audits):
        suffix = "" if len(audits) == 1 else f"-{i}"
        (out / f"audit{suffix}.csv").write_text(audit.to_csv())
        print(f"# {audit.label}")
        print(format_table(["module", "count"], [[k, f"{v:,}"] for k, v in audit.modules.items()]))
        ref = "" if audit.reference is None else f"{audit.reference / 1000:.1f}K"
        delta = "" if audit.reference_delta is None else f"{100 * audit.reference_delta:+.2f}%"
        rows.append([audit.label, f"{audit.trainable:,}", f"{audit.expected_trainable:,}",
                     audit.matches_formula, ref, delta])
        print()
    print(format_table(["config", "trainable", "closed_form", "match", "published", "delta"], rows))
    write_json(out / "audit.json", [a.to_dict() for a in audits])
    return EXIT_OK if all(a.matches_formula for a in audits) else EXIT_VALIDATION


def cmd_grad_check(args, overrides) -> int:
    if overrides:
        raise ConfigError(f"grad-check takes no config overrides, got {overrides}")
    families = args.family or list(FAMILIES)
    for fam in families:
        if fam not in FAMILIES:
            raise ConfigError(f"unknown layer family {fam!r}; choose from {', '.join(FAMILIES)}")
    if args.corrupt:
        with T.inject_fault(*args.corrupt):
            errors = run_gradcheck(families, seed=args.seed)
    else:
        errors = run_gradcheck(families, seed=args.seed)
    rows = [[fam, f"{err:.3e}", "ok" if err < GRAD_TOLERANCE else "FAIL"] for fam, err in errors.items()]
    print(format_table(["family", "max_rel_error", "status"], rows))
    if args.out:
        out = Path(args.out)
        write_json(out / "config.json", {"command": "grad-check", "families": families, "seed": args.seed,
                                         "corrupt": args.corrupt or [], "tolerance": GRAD_TOLERANCE})
        (out / "gradcheck.csv").write_text(
            "family,max_rel_error\n" + "".join(f"{k},{v:.6e}\n" for k, v in errors.items()))
    return EXIT_OK if all(e < GRAD_TOLERANCE for e in errors.values()) else EXIT_VALIDATION


def cmd_similarity(args, overrides) -> int:
    if overrides:
        raise ConfigError(f"similarity takes no config overrides, got {overrides}")
    _require_checkpoint(args.checkpoint_a)
    _require_checkpoint(args.checkpoint_b)
    model_a, manifest_a = load_checkpoint(args.checkpoint_a)
    model_b, _ = load_checkpoint(args.checkpoint_b)
    data = _checkpoint_data(manifest_a, args.data)
    frames = data.split(args.split).frames
    if args.probe_size:
        frames = frames[:args.probe_size]
    report = similarity_report(model_a, model_b, frames)
    out = output_dir(args.out, f"similarity-{model_a.petl.label}-vs-{model_b.petl.label}")
    write_json(out / "config.json", {"command": "similarity", "checkpoint_a": args.checkpoint_a,
                                     "checkpoint_b": args.checkpoint_b, "split": args.split,
                                     "probe_size": int(frames.shape[0]), "data": args.data})
    (out / "similarity.csv").write_text(report.to_csv())
    print(format_table(["block", "score"], [[i, f"{s:.6f}"] for i, s in enumerate(report.scores)]))
    return EXIT_OK


def _read_run(run_dir: Path) -> dict:
    report = json.loads((run_dir / "report.json").read_text())
    method = report.get("config", {}).get("method")
    if method is None:
        raise CompatibilityError(f"{run_dir}/report.json has no method table")
    report["label"] = PetlConfig(**method).label
    return report


def summarize_runs(reports: list[dict]) -> list[dict]:
    groups: dict[str, list[dict]] = {}
    for r in reports:
        groups.setdefault(r["label"], []).append(r)
    summary = []
    for label, runs in groups.items():
        accs = [r["test_accuracy"] for r in runs]
        summary.append({
            "method": label,
            "runs": len(runs),
            "mean_accuracy": statistics.fmean(accs),
            "std_accuracy": statistics.stdev(accs) if len(accs) > 1 else 0.0,
            "trainable_params": runs[0]["trainable_params"],
            "mean_best_epoch": statistics.fmean(r["best_epoch"] for r in runs),
        })
    return summary


def cmd_report(args, overrides) -> int:
    if overrides:
        raise ConfigError(f"report takes no config overrides, got {overrides}")
    from .plotting import plot_accuracy, plot_loss_curves, plot_similarity

    runs = []
    for d in args.runs:
        run_dir = Path(d)
        if not (run_dir / "report.json").is_file():
            raise FileNotFoundError(f"{run_dir}: no report.json (is this a train output directory?)")
        runs.append(_read_run(run_dir))
    summary = summarize_runs(runs)
    out = output_dir(args.out, "report")
    out.mkdir(parents=True, exist_ok=True)
    lines = ["method,runs,mean_accuracy,std_accuracy,trainable_params,mean_best_epoch"]
    for s in summary:
        lines.append(f"{s['method']},{s['runs']},{s['mean_accuracy']:.9g},{s['std_accuracy']:.9g},"
                     f"{s['trainable_params']},{s['mean_best_epoch']:.9g}")
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    curves: dict[str, list[dict]] = {}
    for r in runs:
        curves.setdefault(r["label"], []).append(r)
    plot_loss_curves(curves, out / "loss_curves.png")
    plot_accuracy(summary, out / "accuracy.png")
    series = {}
    for spec in args.similarity or []:
        label, _, path = spec.rpartition("=")
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        series[label or Path(path).parent.name] = rows[:, 1].tolist()
    if series:
        plot_similarity(series, out / "similarity.png")
    write_json(out / "config.json", {"command": "report", "runs": [str(d) for d in args.runs],
                                     "similarity": args.similarity or []})
    print(format_table(["method", "runs", "mean_acc", "std_acc", "params"],
                       [[s["method"], s["runs"], f"{100 * s['mean_accuracy']:.2f}",
                         f"{100 * s['std_accuracy']:.2f}", s["trainable_params"]] for s in summary]))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_benchmark(args, overrides) -> int:
    if overrides:
        raise ConfigError(f"benchmark takes no config overrides, got {overrides}")
    from .benchmark import BENCHMARK_DATA, BENCHMARK_SEEDS, BENCHMARK_TRAIN, run_benchmark
    from .plotting import plot_accuracy

    seeds = tuple(args.seeds) if args.seeds else BENCHMARK_SEEDS
    result = run_benchmark(seeds=seeds, progress=print)
    out = output_dir(args.out, "benchmark")
    out.mkdir(parents=True, exist_ok=True)
    (out / "benchmark.csv").write_text(result.to_csv())
    summary = [{"method": m, "mean_accuracy": result.mean(m), "std_accuracy": result.std(m)}
               for m in result.methods()]
    plot_accuracy(summary, out / "accuracy.png")
    write_json(out / "config.json", {"command": "benchmark", "seeds": list(seeds),
                                     "data": BENCHMARK_DATA.to_dict(), "train": BENCHMARK_TRAIN})
    print(format_table(["method", "mean_acc", "std_acc"],
                       [[s["method"], f"{100 * s['mean_accuracy']:.2f}", f"{100 * s['std_accuracy']:.2f}"]
                        for s in summary]))
    print(f"total {result.seconds:.1f}s; wrote {out}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON run configuration (a resolved config.json works too)")
    p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV} or ./runs)")
    p.add_argument("--method", choices=["full_finetune", "linear_probe", "adapter", "hpt", "lora", "ssf"])
    p.add_argument("--bins", type=int)
    p.add_argument("--rate", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--placement", choices=["parallel_mhsa", "parallel_ffn", "both"])
    p.add_argument("--insertions", help="ssf preset (layernorm, mhsa, mhsa_ffn) or one site")
    p.add_argument("--shared", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--seed", type=int, help="training / initialization seed")


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors: exit 1, keeping 2 for I/O failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="histpetl",
        description="Histogram-based parameter-efficient tuning toolkit.",
        epilog="Any --section.key VALUE pair (e.g. --train.lr 1e-3, --data.generator.seed 3) "
               "overrides the config file.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub_kw = {"allow_abbrev": False}

    p = sub.add_parser("gen-data", **sub_kw, help="write a synthetic dataset (train/val/test PTDS + manifest)")
    _add_run_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", **sub_kw, help="train one configuration; writes report, loss CSV, checkpoint")
    _add_run_flags(p)
    p.add_argument("--data", help="dataset directory (default: generate from [data.generator])")
    p.add_argument("-v", "--verbose", action="store_true", help="print one line per epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", **sub_kw, help="evaluate a checkpoint on one split")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--data", help="dataset directory (default: the one recorded in the checkpoint)")
    p.add_argument("--out", help="where to write eval-<split>.json (default: checkpoint directory)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count-params", **sub_kw, help="parameter audit, optionally against a published table row")
    _add_run_flags(p)
    p.add_argument("--preset", help="published table row, e.g. table1-hpt16")
    p.add_argument("--list-presets", action="store_true")
    p.add_argument("--all", action="store_true", help="list frozen modules too")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("grad-check", **sub_kw, help="finite-difference gradient check per layer family")
    p.add_argument("--family", action="append", help=f"restrict to a family ({', '.join(FAMILIES)})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="append", metavar="OP",
                   help="test hook: scale the backward rule of tensor op OP (e.g. matmul)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("similarity", **sub_kw, help="per-block linear CKA between two checkpoints")
    p.add_argument("checkpoint_a")
    p.add_argument("checkpoint_b")
    p.add_argument("--data", help="probe dataset directory (default: checkpoint_a's dataset)")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--probe-size", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_similarity)

    p = sub.add_parser("report", **sub_kw, help="aggregate train runs: summary CSV plus PNG figures")
    p.add_argument("runs", nargs="+", help="train output directories")
    p.add_argument("--similarity", action="append", metavar="LABEL=CSV",
                   help="similarity CSV to plot (repeatable)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("benchmark", **sub_kw, help="toy distribution-shift benchmark (probe vs. HPT bins)")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        return args.func(args, extra)
    except (ConfigError, ContractError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SerializationError, CompatibilityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
