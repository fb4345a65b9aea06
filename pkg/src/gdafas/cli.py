"""Command-line front end: every experiment is a pure function of
(flags, config file, input files, seed) to output files.

stdout carries exactly one JSON summary line per invocation; human-readable
diagnostics go to stderr. Exit codes: 0 success, 1 validation error
(flags, config, missing inputs), 2 runtime failure.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict, fields

from . import data as D
from . import gradcheck as GC
from . import pipeline as P
from . import spectrum as S
from .checkpoint import CheckpointError, load_checkpoint
from .pipeline import TrainConfig
from .rng import Rng

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_PATH_KEYS = {"data", "model", "out", "source_data", "report", "input",
              "ref", "split", "count_per_class", "trials"}
_DOMAIN_KEYS = {"name", "gain", "brightness", "blur", "noise",
                "count_per_class", "seed", "unlabeled_train"}


class CliError(Exception):
    """Invalid flags, config, or inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def load_config(path: str) -> dict:
    """Parse and validate a JSON config; unknown keys are named and fatal."""
    try:
        with open(path) as fh:
            config = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise CliError(
            f"malformed JSON in {path}: line {err.lineno} column {err.colno}:"
            f" {err.msg}"
        )
    if not isinstance(config, dict):
        raise CliError(f"{path}: config root must be a JSON object")
    unknown = set(config) - _TRAIN_KEYS - _PATH_KEYS - {"domains"}
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for i, domain in enumerate(config.get("domains", [])):
        bad = set(domain) - _DOMAIN_KEYS
        if bad:
            raise CliError(
                f"unknown keys in domains[{i}]: {', '.join(sorted(bad))}"
            )
    return config


def _merge(args, config: dict) -> dict:
    """Layer flag values over file values over TrainConfig defaults."""
    merged = asdict(TrainConfig())
    merged.update(config)
    for key in _TRAIN_KEYS | _PATH_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def _train_config(merged: dict) -> TrainConfig:
    kwargs = {k: merged[k] for k in _TRAIN_KEYS if k in merged}
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as err:
        raise CliError(f"invalid training configuration: {err}")


def _persist_config(merged: dict, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    serializable = {k: v for k, v in merged.items() if v is not None}
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(serializable, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _require(merged: dict, key: str):
    value = merged.get(key)
    if value is None:
        raise CliError(f"missing required value: --{key.replace('_', '-')}")
    return value


def _load_dir(path: str) -> D.Dataset:
    if not os.path.isdir(path):
        raise CliError(f"dataset directory not found: {path}")
    return D.load_dataset(path)


def _load_model(path: str):
    if not os.path.exists(path):
        raise CliError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _split_of(dataset: D.Dataset, split) -> D.Dataset:
    if split in (None, "all"):
        return dataset
    subset = dataset.subset(split)
    if len(subset.images) == 0:
        raise CliError(f"dataset has no records in split {split!r}")
    return subset


# ---------------------------------------------------------------------------
# commands


def _cmd_gen_data(args, config):
    merged = _merge(args, config)
    out = _require(merged, "out")
    count = int(merged.get("count_per_class") or 320)
    seed = int(merged["seed"])
    if config.get("domains"):
        specs = []
        for entry in config["domains"]:
            entry = dict(entry)
            entry.setdefault("count_per_class", count)
            entry.setdefault("seed", seed)
            if "gain" in entry:
                entry["gain"] = tuple(entry["gain"])
            unlabeled = bool(entry.pop("unlabeled_train", False))
            specs.append((D.DomainSpec(**entry), unlabeled))
    else:
        source, target = D.default_domain_specs(count, seed)
        specs = [(source, False), (target, True)]
    _persist_config(merged, out)
    summary = []
    for spec, unlabeled in specs:
        manifest = D.generate_domain_dataset(
            spec, os.path.join(out, spec.name), unlabeled_train=unlabeled
        )
        summary.append({"name": spec.name,
                        "records": len(manifest["records"])})
    return {"command": "gen-data", "out": out, "domains": summary}


def _cmd_train_source(args, config):
    merged = _merge(args, config)
    out = _require(merged, "out")
    data_dirs = _require(merged, "data")
    if isinstance(data_dirs, str):
        data_dirs = [data_dirs]
    train_config = _train_config(merged)
    datasets = [_load_dir(d) for d in data_dirs]
    _persist_config(merged, out)
    _, log = P.train_source(train_config, datasets, out_dir=out)
    return {
        "command": "train-source",
        "checkpoint": os.path.join(out, "source.gdac"),
        "steps": len(log),
        "final_loss": log[-1][3],
    }


def _cmd_adapt(args, config):
    merged = _merge(args, config)
    out = _require(merged, "out")
    train_config = _train_config(merged)
    bundle = _load_model(_require(merged, "model"))
    target = _load_dir(_require(merged, "data"))
    _persist_config(merged, out)
    _, log = P.adapt_generator(train_config, bundle, target, out_dir=out)
    return {
        "command": "adapt",
        "checkpoint": os.path.join(out, "adapted.gdac"),
        "steps": len(log),
        "final_stat": log[-1][1],
        "final_total": log[-1][7],
    }


def _cmd_eval(args, config):
    merged = _merge(args, config)
    bundle = _load_model(_require(merged, "model"))
    dataset = _split_of(_load_dir(_require(merged, "data")),
                        merged.get("split") or "test")
    generator = None if args.raw else bundle.G
    train_config = _train_config(merged)
    report = P.evaluate(bundle, dataset, generator=generator,
                        config=train_config)
    if merged.get("out"):
        _persist_config(merged, merged["out"])
        P.write_eval_report(report, merged["out"])
    if merged.get("report"):
        rows = [("auc", report.auc), ("hter", report.hter),
                ("eer_threshold", report.eer_threshold),
                ("hter_at_half", report.hter_at_half)]
        for domain, values in sorted(report.per_domain.items()):
            rows.append((f"auc_{domain}", values["auc"]))
            rows.append((f"hter_{domain}", values["hter"]))
        P.write_csv(merged["report"], ("metric", "value"), rows)
    return {
        "command": "eval",
        "auc": report.auc,
        "hter": report.hter,
        "stylized": generator is not None,
        "records": len(dataset.images),
    }


def _cmd_specmix(args, config):
    merged = _merge(args, config)
    out = _require(merged, "out")
    image = D.ppm_read(_require(merged, "input"))
    ref = D.ppm_read(_require(merged, "ref"))
    if image.shape != ref.shape:
        raise CliError(
            f"image shapes differ: {image.shape} vs {ref.shape}"
        )
    eta = float(merged["eta"])
    lam = S.sample_lambda(Rng(int(merged["seed"])), 1, eta)
    mixed = S.specmix(image[None], ref[None], lam)[0]
    D.ppm_write(out, mixed)
    return {"command": "specmix", "out": out, "lambda": float(lam[0])}


def _cmd_analyze_stats(args, config):
    merged = _merge(args, config)
    out = _require(merged, "out")
    bundle = _load_model(_require(merged, "model"))
    target = _load_dir(_require(merged, "data"))
    _persist_config(merged, out)

    written = []

    def emit(name, header, rows):
        path = os.path.join(out, name)
        P.write_csv(path, header, rows)
        written.append(name)

    emit("bn_raw.csv", ("layer", "d_mean", "d_var"),
         P.bn_discrepancy(bundle, target))
    if bundle.G is not None:
        emit("bn_stylized.csv", ("layer", "d_mean", "d_var"),
             P.bn_discrepancy(bundle, target, generator=bundle.G))
    if merged.get("source_data"):
        source = _load_dir(merged["source_data"])
        emit("mmd_raw.csv", ("block", "mmd"),
             P.mmd_curve(bundle, source, target))
        if bundle.G is not None:
            emit("mmd_stylized.csv", ("block", "mmd"),
                 P.mmd_curve(bundle, source, target, generator=bundle.G))
    return {"command": "analyze-stats", "out": out, "files": written}


def _cmd_ablate(args, config):
    merged = _merge(args, config)
    out = _require(merged, "out")
    train_config = _train_config(merged)
    bundle = _load_model(_require(merged, "model"))
    target = _load_dir(_require(merged, "data"))
    eval_set = _split_of(target, merged.get("split") or "test")
    _persist_config(merged, out)
    results = P.ablation_run(train_config, bundle, target, eval_set,
                             out_dir=out)
    return {
        "command": "ablate",
        "out": out,
        "rows": [{"config": name, "auc": rep.auc, "hter": rep.hter}
                 for name, rep in results],
    }


def _cmd_grad_check(args, config):
    merged = _merge(args, config)
    trials = int(merged.get("trials") or 20)
    results = GC.run_checks(seed=int(merged["seed"]), trials=trials,
                            fault=args.fault)
    table = GC.format_table(results)
    print(table, file=sys.stderr)
    if merged.get("out"):
        os.makedirs(merged["out"], exist_ok=True)
        with open(os.path.join(merged["out"], "grad_check.txt"), "w") as fh:
            fh.write(table + "\n")
    passed = all(r.passed for r in results)
    if not passed:
        failed = [r.name for r in results if not r.passed]
        raise RuntimeError(f"gradient checks failed: {', '.join(failed)}")
    return {
        "command": "grad-check",
        "checks": len(results),
        "trials": trials,
        "worst": max(r.max_rel_error for r in results),
        "passed": True,
    }


# ---------------------------------------------------------------------------
# argument wiring


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--config", default=None)
    sub.add_argument("--out", default=None)


def _add_train(sub):
    sub.add_argument("--batch-size", dest="batch_size", type=int)
    sub.add_argument("--stage1-epochs", dest="stage1_epochs", type=int)
    sub.add_argument("--stage2-steps", dest="stage2_steps", type=int)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--eta", type=float)
    sub.add_argument("--lambda-ent", dest="lambda_ent", type=float)
    sub.add_argument("--lambda-ph", dest="lambda_ph", type=float)
    sub.add_argument("--alpha", type=float)


def build_parser() -> _Parser:
    parser = _Parser(prog="gda", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="render the synthetic domains")
    _add_common(p)
    p.add_argument("--count-per-class", dest="count_per_class", type=int)

    p = subs.add_parser("train-source", help="stage-1 source training")
    _add_common(p)
    _add_train(p)
    p.add_argument("--data", action="append")

    p = subs.add_parser("adapt", help="stage-2 generator adaptation")
    _add_common(p)
    _add_train(p)
    p.add_argument("--model")
    p.add_argument("--data")

    p = subs.add_parser("eval", help="score a labeled dataset")
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--report")
    p.add_argument("--split")
    p.add_argument("--raw", action="store_true",
                   help="ignore any generator in the checkpoint")

    p = subs.add_parser("specmix", help="amplitude-mix two images")
    _add_common(p)
    p.add_argument("--input")
    p.add_argument("--ref")
    p.add_argument("--eta", type=float, default=None)

    p = subs.add_parser("analyze-stats", help="BN and MMD discrepancy curves")
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--source-data", dest="source_data")

    p = subs.add_parser("ablate", help="component ablation table")
    _add_common(p)
    _add_train(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--split")

    p = subs.add_parser("grad-check", help="verify every backward rule")
    _add_common(p)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--fault", choices=["sign-flip"], default=None)

    return parser


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-source": _cmd_train_source,
    "adapt": _cmd_adapt,
    "eval": _cmd_eval,
    "specmix": _cmd_specmix,
    "analyze-stats": _cmd_analyze_stats,
    "ablate": _cmd_ablate,
    "grad-check": _cmd_grad_check,
}


def dispatch(argv) -> dict:
    args = build_parser().parse_args(argv)
    config = load_config(args.config) if args.config else {}
    return _COMMANDS[args.command](args, config)


def main(argv=None) -> int:
    try:
        summary = dispatch(sys.argv[1:] if argv is None else argv)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (RuntimeError, CheckpointError, OSError) as err:
        print(f"failure: {err}", file=sys.stderr)
        return 2
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
