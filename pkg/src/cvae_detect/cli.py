"""Command-line entry point for reproducible train/attack/detect/evaluate runs.

Exit codes: 0 on success, 2 on config/validation errors, 3 on missing stage
dependencies.
"""

from __future__ import annotations

import argparse
import json
import sys
import tarfile
import urllib.request
from importlib import resources
from pathlib import Path

from ._version import __version__
from .errors import ConfigError, DependencyError
from .evaluation import EvalReport
from .pipeline import (
    MNIST_FILES,
    RunConfig,
    RunManifest,
    cmd_attack,
    cmd_build_reference,
    cmd_detect,
    cmd_evaluate,
    cmd_sweep,
    cmd_train_classifier,
    cmd_train_cvae,
    run_all,
    run_paths,
)

MNIST_BASE_URL = "https://ossci-datasets.s3.amazonaws.com/mnist/"
CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"


def load_config(args) -> RunConfig:
    import os

    if args.preset:
        ref = resources.files("cvae_detect").joinpath(f"presets/{args.preset}.json")
        if not ref.is_file():
            raise ConfigError(f"unknown preset {args.preset!r}", pointer="/preset")
        payload = json.loads(ref.read_text())
    elif args.config:
        payload = json.loads(Path(args.config).read_text())
    else:
        raise ConfigError("either --config or --preset is required")
    if args.out:
        payload["out_dir"] = args.out
    if args.seed is not None:
        payload["seed"] = args.seed
    if args.deterministic:
        payload["deterministic"] = True
    data_root = os.environ.get("CVAE_DETECT_DATA")
    if data_root:
        payload["data_dir"] = str(Path(data_root) / payload.get("dataset", ""))
    return RunConfig.from_dict(payload)


def _add_common(sub):
    sub.add_argument("--config", help="path to a run-config JSON document")
    sub.add_argument("--preset", help="name of a packaged preset (e.g. mnist_greybox)")
    sub.add_argument("--out", help="override the output directory")
    sub.add_argument("--seed", type=int, help="override the run seed")
    sub.add_argument("--deterministic", action="store_true",
                     help="force deterministic torch algorithms")


def _cmd_train_classifier(args):
    path = cmd_train_classifier(load_config(args))
    print(f"classifier checkpoint -> {path}")


def _cmd_train_cvae(args):
    path = cmd_train_cvae(load_config(args))
    print(f"cvae checkpoint -> {path}")


def _cmd_build_reference(args):
    path = cmd_build_reference(load_config(args))
    print(f"reference -> {path}")


def _cmd_attack(args):
    config = load_config(args)
    ids = [a.id for a in config.attacks] if args.attack == "all" else [args.attack]
    for attack_id in ids:
        path = cmd_attack(config, attack_id)
        print(f"attack {attack_id} -> {path}")


def _cmd_detect(args):
    path = cmd_detect(load_config(args), args.attack, args.threshold)
    print(f"detection -> {path}")


def _cmd_evaluate(args):
    path = cmd_evaluate(load_config(args))
    print(f"report -> {path}")


def _cmd_sweep(args):
    values = [float(v) for v in args.values.split(",")]
    path = cmd_sweep(load_config(args), args.parameter, values)
    print(f"sweep summary -> {path}")


def _cmd_run(args):
    path = run_all(load_config(args))
    print(f"report -> {path}")


def _cmd_report(args):
    config = load_config(args)
    report_path = run_paths(config)["report"] / "report.json"
    if not report_path.exists():
        raise DependencyError(f"{report_path} is missing; run `cvae-detect evaluate` first")
    report = EvalReport.from_json(report_path)
    print(f"dataset={report.dataset}  E_normal={report.e_normal:.4f}")
    header = f"{'type':<22}{'error_rate':>12}{'auc':>10}{'risk_upper':>12}{'n_succ':>8}"
    print(header)
    print("-" * len(header))
    for row in report.rows:
        print(f"{row.attack_id:<22}{row.error_rate:>12.4f}{row.auc:>10.4f}"
              f"{row.robust_risk_upper:>12.4f}{row.n_successful:>8}")
    if args.render:
        _render_plots(config)


def _render_plots(config):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not installed; skipping plot rendering", file=sys.stderr)
        return
    import csv as _csv

    report_dir = run_paths(config)["report"]
    fig, ax = plt.subplots()
    for roc_file in sorted(report_dir.glob("roc_*.csv")):
        with open(roc_file) as fh:
            rows = list(_csv.DictReader(fh))
        ax.plot([float(r["fpr"]) for r in rows], [float(r["tpr"]) for r in rows],
                label=roc_file.stem.removeprefix("roc_"))
    ax.plot([0, 1], [0, 1], "k--", lw=0.5)
    ax.set_xlabel("FPR")
    ax.set_ylabel("TPR")
    ax.legend(fontsize=7)
    out = report_dir / "roc.png"
    fig.savefig(out, dpi=150)
    print(f"plots -> {out}")


def _cmd_verify(args):
    config = load_config(args)
    manifest = RunManifest(run_paths(config)["out"])
    problems = manifest.verify()
    if problems:
        for rel, reason in problems:
            print(f"TAMPERED {rel}: {reason}", file=sys.stderr)
        return 1
    print("manifest ok")
    return 0


def _download(url, dest: Path):
    dest.parent.mkdir(parents=True, exist_ok=True)
    print(f"fetching {url}")
    with urllib.request.urlopen(url) as resp, open(dest, "wb") as fh:
        fh.write(resp.read())


def _cmd_fetch_data(args):
    """Convenience downloader; ingestion itself never touches the network."""
    root = Path(args.dest)
    if args.dataset == "mnist":
        out = root / "mnist"
        for stem in MNIST_FILES.values():
            _download(MNIST_BASE_URL + stem + ".gz", out / (stem + ".gz"))
        print(f"mnist -> {out}")
    else:
        out = root / "cifar10"
        archive = out / "cifar-10-binary.tar.gz"
        _download(CIFAR_URL, archive)
        with tarfile.open(archive) as tar:
            tar.extractall(out)
        print(f"cifar10 -> {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cvae-detect",
        description="train, attack, detect, and evaluate the CVAE adversary detector",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    for name, fn in [
        ("train-classifier", _cmd_train_classifier),
        ("train-cvae", _cmd_train_cvae),
        ("build-reference", _cmd_build_reference),
        ("evaluate", _cmd_evaluate),
        ("run", _cmd_run),
    ]:
        sub = subs.add_parser(name)
        _add_common(sub)
        sub.set_defaults(func=fn)

    sub = subs.add_parser("attack")
    _add_common(sub)
    sub.add_argument("attack", help="attack id from the config, or 'all'")
    sub.set_defaults(func=_cmd_attack)

    sub = subs.add_parser("detect")
    _add_common(sub)
    sub.add_argument("attack", help="attack id from the config")
    sub.add_argument("--threshold", "-t", type=float, required=True)
    sub.set_defaults(func=_cmd_detect)

    sub = subs.add_parser("sweep")
    _add_common(sub)
    sub.add_argument("parameter", choices=["sigma", "epsilon"])
    sub.add_argument("--values", required=True, help="comma-separated sweep values")
    sub.set_defaults(func=_cmd_sweep)

    sub = subs.add_parser("report")
    _add_common(sub)
    sub.add_argument("--render", action="store_true", help="also render ROC plots (matplotlib)")
    sub.set_defaults(func=_cmd_report)

    sub = subs.add_parser("verify")
    _add_common(sub)
    sub.set_defaults(func=_cmd_verify)

    sub = subs.add_parser("fetch-data")
    sub.add_argument("dataset", choices=["mnist", "cifar10"])
    sub.add_argument("--dest", default="data")
    sub.set_defaults(func=_cmd_fetch_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = args.func(args)
        return 0 if rc is None else rc
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
