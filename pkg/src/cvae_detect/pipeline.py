"""Run orchestration: config schema, stage commands, manifest bookkeeping.

A run is a directory of artifacts produced by a DAG of stages
(train-classifier -> train-cvae -> build-reference -> attack -> detect ->
evaluate / sweep). Every stage derives its own seed from the run seed and the
stage name, so adding stages never perturbs earlier randomness, and reruns
with one config+seed are byte-identical in deterministic mode.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ._version import __version__
from .attacks import AttackConfig, AttackResult, run_attack
from .datasets import LabeledDataset, load_cifar10, load_mnist, split_holdout
from .detector import ReconReference, build_reference, detect, p_value, recon_distance
from .errors import ConfigError, DependencyError
from .evaluation import (
    AttackRow,
    EvalReport,
    error_rate,
    histogram_export,
    robust_risk_upper,
    roc_curve,
)
from .models import TrainConfig, classifier_predict, load_checkpoint, save_checkpoint, train_classifier, train_cvae

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
CIFAR_TRAIN_BATCHES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_BATCH = "test_batch.bin"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    dataset: str
    data_dir: str
    out_dir: str
    seed: int = 0
    deterministic: bool = True
    eval_samples: int = 1000
    classifier: TrainConfig = field(default_factory=TrainConfig)
    classifier_profile: str = "small_cnn"
    cvae: TrainConfig = field(default_factory=TrainConfig)
    z_dim: int = 128
    attacks: list = field(default_factory=list)
    thresholds: list = field(default_factory=lambda: [0.01, 0.02, 0.05, 0.1])
    histogram_bins: int = 50

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        for key in ("dataset", "data_dir", "out_dir"):
            if key not in d:
                raise ConfigError("required field missing", pointer=f"/{key}")
        if d["dataset"] not in ("mnist", "cifar10"):
            raise ConfigError(f"dataset must be 'mnist' or 'cifar10', got {d['dataset']!r}",
                              pointer="/dataset")
        for key, sub in (("classifier", "/classifier"), ("cvae", "/cvae")):
            if key in d:
                try:
                    d[key] = TrainConfig.from_dict(dict(d[key]))
                except (TypeError, ValueError) as exc:
                    raise ConfigError(str(exc), pointer=sub) from exc
        attacks = []
        for i, entry in enumerate(d.get("attacks", [])):
            try:
                attacks.append(AttackConfig.from_dict(entry))
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc), pointer=f"/attacks/{i}") from exc
        d["attacks"] = attacks
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        if cfg.eval_samples <= 0:
            raise ConfigError("eval_samples must be positive", pointer="/eval_samples")
        for i, t in enumerate(cfg.thresholds):
            if not 0.0 <= t <= 1.0:
                raise ConfigError(f"threshold {t} outside [0, 1]", pointer=f"/thresholds/{i}")
        return cfg

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            payload = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(payload)

    def attack_by_id(self, attack_id: str) -> AttackConfig:
        for cfg in self.attacks:
            if cfg.id == attack_id:
                return cfg
        raise ConfigError(f"no attack with id {attack_id!r} in config", pointer="/attacks")


def stage_seed(run_seed: int, stage: str) -> int:
    """Stable per-stage seed: hash of (run seed, stage name)."""
    digest = hashlib.sha256(f"{run_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def _apply_determinism(config: RunConfig, stage: str):
    seed = stage_seed(config.seed, stage)
    torch.manual_seed(seed)
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    return seed


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Per-run record of config, stage timings, and artifact content hashes."""

    def __init__(self, out_dir, config: RunConfig | None = None):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"library_version": __version__, "stages": {}}
        if config is not None:
            self.data["seed"] = config.seed
            self.data["config"] = json.loads(json.dumps(_config_snapshot(config)))

    def record(self, stage: str, seed: int, wall_clock: float, outputs):
        self.data["stages"][stage] = {
            "seed": seed,
            "wall_clock_s": round(wall_clock, 3),
            "outputs": {
                str(Path(p).relative_to(self.out_dir)): _sha256(p) for p in outputs
            },
        }
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True))

    def outputs_of(self, stage: str) -> dict:
        return self.data["stages"].get(stage, {}).get("outputs", {})

    def verify(self) -> list:
        """Return a list of (path, reason) for every tampered/missing artifact."""
        problems = []
        for stage, info in self.data["stages"].items():
            for rel, digest in info["outputs"].items():
                path = self.out_dir / rel
                if not path.exists():
                    problems.append((rel, "missing"))
                elif _sha256(path) != digest:
                    problems.append((rel, "hash mismatch"))
        return problems


def _config_snapshot(config: RunConfig) -> dict:
    snap = {
        "dataset": config.dataset,
        "data_dir": str(config.data_dir),
        "out_dir": str(config.out_dir),
        "seed": config.seed,
        "deterministic": config.deterministic,
        "eval_samples": config.eval_samples,
        "classifier_profile": config.classifier_profile,
        "classifier": config.classifier.__dict__,
        "cvae": config.cvae.__dict__,
        "z_dim": config.z_dim,
        "attacks": [a.to_dict() for a in config.attacks],
        "thresholds": list(config.thresholds),
        "histogram_bins": config.histogram_bins,
    }
    return snap


# ---------------------------------------------------------------------------
# dataset access
# ---------------------------------------------------------------------------


def _find(data_dir: Path, stem: str) -> Path:
    for candidate in (data_dir / stem, data_dir / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise DependencyError(
        f"dataset file {stem}[.gz] not found under {data_dir}; "
        "fetch the data first (see `cvae-detect fetch-data`)"
    )


def load_run_datasets(config: RunConfig):
    """(train, test) LabeledDatasets for the configured dataset."""
    data_dir = Path(config.data_dir)
    if config.dataset == "mnist":
        train = load_mnist(
            _find(data_dir, MNIST_FILES["train_images"]),
            _find(data_dir, MNIST_FILES["train_labels"]),
            name="mnist",
        )
        test = load_mnist(
            _find(data_dir, MNIST_FILES["test_images"]),
            _find(data_dir, MNIST_FILES["test_labels"]),
            name="mnist",
        )
        return train, test
    for sub in (data_dir, data_dir / "cifar-10-batches-bin"):
        if (sub / CIFAR_TEST_BATCH).exists():
            train = load_cifar10([sub / b for b in CIFAR_TRAIN_BATCHES], name="cifar10")
            test = load_cifar10([sub / CIFAR_TEST_BATCH], name="cifar10")
            return train, test
    raise DependencyError(
        f"CIFAR-10 binary batches not found under {data_dir}; "
        "fetch the data first (see `cvae-detect fetch-data`)"
    )


def eval_subset(config: RunConfig, test: LabeledDataset) -> LabeledDataset:
    """Seeded evaluation subset of the test split (attack + clean ROC side)."""
    n = min(config.eval_samples, len(test))
    rng = np.random.default_rng(stage_seed(config.seed, "eval_subset"))
    return test.subset(rng.permutation(len(test))[:n])


# ---------------------------------------------------------------------------
# stage paths and prerequisites
# ---------------------------------------------------------------------------


def run_paths(config: RunConfig) -> dict:
    out = Path(config.out_dir)
    return {
        "out": out,
        "classifier": out / "classifier.pt",
        "cvae": out / "cvae.pt",
        "reference": out / "reference.npy",
        "attacks": out / "attacks",
        "detect": out / "detect",
        "report": out / "report",
        "sweeps": out / "sweeps",
    }


def _require(path: Path, producer: str):
    if not Path(path).exists():
        raise DependencyError(f"{path} is missing; run `cvae-detect {producer}` first")


# ---------------------------------------------------------------------------
# stage commands
# ---------------------------------------------------------------------------


def cmd_train_classifier(config: RunConfig) -> Path:
    paths = run_paths(config)
    seed = _apply_determinism(config, "train_classifier")
    train, test = load_run_datasets(config)
    t0 = time.perf_counter()
    cfg = TrainConfig(**{**config.classifier.__dict__, "seed": seed})
    model = train_classifier(train, cfg, profile=config.classifier_profile)
    out = save_checkpoint(model, paths["classifier"], config.dataset, seed=seed,
                          extra={"test_error": error_rate(model, test)})
    RunManifest(paths["out"], config).record(
        "train_classifier", seed, time.perf_counter() - t0, [out, Path(str(out) + ".json")]
    )
    return out


def cmd_train_cvae(config: RunConfig) -> Path:
    paths = run_paths(config)
    seed = _apply_determinism(config, "train_cvae")
    train, _ = load_run_datasets(config)
    t0 = time.perf_counter()
    cfg = TrainConfig(**{**config.cvae.__dict__, "seed": seed})
    model = train_cvae(train, cfg, z_dim=config.z_dim)
    out = save_checkpoint(model, paths["cvae"], config.dataset, seed=seed)
    RunManifest(paths["out"], config).record(
        "train_cvae", seed, time.perf_counter() - t0, [out, Path(str(out) + ".json")]
    )
    return out


def cmd_build_reference(config: RunConfig) -> Path:
    paths = run_paths(config)
    seed = _apply_determinism(config, "build_reference")
    _require(paths["cvae"], "train-cvae")
    cvae, _ = load_checkpoint(paths["cvae"], expect_dataset=config.dataset)
    train, _ = load_run_datasets(config)
    t0 = time.perf_counter()
    ref = build_reference(cvae, train)
    out = ref.save(paths["reference"])
    RunManifest(paths["out"], config).record(
        "build_reference", seed, time.perf_counter() - t0,
        [out, out.with_suffix(".json")],
    )
    return out


def cmd_attack(config: RunConfig, attack_id: str) -> Path:
    paths = run_paths(config)
    attack_cfg = config.attack_by_id(attack_id)
    _require(paths["classifier"], "train-classifier")
    cls_model, _ = load_checkpoint(paths["classifier"], expect_dataset=config.dataset)
    cvae = None
    if attack_cfg.kind == "whitebox_pgd":
        _require(paths["cvae"], "train-cvae")
        cvae, _ = load_checkpoint(paths["cvae"], expect_dataset=config.dataset)
    seed = _apply_determinism(config, f"attack:{attack_id}")
    _, test = load_run_datasets(config)
    subset = eval_subset(config, test)
    run_cfg = AttackConfig.from_dict({**attack_cfg.to_dict(), "seed": seed})
    t0 = time.perf_counter()
    result = run_attack(run_cfg, cls_model, subset.images, subset.labels, cvae=cvae)
    out_dir = paths["attacks"] / attack_id
    result.save(out_dir)
    (out_dir / "config.json").write_text(json.dumps(run_cfg.to_dict(), indent=2, sort_keys=True))
    RunManifest(paths["out"], config).record(
        f"attack:{attack_id}", seed, time.perf_counter() - t0,
        [out_dir / "x_adv.pt", out_dir / "result.csv", out_dir / "config.json"],
    )
    return out_dir


def _load_models_and_reference(config: RunConfig):
    paths = run_paths(config)
    _require(paths["classifier"], "train-classifier")
    _require(paths["cvae"], "train-cvae")
    _require(paths["reference"], "build-reference")
    cls_model, _ = load_checkpoint(paths["classifier"], expect_dataset=config.dataset)
    cvae, _ = load_checkpoint(paths["cvae"], expect_dataset=config.dataset)
    ref = ReconReference.load(paths["reference"])
    if ref.meta.get("dataset") != config.dataset:
        raise DependencyError(
            f"reference was built for {ref.meta.get('dataset')!r}, run expects {config.dataset!r}"
        )
    return cls_model, cvae, ref


def cmd_detect(config: RunConfig, attack_id: str, threshold: float) -> Path:
    paths = run_paths(config)
    cls_model, cvae, ref = _load_models_and_reference(config)
    attack_dir = paths["attacks"] / attack_id
    _require(attack_dir / "x_adv.pt", f"attack {attack_id}")
    seed = _apply_determinism(config, f"detect:{attack_id}")
    result = AttackResult.load(attack_dir)
    t0 = time.perf_counter()
    detection = detect(cls_model, cvae, ref, result.x_adv, threshold)
    out = paths["detect"] / f"{attack_id}_t{threshold:g}.csv"
    detection.to_csv(out)
    RunManifest(paths["out"], config).record(
        f"detect:{attack_id}:t{threshold:g}", seed, time.perf_counter() - t0, [out]
    )
    return out


def _clean_p_values(cls_model, cvae, ref, subset: LabeledDataset) -> np.ndarray:
    with torch.no_grad():
        y_pred = classifier_predict(cls_model, subset.images)
        dists = recon_distance(cvae, subset.images, y_pred).numpy()
    return np.asarray(p_value(dists, ref)), dists


def cmd_evaluate(config: RunConfig) -> Path:
    """Aggregate every attack with stored outputs into the report bundle."""
    paths = run_paths(config)
    cls_model, cvae, ref = _load_models_and_reference(config)
    seed = _apply_determinism(config, "evaluate")
    _, test = load_run_datasets(config)
    subset = eval_subset(config, test)
    t0 = time.perf_counter()

    e_normal = error_rate(cls_model, test)
    p_clean, d_clean = _clean_p_values(cls_model, cvae, ref, subset)

    report_dir = paths["report"]
    report = EvalReport(config.dataset, e_normal)
    outputs = []
    bins = config.histogram_bins
    outputs.append(histogram_export(d_clean, bins, report_dir / "hist_recon_normal.csv"))
    outputs.append(histogram_export(p_clean, bins, report_dir / "hist_pval_normal.csv",
                                    value_range=(0.0, 1.0)))

    normal_curve = roc_curve(p_clean, p_clean)
    report.add_row(AttackRow(
        attack_id="normal", parameters={}, error_rate=e_normal,
        auc=normal_curve.auc, robust_risk_upper=robust_risk_upper(normal_curve, e_normal),
        n_evaluated=len(subset), n_successful=0,
    ))

    for attack_cfg in config.attacks:
        attack_dir = paths["attacks"] / attack_cfg.id
        _require(attack_dir / "x_adv.pt", f"attack {attack_cfg.id}")
        result = AttackResult.load(attack_dir)
        atk_error = float(result.success.to(torch.float64).mean())
        # grey/white-box rows score successful adversaries only; random noise
        # is scored over all samples (it is not trying to fool the classifier)
        if attack_cfg.kind == "random":
            x_scored = result.x_adv
        else:
            keep = result.success.nonzero(as_tuple=True)[0]
            x_scored = result.x_adv[keep]
        row_params = {"kind": attack_cfg.kind, "norm": attack_cfg.norm,
                      "eps_atk": attack_cfg.eps_atk}
        if attack_cfg.kind in ("rfgsm", "whitebox_pgd") and attack_cfg.eps_rand:
            row_params["eps_rand"] = attack_cfg.eps_rand
        if attack_cfg.alpha is not None:
            row_params["alpha"] = attack_cfg.alpha
            row_params["n"] = attack_cfg.n
        if attack_cfg.kind == "whitebox_pgd":
            row_params["sigma"] = attack_cfg.sigma
        if len(x_scored) == 0:
            report.add_row(AttackRow(
                attack_id=attack_cfg.id, parameters=row_params, error_rate=atk_error,
                auc=float("nan"), robust_risk_upper=float("nan"),
                n_evaluated=len(result.x_adv), n_successful=0,
            ))
            continue
        with torch.no_grad():
            y_pred = classifier_predict(cls_model, x_scored)
            d_adv = recon_distance(cvae, x_scored, y_pred).numpy()
        p_adv = np.asarray(p_value(d_adv, ref))
        curve = roc_curve(p_clean, p_adv)
        outputs.append(curve.to_csv(report_dir / f"roc_{attack_cfg.id}.csv"))
        outputs.append(histogram_export(d_adv, bins, report_dir / f"hist_recon_{attack_cfg.id}.csv"))
        outputs.append(histogram_export(p_adv, bins, report_dir / f"hist_pval_{attack_cfg.id}.csv",
                                        value_range=(0.0, 1.0)))
        report.add_row(AttackRow(
            attack_id=attack_cfg.id, parameters=row_params, error_rate=atk_error,
            auc=curve.auc, robust_risk_upper=robust_risk_upper(curve, e_normal),
            n_evaluated=len(result.x_adv), n_successful=int(result.success.sum()),
        ))

    outputs.append(report.to_json(report_dir / "report.json"))
    outputs.append(report.to_csv(report_dir / "report.csv"))
    RunManifest(paths["out"], config).record(
        "evaluate", seed, time.perf_counter() - t0, outputs
    )
    return report_dir / "report.json"


def cmd_sweep(config: RunConfig, parameter: str, values) -> Path:
    """Re-run the white-box attack across sigma or epsilon values.

    Produces one report per value plus a summary CSV of
    (value, success_rate, auc, robust_risk_upper).
    """
    if parameter not in ("sigma", "epsilon"):
        raise ConfigError(f"sweep parameter must be 'sigma' or 'epsilon', got {parameter!r}")
    paths = run_paths(config)
    cls_model, cvae, ref = _load_models_and_reference(config)
    base = next((a for a in config.attacks if a.kind == "whitebox_pgd"), None)
    if base is None:
        raise ConfigError("config has no whitebox_pgd attack to sweep", pointer="/attacks")
    seed = _apply_determinism(config, f"sweep:{parameter}")
    _, test = load_run_datasets(config)
    subset = eval_subset(config, test)
    e_normal = error_rate(cls_model, test)
    p_clean, _ = _clean_p_values(cls_model, cvae, ref, subset)

    sweep_dir = paths["sweeps"] / parameter
    sweep_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    outputs = []
    t0 = time.perf_counter()
    for value in values:
        overrides = {"sigma": float(value)} if parameter == "sigma" else {"eps_atk": float(value)}
        cfg = AttackConfig.from_dict({**base.to_dict(), **overrides, "seed": seed,
                                      "id": f"{base.id}_{parameter}{value:g}"})
        result = run_attack(cfg, cls_model, subset.images, subset.labels, cvae=cvae)
        success_rate = float(result.success.to(torch.float64).mean())
        keep = result.success.nonzero(as_tuple=True)[0]
        if len(keep):
            with torch.no_grad():
                y_pred = classifier_predict(cls_model, result.x_adv[keep])
                d_adv = recon_distance(cvae, result.x_adv[keep], y_pred).numpy()
            curve = roc_curve(p_clean, np.asarray(p_value(d_adv, ref)))
            auc, rru = curve.auc, robust_risk_upper(curve, e_normal)
        else:
            auc, rru = float("nan"), float("nan")
        rows.append((float(value), success_rate, auc, rru))
        value_report = EvalReport(config.dataset, e_normal)
        value_report.add_row(AttackRow(
            attack_id=cfg.id, parameters={parameter: float(value)},
            error_rate=success_rate, auc=auc, robust_risk_upper=rru,
            n_evaluated=len(result.x_adv), n_successful=int(result.success.sum()),
        ))
        outputs.append(value_report.to_json(sweep_dir / f"report_{value:g}.json"))

    summary = sweep_dir / "summary.csv"
    with open(summary, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([parameter, "success_rate", "auc", "robust_risk_upper"])
        for row in rows:
            writer.writerow([f"{v:.8g}" for v in row])
    outputs.append(summary)
    RunManifest(paths["out"], config).record(
        f"sweep:{parameter}", seed, time.perf_counter() - t0, outputs
    )
    return summary


def run_all(config: RunConfig) -> Path:
    """Execute the full grey-box pipeline for a config, in dependency order."""
    cmd_train_classifier(config)
    cmd_train_cvae(config)
    cmd_build_reference(config)
    for attack_cfg in config.attacks:
        cmd_attack(config, attack_cfg.id)
        for t in config.thresholds:
            cmd_detect(config, attack_cfg.id, t)
    return cmd_evaluate(config)
