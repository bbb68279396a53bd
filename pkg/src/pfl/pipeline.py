"""Run configuration and the end-to-end pipeline the CLI and demos share.

A run config is one JSON document with the sections ``synth``, ``model``,
``train_phase1``, ``train_phase2``, ``train_baseline`` and ``eval``; every
section is optional and missing keys take the defaults below.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import analysis
from .core_math import make_rng
from .errors import ConfigError
from .evaluation import EvalReport, evaluate
from .model import ModelConfig, ModelParams, atomic_write_text, load_checkpoint, save_checkpoint
from .synthbench import Dataset, SynthConfig, generate_benchmark, load_manifest, save_manifest, split_gallery_probe
from .trainer import TrainConfig, train_baseline, train_phase1, train_phase2, write_metrics

log = logging.getLogger(__name__)

SECTIONS = ("synth", "model", "train_phase1", "train_phase2", "train_baseline", "eval")

# Default benchmark: the cloth shift lives in the body code before the view
# warp, and the warp rotates the whole code, so what a coat looks like depends
# on the viewpoint.
DEFAULT_SYNTH = SynthConfig(cloth_shift_magnitude=8.0, view_warp_strength=1.5, view_planes=16,
                            noise_std=0.5, sequence_noise_std=0.5)
DEFAULT_MODEL = ModelConfig()
DEFAULT_PHASE1 = TrainConfig(phase="identity_only", lr=0.003, total_iters=300, milestones=(210,))
DEFAULT_PHASE2 = TrainConfig(phase="full", lr=0.003, total_iters=150, milestones=(105,))
DEFAULT_BASELINE = TrainConfig(phase="baseline", lr=0.003, total_iters=450, milestones=(315,))


@dataclass(frozen=True)
class EvalOptions:
    exclude_identical_view: bool = True
    self_gallery: bool = False


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = DEFAULT_SYNTH
    model: ModelConfig = DEFAULT_MODEL
    train_phase1: TrainConfig = DEFAULT_PHASE1
    train_phase2: TrainConfig = DEFAULT_PHASE2
    train_baseline: TrainConfig = DEFAULT_BASELINE
    eval: EvalOptions = field(default_factory=EvalOptions)

    def train(self, phase: str) -> TrainConfig:
        return {"identity_only": self.train_phase1, "full": self.train_phase2,
                "baseline": self.train_baseline}[phase]

    def with_seed(self, seed: int) -> "RunConfig":
        """Use ``seed`` for every training phase (generation takes it directly)."""
        return replace(self, train_phase1=replace(self.train_phase1, seed=seed),
                       train_phase2=replace(self.train_phase2, seed=seed),
                       train_baseline=replace(self.train_baseline, seed=seed))

    def to_dict(self) -> dict:
        return {"synth": self.synth.to_dict(), "model": self.model.to_dict(),
                "train_phase1": self.train_phase1.to_dict(), "train_phase2": self.train_phase2.to_dict(),
                "train_baseline": self.train_baseline.to_dict(), "eval": asdict(self.eval)}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}; expected some of {list(SECTIONS)}")
        for name, sec in doc.items():
            if not isinstance(sec, dict):
                raise ConfigError(f"config section {name!r} must be an object")

        def merged(default, name):
            d = default.to_dict()
            d.update(doc.get(name, {}))
            return d

        phases = {}
        for name, default in (("train_phase1", DEFAULT_PHASE1), ("train_phase2", DEFAULT_PHASE2),
                              ("train_baseline", DEFAULT_BASELINE)):
            d = merged(default, name)
            if d.get("phase") != default.phase:
                raise ConfigError(f"section {name} must have phase {default.phase!r}")
            phases[name] = TrainConfig.from_dict(d)
        try:
            ev = EvalOptions(**{**asdict(EvalOptions()), **doc.get("eval", {})})
        except TypeError as exc:
            raise ConfigError(f"eval section: {exc}") from exc
        return cls(SynthConfig.from_dict(merged(DEFAULT_SYNTH, "synth")),
                   ModelConfig.from_dict(merged(DEFAULT_MODEL, "model")), eval=ev, **phases)


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(doc)


# file names inside an output directory
MANIFEST = "manifest.jsonl"
SUMMARY = "summary.json"
CHECKPOINT = "checkpoint.json"
METRICS = "metrics.csv"
RANK1_CSV, RANK1_JSON = "rank1.csv", "rank1.json"


def _json(path, doc) -> None:
    analysis.write_json(path, doc)


def gen(config: RunConfig, seed: int, out) -> Dataset:
    os.makedirs(out, exist_ok=True)
    ds = generate_benchmark(config.synth, make_rng(seed))
    save_manifest(ds, Path(out) / MANIFEST)
    _json(Path(out) / SUMMARY, ds.summary())
    return ds


def check_compatible(dataset: Dataset, model: ModelConfig) -> None:
    dim = dataset.config.get("frame_dim")
    if dim is None and dataset.records:
        dim = dataset.records[0].frames.shape[1]
    if dim != model.frame_dim:
        raise ConfigError(f"data frame_dim {dim} does not match model frame_dim {model.frame_dim}")


def train(config: RunConfig, dataset: Dataset, phase: str, out, pretrained=None) -> ModelParams:
    """Train one phase and write ``checkpoint.json`` and ``metrics.csv`` into ``out``."""
    cfg = config.train(phase)
    model = config.model
    check_compatible(dataset, model)
    if phase == "identity_only":
        params, rows = train_phase1(dataset, model, cfg)
    elif phase == "full":
        if pretrained is None:
            raise ConfigError("phase 'full' needs a pretrained identity-only checkpoint")
        pre_params, pre_model, header = load_checkpoint(pretrained)
        if header.get("phase") != "identity_only":
            raise ConfigError(f"pretrained checkpoint has phase {header.get('phase')!r}, expected 'identity_only'")
        if pre_model != model:
            raise ConfigError("pretrained checkpoint model config differs from the run config")
        params, rows = train_phase2(dataset, pre_params, model, cfg)
    elif phase == "baseline":
        model = replace(model, two_stage=False)
        params, rows = train_baseline(dataset, model, cfg)
    else:
        raise ConfigError(f"unknown phase {phase!r}")
    os.makedirs(out, exist_ok=True)
    meta = {"phase": phase, "train_config": cfg.to_dict(), "data_summary": dataset.summary()}
    save_checkpoint(Path(out) / CHECKPOINT, params, model, meta)
    write_metrics(rows, Path(out) / METRICS)
    return params


def evaluate_checkpoint(checkpoint, dataset: Dataset, options: EvalOptions, out=None) -> EvalReport:
    params, model, _ = load_checkpoint(checkpoint)
    check_compatible(dataset, model)
    split = split_gallery_probe(dataset.test_records)
    report = evaluate(params, model, split, options.exclude_identical_view, options.self_gallery)
    report.warnings = split.warnings + report.warnings
    if out is not None:
        os.makedirs(out, exist_ok=True)
        report.write(Path(out) / RANK1_CSV, Path(out) / RANK1_JSON)
    return report


def analyze(checkpoint, dataset: Dataset, metrics, out) -> dict:
    """Write the sigma, trajectory and cross-cloth SVD reports; returns a summary."""
    params, model, header = load_checkpoint(checkpoint)
    check_compatible(dataset, model)
    os.makedirs(out, exist_ok=True)
    out = Path(out)
    warnings: list[str] = []
    summary: dict = {"phase": header.get("phase")}
    test = dataset.test_records
    if model.two_stage:
        sig = analysis.sigma_statistics(test, params, model, phase=header.get("phase"))
        warnings += sig.warnings
        _json(out / "sigma.json", sig.to_dict())
        atomic_write_text(out / "sigma_parts.csv", sig.to_csv())
        summary["sigma_c_mean"] = sig.sigma_c
        svd = analysis.ccm_svd_analysis(test, params, model)
        _json(out / "ccm_svd.json", svd.to_dict())
        atomic_write_text(out / "ccm_svd.csv", svd.to_csv())
        summary["ccm_abs_cosine"] = [p.cosine for p in svd.parts]
    else:
        warnings.append("one-stage model: no uncertainty branch or cross-cloth mapping to analyse")
    if metrics is not None and os.path.exists(metrics):
        try:
            traj = analysis.load_sigma_trajectory(metrics)
        except analysis.AnalysisError as exc:
            warnings.append(f"sigma trajectory skipped: {exc}")
        else:
            _json(out / "sigma_trajectory.json", traj.to_dict())
            atomic_write_text(out / "sigma_trajectory.csv", traj.to_csv())
            summary["sigma_trajectory"] = traj.to_dict()
    else:
        warnings.append("metrics CSV missing: sigma trajectory skipped")
    summary["warnings"] = warnings
    for w in warnings:
        log.warning(w)
    _json(out / "analysis.json", summary)
    return summary


def run_pipeline(config: RunConfig, seed: int, out, baseline: bool = True) -> dict:
    """gen -> phase 1 -> phase 2 -> eval -> analyze (plus the baseline), all under ``out``.

    Returns the phase-2 and baseline evaluation reports and the analysis summary.
    """
    out = Path(out)
    config = config.with_seed(seed)
    gen(config, seed, out / "data")
    dataset = load_manifest(out / "data" / MANIFEST)
    train(config, dataset, "identity_only", out / "phase1")
    train(config, dataset, "full", out / "phase2", pretrained=out / "phase1" / CHECKPOINT)
    result = {"pfl": evaluate_checkpoint(out / "phase2" / CHECKPOINT, dataset, config.eval, out / "eval")}
    result["analysis"] = analyze(out / "phase2" / CHECKPOINT, dataset, out / "phase2" / METRICS, out / "analysis")
    if baseline:
        train(config, dataset, "baseline", out / "baseline")
        result["baseline"] = evaluate_checkpoint(out / "baseline" / CHECKPOINT, dataset, config.eval,
                                                 out / "baseline_eval")
    return result
