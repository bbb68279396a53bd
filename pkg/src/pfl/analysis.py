"""Diagnostics for trained models: uncertainty statistics, the sigma_c
trajectory of a training log, and a rank-1 view of the cross-cloth mapping."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core_math import singular_values, svd_rank1
from .errors import AnalysisError, ParseError
from .model import (ModelConfig, ModelParams, atomic_write_text, backbone_forward, identity_branch,
                    stack_frames, uncertainty_branch)
from .synthbench import CONDITIONS, SequenceRecord
from .trainer import METRICS_HEADER

PHASE1_WARNING = ("uncertainty branch was not trained (identity-only checkpoint); "
                  "sigma statistics reflect initial parameters")


def _branch_outputs(records: list[SequenceRecord], params: ModelParams, config: ModelConfig, chunk: int = 256):
    mu_v, sig_v, sig_c = [], [], []
    for i in range(0, len(records), chunk):
        part = records[i:i + chunk]
        f = backbone_forward(stack_frames([r.frames for r in part]), params, config)
        mu_v.append(identity_branch(f, params, config)[0])
        sv, sc = uncertainty_branch(f, params, config)
        sig_v.append(sv)
        sig_c.append(sc)
    return np.concatenate(mu_v), np.concatenate(sig_v), np.concatenate(sig_c)


@dataclass
class SigmaReport:
    sigma_v: dict[str, float]  # condition -> mean
    sigma_c: dict[str, float]
    sigma_c_per_part: dict[str, list[float]]
    counts: dict[str, int]
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"sigma_v_mean": self.sigma_v, "sigma_c_mean": self.sigma_c,
                "sigma_c_per_part": self.sigma_c_per_part, "counts": self.counts, "warnings": self.warnings}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["condition", "part", "sigma_c_mean"])
        for cond, parts in self.sigma_c_per_part.items():
            for p, v in enumerate(parts):
                w.writerow([cond, p, repr(v)])
        return buf.getvalue()


def sigma_statistics(records: list[SequenceRecord], params: ModelParams, config: ModelConfig,
                     phase: str | None = None) -> SigmaReport:
    """Mean sigma per condition, averaged over sequences, then parts, then channels."""
    if not records:
        raise AnalysisError("no records to analyse")
    _, sv, sc = _branch_outputs(records, params, config)
    conds = np.array([r.condition for r in records])
    report = SigmaReport({}, {}, {}, {})
    if phase == "identity_only":
        report.warnings.append(PHASE1_WARNING)
    for c in CONDITIONS:
        sel = conds == c
        if not sel.any():
            continue
        # per-part means of channel means: equal-size groups, so this is also the overall mean
        per_part_c = sc[sel].mean(axis=0).mean(axis=-1)
        report.sigma_c_per_part[c] = [float(v) for v in per_part_c]
        report.sigma_c[c] = float(per_part_c.mean())
        report.sigma_v[c] = float(sv[sel].mean(axis=0).mean(axis=-1).mean())
        report.counts[c] = int(sel.sum())
    return report


@dataclass
class SigmaTrajectory:
    iters: np.ndarray
    sigma_c: np.ndarray
    first_decile: float
    last_decile: float

    def to_dict(self) -> dict:
        return {"n_points": int(self.iters.size), "first_decile_mean": self.first_decile,
                "last_decile_mean": self.last_decile}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "sigma_c_mean"])
        for i, s in zip(self.iters, self.sigma_c):
            w.writerow([int(i), repr(float(s))])
        return buf.getvalue()


def decile_means(values) -> tuple[float, float]:
    """Means over the first and last ``ceil(n / 10)`` points."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise AnalysisError("empty series")
    d = max(1, math.ceil(v.size / 10))
    return float(v[:d].mean()), float(v[-d:].mean())


def sigma_trajectory(text: str) -> SigmaTrajectory:
    """Parse a metrics CSV (as text) and summarise its sigma_c column."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != METRICS_HEADER:
        raise ParseError(f"metrics header must be {','.join(METRICS_HEADER)}")
    col = METRICS_HEADER.index("sigma_c_mean")
    iters, sig = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(METRICS_HEADER):
            raise ParseError(f"line {lineno}: expected {len(METRICS_HEADER)} fields, got {len(row)}")
        try:
            it = int(row[0])
            s = float(row[col]) if row[col] != "" else None
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
        if s is None:
            continue
        if not math.isfinite(s):
            raise ParseError(f"line {lineno}: non-finite sigma_c_mean")
        iters.append(it)
        sig.append(s)
    if not sig:
        raise AnalysisError("metrics log has no sigma_c values (identity-only run?)")
    first, last = decile_means(sig)
    return SigmaTrajectory(np.array(iters), np.array(sig), first, last)


def load_sigma_trajectory(path) -> SigmaTrajectory:
    with open(path, encoding="utf-8", newline="") as fh:
        return sigma_trajectory(fh.read())


@dataclass
class PartSvd:
    part: int
    s1: float
    spectrum: list[float]
    recon_error: float
    tail_ratio: float
    cosine: float


@dataclass
class CcmSvdReport:
    parts: list[PartSvd]
    random_cosine_baseline: float

    def to_dict(self) -> dict:
        return {"parts": [vars(p) for p in self.parts], "random_cosine_baseline": self.random_cosine_baseline}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["part", "s1", "recon_error", "tail_ratio", "abs_cosine"])
        for p in self.parts:
            w.writerow([p.part, repr(p.s1), repr(p.recon_error), repr(p.tail_ratio), repr(p.cosine)])
        return buf.getvalue()


def rank1_summary(W: np.ndarray, direction: np.ndarray) -> tuple[float, list[float], float, float, float]:
    """``(s1, spectrum, ||W - W1||_F / ||W||_F, tail ratio, |cos(v1, direction)|)``."""
    _, _, v1, W1 = svd_rank1(W)
    s = singular_values(W)
    s1 = s[0]  # from the spectrum itself, so s1 == max(spectrum) exactly
    norm = np.linalg.norm(W)
    if norm == 0:
        raise AnalysisError("zero matrix has no principal direction")
    recon = float(np.linalg.norm(W - W1) / norm)
    tail = float(math.sqrt(float((s[1:] ** 2).sum())) / math.sqrt(float((s ** 2).sum())))
    dn = np.linalg.norm(direction)
    if dn == 0:
        raise AnalysisError("zero reference direction")
    cos = float(abs(v1 @ direction) / dn)
    return float(s1), [float(x) for x in s], recon, tail, min(cos, 1.0)


def nm_to_cl_directions(records: list[SequenceRecord], params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Unit ``(S, E)`` directions: mean over identities of the CL minus NM centroid of ``mu_v``."""
    ids_nm = {r.identity for r in records if r.condition == "NM"}
    ids_cl = {r.identity for r in records if r.condition == "CL"}
    shared = sorted(ids_nm & ids_cl)
    if not shared:
        raise AnalysisError("analysis needs NM and CL sequences of at least one shared identity")
    use = [r for r in records if r.identity in ids_nm & ids_cl and r.condition in ("NM", "CL")]
    mu_v, _, _ = _branch_outputs(use, params, config)
    ident = np.array([r.identity for r in use])
    cond = np.array([r.condition for r in use])
    diffs = [mu_v[(ident == i) & (cond == "CL")].mean(axis=0) - mu_v[(ident == i) & (cond == "NM")].mean(axis=0)
             for i in shared]
    d = np.mean(diffs, axis=0)
    norms = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise AnalysisError("NM and CL centroids coincide in some part")
    return d / norms


def random_cosine_expectation(dim: int) -> float:
    """E|cos| between two independent uniform unit vectors in ``dim`` dimensions."""
    if dim == 1:
        return 1.0
    return math.exp(math.lgamma(dim / 2) - math.lgamma((dim + 1) / 2)) / math.sqrt(math.pi)


def ccm_svd_analysis(records: list[SequenceRecord], params: ModelParams, config: ModelConfig) -> CcmSvdReport:
    if not config.two_stage:
        raise AnalysisError("model has no cross-cloth mapping")
    dirs = nm_to_cl_directions(records, params, config)
    parts = []
    for p in range(config.parts):
        s1, spec, recon, tail, cos = rank1_summary(params.id_ccm_w[p], dirs[p])
        parts.append(PartSvd(p, s1, spec, recon, tail, cos))
    return CcmSvdReport(parts, random_cosine_expectation(config.embed_dim))


def write_json(path, doc: dict) -> None:
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
