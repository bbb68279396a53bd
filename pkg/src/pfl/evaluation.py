"""Rank-1 identification with identical-view exclusion."""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .model import ModelConfig, ModelParams, atomic_write_text, backbone_forward, identity_branch, stack_frames
from .synthbench import CONDITIONS, SequenceRecord

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Embedded:
    seq_id: int
    identity: int
    view: float
    condition: str
    emb: np.ndarray  # (S, E)


@dataclass
class EvalReport:
    cells: dict[tuple[str, float], tuple[int, int]]  # (condition, probe view) -> (correct, total)
    skipped: int = 0
    audit: list[tuple[int, int, bool]] = field(default_factory=list)  # (probe, matched gallery, same view)
    warnings: list[str] = field(default_factory=list)

    def accuracy(self, condition: str, view: float) -> float:
        c, n = self.cells[(condition, view)]
        return c / n

    def views(self, condition: str) -> list[float]:
        return sorted(v for c, v in self.cells if c == condition)

    def average(self, condition: str) -> float | None:
        """Mean of the per-view accuracies that were evaluated."""
        accs = [self.accuracy(condition, v) for v in self.views(condition)]
        return float(np.mean(accs)) if accs else None

    def averages(self) -> dict[str, float | None]:
        conds = [c for c in CONDITIONS if any(k[0] == c for k in self.cells)]
        return {c: self.average(c) for c in conds}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["condition", "probe_view", "accuracy", "n_probes"])
        for cond, view in sorted(self.cells, key=lambda k: (CONDITIONS.index(k[0]) if k[0] in CONDITIONS else 9, k[1])):
            c, n = self.cells[(cond, view)]
            w.writerow([cond, repr(float(view)), repr(c / n), n])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"average": self.averages(), "skipped_probes": self.skipped,
                "n_probes": {c: sum(n for (cc, _), (_, n) in self.cells.items() if cc == c)
                             for c in self.averages()}}

    def write(self, csv_path, json_path) -> None:
        atomic_write_text(csv_path, self.to_csv())
        atomic_write_text(json_path, json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def embed_all(records: list[SequenceRecord], params: ModelParams, config: ModelConfig,
              chunk: int = 256) -> dict[int, np.ndarray]:
    """``seq_id -> (S, E)`` inference embeddings (``mu_c``)."""
    out: dict[int, np.ndarray] = {}
    for i in range(0, len(records), chunk):
        part = records[i:i + chunk]
        f = backbone_forward(stack_frames([r.frames for r in part]), params, config)
        mu_c = identity_branch(f, params, config)[1]
        for r, e in zip(part, mu_c):
            out[r.seq_id] = e
    return out


def part_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Sum over parts of the Euclidean distance between matching part vectors."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"part embeddings differ in shape: {a.shape} vs {b.shape}")
    return float(np.sqrt(((a - b) ** 2).sum(axis=-1)).sum())


def part_distance_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise :func:`part_distance` between ``(n, S, E)`` and ``(m, S, E)``."""
    out = np.empty((A.shape[0], B.shape[0]))
    for i in range(A.shape[0]):
        out[i] = np.sqrt(((A[i][None] - B) ** 2).sum(axis=-1)).sum(axis=-1)
    return out


def embedded(records: list[SequenceRecord], embeddings: dict[int, np.ndarray]) -> list[Embedded]:
    return [Embedded(r.seq_id, r.identity, r.view, r.condition, embeddings[r.seq_id]) for r in records]


def rank1(gallery: list[Embedded], probes: dict[str, list[Embedded]], exclude_identical_view: bool = True) -> EvalReport:
    """Nearest-gallery identification per probe; ties go to the lowest gallery seq id."""
    gallery = sorted(gallery, key=lambda g: g.seq_id)
    report = EvalReport(cells={})
    if not gallery:
        report.warnings.append("empty gallery")
        report.skipped = sum(len(v) for v in probes.values())
        return report
    G = np.stack([g.emb for g in gallery])
    g_view = np.array([g.view for g in gallery])
    g_id = np.array([g.identity for g in gallery])
    g_seq = np.array([g.seq_id for g in gallery])
    tallies: dict[tuple[str, float], list[int]] = defaultdict(lambda: [0, 0])
    for cond in sorted(probes, key=lambda c: CONDITIONS.index(c) if c in CONDITIONS else 9):
        plist = probes[cond]
        if not plist:
            continue
        D = part_distance_matrix(np.stack([p.emb for p in plist]), G)
        for p, d in zip(plist, D):
            if exclude_identical_view:
                d = np.where(g_view == p.view, np.inf, d)
                if not np.isfinite(d).any():
                    report.skipped += 1
                    continue
            j = int(np.argmin(d))
            report.audit.append((p.seq_id, int(g_seq[j]), bool(g_view[j] == p.view)))
            cell = tallies[(cond, p.view)]
            cell[0] += int(g_id[j] == p.identity)
            cell[1] += 1
    report.cells = {k: (v[0], v[1]) for k, v in tallies.items()}
    if report.skipped:
        msg = f"{report.skipped} probes had no gallery candidates after view exclusion and were skipped"
        report.warnings.append(msg)
        log.warning(msg)
    return report


def evaluate(params: ModelParams, config: ModelConfig, split, exclude_identical_view: bool = True,
             self_gallery: bool = False) -> EvalReport:
    """Embed a gallery/probe split and run :func:`rank1`.

    ``self_gallery`` is a sanity mode: NM probes are matched against a gallery
    made of themselves, with view exclusion off.
    """
    records = list(split.gallery) + [r for v in split.probes.values() for r in v]
    emb = embed_all(records, params, config)
    if self_gallery:
        nm = embedded(split.probes.get("NM", []), emb)
        return rank1(nm, {"NM": nm}, exclude_identical_view=False)
    probes = {c: embedded(v, emb) for c, v in split.probes.items()}
    return rank1(embedded(split.gallery, emb), probes, exclude_identical_view)
