"""Synthetic long-tailed two-subset gait benchmark.

Each sequence is a set of noisy frame vectors around a sequence vector built
from an identity code:

    body = identity + cloth_shift (CL) + bag_shift (BG)
    seq = warp(view) @ body + seq_noise
    frame_t = seq + frame_noise_t

``warp(view)`` rotates the body code inside fixed random 2-D planes by an
angle proportional to the view; the same planes are shared by every identity
so a cross-view mapping exists.  The cloth shift acts on the leading block of
the body code (the "upper body" strip) with a per-identity sign pattern
biased towards positive, mimicking dilation which only ever adds silhouette
mass.  Bags shift the middle block by half that magnitude.  Because the shifts
are applied before the warp, a coat looks different from every viewpoint;
``cloth_before_warp=False`` adds them after the warp instead, which makes
them view-independent.

Training identities are split into a cross-view subset ``Xv`` (every view,
NM/BG only) and a disjoint cross-cloth subset ``Xc`` (a few front views,
NM/BG/CL).  The number of Xc sequences per identity and view is chosen so the
Xv:Xc sequence ratio hits ``target_ratio``.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .core_math import Rng
from .errors import ConfigError, ParseError

log = logging.getLogger(__name__)

MANIFEST_FORMAT_VERSION = 1
CONDITIONS = ("NM", "BG", "CL")
XV, XC, TEST = "Xv", "Xc", "Test"
RATIO_TOLERANCE = 0.05


@dataclass(frozen=True)
class SynthConfig:
    n_train_ids: int = 60
    n_test_ids: int = 20
    xv_fraction: float = 44 / 60
    views: tuple[float, ...] = (0.0, 18.0, 36.0, 54.0, 72.0, 90.0, 108.0, 126.0)
    xc_views: tuple[float, ...] = (0.0, 18.0)
    frames_per_seq: int = 12
    frame_dim: int = 32
    cloth_shift_magnitude: float = 3.0
    cloth_dims_fraction: float = 0.25
    cloth_sign_bias: float = 0.8
    view_warp_strength: float = 1.0
    view_planes: int = 6
    noise_std: float = 0.3
    sequence_noise_std: float = 0.3
    target_ratio: float = 3.0
    xv_nm_per_view: int = 2
    xv_bg_per_view: int = 1
    xc_condition_split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    test_nm_per_view: int = 2
    test_bg_per_view: int = 1
    test_cl_per_view: int = 2
    cloth_before_warp: bool = True

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(float(v) for v in self.views))
        object.__setattr__(self, "xc_views", tuple(float(v) for v in self.xc_views))
        object.__setattr__(self, "xc_condition_split", tuple(float(v) for v in self.xc_condition_split))
        if not set(self.xc_views) <= set(self.views) or not self.xc_views:
            raise ConfigError("xc_views must be a non-empty subset of views")
        for name in ("xv_fraction", "cloth_dims_fraction"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if not 0.0 <= self.cloth_sign_bias <= 1.0:
            raise ConfigError("cloth_sign_bias must lie in [0, 1]")
        if self.target_ratio <= 1.0:
            raise ConfigError("target_ratio must exceed 1")
        if self.n_train_ids < 2 or self.n_test_ids < 1 or self.frames_per_seq < 1 or self.frame_dim < 2:
            raise ConfigError("counts too small")
        if 2 * self.view_planes > self.frame_dim:
            raise ConfigError("view_planes needs 2 * view_planes <= frame_dim")
        if len(self.xc_condition_split) != 3 or min(self.xc_condition_split) < 0:
            raise ConfigError("xc_condition_split must be three non-negative weights (NM, BG, CL)")
        n_xv = self.n_xv_ids
        if n_xv < 1 or n_xv >= self.n_train_ids:
            raise ConfigError("xv_fraction leaves one subset without identities")

    @property
    def n_xv_ids(self) -> int:
        return int(round(self.n_train_ids * self.xv_fraction))

    @property
    def n_xc_ids(self) -> int:
        return self.n_train_ids - self.n_xv_ids

    def xc_counts_per_view(self) -> dict[str, int]:
        """NM/BG/CL sequences per (Xc identity, view) needed for the target ratio."""
        n_xv_seqs = self.n_xv_ids * len(self.views) * (self.xv_nm_per_view + self.xv_bg_per_view)
        cells = self.n_xc_ids * len(self.xc_views)
        per_cell = int(round(n_xv_seqs / self.target_ratio / cells))
        w_nm, w_bg, w_cl = self.xc_condition_split
        total_w = w_nm + w_bg + w_cl
        n_cl = max(1, int(round(per_cell * w_cl / total_w)))
        n_bg = int(round(per_cell * w_bg / total_w))
        n_nm = per_cell - n_cl - n_bg
        if n_nm < 1:
            raise ConfigError(
                f"target ratio {self.target_ratio} leaves {per_cell} Xc sequences per identity/view; "
                "need room for at least one NM and one CL"
            )
        achieved = n_xv_seqs / (cells * per_cell)
        if abs(achieved - self.target_ratio) > RATIO_TOLERANCE * self.target_ratio:
            raise ConfigError(f"achievable Xv:Xc ratio {achieved:.3f} misses target {self.target_ratio}")
        return {"NM": n_nm, "BG": n_bg, "CL": n_cl}

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("views", "xc_views", "xc_condition_split"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for k in ("views", "xc_views", "xc_condition_split"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class SequenceRecord:
    identity: int
    condition: str
    view: float
    subset: str
    seq_id: int
    frames: np.ndarray

    def to_json(self) -> dict:
        return {
            "id": self.identity, "condition": self.condition, "view": self.view,
            "subset": self.subset, "seq_id": self.seq_id,
            "frames": [[float(v) for v in row] for row in self.frames],
        }


@dataclass
class Dataset:
    records: list[SequenceRecord]
    config: dict = field(default_factory=dict)

    def subset(self, name: str) -> list[SequenceRecord]:
        return [r for r in self.records if r.subset == name]

    @property
    def train_records(self) -> list[SequenceRecord]:
        return [r for r in self.records if r.subset in (XV, XC)]

    @property
    def test_records(self) -> list[SequenceRecord]:
        return self.subset(TEST)

    @cached_property
    def frames_tensor(self) -> np.ndarray:
        """All frames stacked ``(n_records, T_max, frame_dim)``, record order."""
        from .model import stack_frames
        return stack_frames([r.frames for r in self.records])

    def summary(self) -> dict:
        counts = Counter((r.subset, r.condition) for r in self.records)
        per_subset = Counter(r.subset for r in self.records)
        ids = {s: sorted({r.identity for r in self.records if r.subset == s}) for s in (XV, XC, TEST)}
        n_xv, n_xc = per_subset.get(XV, 0), per_subset.get(XC, 0)
        return {
            "n_records": len(self.records),
            "sequences": {s: per_subset.get(s, 0) for s in (XV, XC, TEST)},
            "by_condition": {f"{s}/{c}": counts.get((s, c), 0) for s in (XV, XC, TEST) for c in CONDITIONS},
            "identities": {s: len(v) for s, v in ids.items()},
            "ratio": (n_xv / n_xc) if n_xc else None,
        }


def _warp_planes(cfg: SynthConfig, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    q, r = np.linalg.qr(rng.standard_normal((cfg.frame_dim, cfg.frame_dim)))
    q *= np.sign(np.diag(r))
    planes = q[:, : 2 * cfg.view_planes].T.reshape(cfg.view_planes, 2, cfg.frame_dim)
    rates = rng.uniform(0.5, 1.5, size=cfg.view_planes)
    return planes, rates


def view_warp(x: np.ndarray, view: float, planes: np.ndarray, rates: np.ndarray, strength: float) -> np.ndarray:
    """Rotate ``x`` inside each plane by ``strength * rate * radians(view)``."""
    out = x.copy()
    theta = strength * math.radians(view)
    for (q1, q2), rate in zip(planes, rates):
        a = theta * rate
        c1, c2 = x @ q1, x @ q2
        n1 = c1 * math.cos(a) - c2 * math.sin(a)
        n2 = c1 * math.sin(a) + c2 * math.cos(a)
        out += (n1 - c1) * q1 + (n2 - c2) * q2
    return out


def cloth_block(cfg: SynthConfig) -> slice:
    return slice(0, max(1, int(round(cfg.frame_dim * cfg.cloth_dims_fraction))))


def bag_block(cfg: SynthConfig) -> slice:
    width = max(1, int(round(cfg.frame_dim * cfg.cloth_dims_fraction)))
    start = (cfg.frame_dim - width) // 2
    return slice(start, start + width)


def _signed_shift(cfg: SynthConfig, block: slice, magnitude: float, rng: Rng) -> np.ndarray:
    width = block.stop - block.start
    signs = np.where(rng.uniform(size=width) < cfg.cloth_sign_bias, 1.0, -1.0)
    shift = np.zeros(cfg.frame_dim)
    shift[block] = magnitude * signs / math.sqrt(width)
    return shift


def generate_benchmark(config: SynthConfig, rng: Rng) -> Dataset:
    cfg = config
    xc_counts = cfg.xc_counts_per_view()
    planes, rates = _warp_planes(cfg, rng)
    n_ids = cfg.n_train_ids + cfg.n_test_ids
    bases = rng.standard_normal((n_ids, cfg.frame_dim))
    cl_block, bg_block = cloth_block(cfg), bag_block(cfg)
    cloth = np.stack([_signed_shift(cfg, cl_block, cfg.cloth_shift_magnitude, rng) for _ in range(n_ids)])
    bags = np.stack([_signed_shift(cfg, bg_block, 0.5 * cfg.cloth_shift_magnitude, rng) for _ in range(n_ids)])

    layout: list[tuple[int, str, dict[str, int], tuple[float, ...]]] = []
    for ident in range(cfg.n_train_ids):
        if ident < cfg.n_xv_ids:
            layout.append((ident, XV, {"NM": cfg.xv_nm_per_view, "BG": cfg.xv_bg_per_view, "CL": 0}, cfg.views))
        else:
            layout.append((ident, XC, xc_counts, cfg.xc_views))
    test_counts = {"NM": cfg.test_nm_per_view, "BG": cfg.test_bg_per_view, "CL": cfg.test_cl_per_view}
    for ident in range(cfg.n_train_ids, n_ids):
        layout.append((ident, TEST, test_counts, cfg.views))

    records: list[SequenceRecord] = []
    seq_id = 0
    for ident, subset, counts, views in layout:
        for view in views:
            for cond in CONDITIONS:
                shift = {"CL": cloth[ident], "BG": bags[ident]}.get(cond)
                if cfg.cloth_before_warp:
                    body = bases[ident] if shift is None else bases[ident] + shift
                    clean = view_warp(body, view, planes, rates, cfg.view_warp_strength)
                else:
                    clean = view_warp(bases[ident], view, planes, rates, cfg.view_warp_strength)
                    if shift is not None:
                        clean = clean + shift
                for _ in range(counts[cond]):
                    vec = clean.copy()
                    vec += cfg.sequence_noise_std * rng.standard_normal(cfg.frame_dim)
                    frames = vec + cfg.noise_std * rng.standard_normal((cfg.frames_per_seq, cfg.frame_dim))
                    records.append(SequenceRecord(ident, cond, float(view), subset, seq_id, frames))
                    seq_id += 1
    return Dataset(records, cfg.to_dict())


@dataclass
class GalleryProbeSplit:
    gallery: list[SequenceRecord]
    probes: dict[str, list[SequenceRecord]]
    warnings: list[str]


def split_gallery_probe(test_records: list[SequenceRecord]) -> GalleryProbeSplit:
    """Gallery = leading NM sequences per (identity, view); the rest are probes.

    With ``n`` NM sequences in a cell the last ``max(1, n // 3)`` become NM
    probes (4 of 6 in the gallery, CASIA style); a single NM sequence stays
    in the gallery.
    """
    cells: dict[tuple[int, float], list[SequenceRecord]] = defaultdict(list)
    for r in test_records:
        cells[(r.identity, r.view)].append(r)
    gallery: list[SequenceRecord] = []
    probes: dict[str, list[SequenceRecord]] = {c: [] for c in CONDITIONS}
    warnings: list[str] = []
    for key in sorted(cells):
        recs = sorted(cells[key], key=lambda r: r.seq_id)
        nm = [r for r in recs if r.condition == "NM"]
        if not nm:
            warnings.append(f"identity {key[0]} has no NM sequence at view {key[1]}; its probes there are excluded")
            continue
        n_probe = max(1, len(nm) // 3) if len(nm) > 1 else 0
        gallery.extend(nm[: len(nm) - n_probe])
        probes["NM"].extend(nm[len(nm) - n_probe:])
        for r in recs:
            if r.condition != "NM":
                probes[r.condition].append(r)
    for cond in CONDITIONS:
        if not probes[cond]:
            warnings.append(f"{cond} probe set is empty")
    for w in warnings:
        log.warning(w)
    return GalleryProbeSplit(gallery, probes, warnings)


def save_manifest(dataset: Dataset, path) -> None:
    from .model import atomic_write_text

    header = {"format_version": MANIFEST_FORMAT_VERSION, "synth_config": dataset.config,
              "summary": dataset.summary()}
    lines = [json.dumps(header, separators=(",", ":"))]
    lines += [json.dumps(r.to_json(), separators=(",", ":")) for r in dataset.records]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_manifest(path) -> Dataset:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read manifest {path}: {exc}") from exc
    lines = text.split("\n")
    if not text.endswith("\n"):
        raise ParseError(f"{path}: line {len(lines)}: truncated manifest (no trailing newline)")
    lines = lines[:-1]
    if not lines:
        raise ParseError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
        if header.get("format_version") != MANIFEST_FORMAT_VERSION:
            raise ParseError(f"{path}: line 1: unsupported format_version {header.get('format_version')}")
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line 1: bad header: {exc}") from exc
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            d = json.loads(line)
            frames = np.array(d["frames"], dtype=np.float64)
            if frames.ndim != 2 or frames.shape[0] == 0:
                raise ValueError("frames must be a non-empty list of equal-length vectors")
            if d["condition"] not in CONDITIONS or d["subset"] not in (XV, XC, TEST):
                raise ValueError("unknown condition or subset")
            records.append(SequenceRecord(int(d["id"]), d["condition"], float(d["view"]), d["subset"],
                                          int(d["seq_id"]), frames))
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"{path}: line {lineno} (record {lineno - 2}): {exc}") from exc
    dataset = Dataset(records, header.get("synth_config", {}))
    expected = header.get("summary")
    if expected is not None and expected != dataset.summary():
        raise ParseError(f"{path}: summary counts in header do not match the {len(records)} records")
    return dataset
