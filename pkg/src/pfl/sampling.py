"""Progressive-aware PK batches and batch-all triplet enumeration."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .core_math import Rng
from .errors import ConfigError, SamplingError
from .synthbench import XC, XV, Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BatchSpec:
    p: int = 8
    k: int = 8

    def __post_init__(self):
        if self.p < 4 or self.k < 2 or self.p % 2 or self.k % 2:
            raise ConfigError(f"batch spec needs even p >= 4 and even k >= 2, got ({self.p}, {self.k})")


@dataclass(frozen=True)
class BatchEntry:
    record: int  # index into dataset.records
    identity: int
    condition: str
    subset: str
    seq_id: int


@dataclass
class Batch:
    entries: list[BatchEntry]

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.identity for e in self.entries])

    @property
    def is_xv(self) -> np.ndarray:
        return np.array([e.subset == XV for e in self.entries])

    @property
    def record_indices(self) -> np.ndarray:
        return np.array([e.record for e in self.entries])

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class TripletSets:
    T_v: np.ndarray  # (M_v, 3) int
    T_c: np.ndarray  # (M_c, 3) int


class _Index:
    """Record indices grouped by subset, identity and condition."""

    def __init__(self, dataset: Dataset):
        self.by_id: dict[str, dict[int, list[int]]] = {XV: defaultdict(list), XC: defaultdict(list)}
        self.by_cond: dict[tuple[int, str], list[int]] = defaultdict(list)
        for i, r in enumerate(dataset.records):
            if r.subset in (XV, XC):
                self.by_id[r.subset][r.identity].append(i)
                self.by_cond[(r.identity, r.condition)].append(i)


def _index(dataset: Dataset) -> _Index:
    # datasets are treated as immutable once built, so the index is cached on them
    idx = dataset.__dict__.get("_sampler_index")
    if idx is None:
        idx = dataset.__dict__["_sampler_index"] = _Index(dataset)
    return idx


def _draw(pool: list[int], n: int, rng: Rng, what: str) -> list[int]:
    if not pool:
        raise SamplingError(f"no sequences available for {what}")
    if len(pool) >= n:
        picks = rng.choice(len(pool), size=n, replace=False)
    else:
        log.warning("%s has %d sequences, %d requested; sampling with replacement", what, len(pool), n)
        picks = rng.choice(len(pool), size=n, replace=True)
    return [pool[i] for i in picks]


def _make_batch(dataset: Dataset, chosen: list[int]) -> Batch:
    entries = []
    for i in chosen:
        r = dataset.records[i]
        entries.append(BatchEntry(i, r.identity, r.condition, r.subset, r.seq_id))
    entries.sort(key=lambda e: (e.identity, e.seq_id))
    return Batch(entries)


def sample_batch(dataset: Dataset, spec: BatchSpec, rng: Rng) -> Batch:
    """``p/2`` Xv identities with ``k`` sequences each, plus ``p/2`` Xc
    identities with ``k/2`` NM and ``k/2`` CL sequences each."""
    idx = _index(dataset)
    half_p, half_k = spec.p // 2, spec.k // 2
    xv_ids = sorted(idx.by_id[XV])
    xc_ids = sorted(i for i in idx.by_id[XC] if idx.by_cond[(i, "NM")] and idx.by_cond[(i, "CL")])
    if len(xv_ids) < half_p:
        raise SamplingError(f"subset Xv has {len(xv_ids)} identities, batch needs {half_p}")
    if len(xc_ids) < half_p:
        raise SamplingError(f"subset Xc has {len(xc_ids)} identities with NM and CL sequences, batch needs {half_p}")
    chosen: list[int] = []
    for ident in rng.choice(xv_ids, size=half_p, replace=False):
        chosen += _draw(idx.by_id[XV][int(ident)], spec.k, rng, f"Xv identity {ident}")
    for ident in rng.choice(xc_ids, size=half_p, replace=False):
        ident = int(ident)
        chosen += _draw(idx.by_cond[(ident, "NM")], half_k, rng, f"Xc identity {ident} NM")
        chosen += _draw(idx.by_cond[(ident, "CL")], half_k, rng, f"Xc identity {ident} CL")
    return _make_batch(dataset, chosen)


def sample_pk_batch(dataset: Dataset, spec: BatchSpec, rng: Rng) -> Batch:
    """Plain PK batch: ``p`` identities from the whole training set, ``k`` sequences each."""
    idx = _index(dataset)
    pools = {**idx.by_id[XV], **idx.by_id[XC]}
    ids = sorted(pools)
    if len(ids) < spec.p:
        raise SamplingError(f"training set has {len(ids)} identities, batch needs {spec.p}")
    chosen: list[int] = []
    for ident in rng.choice(ids, size=spec.p, replace=False):
        chosen += _draw(pools[int(ident)], spec.k, rng, f"identity {ident}")
    return _make_batch(dataset, chosen)


def enumerate_triplets(labels: np.ndarray, keep: np.ndarray | None = None) -> np.ndarray:
    """All (a, p, n) with label[a] == label[p] != label[n] and a != p, in
    lexicographic order, optionally restricted to entries where ``keep``."""
    labels = np.asarray(labels)
    n = labels.size
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(n, dtype=bool)
    neg = ~same
    if keep is not None:
        keep = np.asarray(keep, dtype=bool)
        pos &= keep[:, None] & keep[None, :]
        neg &= keep[:, None] & keep[None, :]
    mask = pos[:, :, None] & neg[:, None, :]
    return np.argwhere(mask).astype(np.int64).reshape(-1, 3)


def build_triplet_sets(batch: Batch) -> TripletSets:
    labels = batch.labels
    return TripletSets(T_v=enumerate_triplets(labels, batch.is_xv), T_c=enumerate_triplets(labels))


def batch_all_count(labels) -> int:
    """Closed form for the batch-all triplet count: sum_id k(k-1)(N-k)."""
    labels = list(labels)
    n = len(labels)
    counts: dict = defaultdict(int)
    for lab in labels:
        counts[lab] += 1
    return sum(k * (k - 1) * (n - k) for k in counts.values())
