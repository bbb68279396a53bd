import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfl.core_math import make_rng
from pfl.errors import ConfigError, SamplingError
from pfl.sampling import (BatchSpec, batch_all_count, build_triplet_sets, enumerate_triplets, sample_batch,
                          sample_pk_batch)
from pfl.synthbench import XC, XV, Dataset, SequenceRecord, SynthConfig, generate_benchmark


def brute_triplets(labels, keep=None):
    n = len(labels)
    keep = [True] * n if keep is None else keep
    return [(a, p, q) for a, p, q in itertools.product(range(n), repeat=3)
            if keep[a] and keep[p] and keep[q] and a != p and labels[a] == labels[p] and labels[a] != labels[q]]


def check_batch(batch, spec):
    assert len(batch) == spec.p * spec.k
    by_id = {}
    for e in batch.entries:
        by_id.setdefault(e.identity, []).append(e)
    xv = [i for i, es in by_id.items() if es[0].subset == XV]
    xc = [i for i, es in by_id.items() if es[0].subset == XC]
    assert len(xv) == spec.p // 2 and len(xc) == spec.p // 2
    for i in xv:
        assert len(by_id[i]) == spec.k and all(e.subset == XV for e in by_id[i])
    for i in xc:
        conds = Counter(e.condition for e in by_id[i])
        assert conds == {"NM": spec.k // 2, "CL": spec.k // 2}
    keys = [(e.identity, e.seq_id) for e in batch.entries]
    assert keys == sorted(keys)


def test_batch_spec_validation():
    for p, k in ((2, 2), (5, 2), (4, 3), (4, 0)):
        with pytest.raises(ConfigError):
            BatchSpec(p, k)


def test_default_batch_shape():
    ds = generate_benchmark(SynthConfig(), make_rng(0))
    batch = sample_batch(ds, BatchSpec(16, 16), make_rng(1))
    check_batch(batch, BatchSpec(16, 16))
    assert Counter(e.subset for e in batch.entries) == {XV: 128, XC: 128}


def test_thousand_batches(tiny_dataset):
    spec = BatchSpec(4, 2)
    r = make_rng(5)
    for _ in range(1000):
        batch = sample_batch(tiny_dataset, spec, r)
        check_batch(batch, spec)
        T = build_triplet_sets(batch)
        assert len(T.T_c) == batch_all_count(batch.labels)
        is_xv = batch.is_xv
        assert np.all(is_xv[T.T_v])


def test_small_spec_exhaustive_count(tiny_dataset):
    batch = sample_batch(tiny_dataset, BatchSpec(4, 2), make_rng(0))
    labels = batch.labels.tolist()
    keep = batch.is_xv.tolist()
    T = build_triplet_sets(batch)
    assert [tuple(t) for t in T.T_c] == brute_triplets(labels)
    assert [tuple(t) for t in T.T_v] == brute_triplets(labels, keep)
    # 4 ids x 2 seqs: each id gives 2*1*6 = 12 triplets; Xv half: 2 ids x 2*1*2 = 8
    assert len(T.T_c) == 48 and len(T.T_v) == 8


def test_two_by_two_enumeration():
    T = enumerate_triplets(np.array([0, 0, 1, 1]))
    assert len(T) == 8 == len(brute_triplets([0, 0, 1, 1]))


def test_no_xv_entries_gives_empty_tv():
    T = enumerate_triplets(np.array([0, 0, 1, 1]), keep=np.zeros(4, dtype=bool))
    assert T.shape == (0, 3)


@settings(max_examples=60)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=12), st.data())
def test_enumeration_matches_brute_force(labels, data):
    keep = data.draw(st.lists(st.booleans(), min_size=len(labels), max_size=len(labels)))
    T = enumerate_triplets(np.array(labels), np.array(keep))
    assert [tuple(t) for t in T] == brute_triplets(labels, keep)
    assert len(enumerate_triplets(np.array(labels))) == batch_all_count(labels)


def test_tv_subset_of_tc(tiny_dataset):
    batch = sample_batch(tiny_dataset, BatchSpec(4, 2), make_rng(9))
    T = build_triplet_sets(batch)
    assert {tuple(t) for t in T.T_v} <= {tuple(t) for t in T.T_c}


def test_deterministic_given_seed(tiny_dataset):
    a = sample_batch(tiny_dataset, BatchSpec(4, 2), make_rng(3))
    b = sample_batch(tiny_dataset, BatchSpec(4, 2), make_rng(3))
    assert a.entries == b.entries


def _toy(n_xv, n_xc, nm=2, cl=2):
    recs, sid = [], 0
    for i in range(n_xv):
        for _ in range(4):
            recs.append(SequenceRecord(i, "NM", 0.0, XV, sid, np.zeros((1, 2))))
            sid += 1
    for i in range(n_xv, n_xv + n_xc):
        for cond, n in (("NM", nm), ("CL", cl)):
            for _ in range(n):
                recs.append(SequenceRecord(i, cond, 0.0, XC, sid, np.zeros((1, 2))))
                sid += 1
    return Dataset(recs)


def test_deficient_subset_errors():
    with pytest.raises(SamplingError, match="Xc"):
        sample_batch(_toy(4, 1), BatchSpec(4, 2), make_rng(0))
    with pytest.raises(SamplingError, match="Xv"):
        sample_batch(_toy(1, 4), BatchSpec(4, 2), make_rng(0))


def test_short_identity_samples_with_replacement(caplog):
    batch = sample_batch(_toy(2, 2, nm=1, cl=1), BatchSpec(4, 4), make_rng(0))
    check_batch(batch, BatchSpec(4, 4))
    assert "with replacement" in caplog.text


def test_pk_sampler_counts(tiny_dataset):
    spec = BatchSpec(4, 2)
    r = make_rng(2)
    for _ in range(100):
        batch = sample_pk_batch(tiny_dataset, spec, r)
        assert len(batch) == 8
        assert set(Counter(batch.labels.tolist()).values()) == {2}
