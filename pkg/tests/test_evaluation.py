import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfl.core_math import make_rng
from pfl.errors import ShapeError
from pfl.evaluation import Embedded, embed_all, evaluate, part_distance, rank1
from pfl.model import inference_embed
from pfl.synthbench import split_gallery_probe

from conftest import TINY_MODEL


def oracle_rank1(gallery, probes, exclude):
    """Exhaustive nearest neighbour written independently of the package."""
    cells = {}
    skipped = 0
    for cond, plist in probes.items():
        for p in plist:
            best = None
            for g in gallery:
                if exclude and g.view == p.view:
                    continue
                d = sum(math.sqrt(sum((x - y) ** 2 for x, y in zip(pa, ga))) for pa, ga in zip(p.emb, g.emb))
                if best is None or d < best[0] or (d == best[0] and g.seq_id < best[1]):
                    best = (d, g.seq_id, g.identity)
            if best is None:
                skipped += 1
                continue
            c, n = cells.get((cond, p.view), (0, 0))
            cells[(cond, p.view)] = (c + (best[2] == p.identity), n + 1)
    return cells, skipped


def emb(seq, ident, view, vec, cond="NM"):
    return Embedded(seq, ident, float(view), cond, np.asarray(vec, dtype=np.float64))


def test_part_distance_examples():
    a = make_rng(0).standard_normal((3, 4))
    assert part_distance(a, a) == 0.0
    b = np.zeros((2, 3))
    c = np.array([[1.0, 0, 0], [0, 0, 1.0]])
    assert part_distance(b, c) == 2.0
    with pytest.raises(ShapeError):
        part_distance(np.zeros((2, 3)), np.zeros((3, 2)))


@pytest.mark.parametrize("seed", range(5))
def test_part_distance_vs_flat(seed):
    r = make_rng(seed)
    a, b = r.standard_normal((1, 5)), r.standard_normal((1, 5))
    assert part_distance(a, b) == pytest.approx(np.linalg.norm(a.ravel() - b.ravel()), rel=1e-15)
    a, b = r.standard_normal((3, 5)), r.standard_normal((3, 5))
    assert part_distance(a, b) > np.linalg.norm(a.ravel() - b.ravel())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 50), st.booleans(), st.booleans())
def test_rank1_equals_brute_force(seed, n_probes, exclude, quantize):
    r = make_rng(seed)
    views = [0.0, 18.0, 36.0]
    n_ids = int(r.integers(2, 6))

    def vec():
        v = r.standard_normal((2, 2))
        return np.round(v) if quantize else v  # quantized embeddings create exact ties

    gallery = [emb(int(s), int(r.integers(n_ids)), r.choice(views), vec()) for s in r.permutation(12)]
    probes = {"NM": [], "CL": []}
    for i in range(n_probes):
        cond = "NM" if i % 2 else "CL"
        probes[cond].append(emb(100 + i, int(r.integers(n_ids)), r.choice(views), vec(), cond))
    report = rank1(gallery, probes, exclude)
    cells, skipped = oracle_rank1(gallery, probes, exclude)
    assert report.cells == cells
    assert report.skipped == skipped
    if exclude:
        assert not any(same for _, _, same in report.audit)


def test_hand_constructed_half_accuracy():
    gallery = [emb(0, 0, 0, [[0.0, 0.0]]), emb(1, 1, 0, [[10.0, 0.0]])]
    probes = {"NM": [emb(2, 0, 18, [[1.0, 0.0]]), emb(3, 1, 18, [[2.0, 0.0]])]}
    report = rank1(gallery, probes)
    assert report.accuracy("NM", 18.0) == 0.5
    assert report.average("NM") == 0.5


def test_ties_go_to_lowest_seq_id():
    gallery = [emb(5, 1, 0, [[1.0]]), emb(3, 0, 0, [[-1.0]])]
    report = rank1(gallery, {"NM": [emb(9, 0, 18, [[0.0]])]})
    assert report.audit == [(9, 3, False)]


@pytest.mark.parametrize("seed", range(5))
def test_gallery_permutation_invariance(seed):
    r = make_rng(seed)
    gallery = [emb(s, s % 3, (s % 2) * 18, np.round(r.standard_normal((2, 2)))) for s in range(9)]
    probes = {"NM": [emb(50 + i, i % 3, 36, np.round(r.standard_normal((2, 2)))) for i in range(8)]}
    base = rank1(gallery, probes)
    shuffled = [gallery[i] for i in r.permutation(len(gallery))]
    other = rank1(shuffled, probes)
    assert base.cells == other.cells and base.audit == other.audit


def test_self_gallery_is_perfect():
    r = make_rng(1)
    items = [emb(s, s, 0, r.standard_normal((2, 3))) for s in range(6)]
    report = rank1(items, {"NM": items}, exclude_identical_view=False)
    assert report.average("NM") == 1.0


def test_single_view_all_skipped():
    items = [emb(s, s, 0, np.zeros((1, 1))) for s in range(3)]
    report = rank1(items, {"NM": items}, exclude_identical_view=True)
    assert report.cells == {} and report.skipped == 3
    assert report.averages() == {}
    assert any("skipped" in w for w in report.warnings)


def test_embed_all(tiny_dataset, tiny_params):
    assert embed_all([], tiny_params, TINY_MODEL) == {}
    recs = tiny_dataset.test_records[:5]
    out = embed_all(recs + recs[:1], tiny_params, TINY_MODEL, chunk=2)
    assert np.array_equal(out[recs[0].seq_id], inference_embed(recs[0].frames, tiny_params, TINY_MODEL))
    one = embed_all(recs[:1], tiny_params, TINY_MODEL)
    assert np.array_equal(one[recs[0].seq_id], out[recs[0].seq_id])


def test_evaluate_report_consistency(tiny_dataset, tiny_params, tmp_path):
    split = split_gallery_probe(tiny_dataset.test_records)
    report = evaluate(tiny_params, TINY_MODEL, split)
    for cond, avg in report.averages().items():
        accs = [report.accuracy(cond, v) for v in report.views(cond)]
        assert avg == pytest.approx(np.mean(accs))
        assert all(0 <= a <= 1 for a in accs)
    report.write(tmp_path / "r.csv", tmp_path / "r.json")
    lines = (tmp_path / "r.csv").read_text().split("\n")
    assert lines[0] == "condition,probe_view,accuracy,n_probes"
    assert len(lines) - 2 == len(report.cells)
    assert evaluate(tiny_params, TINY_MODEL, split, self_gallery=True).average("NM") == 1.0
