from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmi import plot
from hmi.errors import BuildError, FormatError, NotFoundError
from hmi.transformer import lower_stack_forward
from oracles import ref_aggregate, ref_window
from synth import f32, random_tree


def test_aggregation_matches_oracle():
    tree = random_tree(0, branches=2)
    g = np.random.default_rng(1)
    for _ in range(60):
        toks = [int(x) for x in g.integers(0, 6, int(g.integers(1, 20)))]
        for vid in (0, 1, 2):
            np.testing.assert_allclose(plot.retrieve_sequence(tree, vid, toks), ref_aggregate(tree, vid, toks),
                                       rtol=0, atol=1e-12)


def test_causal_retrieval_uses_window_ending_at_position():
    tree = random_tree(2)
    toks = [1, 2, 3, 4, 5]
    got = plot.retrieve_sequence(tree, 1, toks, mode="causal")
    for i in range(5):
        window = tuple(toks[max(0, i - 2): i + 1])
        assert np.array_equal(got[i], ref_window(tree, 1, window)[-1])


def test_window_bounds_clip():
    assert plot.window_bounds(0, 5, 3) == (0, 2)
    assert plot.window_bounds(2, 5, 3) == (1, 4)
    assert plot.window_bounds(4, 5, 3) == (3, 5)
    assert plot.window_bounds(0, 1, 3) == (0, 1)


def test_branch_shadows_root():
    tree = random_tree(3)
    key = next(iter(tree.branches[1].entries))
    tree.root.entries[key] = plot.PlotEntry(np.full((3, 4), 7.0), 1)
    entry, source = plot.lookup(tree, 1, key)
    assert source == "branch" and not np.array_equal(entry.rep, tree.root.entries[key].rep)
    assert plot.lookup(tree, 0, key)[1] == "root"


def test_fallback_longest_then_leftmost():
    d = 2
    uni = {(t,): plot.PlotEntry(np.full((1, d), float(t)), 1) for t in range(4)}
    left = plot.PlotEntry(np.array([[10.0, 10.0], [11.0, 11.0]]), 1)
    right = plot.PlotEntry(np.array([[20.0, 20.0], [21.0, 21.0]]), 1)
    tree = plot.VersionTree(plot.PlotTable(0, 3, d, {**uni, (1, 2): left, (2, 3): right}))
    rows, levels = plot.fallback_retrieve(tree, 0, (1, 2, 3))
    # middle token is covered by both bi-grams; the leftmost wins
    assert levels == [2, 2, 2]
    assert rows.tolist() == [[10, 10], [11, 11], [21, 21]]
    rows, levels = plot.fallback_retrieve(tree, 0, (0, 1, 0))
    assert levels == [1, 1, 1] and rows[:, 0].tolist() == [0, 1, 0]


def test_fallback_requires_n_tokens():
    with pytest.raises(ValueError):
        plot.fallback_retrieve(random_tree(4), 0, (1, 2))


def test_missing_unigram_raises():
    tree = plot.VersionTree(plot.PlotTable(0, 3, 2, {(0,): plot.PlotEntry(np.zeros((1, 2)), 1)}))
    with pytest.raises(NotFoundError):
        plot.retrieve_sequence(tree, 0, [0, 1])


def test_unknown_version():
    with pytest.raises(NotFoundError):
        plot.retrieve_sequence(random_tree(5), 9, [1])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 50), st.lists(st.integers(0, 5), min_size=1, max_size=24), st.integers(0, 2))
def test_retrieval_total(seed, toks, vid):
    out = plot.retrieve_sequence(random_tree(seed, branches=2), vid, toks)
    assert out.shape == (len(toks), 4) and np.isfinite(out).all()


def test_coverage_example():
    assert plot.select_by_coverage({("A",): 5, ("B",): 3, ("C",): 2}, 50) == [("A",)]
    assert plot.select_by_coverage({("A",): 5, ("B",): 3, ("C",): 2}, 51) == [("A",), ("B",)]
    assert plot.select_by_coverage({("A",): 5, ("B",): 3}, 0) == []


def test_coverage_ties_lexicographic():
    assert plot.select_by_coverage({(2,): 1, (1,): 1, (3,): 1}, 50) == [(1,), (2,)]


@given(st.dictionaries(st.tuples(st.integers(0, 9)), st.integers(1, 50), min_size=1, max_size=10),
       st.integers(0, 100), st.integers(0, 100))
def test_coverage_nested_and_reaches_alpha(counts, a, b):
    lo, hi = sorted((a, b))
    small, big = plot.select_by_coverage(counts, lo), plot.select_by_coverage(counts, hi)
    assert small == big[:len(small)]
    total = sum(counts.values())
    assert sum(counts[k] for k in big) * 100 >= hi * total
    if big:
        assert sum(counts[k] for k in big[:-1]) * 100 < hi * total


def test_build_root_contents(small_model):
    corpus = [[1, 2, 3, 4], [2, 3, 4]]
    table = plot.build_root(corpus, small_model)
    for k in (1, 2, 3):
        for key, c in Counter(tuple(s[i:i + k]) for s in corpus for i in range(len(s) - k + 1)).items():
            assert table.entries[key].freq == c
    assert all((t,) in table for t in range(64))
    rep = table.entries[(2, 3, 4)].rep
    assert np.array_equal(rep, f32(lower_stack_forward([2, 3, 4], small_model)))


def test_build_root_errors(small_model):
    with pytest.raises(BuildError):
        plot.build_root([], small_model)
    with pytest.raises(BuildError):
        plot.build_root([[1, 2]], small_model, n=5)


def test_derive_branch_uses_domain_model(small_model, small_root):
    dom = small_model.with_lower_reseeded(77)
    corpus = [[1, 2, 3, 1, 2, 3], [1, 2, 3]]
    br = plot.derive_branch(small_root, corpus, dom, 100)
    assert set(br.entries) == {(1, 2, 3), (2, 3, 1), (3, 1, 2)}
    assert np.array_equal(br.entries[(1, 2, 3)].rep, f32(lower_stack_forward([1, 2, 3], dom)))
    assert br.parent_id == 0


def test_nesting_across_alpha(small_model, small_root):
    corpus = [[1, 2, 3, 4, 1, 2, 3], [5, 1, 2, 3, 6], [7, 8, 9]]
    sets = [set(plot.derive_branch(small_root, corpus, small_model, a).entries) for a in (0, 30, 50, 100)]
    assert sets[0] == set()
    assert sets[0] <= sets[1] <= sets[2] <= sets[3]
    assert sets[3] == set(plot.count_ngrams(corpus, 3))


def test_version_tree_lineage():
    tree = random_tree(6)
    tree.add_branch(plot.PlotTable(2, 3, 4, {}, parent_id=1, domain_label="x", alpha_percent=10))
    assert tree.lineage(2) == [2, 1, 0]
    assert tree.next_version_id() == 3
    with pytest.raises(ValueError):
        tree.add_branch(plot.PlotTable(2, 3, 4, {}, parent_id=1))
    with pytest.raises(NotFoundError):
        tree.add_branch(plot.PlotTable(5, 3, 4, {}, parent_id=4))


def assert_tables_equal(a, b):
    assert (a.version_id, a.parent_id, a.n, a.d, a.domain_label, a.alpha_percent) == \
           (b.version_id, b.parent_id, b.n, b.d, b.domain_label, b.alpha_percent)
    assert a.entries.keys() == b.entries.keys()
    for k in a.entries:
        assert a.entries[k].freq == b.entries[k].freq
        assert np.array_equal(a.entries[k].rep, b.entries[k].rep)


def test_persist_round_trip(tmp_path):
    tree = random_tree(7)
    for table in (tree.root, tree.branches[1]):
        plot.persist(table, tmp_path / "t.plt")
        assert_tables_equal(plot.load(tmp_path / "t.plt"), table)


@pytest.mark.parametrize("mutate, msg", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\0", "trailing"),
])
def test_load_rejects_corruption(tmp_path, mutate, msg):
    plot.persist(random_tree(8).root, tmp_path / "t.plt")
    (tmp_path / "bad.plt").write_bytes(mutate((tmp_path / "t.plt").read_bytes()))
    with pytest.raises(FormatError, match=msg) as err:
        plot.load(tmp_path / "bad.plt")
    assert "offset" in str(err.value)


def test_exact_at_full_coverage(small_model):
    """Every window stored at full length: retrieval equals a sweep of lower-stack passes plus averaging."""
    g = np.random.default_rng(9)
    seqs = [[int(x) for x in g.integers(0, 64, int(g.integers(3, 15)))] for _ in range(8)]
    tree = plot.VersionTree(plot.build_root(seqs, small_model))
    for toks in seqs:
        L = len(toks)
        sums, counts = np.zeros((L, 8)), np.zeros(L)
        for c in range(L):
            lo, hi = max(0, c - 1), min(L, c + 2)
            sums[lo:hi] += f32(lower_stack_forward(toks[lo:hi], small_model))
            counts[lo:hi] += 1
        assert np.array_equal(plot.retrieve_sequence(tree, 0, toks), sums / counts[:, None])


def test_build_root_enumeration(small_model):
    table = plot.build_root([[5, 6, 7]], small_model)
    grams = {k for k in table.entries if not (len(k) == 1 and table.entries[k].freq == 1 and k[0] not in (5, 6, 7))}
    assert grams == {(5,), (6,), (7,), (5, 6), (6, 7), (5, 6, 7)}
    assert len(table) == 64 + 3
    assert plot.build_root([[5, 6, 5, 6]], small_model).entries[(5, 6)].freq == 2


def test_alpha_zero_and_full(small_model, small_root):
    corpus = [[1, 2, 3, 4, 5, 6, 7, 8, 9]]
    empty = plot.derive_branch(small_root, corpus, small_model, 0)
    tree = plot.VersionTree(small_root)
    tree.add_branch(empty)
    assert len(empty) == 0 and plot.lookup(tree, 1, (1,))[1] == "root"
    assert len(plot.derive_branch(small_root, corpus, small_model, 100)) == 7


def test_lookup_arms():
    tree = random_tree(11)
    bkey = next(k for k in tree.branches[1].entries if k not in tree.root.entries)
    assert plot.lookup(tree, 1, bkey)[1] == "branch"
    assert plot.lookup(tree, 1, (0,))[1] == "root"
    with pytest.raises(NotFoundError):
        plot.lookup(tree, 0, bkey)


def test_fallback_direct_hit_and_unigram_backstop():
    tree = random_tree(12)
    key = next(k for k in tree.root.entries if len(k) == 3)
    rows, levels = plot.fallback_retrieve(tree, 0, key)
    assert levels == [3, 3, 3] and np.array_equal(rows, tree.root.entries[key].rep)
    uni = plot.VersionTree(plot.PlotTable(0, 3, 2, {(t,): plot.PlotEntry(np.full((1, 2), t), 1) for t in range(3)}))
    rows, levels = plot.fallback_retrieve(uni, 0, (2, 0, 1))
    assert levels == [1, 1, 1] and rows[:, 0].tolist() == [2, 0, 1]


def test_single_token_sequence():
    tree = random_tree(13)
    assert np.array_equal(plot.retrieve_sequence(tree, 0, [4]), tree.root.entries[(4,)].rep)


def test_identical_window_reps_average_to_themselves():
    u = np.array([0.75, -1.5, 3.0])
    tree = random_tree(15, d=3)
    for table in (tree.root, tree.branches[1]):
        for key, entry in table.entries.items():
            entry.rep = np.tile(u, (len(key), 1))
    out = plot.retrieve_sequence(tree, 1, [0, 1, 2, 3, 4, 5, 0])
    assert np.array_equal(out, np.tile(u, (7, 1)))


def test_round_trip_empty_and_large(tmp_path):
    empty = plot.PlotTable(3, 3, 4, {}, parent_id=0, domain_label="none", alpha_percent=0.0)
    plot.persist(empty, tmp_path / "e.plt")
    assert_tables_equal(plot.load(tmp_path / "e.plt"), empty)
    big = random_tree(14, vocab=40, d=8, root_keys=1100).root
    assert len(big) >= 1000
    plot.persist(big, tmp_path / "b.plt")
    assert_tables_equal(plot.load(tmp_path / "b.plt"), big)
