import math

import pytest
from hypothesis import given, settings, strategies as st

from contourgas.lattice import (BudgetExceeded, Contour, ContourCatalog, NotClosed, NotConnected,
                                Plaquette, TailDiverges, TailModel, X, Y, canonicalize,
                                contour_count_tail, enumerate_through, get_catalog, incompatible,
                                tail_sum, unit_square, validate_contour)

import oracles

# frozen regression values; lengths 4..10 are cross-checked against the
# brute-force enumerator below, length 12 was produced by the trail search
CLASSES_BY_LENGTH = {4: 1, 6: 2, 8: 9, 10: 36, 12: 170}
THROUGH_PLAQUETTE = {4: 2, 6: 6, 8: 36, 10: 180, 12: 1020}


def test_validate_unit_square():
    g = validate_contour([(0, 0, X), (0, 1, X), (0, 0, Y), (1, 0, Y)])
    assert g == unit_square()
    assert g.length == 4
    assert g.vertices == {(0, 0), (1, 0), (0, 1), (1, 1)}


def test_validate_rejects_open_path():
    with pytest.raises(NotClosed):
        validate_contour([(0, 0, X), (1, 0, X)])


def test_validate_rejects_disjoint_squares():
    plaqs = unit_square().plaquettes + unit_square(5, 0).plaquettes
    with pytest.raises(NotConnected):
        validate_contour(plaqs)


def test_validate_rejects_empty():
    with pytest.raises(ValueError):
        validate_contour([])


def test_figure_eight_is_a_contour():
    g = validate_contour(unit_square().plaquettes + unit_square(1, 1).plaquettes)
    assert g.length == 8
    assert len(g.vertices) == 7


def test_incompatibility_examples():
    sq = unit_square()
    assert incompatible(sq, sq.translate(1, 0))      # shared side
    assert incompatible(sq, sq.translate(1, 1))      # shared corner
    assert not incompatible(sq, sq.translate(2, 0))


def test_enumerate_length_four():
    found = enumerate_through(Plaquette(0, 0, X), 4)
    assert found == sorted([unit_square(), unit_square(0, -1)])


@pytest.mark.parametrize("L", [2, 5, 0])
def test_enumerate_rejects_bad_length(L):
    with pytest.raises(ValueError):
        enumerate_through(Plaquette(0, 0, X), L)


def test_enumerate_budget():
    with pytest.raises(BudgetExceeded):
        enumerate_through(Plaquette(0, 0, X), 10, node_limit=50)


def test_enumerate_translation_covariant():
    a = enumerate_through(Plaquette(0, 0, Y), 8)
    b = enumerate_through(Plaquette(3, -2, Y), 8)
    assert sorted(g.translate(3, -2) for g in a) == b


def test_counts_match_brute_force_through_length_10():
    cat = get_catalog(10)
    assert cat.counts_by_length() == oracles.brute_force_counts(10)
    assert cat.through_plaquette_counts() == oracles.brute_force_through_edge(10)


def test_frozen_counts_length_12():
    cat = get_catalog(12)
    assert cat.counts_by_length() == CLASSES_BY_LENGTH
    assert cat.through_plaquette_counts() == THROUGH_PLAQUETTE


def test_through_count_is_half_length_times_classes():
    # every contour has as many X plaquettes as Y plaquettes on average
    for n, k in THROUGH_PLAQUETTE.items():
        assert k == n * CLASSES_BY_LENGTH[n] // 2


def test_every_class_is_valid_and_distinct():
    cat = get_catalog(10)
    seen = set()
    for c in cat.classes:
        g = validate_contour(c.representative.plaquettes)
        assert g.plaquettes[0][:2] == (0, 0)
        assert g.plaquettes not in seen
        seen.add(g.plaquettes)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 35), st.integers(-20, 20), st.integers(-20, 20))
def test_canonicalize_translation_invariant(cid, dx, dy):
    cat = get_catalog(10)
    cid = cid % len(cat.classes)
    g = cat.classes[cid].representative.translate(dx, dy)
    cls, shift = canonicalize(g, cat)
    assert cls.id == cid
    assert shift == (dx, dy)
    again, _ = canonicalize(cls.representative, cat)
    assert again.id == cid


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(-3, 3), st.integers(-3, 3))
def test_incompatibility_symmetric_and_reflexive(a, dx, dy):
    cat = get_catalog(8)
    n = len(cat.classes)
    g = (a % n, 0, 0)
    h = ((a // n) % n, dx, dy)
    assert cat.instances_incompatible(g, g)
    assert cat.instances_incompatible(g, h) == cat.instances_incompatible(h, g)
    assert cat.instances_incompatible(g, h) == incompatible(cat.contour(g), cat.contour(h))


def test_incompat_counts_unit_square():
    cat = get_catalog(8)
    sq = cat.instance(unit_square())
    N = cat.incompat_counts()
    # translates of the unit square sharing a vertex with it: 3 x 3 block
    assert N[sq[0], sq[0]] == 9


def test_face_index_consistent():
    cat = get_catalog(8)
    total = 0
    for offset, insts in cat.face_index.items():
        for g in insts:
            assert (0, 0) in cat.vertices(g)
            assert (g[1] + offset[0], g[2] + offset[1]) == (0, 0)
            total += 1
    assert total == len(cat.through_vertex((0, 0)))


def test_tail_models_dominate_exact_counts():
    for kind in ("walk", "trail"):
        m = TailModel(kind)
        for n, k in THROUGH_PLAQUETTE.items():
            assert contour_count_tail(n, m) >= k
        assert contour_count_tail(7, m) == 0.0
    assert not TailModel("geometric", ratio=5.0, base_length=12, base_count=1020).certified


def test_tail_sum_diverges_below_growth():
    with pytest.raises(TailDiverges):
        tail_sum(math.log(4) - 0.01, 12, TailModel("walk"))
    assert tail_sum(3.0, 12, TailModel("walk")) > 0
    assert tail_sum(5.0, 12, TailModel("walk")) < tail_sum(3.0, 12, TailModel("walk"))


def test_tail_sum_against_direct_sum():
    m = TailModel("trail")
    beta = 2.0
    direct = sum(n * 3.0 ** (n - 1) * math.exp(-beta * n) for n in range(14, 400, 2))
    assert tail_sum(beta, 12, m) == pytest.approx(direct, rel=1e-9)


def test_catalog_round_trip(tmp_path):
    cat = get_catalog(8)
    path = tmp_path / "cat.txt"
    cat.save(path)
    back = ContourCatalog.load(path)
    assert [c.representative for c in back.classes] == [c.representative for c in cat.classes]
    assert back.dumps() == cat.dumps()


def test_plaquette_text_round_trip():
    p = Plaquette(-3, 7, Y)
    assert Plaquette.parse(str(p)) == p


def test_instances_inside_box():
    from contourgas.forward import Volume
    cat = get_catalog(6)
    vol = Volume.box(cat, 2, 1)
    # two unit squares and one 1x2 rectangle fit in the 2x1 box
    assert len(vol) == 3
    assert all(isinstance(cat.contour(g), Contour) for g in vol.admissible)
