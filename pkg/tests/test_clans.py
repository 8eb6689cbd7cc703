import math
import warnings
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from contourgas.clans import (Clan, HorizonExploded, HorizonPolicy, TruncationWarning, classify_kept,
                              clan_statistics, clans_incompatible, explore_clan, finite_volume_clan,
                              kept_section, mixing_probe, neglected_intensity, occupation,
                              perfect_sample, window_instances)
from contourgas.field import Cylinder, FieldRealization
from contourgas.forward import Volume
from contourgas.lattice import Plaquette, X, Y, get_catalog, unit_square
from contourgas.validation import exact_gibbs, tv_distance

pytestmark = pytest.mark.filterwarnings("ignore::contourgas.clans.TruncationWarning")


@pytest.fixture(scope="module")
def cat():
    return get_catalog(8)


def _cyl(g, birth, life, uid):
    return Cylinder(g, birth, life, (uid,))


def test_classify_kept_synthetic(cat):
    sq = cat.instance(unit_square())
    nb = cat.instance(unit_square(1, 0))
    far = cat.instance(unit_square(5, 5))
    a = _cyl(sq, -3.0, 2.5, 1)      # dies at -0.5
    b = _cyl(nb, -2.0, 3.0, 2)      # meets a while a is alive: erased
    c = _cyl(nb, -0.2, 1.0, 3)      # a is dead by then: kept
    d = _cyl(far, -1.0, 2.0, 4)     # far away: kept
    clan = Clan(frozenset(), [c, d], [c, d, b, a], {(1,): 3, (2,): 2, (3,): 1, (4,): 1}, 16.0)
    classify_kept(clan, cat)
    assert clan.kept == {(1,), (3,), (4,)}
    assert kept_section(clan) == frozenset({nb, far})


def test_unclassified_clan_refuses_is_kept(cat):
    clan = Clan(frozenset(), [], [], {}, 16.0)
    with pytest.raises(ValueError):
        clan.is_kept(_cyl((0, 0, 0), 0, 1, 1))


def test_empty_window_gives_empty_clan(cat):
    f = FieldRealization(cat, 1.0, 1)
    clan = explore_clan([], f, warn=False)
    assert clan.members == [] and clan_statistics(clan, cat).size == 0


def test_large_beta_clans_are_empty(cat):
    for s in range(20):
        assert explore_clan([Plaquette(0, 0, X)], FieldRealization(cat, 30.0, s), warn=False).members == []


def test_truncation_warning_carries_intensity(cat):
    f = FieldRealization(cat, 2.0, 1)
    with pytest.warns(TruncationWarning) as rec:
        explore_clan([Plaquette(0, 0, X)], f)
    assert rec[0].message.neglected == pytest.approx(neglected_intensity(cat, 2.0))
    assert neglected_intensity(cat, 1.0) == math.inf


def test_roots_contain_window_and_are_alive(cat):
    w = [Plaquette(0, 0, X), Plaquette(2, 1, Y)]
    targets = window_instances(cat, w)
    for s in range(30):
        clan = explore_clan(w, FieldRealization(cat, 0.8, s), warn=False)
        for r in clan.roots:
            assert r.basis in targets
            assert r.birth < 0 < r.death
        assert all(clan.generation[r.uid] == 1 for r in clan.roots)


def test_ancestors_are_incompatible_and_earlier(cat):
    f = FieldRealization(cat, 0.7, 12)
    clan = explore_clan([Plaquette(0, 0, X)], f, warn=False)
    by_gen: dict = {}
    for c in clan.members:
        by_gen.setdefault(clan.generation[c.uid], []).append(c)
    for n, cs in by_gen.items():
        if n == 1:
            continue
        for c in cs:
            # some member of the previous generation was born while c was alive
            assert any(p.birth > c.birth and p.birth < c.death
                       and cat.instances_incompatible(p.basis, c.basis) for p in by_gen[n - 1])


def test_root_count_matches_free_intensity(cat):
    beta = 1.0
    w = [Plaquette(0, 0, X)]
    lam = sum(math.exp(-beta * cat.length(g)) for g in window_instances(cat, w))
    n = 4000
    roots = np.array([len(explore_clan(w, FieldRealization(cat, beta, s), warn=False).roots)
                      for s in range(n)], dtype=float)
    assert abs(roots.mean() - lam) < 3 * math.sqrt(lam / n)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_nested_windows_agree(seed):
    cat = get_catalog(8)
    f = FieldRealization(cat, 0.9, seed)
    small = [Plaquette(0, 0, X)]
    big = small + [Plaquette(1, 0, X), Plaquette(0, 0, Y), Plaquette(3, 2, Y)]
    a = perfect_sample(small, f, warn=False)
    b = perfect_sample(big, FieldRealization(cat, 0.9, seed), warn=False)
    assert a == frozenset(g for g in b if g in window_instances(cat, small))
    sa = explore_clan(small, f, warn=False)
    sb = explore_clan(big, f, warn=False)
    assert {c.uid for c in sa.members} <= {c.uid for c in sb.members}


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_kept_section_is_compatible(seed):
    cat = get_catalog(8)
    f = FieldRealization(cat, 0.8, seed)
    w = [Plaquette(x, y, X) for x in range(3) for y in range(3)]
    eta = sorted(perfect_sample(w, f, warn=False))
    for i, g in enumerate(eta):
        for h in eta[i + 1:]:
            assert not cat.instances_incompatible(g, h)


def test_finite_volume_clan_reproduces_exact_gibbs():
    cat = get_catalog(6)
    vol = Volume.box(cat, 2, 2, max_length=6)
    beta = 0.6
    exact = exact_gibbs(vol, beta)
    n = 6000
    hist = Counter(occupation(vol.admissible, FieldRealization(cat, beta, s, max_class_length=6),
                              warn=False, basis_ok=vol.__contains__) for s in range(n))
    assert tv_distance(hist, exact).tv < 0.5 * math.sqrt(len(exact.support) / n) + 0.02


def test_finite_volume_clan_inside_volume():
    cat = get_catalog(6)
    vol = Volume.box(cat, 3, 3, max_length=6)
    for s in range(20):
        clan = finite_volume_clan([Plaquette(1, 1, X)], vol, FieldRealization(cat, 0.6, s), warn=False)
        assert all(c.basis in vol for c in clan.members)
    with pytest.raises(ValueError):
        finite_volume_clan([Plaquette(10, 10, X)], vol, FieldRealization(cat, 0.6, 0))


def test_clan_statistics_single_root(cat):
    sq = cat.instance(unit_square())
    r = _cyl(sq, -1.5, 2.0, 1)
    clan = Clan(frozenset(), [r], [r], {(1,): 1}, 16.0)
    s = clan_statistics(clan, cat)
    assert (s.TL, s.SW, s.size, s.depth) == (1.5, 4, 1, 1)
    assert clan_statistics(clan, cat, "sites").SW == 4
    with pytest.raises(ValueError):
        clan_statistics(clan, cat, "volume")


def test_horizon_policy_guard(cat):
    f = FieldRealization(cat, 0.5, 3)
    with pytest.raises(HorizonExploded):
        explore_clan([Plaquette(x, 0, X) for x in range(6)], f,
                     policy=HorizonPolicy(initial=0.01, maximum=0.02), warn=False)
    with pytest.raises(HorizonExploded):
        explore_clan([Plaquette(x, 0, X) for x in range(6)], f,
                     policy=HorizonPolicy(max_members=1), warn=False)


def test_clans_incompatible_requires_time_overlap(cat):
    sq = cat.instance(unit_square())
    a = Clan(frozenset(), [], [_cyl(sq, -2.0, 1.0, 1)], {(1,): 1}, 16.0)
    b = Clan(frozenset(), [], [_cyl(sq, -0.5, 1.0, 2)], {(2,): 1}, 16.0)
    c = Clan(frozenset(), [], [_cyl(sq, -1.5, 1.0, 3)], {(3,): 1}, 16.0)
    assert not clans_incompatible(cat, a, b)
    assert clans_incompatible(cat, a, c)


def test_mixing_probe_far_windows(cat):
    hits = sum(mixing_probe([Plaquette(0, 0, X)], [Plaquette(60, 0, X)],
                            FieldRealization(cat, 1.2, 2 * s), FieldRealization(cat, 1.2, 2 * s + 1),
                            warn=False) for s in range(200))
    assert hits == 0
    with pytest.raises(ValueError):
        mixing_probe([Plaquette(0, 0, X)], [Plaquette(1, 0, X)],
                     FieldRealization(cat, 1.2, 5), FieldRealization(cat, 1.2, 5))


def test_mixing_probe_close_windows_sometimes_hit(cat):
    hits = sum(mixing_probe([Plaquette(0, 0, X)], [Plaquette(0, 0, X)],
                            FieldRealization(cat, 0.7, 2 * s), FieldRealization(cat, 0.7, 2 * s + 1),
                            warn=False) for s in range(300))
    assert hits > 0


def test_clan_dump_deterministic(cat):
    a = classify_kept(explore_clan([Plaquette(0, 0, X)], FieldRealization(cat, 0.7, 77), warn=False), cat)
    b = classify_kept(explore_clan([Plaquette(0, 0, X)], FieldRealization(cat, 0.7, 77), warn=False), cat)
    assert a.dump() == b.dump()
