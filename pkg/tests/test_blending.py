import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from featbind import blending
from featbind.blending import (
    BlendedSample,
    BlendStrategy,
    build_category_clusters,
    blend_pair,
    cutmix_blend,
    generate_blended_dataset,
    mixup_blend,
    plan_pairs,
    sample_delta,
)
from featbind.data import ClassCatalog, LabeledSample, read_image, read_manifest
from featbind.errors import ValidationError

from conftest import mask_with_classes, write_samples


def sample(sid, value, mask=None, hw=(4, 4)):
    image = np.full((*hw, 3), value, dtype=np.float32) if np.isscalar(value) else value
    if mask is None:
        mask = np.zeros(hw, dtype=np.int64)
    return LabeledSample(sid, image, mask)


def single_class_clusters(n_classes, per_class=1):
    sets = {f"s{c}_{k}": frozenset({c}) for c in range(1, n_classes + 1) for k in range(per_class)}
    cat = ClassCatalog(tuple(["bg"] + [f"c{i}" for i in range(1, n_classes + 1)]))
    return sets, cat, build_category_clusters(sets, cat)


# --- clustering -------------------------------------------------------------------

def test_clusters_overlap():
    cat = ClassCatalog(("bg", "x", "y"))
    clusters = build_category_clusters(
        {"A": frozenset({1}), "B": frozenset({1, 2}), "C": frozenset({2})}, cat)
    assert clusters == {1: ["A", "B"], 2: ["B", "C"]}


def test_clusters_empty_and_full(voc):
    assert all(v == [] for v in build_category_clusters({}, voc).values())
    clusters = build_category_clusters({"all": frozenset(range(1, 21))}, voc)
    assert all(v == ["all"] for v in clusters.values())


def test_primary_cluster_restriction():
    cat = ClassCatalog(("bg", "x", "y"))
    clusters = build_category_clusters(
        {"A": frozenset({1, 2}), "B": frozenset({2})}, cat, primary={"A": 1, "B": 2})
    assert clusters == {1: ["A"], 2: ["B"]}


# --- deltas -----------------------------------------------------------------------

def test_cfb_delta_range():
    rng = np.random.default_rng(0)
    draws = [sample_delta(BlendStrategy("cfb"), rng) for _ in range(2000)]
    assert min(draws) >= 0.7 and max(draws) <= 1.0


def test_wrfb_fixed_delta():
    rng = np.random.default_rng(0)
    assert {sample_delta(BlendStrategy("wrfb"), rng) for _ in range(100)} == {0.6}


def test_degenerate_range():
    rng = np.random.default_rng(0)
    s = BlendStrategy("cfb", delta_lo=1.0, delta_hi=1.0)
    assert {sample_delta(s, rng) for _ in range(50)} == {1.0}


@pytest.mark.parametrize("kw", [dict(delta_lo=0.0), dict(delta_lo=0.9, delta_hi=0.8),
                                dict(delta_hi=1.2), dict(partners=0)])
def test_strategy_invariants(kw):
    with pytest.raises(ValidationError):
        BlendStrategy("rfb", **kw)


# --- planning -----------------------------------------------------------------------

def test_cfb_twenty_single_class_images():
    sets, cat, clusters = single_class_clusters(20)
    plan = plan_pairs(BlendStrategy("cfb"), clusters, list(sets), seed=1)
    assert len(plan) == 380
    per_dom = {}
    for p in plan.pairs:
        per_dom[p.dominant] = per_dom.get(p.dominant, 0) + 1
    assert set(per_dom.values()) == {19}


def test_rfb_fifty_images_ten_partners():
    sets, cat, clusters = single_class_clusters(5, per_class=10)
    plan = plan_pairs(BlendStrategy("rfb", partners=10), clusters, list(sets), seed=2)
    assert len(plan) == 500
    assert all(p.dominant != p.phantom for p in plan.pairs)


def test_cfb_single_cluster_gives_nothing():
    sets, cat, clusters = single_class_clusters(1, per_class=5)
    assert len(plan_pairs(BlendStrategy("cfb"), clusters, list(sets), seed=0)) == 0


def test_cafb_skips_singletons(caplog):
    sets = {"a": frozenset({1}), "b": frozenset({1}), "c": frozenset({2})}
    cat = ClassCatalog(("bg", "x", "y"))
    with caplog.at_level(logging.WARNING):
        plan = plan_pairs(BlendStrategy("cafb"), build_category_clusters(sets, cat), list(sets), 0)
    assert sorted((p.dominant, p.phantom) for p in plan.pairs) == [("a", "b"), ("b", "a")]
    assert "c" in caplog.text


def test_mfb_half_blended():
    sets, cat, clusters = single_class_clusters(4, per_class=25)
    plan = plan_pairs(BlendStrategy("mfb"), clusters, list(sets), seed=3)
    blended = [p for p in plan.pairs if p.phantom is not None]
    standard = [p for p in plan.pairs if p.phantom is None]
    assert len(blended) == 50 and len(standard) == 50
    assert all(p.delta == 1.0 for p in standard)
    half = {p.dominant for p in blended}
    assert all(p.phantom in half for p in blended)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["cfb", "rfb", "cafb", "wrfb", "mfb", "mixup", "cutmix"]),
       st.lists(st.frozensets(st.integers(1, 4), max_size=3), min_size=1, max_size=12),
       st.integers(0, 2**16))
def test_plans_are_deterministic_and_valid(tag, class_sets, seed):
    sets = {f"i{k}": s for k, s in enumerate(class_sets)}
    cat = ClassCatalog(("bg", "a", "b", "c", "d"))
    clusters = build_category_clusters(sets, cat)
    strategy = BlendStrategy(tag, partners=3)
    plan = plan_pairs(strategy, clusters, list(sets), seed)
    assert plan == plan_pairs(strategy, clusters, list(sets), seed)
    lo, hi = strategy.delta_bounds()
    for p in plan.pairs:
        assert p.dominant != p.phantom
        if p.phantom is not None:
            assert lo <= p.delta <= hi


@settings(max_examples=30, deadline=None)
@given(st.lists(st.frozensets(st.integers(1, 4), min_size=1, max_size=3), min_size=1, max_size=15),
       st.integers(0, 1000))
def test_cfb_covers_every_ordered_cluster_pair(class_sets, seed):
    sets = {f"i{k}": s for k, s in enumerate(class_sets)}
    cat = ClassCatalog(("bg", "a", "b", "c", "d"))
    clusters = build_category_clusters(sets, cat)
    plan = plan_pairs(BlendStrategy("cfb"), clusters, list(sets), seed)
    seen = {(a, b) for p in plan.pairs for a in sets[p.dominant] for b in sets[p.phantom]}
    for a in clusters:
        for b in clusters:
            if a == b or not clusters[a] or not clusters[b]:
                continue
            # a pair can only be impossible if the lone member of b is the same image
            if set(clusters[b]) <= set(clusters[a]) and len(clusters[b]) == 1 and len(clusters[a]) == 1:
                continue
            assert (a, b) in seen


# --- mixing ------------------------------------------------------------------------------

def test_blend_pair_examples():
    out = blend_pair(sample("d", 0.0), sample("p", 1.0), 0.7)
    np.testing.assert_allclose(out.image, 0.3, atol=1e-7)
    dom = sample("d", np.random.default_rng(0).random((4, 4, 3)).astype(np.float32))
    same = blend_pair(dom, sample("p", 0.9), 1.0)
    assert np.array_equal(same.image, dom.image)
    half = blend_pair(sample("d", 0.5), sample("p", 0.5), 0.83)
    np.testing.assert_allclose(half.image, 0.5, atol=1e-7)


@pytest.mark.parametrize("delta", [0.0, -0.1, 1.01])
def test_blend_pair_rejects_bad_delta(delta):
    with pytest.raises(ValidationError):
        blend_pair(sample("d", 0.0), sample("p", 1.0), delta)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.floats(1e-3, 1.0), st.integers(0, 2**16))
def test_blend_formula_exactness(h, w, delta, seed):
    rng = np.random.default_rng(seed)
    a = rng.random((h, w, 3)).astype(np.float32)
    b = rng.random((h, w, 3)).astype(np.float32)
    out = blend_pair(sample("a", a, np.zeros((h, w), int), (h, w)),
                     sample("b", b, np.ones((h, w), int), (h, w)), delta)
    assert np.abs(out.image - (delta * a + (1 - delta) * b)).max() <= 1e-6
    assert out.image.min() >= 0 and out.image.max() <= 1
    assert (out.mask2 == 1).all() and (out.mask1 == 0).all()


def test_phantom_resized_to_dominant():
    dom = sample("d", 0.2, np.zeros((6, 8), int), (6, 8))
    ph_mask = np.zeros((3, 4), int)
    ph_mask[:, 2:] = 4
    ph = sample("p", 0.6, ph_mask, (3, 4))
    out = blend_pair(dom, ph, 0.75)
    assert out.image.shape == (6, 8, 3) and out.mask2.shape == (6, 8)
    assert set(np.unique(out.mask2)) == {0, 4}
    assert (out.mask2[:, :4] == 0).all() and (out.mask2[:, 4:] == 4).all()
    np.testing.assert_allclose(out.image, 0.75 * 0.2 + 0.25 * 0.6, atol=1e-6)


def test_mixup_constants():
    out = mixup_blend(sample("a", 0.2), sample("b", 0.8), lam=0.5)
    np.testing.assert_allclose(out.image, 0.5, atol=1e-7)
    assert out.delta == 0.5


def test_mixup_draws_beta():
    rng = np.random.default_rng(0)
    lams = [mixup_blend(sample("a", 0.0), sample("b", 1.0), rng=rng).delta for _ in range(500)]
    assert 0.45 < np.mean(lams) < 0.55


def test_cutmix_zero_and_full_box():
    a = sample("a", 0.1, np.ones((4, 4), int))
    b = sample("b", 0.9, np.full((4, 4), 2))
    rng = np.random.default_rng(0)
    none = cutmix_blend(a, b, rng, box=(1, 1, 0, 4))
    assert np.array_equal(none.image, a.image) and np.array_equal(none.mask1, a.mask)
    full = cutmix_blend(a, b, rng, box=(0, 4, 0, 4))
    assert np.array_equal(full.image, b.image) and np.array_equal(full.mask1, b.mask)
    assert (full.mask2 == 255).all() and 0 < full.delta <= 1


def test_cutmix_region_area():
    a = sample("a", 0.0, np.zeros((32, 32), int), (32, 32))
    b = sample("b", 1.0, np.full((32, 32), 3), (32, 32))
    out = cutmix_blend(a, b, np.random.default_rng(5), lam=0.75)
    pasted = (out.mask1 == 3)
    assert np.array_equal(pasted, out.image[..., 0] == 1.0)
    assert out.delta == pytest.approx(1 - pasted.mean())


def test_blended_sample_shape_check():
    with pytest.raises(ValidationError):
        BlendedSample("x", np.zeros((2, 2, 3)), np.zeros((2, 2)), np.zeros((3, 2)), 0.5)


# --- dataset generation ---------------------------------------------------------------

@pytest.fixture
def twenty_class_manifest(tmp_path, voc):
    rng = np.random.default_rng(0)
    samples = {f"img{c:02d}": (rng.random((8, 8, 3)), mask_with_classes({c})) for c in range(1, 21)}
    return write_samples(tmp_path / "src", samples)


def test_generate_cfb_twenty_classes(tmp_path, twenty_class_manifest, voc):
    out = generate_blended_dataset(twenty_class_manifest, BlendStrategy("cfb"), 4, tmp_path / "out", voc)
    back = read_manifest(tmp_path / "out" / "manifest.jsonl")
    assert len(out) == len(back) == 380
    assert all(e.second_mask_path and 0.7 <= e.delta <= 1.0 for e in back)
    assert not list((tmp_path / "out").glob(".staging-*"))


def test_generate_is_byte_identical(tmp_path, twenty_class_manifest, voc):
    for name in ("a", "b"):
        generate_blended_dataset(twenty_class_manifest, BlendStrategy("cfb"), 9, tmp_path / name, voc)
    a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "manifest.jsonl").read_bytes()
    for rel in ("images/cfb000017.png", "masks2/cfb000379.png"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_generate_mfb_half(tmp_path, voc):
    rng = np.random.default_rng(1)
    samples = {f"s{i:03d}": (rng.random((4, 4, 3)), mask_with_classes({1 + i % 20}, size=4))
               for i in range(100)}
    m = write_samples(tmp_path / "src", samples)
    out = generate_blended_dataset(m, BlendStrategy("mfb"), 0, tmp_path / "out", voc)
    tags = [e.strategy_tag for e in out]
    assert tags.count("mfb") == 50 and tags.count("mfb-standard") == 50
    std = next(e for e in out if e.strategy_tag == "mfb-standard")
    assert std.delta == 1.0
    src = m.by_id()[std.source_ids[0]]
    np.testing.assert_array_equal(read_image(out.resolve(std.image_path)),
                                  read_image(m.resolve(src.image_path)))


def test_generate_float_npy(tmp_path, twenty_class_manifest, voc):
    out = generate_blended_dataset(twenty_class_manifest, BlendStrategy("cfb"), 0, tmp_path / "o", voc,
                                   float_npy=True)
    e = out.entries[0]
    assert e.image_path.endswith(".npy")
    by = twenty_class_manifest.by_id()
    a = read_image(twenty_class_manifest.resolve(by[e.source_ids[0]].image_path))
    b = read_image(twenty_class_manifest.resolve(by[e.source_ids[1]].image_path))
    got = read_image(out.resolve(e.image_path))
    assert np.abs(got - (e.delta * a + (1 - e.delta) * b)).max() <= 1e-6


def test_generate_cleans_up_on_failure(tmp_path, twenty_class_manifest, voc, monkeypatch):
    calls = {"n": 0}
    real = blending.write_label_png

    def flaky(path, labels):
        calls["n"] += 1
        if calls["n"] > 5:
            raise OSError("disk full")
        real(path, labels)

    monkeypatch.setattr(blending, "write_label_png", flaky)
    with pytest.raises(OSError):
        generate_blended_dataset(twenty_class_manifest, BlendStrategy("cfb"), 0, tmp_path / "o", voc)
    assert list((tmp_path / "o").iterdir()) == []


@pytest.mark.parametrize("tag", ["rfb", "cafb", "wrfb", "mixup", "cutmix"])
def test_generate_other_strategies(tmp_path, toy50, tag):
    manifest, cat = toy50
    out = generate_blended_dataset(manifest, BlendStrategy(tag, partners=2), 0, tmp_path / tag, cat)
    assert len(out) > 0
    assert all(e.strategy_tag == tag for e in out)
