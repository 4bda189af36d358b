import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from featbind.data import (
    ClassCatalog,
    InstanceMask,
    compute_cooccurrence,
    load_instances,
    load_mask,
)
from featbind.errors import EmptyEvaluationError, ValidationError
from featbind.evaluation import (
    SubsetKind,
    SubsetSpec,
    apply_perturbation,
    constant_predictor,
    detect_occlusions,
    evaluate,
    filter_subset,
    fit_perturbation,
    load_perturbation,
    miou,
    new_confusion,
    parse_subset,
    update_confusion,
)
from featbind.toy import shape_mask

from oracles import brute_keep, brute_pairs


def test_confusion_two_by_two():
    cm = update_confusion(new_confusion(3), np.array([[1, 2], [2, 2]]), np.array([[1, 1], [2, 2]]))
    assert cm[1, 1] == 1 and cm[1, 2] == 1 and cm[2, 2] == 2 and cm.sum() == 4
    per, mean = miou(cm)
    assert per[0] is None
    assert per[1] == pytest.approx(1 / 2) and per[2] == pytest.approx(2 / 3)
    assert mean == pytest.approx(0.5833, abs=1e-4)


def test_confusion_trivial_cases():
    cm = update_confusion(new_confusion(5), np.full((2, 5), 3), np.full((2, 5), 3))
    assert cm[3, 3] == 10
    before = cm.copy()
    update_confusion(cm, np.zeros((2, 5), int), np.full((2, 5), 255))
    assert np.array_equal(cm, before)
    with pytest.raises(ValidationError):
        update_confusion(cm, np.zeros((2, 2), int), np.zeros((2, 3), int))


def test_miou_perfect_disjoint_empty():
    gt = np.array([[0, 1], [2, 2]])
    per, mean = miou(update_confusion(new_confusion(4), gt, gt))
    assert mean == 1.0 and per[3] is None
    per, _ = miou(update_confusion(new_confusion(3), np.array([[0, 0]]), np.array([[1, 0]])))
    assert per[1] == 0.0
    with pytest.raises(EmptyEvaluationError, match="empty evaluation"):
        miou(new_confusion(3))


def _brute_miou(pairs, n, ignore=255):
    cm = [[0] * n for _ in range(n)]
    for pred, gt in pairs:
        for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
            if g != ignore:
                cm[g][p] += 1
    ious = []
    for c in range(n):
        tp = cm[c][c]
        union = sum(cm[c]) + sum(cm[r][c] for r in range(n)) - tp
        if union:
            ious.append((tp, union))
    return cm, ious


def test_miou_matches_brute_force_on_50_pairs():
    from fractions import Fraction

    rng = np.random.default_rng(0)
    n = 5
    pairs = []
    for _ in range(50):
        gt = rng.integers(0, n, (6, 7))
        gt[rng.random(gt.shape) < 0.1] = 255
        pairs.append((rng.integers(0, n, (6, 7)), gt))
    cm = new_confusion(n)
    for p, g in pairs:
        update_confusion(cm, p, g)
    brute_cm, ious = _brute_miou(pairs, n)
    assert cm.tolist() == brute_cm
    exact = sum(Fraction(tp, u) for tp, u in ious) / len(ious)
    assert miou(cm)[1] == pytest.approx(float(exact), abs=1e-15)


def _inst(ids, classes=None):
    ids = np.asarray(ids)
    present = [int(i) for i in np.unique(ids) if i]
    return InstanceMask(ids, classes or {i: 1 for i in present})


def test_occlusion_examples():
    sep = np.zeros((5, 7), int)
    sep[:, :2] = 1
    sep[:, 4:] = 2
    assert detect_occlusions(_inst(sep)) == set()
    edge = np.zeros((4, 4), int)
    edge[:, :2] = 1
    edge[:, 2:] = 2
    assert detect_occlusions(_inst(edge)) == {(1, 2)}
    diag = np.zeros((3, 3), int)
    diag[0, 0], diag[1, 1] = 1, 2
    assert detect_occlusions(_inst(diag)) == {(1, 2)}
    with pytest.raises(ValidationError, match="instance annotations"):
        detect_occlusions(None)


def test_three_way_overlap_gives_three_pairs():
    ids = np.zeros((32, 32), int)
    for k, (cy, cx) in enumerate([(12, 12), (12, 20), (19, 16)], start=1):
        ids[shape_mask("disk", cy, cx, 6, 32)] = k
    assert detect_occlusions(_inst(ids)) == {(1, 2), (1, 3), (2, 3)}


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=36, max_size=36))
def test_occlusion_matches_pixel_walk(values):
    ids = np.array(values).reshape(6, 6)
    assert detect_occlusions(_inst(ids)) == brute_pairs(ids)


def test_toy_generator_records_match_detection(toy50):
    manifest, _ = toy50
    for e in manifest:
        inst = load_instances(manifest.resolve(e.instance_path))
        assert detect_occlusions(inst) == {tuple(sorted(p)) for p in inst.recorded_pairs}


def test_all_seven_filters_match_brute_force(toy50):
    manifest, catalog = toy50
    cooc = compute_cooccurrence(manifest, catalog)
    counts = cooc.counts.tolist()
    facts = []
    for e in manifest:
        mask = load_mask(manifest.resolve(e.mask_path), catalog)
        classes = {int(v) for v in np.unique(mask) if v not in (0, 255)}
        facts.append((e.id, classes, load_instances(manifest.resolve(e.instance_path)).ids))
    specs = [
        ("occ1", SubsetSpec(SubsetKind.OCC_1), None, False),
        ("occall", SubsetSpec(SubsetKind.OCC_ALL), None, False),
        *[("nobj", SubsetSpec(SubsetKind.N_OBJECTS, n=k), k, False) for k in (1, 2, 3)],
        *[("nuniq", SubsetSpec(SubsetKind.N_UNIQUE, n=k), k, False) for k in (2, 3)],
        *[("cooc", SubsetSpec(SubsetKind.COOC_THRESHOLD, threshold=t, any_pair=a), t, a)
          for t in (3, 6, 10) for a in (False, True)],
        *[("excl", SubsetSpec(SubsetKind.EXCLUSIVE, cls=c), c, False) for c in (1, 2, 3, 4)],
        ("with", SubsetSpec(SubsetKind.CO_OCCUR_WITH, cls=2, anchor=1), (2, 1), False),
    ]
    nonempty = set()
    for kind, spec, arg, any_pair in specs:
        got = [e.id for e in filter_subset(manifest, spec, catalog, cooc)]
        expected = [sid for sid, cls, ids in facts if brute_keep(kind, cls, ids, counts, arg, any_pair)]
        assert got == expected, spec
        if got:
            nonempty.add(kind)
    assert nonempty == {"occ1", "occall", "nobj", "nuniq", "cooc", "excl", "with"}


def test_cooc_above_max_keeps_everything(toy50):
    manifest, catalog = toy50
    cooc = compute_cooccurrence(manifest, catalog)
    spec = SubsetSpec(SubsetKind.COOC_THRESHOLD, threshold=int(cooc.counts.max()) + 1)
    assert len(filter_subset(manifest, spec, catalog, cooc)) == len(manifest)


def test_parse_subset():
    voc = ClassCatalog.voc()
    assert parse_subset("nobj=3", voc) == SubsetSpec(SubsetKind.N_OBJECTS, n=3)
    assert parse_subset("cooc<20", voc, any_pair=True).any_pair
    assert parse_subset("excl=cat", voc).cls == voc.index("cat")
    w = parse_subset("with=dog", voc)
    assert (w.cls, w.anchor) == (voc.index("dog"), voc.index("person"))
    with pytest.raises(ValidationError):
        parse_subset("nuniq=1", voc)
    with pytest.raises(ValidationError):
        parse_subset("banana", voc)
    with pytest.raises(ValidationError):
        parse_subset("with=a", ClassCatalog(("bg", "a", "b")))


def test_perturbation_examples():
    img = np.random.default_rng(0).random((5, 6, 3)).astype(np.float32)
    assert np.array_equal(apply_perturbation(img, np.zeros((5, 6, 3))), img)
    ones = np.ones((4, 4, 3), np.float32)
    assert np.array_equal(apply_perturbation(ones, np.full((4, 4, 3), 0.02)), ones)
    pert = np.random.default_rng(1).uniform(-10 / 255, 10 / 255, (5, 6, 3))
    out = apply_perturbation(img, pert, max_norm=10 / 255)
    assert np.all(out >= np.clip(img - 10 / 255, 0, 1) - 1e-6)
    assert np.all(out <= np.clip(img + 10 / 255, 0, 1) + 1e-6)
    with pytest.raises(ValidationError):
        apply_perturbation(img, np.full((5, 6, 3), 0.1), max_norm=10 / 255)


def test_fit_perturbation_tiles_and_crops():
    p = np.arange(2 * 3 * 3, dtype=np.float32).reshape(2, 3, 3)
    tiled = fit_perturbation(p, (5, 7))
    assert tiled.shape == (5, 7, 3)
    assert np.array_equal(tiled[2:4, 3:6], p)
    big = np.arange(10 * 10 * 3, dtype=np.float32).reshape(10, 10, 3)
    assert np.array_equal(fit_perturbation(big, (4, 6)), big[3:7, 2:8])


def test_png_perturbation_offset(tmp_path):
    from PIL import Image

    arr = np.full((3, 3, 3), 138, np.uint8)
    Image.fromarray(arr).save(tmp_path / "p.png")
    assert np.allclose(load_perturbation(tmp_path / "p.png"), 10 / 255)


def _gt_predictor(manifest, catalog):
    table = {e.id: load_mask(manifest.resolve(e.mask_path), catalog) for e in manifest}

    def predict(images, ids):
        return np.stack([np.where(table[i] == 255, 0, table[i]) for i in ids])
    return predict


def test_oracle_predictor_scores_one(toy50):
    manifest, catalog = toy50
    report = evaluate(_gt_predictor(manifest, catalog), manifest, catalog)
    assert report.miou == 1.0 and report.image_count == len(manifest)


def test_constant_background_predictor(toy50):
    manifest, catalog = toy50
    report = evaluate(constant_predictor(0), manifest, catalog)
    masks = [load_mask(manifest.resolve(e.mask_path), catalog) for e in manifest]
    valid = sum(int((m != 255).sum()) for m in masks)
    bg = sum(int((m == 0).sum()) for m in masks)
    assert report.per_class_iou[0] == pytest.approx(bg / valid, abs=1e-12)
    assert all(v == 0.0 for v in report.per_class_iou[1:] if v is not None)


def test_empty_subset_error_names_subset(toy50, tmp_path):
    manifest, catalog = toy50
    with pytest.raises(EmptyEvaluationError, match="nobj=9"):
        evaluate(constant_predictor(0), manifest.subset([]), catalog, subset="nobj=9")


def test_report_round_trip_and_determinism(toy50, tmp_path):
    manifest, catalog = toy50
    a = evaluate(constant_predictor(1), manifest, catalog, per_image=True)
    b = evaluate(constant_predictor(1), manifest, catalog, per_image=True)
    assert a == b
    a.save(tmp_path / "r.json")
    from featbind.evaluation import EvalReport
    assert EvalReport.load(tmp_path / "r.json") == a


def test_evaluation_additivity(toy50):
    manifest, catalog = toy50
    ids = [e.id for e in manifest]
    pred = constant_predictor(2)
    cm_total = new_confusion(catalog.num_classes)
    for chunk in (ids[:20], ids[20:]):
        for e in manifest.subset(chunk):
            gt = load_mask(manifest.resolve(e.mask_path), catalog)
            update_confusion(cm_total, np.full(gt.shape, 2), gt)
    assert miou(cm_total)[1] == pytest.approx(evaluate(pred, manifest, catalog).miou, abs=1e-15)
