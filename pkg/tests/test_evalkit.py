import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation as SciRot

from artifit.assignment import Assignment
from artifit.cloud import NormalizationRecord
from artifit.evalkit import (InstanceErrors, InsufficientDataError, MetricThresholds, PosePrediction, chain_mean,
                             emit_report, instance_errors, joint_error, map_table, part_pose_error, pose_score,
                             ransac_common_pose, read_report, relative_to_absolute, segmentation_iou)
from artifit.fit import FittedInstance
from artifit.geom import axis_angle_to_rotation, rotation_angle_between, rot_z
from artifit.synthgen import GroundTruth

seeds = st.integers(0, 2**32 - 1)


def _rand_rot(rng, scale=1.0):
    return axis_angle_to_rotation(rng.normal(scale=scale, size=3))


def _crisp(labels, n_parts):
    p = np.zeros((n_parts, len(labels)))
    p[labels, np.arange(len(labels))] = 1.0
    return p


def _value(table, family, threshold):
    return next(v for f, t, v in table if f == family and t == threshold)


# -- segmentation ---------------------------------------------------------------


def test_iou_perfect_and_swapped():
    gt = np.array([1] * 10 + [2] * 10)
    ious, miou, perm = segmentation_iou(_crisp(gt - 1, 2), gt)
    assert miou == 1.0 and perm == (0, 1)
    ious, miou, perm = segmentation_iou(_crisp(2 - gt, 2), gt)
    assert miou == 1.0 and perm == (1, 0)


def test_iou_half_mislabeled_example():
    gt = np.array([1] * 100 + [2] * 100)
    pred = gt - 1
    pred[100:150] = 0
    ious, miou, _ = segmentation_iou(_crisp(pred, 2), gt)
    assert ious == pytest.approx([2 / 3, 1 / 2], abs=1e-15)
    assert miou == pytest.approx(0.5833, abs=5e-5)


def test_iou_ignores_outliers_and_ties_go_low():
    gt = np.array([0, 0, 1, 1, 2, 2])
    probs = _crisp(np.array([1, 1, 0, 0, 1, 1]), 2)
    assert segmentation_iou(probs, gt)[1] == 1.0
    tie = np.full((2, 6), 0.5)
    ious, _, perm = segmentation_iou(tie, np.array([1, 1, 1, 2, 2, 2]))
    # every point goes to predicted part 0
    assert sorted(ious.tolist()) == [0.0, 0.5]


@given(seeds, st.integers(2, 4))
def test_iou_permutation_beats_identity(seed, n_parts):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, n_parts + 1, 60)
    probs = rng.dirichlet(np.ones(n_parts), 60).T
    _, best, _ = segmentation_iou(probs, gt)
    pred = probs.argmax(axis=0)
    keep = gt > 0
    ident = []
    for p in range(n_parts):
        a, b = pred[keep] == p, gt[keep] == p + 1
        u = (a | b).sum()
        ident.append((a & b).sum() / u if u else 1.0)
    assert best >= np.mean(ident) - 1e-15


# -- pose and joint errors -------------------------------------------------------------


def test_part_pose_error_examples():
    r = np.stack([np.eye(3), rot_z(0.3)])
    t = np.zeros((2, 3))
    rot, tr = part_pose_error(r, t, r, t)
    assert np.allclose(rot, 0) and np.allclose(tr, 0)
    rot, tr = part_pose_error(rot_z(np.radians(10))[None], [[0.05, 0, 0]], np.eye(3)[None], [[0, 0, 0]])
    assert rot[0] == pytest.approx(10.0, abs=1e-12) and tr[0] == pytest.approx(0.05, abs=1e-15)
    with pytest.raises(ValueError):
        part_pose_error(r, t, r[:1], t[:1])


@given(seeds)
def test_part_pose_error_quaternion_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = _rand_rot(rng), _rand_rot(rng)
    qa, qb = SciRot.from_matrix(a).as_quat(), SciRot.from_matrix(b).as_quat()
    oracle = np.degrees(2 * np.arccos(min(1.0, abs(qa @ qb))))
    assert part_pose_error(a[None], np.zeros((1, 3)), b[None], np.zeros((1, 3)))[0][0] == pytest.approx(oracle, abs=1e-6)


def test_joint_error_examples():
    d = np.array([0.0, 0.0, 1.0])
    assert joint_error([1, 2, 3], d, [1, 2, 3], d) == (0.0, 0.0)
    assert joint_error([1, 2, 3], -d, [1, 2, 3], d)[0] == 0.0
    assert joint_error([1, 2, 3], -d, [1, 2, 3], d, fold=False)[0] == pytest.approx(180.0)
    assert joint_error([0.07, 0, 5], d, [0, 0, 0], d)[1] == pytest.approx(0.07, abs=1e-15)
    assert joint_error([9, 9, 9], d, [0, 0, 0], d, kind="prismatic")[1] is None


@given(seeds, st.floats(-5, 5))
def test_joint_error_fold_range_and_slide_invariance(seed, slide):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=3), rng.normal(size=3)
    ang, _ = joint_error(np.zeros(3), a, np.zeros(3), b)
    assert 0.0 <= ang <= 90.0
    d = b / np.linalg.norm(b)
    c, g = rng.normal(size=3), rng.normal(size=3)
    assert joint_error(c + slide * d, d, g, d)[1] == pytest.approx(joint_error(c, d, g, d)[1], abs=1e-12)


# -- tables ------------------------------------------------------------------------------


def _err(rot=0.0, trans=0.0, d=0.0, piv=0.0, iou=1.0):
    return InstanceErrors(iou, rot, trans, d, piv)


def test_map_table_perfect_and_one_failure():
    table = map_table([_err()] * 4)
    for f, t, v in table:
        if "deg_" in t or t.startswith("IoU") or t == "mIoU":
            assert v == 100.0, (f, t)
    table = map_table([_err(rot=6.0)] + [_err()] * 3)
    assert _value(table, "Part", "5deg_5cm") == 75.0
    assert _value(table, "Part", "10deg_10cm") == 100.0
    assert _value(table, "Part", "15deg_15cm") == 100.0
    with pytest.raises(ValueError):
        map_table([])


def test_map_table_counting_oracle():
    rng = np.random.default_rng(5)
    errs = [_err(rng.uniform(0, 20), rng.uniform(0, 0.2), rng.uniform(0, 20),
                 None if k % 3 == 0 else rng.uniform(0, 0.2), rng.uniform(0.3, 1.0)) for k in range(40)]
    table = map_table(errs)
    for r, t in ((5, 0.05), (10, 0.10), (15, 0.15)):
        label = f"{r}deg_{int(round(t * 100))}cm"
        part = sum(1 for e in errs if e.rot_deg < r and e.trans < t)
        joint = sum(1 for e in errs if e.dir_deg < r and (e.pivot is None or e.pivot < t))
        assert _value(table, "Part", label) == pytest.approx(100 * part / 40)
        assert _value(table, "Joint", label) == pytest.approx(100 * joint / 40)
    assert _value(table, "Segmentation", "IoU50") == 100 * sum(e.mean_iou >= 0.5 for e in errs) / 40
    assert _value(table, "Segmentation", "IoU75") == 100 * sum(e.mean_iou >= 0.75 for e in errs) / 40
    parts = [_value(table, "Part", f"{r}deg_{r}cm") for r in (5, 10, 15)]
    assert parts == sorted(parts)


def test_thresholds_must_be_sorted():
    with pytest.raises(ValueError):
        MetricThresholds(iou=(0.75, 0.5))
    with pytest.raises(ValueError):
        MetricThresholds(rotation=(10.0, 5.0, 15.0))


# -- common pose --------------------------------------------------------------------------


def test_chain_mean_two_rotations():
    r, t = chain_mean([np.eye(3), rot_z(0.4)], [np.zeros(3), np.ones(3)])
    assert np.allclose(r, rot_z(0.2)) and np.allclose(t, 0.5)


def test_ransac_identical_samples():
    rng = np.random.default_rng(0)
    r = np.stack([_rand_rot(rng), _rand_rot(rng)])
    t = rng.normal(size=(2, 3))
    rots, trans, scores = ransac_common_pose(np.stack([r] * 6), np.stack([t] * 6))
    assert np.allclose(rots, r, atol=1e-12) and np.allclose(trans, t, atol=1e-15)
    assert len(scores) == 100
    with pytest.raises(InsufficientDataError):
        ransac_common_pose(np.stack([r] * 3), np.stack([t] * 3))


@pytest.mark.parametrize("seed", range(20))
def test_ransac_with_outliers(seed):
    rng = np.random.default_rng(seed)
    r0, t0 = _rand_rot(rng), rng.normal(size=3)
    rots = np.stack([r0] * 32)[:, None].copy()
    trans = np.stack([t0] * 32)[:, None].copy()
    for k in rng.choice(32, size=3, replace=False):
        rots[k, 0] = _rand_rot(rng, 2.0)
        trans[k, 0] = rng.normal(size=3)
    r, t, scores = ransac_common_pose(rots, trans, seed=seed)
    assert np.degrees(rotation_angle_between(r[0], r0)) < 1.0
    assert np.linalg.norm(t[0] - t0) < 0.01
    best = pose_score(r[0], t[0], rots[:, 0], trans[:, 0])
    assert best == pytest.approx(scores.min(), abs=1e-12)
    again = ransac_common_pose(rots, trans, seed=seed)
    assert np.array_equal(again[0], r) and np.array_equal(again[2], scores)


# -- relative to absolute ----------------------------------------------------------------


def _hom(r, t, s=1.0):
    m = np.eye(4)
    m[:3, :3] = s * r
    m[:3, 3] = t
    return m


def _fitted(rng, n_parts=2):
    rec = NormalizationRecord(rng.normal(size=3), float(rng.uniform(0.5, 2.0)))
    maps = [(_rand_rot(rng), rng.normal(size=3)) for _ in range(n_parts)]
    return FittedInstance(_rand_rot(rng), rng.normal(size=3), 0, np.full((n_parts, 5), 1 / n_parts),
                          Assignment(((0, 1),)), maps, rng.normal(size=(1, 3)), np.array([[0.0, 0.6, 0.8]]), rec)


def test_relative_to_absolute_identity():
    rec = NormalizationRecord(np.zeros(3), 1.0)
    fi = FittedInstance(np.eye(3), np.zeros(3), 59, np.full((2, 4), 0.5), Assignment(((0, 1),)),
                        [(np.eye(3), np.zeros(3))] * 2, np.zeros((1, 3)), np.array([[0, 0, 1.0]]), rec)
    pred = relative_to_absolute(fi, np.stack([np.eye(3)] * 2), np.zeros((2, 3)))
    assert np.allclose(pred.rotations, np.eye(3)) and np.allclose(pred.translations, 0)
    with pytest.raises(ValueError):
        relative_to_absolute(fi, None, None)


@given(seeds)
def test_relative_to_absolute_homogeneous_oracle(seed):
    rng = np.random.default_rng(seed)
    fi = _fitted(rng)
    c_rot = np.stack([_rand_rot(rng) for _ in range(2)])
    c_trans = rng.normal(size=(2, 3))
    pred = relative_to_absolute(fi, c_rot, c_trans)
    rec = fi.record
    norm = _hom(np.eye(3), -rec.scale * rec.offset, rec.scale)
    obj = _hom(fi.r_o, fi.t_o)
    for p, (a, b) in enumerate(fi.part_maps):
        chain = np.linalg.inv(_hom(a, b) @ obj @ norm) @ _hom(c_rot[p], c_trans[p])
        assert np.allclose(chain[:3, :3] * rec.scale, pred.rotations[p], atol=1e-10)
        assert np.allclose(chain[:3, 3], pred.translations[p], atol=1e-10)
    piv = np.linalg.inv(obj @ norm) @ np.append(fi.pivots[0], 1.0)
    assert np.allclose(pred.pivots[0], piv[:3], atol=1e-10)
    assert np.allclose(pred.directions[0], fi.r_o.T @ fi.directions[0], atol=1e-12)


def test_normalization_inversion_restores_scale():
    rec = NormalizationRecord(np.array([1.0, -2.0, 0.5]), 3.7)
    pts = np.random.default_rng(1).normal(size=(10, 3))
    assert np.abs(rec.invert(rec.apply(pts)) - pts).max() < 1e-9


def test_instance_errors_ground_truth_as_prediction():
    rng = np.random.default_rng(2)
    labels = np.array([0, 1, 1, 2, 2, 2])
    gt = GroundTruth(labels, np.stack([_rand_rot(rng), _rand_rot(rng)]), rng.normal(size=(2, 3)),
                     rng.normal(size=(1, 3)), np.array([[1.0, 0, 0]]), np.array([0.3]), ["revolute"])
    pred = PosePrediction(gt.rotations, gt.translations, gt.pivots, gt.directions,
                          _crisp(np.maximum(labels - 1, 0), 2), ["revolute"])
    e = instance_errors(pred, gt)
    assert (e.mean_iou, e.trans, e.dir_deg, e.pivot) == (1.0, 0.0, 0.0, 0.0)
    assert e.rot_deg < 1e-6


# -- reports ----------------------------------------------------------------------------------


GOLDEN_CSV = (
    "category,metric_family,threshold,value\n"
    "laptop2,Segmentation,mIoU,87.5\n"
    "laptop2,Part,5deg_5cm,25.0\n"
)


def test_report_golden_and_round_trip(tmp_path):
    table = [("Segmentation", "mIoU", 87.5), ("Part", "5deg_5cm", 25.0)]
    emit_report(table, tmp_path / "r.csv", "csv", "laptop2")
    assert (tmp_path / "r.csv").read_text() == GOLDEN_CSV
    emit_report(table, tmp_path / "r.json", "json", "laptop2")
    for name in ("r.csv", "r.json"):
        rows = read_report(tmp_path / name)
        assert [(r["metric_family"], r["threshold"], r["value"]) for r in rows] == table
    emit_report([], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == "category,metric_family,threshold,value\n"
    with pytest.raises(ValueError):
        emit_report(table, tmp_path / "x", "xml")
