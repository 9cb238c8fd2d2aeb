import logging

import numpy as np
import pytest

from defencing.cnn import CnnArch, init_model, model_with_vector
from defencing.detector import (
    Edit,
    apply_manual_edits,
    cluster,
    connect_joints,
    estimate_wire_thickness,
    eval_detection,
    parse_edits,
    scan,
)
from defencing.image import FenceMask, Image
from defencing.synth import composite, generate_fence, random_scene, textured_background


def constant_model(joint_logit: float, nonjoint_logit: float):
    """Model with zero kernels whose output biases pin the two scores."""
    model = init_model(0)
    vec = np.zeros(model.arch.parameter_count)
    vec[-2] = joint_logit
    vec[-1] = nonjoint_logit
    return model_with_vector(model, vec)


class TestScan:
    def test_window_count_and_hits(self):
        frame = textured_background(64, 64, seed=1)
        det = scan(constant_model(3.0, -3.0), frame, stride=4)
        assert det.windows_scanned == 81  # ((64-32)/4 + 1)^2
        assert len(det.raw_hits) == 81

    def test_always_negative_gives_no_joints(self):
        frame = textured_background(64, 64, seed=1)
        det = scan(constant_model(-3.0, 3.0), frame, stride=4)
        assert det.raw_hits == [] and det.joints == []

    def test_window_count_various_strides(self):
        frame = textured_background(70, 50, seed=2)
        for stride in (1, 3, 4, 7):
            det = scan(constant_model(-3.0, 3.0), frame, stride=stride)
            expected = ((70 - 32) // stride + 1) * ((50 - 32) // stride + 1)
            assert det.windows_scanned == expected

    def test_frame_too_small(self):
        frame = Image(np.zeros((1, 16, 48)))
        with pytest.raises(ValueError, match="smaller"):
            scan(constant_model(1, 0), frame, stride=4)

    def test_bad_threshold_and_stride(self):
        frame = textured_background(64, 64, seed=1)
        with pytest.raises(ValueError):
            scan(constant_model(1, 0), frame, threshold=1.5)
        with pytest.raises(ValueError):
            scan(constant_model(1, 0), frame, stride=0)


class TestCluster:
    def test_single_link_merges(self):
        joints = cluster([((10.0, 10.0), 1.0), ((12.0, 10.0), 3.0)], cluster_radius=8)
        assert len(joints) == 1
        # score-weighted mean of x: (10*1 + 12*3) / 4
        assert joints[0] == pytest.approx((11.5, 10.0))

    def test_distant_hits_stay_apart(self):
        joints = cluster([((10.0, 10.0), 1.0), ((40.0, 40.0), 1.0)], cluster_radius=8)
        assert len(joints) == 2

    def test_transitive_chaining(self):
        hits = [((10.0, 10.0), 1.0), ((16.0, 10.0), 1.0), ((22.0, 10.0), 1.0)]
        assert len(cluster(hits, cluster_radius=8)) == 1

    def test_order_invariance(self):
        rng = np.random.default_rng(3)
        hits = [((float(x), float(y)), float(s)) for x, y, s in rng.random((40, 3)) * [64, 64, 1]]
        ref = cluster(hits, cluster_radius=6)
        for seed in range(5):
            perm = np.random.default_rng(seed).permutation(len(hits))
            assert cluster([hits[i] for i in perm], cluster_radius=6) == ref

    def test_empty(self):
        assert cluster([], cluster_radius=8) == []

    def test_sorted_by_y_then_x(self):
        hits = [((50.0, 1.0), 1.0), ((1.0, 50.0), 1.0), ((30.0, 1.0), 1.0)]
        out = cluster(hits, cluster_radius=2)
        assert out == sorted(out, key=lambda c: (c[1], c[0]))


def paint_oracle(h, w, segments, discs):
    """Independent slow rasterizer: capsule and disc distance tests per pixel."""
    bits = np.zeros((h, w), dtype=bool)
    for iy in range(h):
        for ix in range(w):
            for (x1, y1), (x2, y2), t in segments:
                vx, vy = x2 - x1, y2 - y1
                vv = vx * vx + vy * vy
                s = 0.0 if vv == 0 else max(0.0, min(1.0, ((ix - x1) * vx + (iy - y1) * vy) / vv))
                if (ix - x1 - s * vx) ** 2 + (iy - y1 - s * vy) ** 2 <= (t / 2) ** 2:
                    bits[iy, ix] = True
            for (cx, cy), r in discs:
                if (ix - cx) ** 2 + (iy - cy) ** 2 <= r * r:
                    bits[iy, ix] = True
    return bits


class TestConnectJoints:
    def test_square_outline(self):
        joints = [(10.0, 10.0), (30.0, 10.0), (10.0, 30.0), (30.0, 30.0)]
        mask = connect_joints(joints, (40, 40), wire_thickness=3, link_radius=20.0, neighbors_max=2)
        segs = [
            ((10, 10), (30, 10), 3.0),
            ((10, 10), (10, 30), 3.0),
            ((30, 10), (30, 30), 3.0),
            ((10, 30), (30, 30), 3.0),
        ]
        discs = [((x, y), 3.0) for x, y in joints]
        assert np.array_equal(mask.bits, paint_oracle(40, 40, segs, discs))

    def test_single_joint_disc_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            mask = connect_joints([(20.0, 20.0)], (40, 40), wire_thickness=4)
        assert "disc-only" in caplog.text
        assert np.array_equal(mask.bits, paint_oracle(40, 40, [], [((20.0, 20.0), 4.0)]))

    def test_covers_generated_fence(self):
        layer = generate_fence(256, 256, spacing=24, angle=0, wire_thickness=3, phases=(12.0, 12.0))
        mask = connect_joints(
            layer.joints, (256, 256), wire_thickness=layer.wire_thickness, neighbors_max=4
        )
        covered = np.logical_and(mask.bits, layer.mask.bits).sum() / layer.mask.bits.sum()
        assert covered >= 0.90

    def test_extend_to_border_covers_full_wires(self):
        layer = generate_fence(256, 256, spacing=24, angle=0, wire_thickness=3, phases=(12.0, 12.0))
        mask = connect_joints(
            layer.joints, (256, 256), wire_thickness=layer.wire_thickness,
            neighbors_max=4, extend_to_border=True,
        )
        covered = np.logical_and(mask.bits, layer.mask.bits).sum() / layer.mask.bits.sum()
        assert covered >= 0.97

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        joints = [(float(x), float(y)) for x, y in rng.random((12, 2)) * 100 + 14]
        ref = connect_joints(joints, (128, 128), wire_thickness=3)
        for seed in range(3):
            perm = np.random.default_rng(seed).permutation(len(joints))
            out = connect_joints([joints[i] for i in perm], (128, 128), wire_thickness=3)
            assert np.array_equal(out.bits, ref.bits)

    def test_validation(self):
        with pytest.raises(ValueError):
            connect_joints([(1.0, 1.0)], (32, 32), wire_thickness=0)
        with pytest.raises(ValueError):
            connect_joints([(1.0, 1.0)], (32, 32), neighbors_max=1)


class TestEvalDetection:
    def test_perfect_match(self):
        pts = [(1.0, 2.0), (10.0, 20.0), (30.0, 5.0)]
        assert eval_detection(pts, list(pts)) == (1.0, 1.0, 1.0)

    def test_table_values(self):
        # 168 of 200 predictions match 168 of 175 truths -> P=0.84, R=0.96
        truth = [(40.0 * i, 0.0) for i in range(175)]
        predicted = [(40.0 * i, 4.0) for i in range(168)]
        predicted += [(40.0 * i, 1000.0) for i in range(32)]
        p, r, f = eval_detection(predicted, truth, tolerance=8.0)
        assert p == pytest.approx(0.84) and r == pytest.approx(0.96)
        assert f == pytest.approx(0.8960, abs=5e-5)

    def test_greedy_one_to_one(self):
        # two predictions near one truth: only one match
        p, r, f = eval_detection([(0.0, 0.0), (1.0, 0.0)], [(0.5, 0.0)], tolerance=8.0)
        assert p == 0.5 and r == 1.0

    def test_subset_properties(self):
        rng = np.random.default_rng(8)
        truth = [(float(x), float(y)) for x, y in rng.random((20, 2)) * 200]
        subset = truth[::2]
        p, r, _ = eval_detection(subset, truth)
        assert p == 1.0
        p, r, _ = eval_detection(truth, subset)
        assert r == 1.0

    def test_empty_cases(self):
        assert eval_detection([], [(1.0, 1.0)]) == (1.0, 0.0, 0.0)
        p, r, f = eval_detection([(1.0, 1.0)], [])
        assert (p, r, f) == (0.0, 1.0, 0.0)
        assert eval_detection([], []) == (1.0, 1.0, 1.0)


class TestWireThickness:
    def test_recovers_synthetic_thickness(self):
        clean, fenced, layer = random_scene(160, 160, seed=12, wire_thickness=3, spacing=32)
        est = estimate_wire_thickness(fenced, layer.joints)
        assert 2.0 <= est <= 6.0

    def test_clamped_range(self):
        clean, fenced, layer = random_scene(160, 160, seed=13)
        est = estimate_wire_thickness(fenced, layer.joints)
        assert 2.0 <= est <= 10.0

    def test_default_without_joints(self):
        img = textured_background(64, 64, seed=1)
        assert estimate_wire_thickness(img, []) == 3.0


class TestManualEdits:
    def test_empty_edit_list_identity(self):
        bits = np.random.default_rng(1).random((20, 20)) > 0.5
        mask = FenceMask(bits)
        assert np.array_equal(apply_manual_edits(mask, []).bits, bits)

    def test_add_then_remove_disc_is_identity(self):
        bits = np.zeros((30, 30), bool)
        mask = FenceMask(bits)
        edits = [Edit("add", "disc", (15.0, 15.0, 5.0)), Edit("rm", "disc", (15.0, 15.0, 5.0))]
        assert np.array_equal(apply_manual_edits(mask, edits).bits, bits)

    def test_add_segment_matches_oracle(self):
        mask = FenceMask(np.zeros((40, 40), bool))
        out = apply_manual_edits(mask, [Edit("add", "seg", (5.0, 8.0, 35.0, 30.0, 4.0))])
        assert np.array_equal(out.bits, paint_oracle(40, 40, [((5, 8), (35, 30), 4.0)], []))

    def test_out_of_bounds_errors(self):
        mask = FenceMask(np.zeros((20, 20), bool))
        with pytest.raises(ValueError, match="outside"):
            apply_manual_edits(mask, [Edit("add", "disc", (25.0, 5.0, 2.0))])

    def test_parse_roundtrip(self):
        text = "add seg 1 2 3 4 2.5\nrm disc 7 8 3\n# comment\n\nadd disc 1 1 2\n"
        edits = parse_edits(text)
        assert edits == [
            Edit("add", "seg", (1.0, 2.0, 3.0, 4.0, 2.5)),
            Edit("rm", "disc", (7.0, 8.0, 3.0)),
            Edit("add", "disc", (1.0, 1.0, 2.0)),
        ]

    def test_parse_errors(self):
        with pytest.raises(ValueError):
            parse_edits("move disc 1 2 3")
        with pytest.raises(ValueError):
            parse_edits("add seg 1 2 3")
        with pytest.raises(ValueError):
            parse_edits("add disc a b c")


class TestEndToEnd:
    def test_trained_detector_finds_interior_joints(self, trained_model):
        # all interior joints of a fresh scene (appearance within the light
        # fixture model's training ranges) have a detection within 8 px
        _, fenced, layer = random_scene(
            192, 192, seed=777, spacing=36, angle=5, wire_thickness=3, wire_color=0.08
        )
        det = scan(trained_model, fenced, threshold=0.5, stride=4)
        missing = []
        for jx, jy in layer.joints:
            if not (16 <= jx < 176 and 16 <= jy < 176):
                continue
            d = min(np.hypot(px - jx, py - jy) for px, py in det.joints)
            if d > 8.0:
                missing.append((jx, jy, d))
        assert not missing
