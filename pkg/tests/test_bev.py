import math

import numpy as np
import pytest

from attentivegru import ops
from attentivegru.bev import GridSpec, PillarEncoder, batch_sequence, pillar_project, point_features, prepare_sequence
from attentivegru.sim import PointCloudFrame, SimConfig, generate_scene, render_sequence


def frame(points, t=0.0, boxes=None):
    return PointCloudFrame(t, np.asarray(points, dtype=float).reshape(-1, 4),
                           np.zeros((0, 8)) if boxes is None else np.asarray(boxes, dtype=float))


@pytest.fixture
def encoder():
    return PillarEncoder(np.random.default_rng(0), 16)


def test_empty_frame_projects_to_zero(encoder):
    bev = pillar_project(frame([]), GridSpec(), encoder)
    assert bev.values.shape == (16, 32, 32)
    assert not bev.values.data.any()


def test_single_point_lands_in_expected_bin(encoder):
    bev = pillar_project(frame([[10.0, 0.0, 1.0, 0.5]]), GridSpec(), encoder)
    nz = np.argwhere(np.abs(bev.values.data).sum(axis=0) > 0)
    assert nz.tolist() == [[5, 16]]


def test_two_points_in_one_cell_take_elementwise_max(encoder):
    spec = GridSpec()
    pts = [[10.2, 0.01, 3.0, 0.5], [11.5, 0.02, -2.0, 2.0]]
    bev = pillar_project(frame(pts), spec, encoder)
    feats = point_features(frame(pts), spec).features
    enc = [encoder.encode_points(feats[i:i + 1]).data[0] for i in range(2)]
    np.testing.assert_allclose(bev.values.data[:, 5, 16], np.maximum(*enc), rtol=1e-12)


def test_points_outside_grid_discarded(encoder):
    spec = GridSpec(max_range=20.0)
    bev = pillar_project(frame([[30.0, 0.0, 0.0, 1.0]]), spec, encoder)
    assert not bev.values.data.any()


def test_nonzero_iff_occupied(encoder):
    spec = GridSpec()
    frames = render_sequence(generate_scene(SimConfig(), 3))
    for fr in frames:
        prep = point_features(fr, spec)
        occupied = np.zeros(spec.range_bins * spec.azimuth_bins, dtype=bool)
        occupied[prep.cells] = True
        bev = encoder(prep, spec).data
        np.testing.assert_array_equal(np.any(bev != 0, axis=0).reshape(-1), occupied)
        assert np.all(np.isfinite(bev))


def test_point_permutation_invariance(encoder):
    spec = GridSpec()
    fr = render_sequence(generate_scene(SimConfig(), 5))[0]
    perm = np.random.default_rng(0).permutation(len(fr.points))
    a = pillar_project(fr, spec, encoder).values.data
    b = pillar_project(frame(fr.points[perm]), spec, encoder).values.data
    assert a.tobytes() == b.tobytes()


def test_perturbing_one_point_changes_at_most_one_cell(encoder):
    spec = GridSpec()
    fr = render_sequence(generate_scene(SimConfig(), 6))[0]
    pts = fr.points.copy()
    a = pillar_project(frame(pts), spec, encoder).values.data
    pts[0, 2] += 0.7
    b = pillar_project(frame(pts), spec, encoder).values.data
    assert np.count_nonzero(np.any(a != b, axis=0)) <= 1


def test_batch_sequence_order_and_targets(encoder):
    spec = GridSpec()
    f0 = frame([[10.0, 0.0, 0.0, 1.0]], 0.0, [[10, 0, 2, 4, 0, 0, 0, 0]])
    f1 = frame([], 0.1, [[11, 0, 2, 4, 0, 0, 0, 0]])
    maps, gt = batch_sequence([f0, f1], spec, encoder)
    assert len(maps) == 2
    assert maps[0].values.data.any() and not maps[1].values.data.any()
    np.testing.assert_array_equal(gt, f1.gt_boxes)
    (single,), _ = batch_sequence([f0], spec, encoder)
    assert single.values.data.tobytes() == pillar_project(f0, spec, encoder).values.data.tobytes()


def test_unordered_timestamps_rejected():
    with pytest.raises(ValueError, match="increasing"):
        prepare_sequence([frame([], 0.2), frame([], 0.1)], GridSpec())


def test_encoder_gradients_flow_to_weights(encoder):
    from attentivegru.tensor import backward_pass
    fr = render_sequence(generate_scene(SimConfig(), 1))[0]
    out = encoder(point_features(fr, GridSpec()), GridSpec())
    backward_pass(ops.sum(out))
    assert np.abs(encoder.weight.grad).sum() > 0


def test_grid_geometry():
    spec = GridSpec()
    assert spec.range_step == 2.0
    assert spec.azimuth_step == pytest.approx(math.pi / 2 / 32)
    r, az = spec.cell_center_polar(5, 16)
    assert r == 11.0 and az == pytest.approx(spec.azimuth_step / 2)
    assert spec.downsampled(2).shape == (16, 16)
    with pytest.raises(ValueError):
        GridSpec(range_bins=0)
