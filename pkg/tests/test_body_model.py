"""Body model: skinning behavior, blendshapes, validation, serialization."""

import numpy as np
import pytest

from upfit import body_model, container, so3
from upfit.body_model import ModelValidationError


def test_mini_model_counts(model):
    assert model.num_vertices == 58
    assert model.num_joints == 6
    assert model.num_shapes == 2
    assert model.num_landmarks == 12
    assert model.num_parts == 6


def test_mini_model_passes_validation(model):
    assert body_model.validate_model(model) is model


def test_rest_pose_reproduces_template(model):
    posed = body_model.pose_mesh(model, np.zeros((6, 3)))
    assert np.allclose(posed.vertices, model.template_vertices, atol=1e-12)
    assert np.allclose(posed.joints3d, body_model.rest_joints(model), atol=1e-12)


def test_pure_translation(model):
    posed = body_model.pose_mesh(model, np.zeros((6, 3)),
                                 translation=(0.0, 0.0, 2.0))
    assert np.allclose(posed.vertices,
                       model.template_vertices + [0.0, 0.0, 2.0], atol=1e-12)


def test_root_rotation_is_rigid_about_root_joint(model):
    pose = np.zeros((6, 3))
    pose[0] = [0.0, 0.0, np.pi / 2]
    posed = body_model.pose_mesh(model, pose)
    R = so3.axis_angle_to_matrix(pose[0])
    root = body_model.rest_joints(model)[0]
    expected = (model.template_vertices - root) @ R.T + root
    assert np.allclose(posed.vertices, expected, atol=1e-9)


def test_zero_pose_reproduces_shaped_mesh(model):
    rng = np.random.default_rng(7)
    for _ in range(10):
        beta = rng.normal(0, 1.5, size=model.num_shapes)
        posed = body_model.pose_mesh(model, np.zeros((6, 3)), beta)
        assert np.allclose(posed.vertices,
                           body_model.shaped_vertices(model, beta), atol=1e-9)


def test_stature_direction_increases_height(model):
    def height(beta):
        v = body_model.shaped_vertices(model, beta)
        return v[:, 1].max() - v[:, 1].min()

    assert height(np.array([1.0, 0.0])) > height(np.zeros(2))


def test_girth_direction_keeps_joints(model):
    base = body_model.rest_joints(model)
    for g in (-1.5, -0.3, 0.8, 2.0):
        assert np.allclose(body_model.rest_joints(model, np.array([0.0, g])),
                           base, atol=1e-12)


def test_keypoints3d_rest_landmarks_are_template_vertices(model):
    posed = body_model.pose_mesh(model, np.zeros((6, 3)))
    pts = body_model.model_keypoints3d(model, posed, "mini18")
    assert np.allclose(pts[:6], posed.joints3d, atol=1e-12)
    assert np.allclose(pts[6:],
                       model.template_vertices[model.landmark_vertices],
                       atol=1e-12)


def test_keypoints3d_shift_with_translation(model):
    gamma = np.array([0.3, -0.1, 2.5])
    rest = body_model.pose_mesh(model, np.zeros((6, 3)))
    moved = body_model.pose_mesh(model, np.zeros((6, 3)), translation=gamma)
    for name in model.keypoint_sets:
        a = body_model.model_keypoints3d(model, rest, name)
        b = body_model.model_keypoints3d(model, moved, name)
        assert np.allclose(b, a + gamma, atol=1e-12)


def test_keypoints3d_rotate_rigidly(model):
    pose = np.zeros((6, 3))
    pose[0] = [0.4, -0.9, 0.2]
    posed = body_model.pose_mesh(model, pose)
    R = so3.axis_angle_to_matrix(pose[0])
    root = body_model.rest_joints(model)[0]
    rest_pts = body_model.model_keypoints3d(
        model, body_model.pose_mesh(model, np.zeros((6, 3))), "mini18")
    expected = (rest_pts - root) @ R.T + root
    assert np.allclose(body_model.model_keypoints3d(model, posed, "mini18"),
                       expected, atol=1e-9)


def test_save_load_round_trip(model, tmp_path):
    path = tmp_path / "model.npz"
    body_model.save_model(path, model)
    back = body_model.load_model(path)
    assert np.array_equal(back.template_vertices, model.template_vertices)
    assert np.array_equal(back.faces, model.faces)
    assert np.array_equal(back.shape_blendshapes, model.shape_blendshapes)
    assert np.array_equal(back.skinning_weights, model.skinning_weights)
    assert np.array_equal(back.parents, model.parents)
    assert np.array_equal(back.part_label, model.part_label)
    assert back.canonical_height == model.canonical_height
    assert set(back.keypoint_sets) == set(model.keypoint_sets)
    for name, ksd in model.keypoint_sets.items():
        assert back.keypoint_sets[name].points == ksd.points
        assert back.keypoint_sets[name].connections == ksd.connections
        assert back.keypoint_sets[name].torso == ksd.torso


def test_load_rejects_bad_skinning_row(model, tmp_path):
    path = tmp_path / "model.npz"
    body_model.save_model(path, model)
    arrays = container.load_named_arrays(path)
    arrays["skinning_weights"][5] *= 0.5
    container.save_named_arrays(path, arrays)
    with pytest.raises(ModelValidationError, match="row 5"):
        body_model.load_model(path)


def test_load_rejects_truncated_file(model, tmp_path):
    path = tmp_path / "model.npz"
    body_model.save_model(path, model)
    payload = path.read_bytes()
    path.write_bytes(payload[: len(payload) // 2])
    with pytest.raises(Exception):
        body_model.load_model(path)


def test_validate_rejects_face_index_out_of_range(model):
    import dataclasses

    faces = model.faces.copy()
    faces[0, 0] = model.num_vertices
    broken = dataclasses.replace(model, faces=faces)
    with pytest.raises(ModelValidationError, match="face"):
        body_model.validate_model(broken)


def test_validate_rejects_bad_parent_order(model):
    import dataclasses

    parents = model.parents.copy()
    parents[1] = 4
    broken = dataclasses.replace(model, parents=parents)
    with pytest.raises(ModelValidationError, match="parents"):
        body_model.validate_model(broken)


def test_frontal_pose_faces_camera(model, camera):
    from upfit import render

    pose, trans = body_model.frontal_pose(model, 2.5)
    posed = body_model.pose_mesh(model, pose, translation=trans)
    assert abs(posed.joints3d[0, 2] - 2.5) < 1e-9
    # upright in the image: head pixels above (smaller y than) leg pixels
    uv = render.project(posed.vertices, camera)
    head_vertex = model.landmark_vertices[0]
    assert uv[head_vertex, 1] < uv[:, 1].mean()
    assert (posed.vertices[:, 2] > 0).all()
