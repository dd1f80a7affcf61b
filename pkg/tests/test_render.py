"""Rasterization, projection, distance transform, viewpoints, raster I/O.

The rasterizer and distance transform are checked against brute-force
oracles: per-pixel point-in-triangle tests and an O(N^2) nearest-occupied
scan.  The oracles share nothing with the implementation beyond the pixel
grid convention (samples at integer coordinates).
"""

import numpy as np
import pytest

from upfit import body_model, render
from upfit.render import (Camera, EmptyProjectionError, ProjectionError,
                          Viewpoint, distance_transform, project, rasterize,
                          render_buffers, sample_viewpoints)


def bf_triangle_mask(tri, width, height, eps=1e-9):
    """Brute-force point-in-triangle occupancy with a knife-edge margin.

    Returns (inside, certain): pixels within ``eps`` of an edge are marked
    uncertain and excluded from comparisons.
    """
    inside = np.zeros((height, width), dtype=bool)
    certain = np.ones((height, width), dtype=bool)
    (ax, ay), (bx, by), (cx, cy) = tri
    area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    if abs(area) < 1e-12:
        return inside, np.zeros((height, width), dtype=bool)
    for y in range(height):
        for x in range(width):
            w0 = ((cx - bx) * (y - by) - (cy - by) * (x - bx)) / area
            w1 = ((ax - cx) * (y - cy) - (ay - cy) * (x - cx)) / area
            w2 = 1.0 - w0 - w1
            w = np.array([w0, w1, w2])
            inside[y, x] = (w >= 0).all()
            certain[y, x] = np.abs(w).min() > eps
    return inside, certain


def bf_distance_transform(mask):
    """O(N^2) exact distance to the nearest occupied pixel."""
    occ = np.argwhere(np.asarray(mask) > 0)
    out = np.full(mask.shape, np.inf)
    if occ.size == 0:
        return out
    for y in range(mask.shape[0]):
        for x in range(mask.shape[1]):
            d = np.hypot(occ[:, 0] - y, occ[:, 1] - x)
            out[y, x] = d.min()
    return out


def tri_mesh(verts2d, z):
    """Single triangle at constant depth as a renderable mesh."""
    cam = Camera(focal=1.0, principal_point=(0.0, 0.0), image_size=(64, 64))
    verts = np.column_stack([np.asarray(verts2d) * z, np.full(3, float(z))])
    return body_model.PosedMesh(vertices=verts,
                                faces=np.array([[0, 1, 2]]),
                                joints3d=np.zeros((1, 3))), cam


# --- projection --------------------------------------------------------------

def test_project_optical_axis(camera):
    assert np.array_equal(project(np.array([0.0, 0.0, 2.0]), camera),
                          [250.0, 250.0])


def test_project_offset_point(camera):
    assert np.array_equal(project(np.array([1.0, 0.0, 2.0]), camera),
                          [500.0, 250.0])


def test_project_rejects_nonpositive_depth(camera):
    with pytest.raises(ProjectionError):
        project(np.array([0.0, 0.0, 0.0]), camera)
    with pytest.raises(ProjectionError):
        project(np.array([[0.0, 0.0, 1.0], [0.1, 0.1, -2.0]]), camera)


# --- rasterization -----------------------------------------------------------

def test_rasterize_matches_point_in_triangle_oracle():
    rng = np.random.default_rng(10)
    for _ in range(20):
        tri = rng.uniform(2.0, 61.0, size=(3, 2))
        mesh, cam = tri_mesh(tri, z=2.0)
        mask = rasterize(mesh, cam, mode="silhouette")
        expected, certain = bf_triangle_mask(tri, cam.width, cam.height)
        assert np.array_equal(mask[certain].astype(bool), expected[certain])


def test_rasterize_depth_order_takes_nearer_part():
    cam = Camera(focal=1.0, principal_point=(0.0, 0.0), image_size=(32, 32))
    quad = np.array([[2.0, 2.0], [28.0, 2.0], [14.0, 28.0]])
    near = np.column_stack([quad * 2.0, np.full(3, 2.0)])
    far = np.column_stack([quad * 4.0, np.full(3, 4.0)])  # same screen coverage
    mesh = body_model.PosedMesh(vertices=np.vstack([far, near]),
                                faces=np.array([[0, 1, 2], [3, 4, 5]]),
                                joints3d=np.zeros((1, 3)))
    labels = rasterize(mesh, cam, mode="parts", part_label=np.array([0, 1]))
    covered = labels > 0
    assert covered.any()
    assert (labels[covered] == 2).all()  # nearer face's part (1) + 1


def test_rasterize_behind_camera_yields_empty(camera):
    mesh = body_model.PosedMesh(
        vertices=np.array([[0.0, 0.0, -1.0], [1.0, 0.0, -1.0], [0.0, 1.0, -1.0]]),
        faces=np.array([[0, 1, 2]]), joints3d=np.zeros((1, 3)))
    mask = rasterize(mesh, camera, mode="silhouette")
    assert not mask.any()
    with pytest.raises(EmptyProjectionError):
        render.require_nonempty(mask)


def test_rasterize_parts_cover_silhouette(model, camera):
    pose, trans = body_model.frontal_pose(model, 2.2)
    posed = body_model.pose_mesh(model, pose, translation=trans)
    sil = rasterize(posed, camera, mode="silhouette")
    parts = rasterize(posed, camera, mode="parts", part_label=model.part_label)
    assert np.array_equal(parts > 0, sil > 0)


# --- distance transform ------------------------------------------------------

def test_distance_transform_single_pixel():
    mask = np.zeros((20, 20), dtype=np.uint8)
    mask[10, 10] = 1
    dt = distance_transform(mask)
    assert dt[10, 10] == 0.0
    assert dt[13, 14] == 5.0
    assert dt[14, 13] == 5.0


def test_distance_transform_full_mask_is_zero():
    assert (distance_transform(np.ones((9, 7))) == 0).all()


def test_distance_transform_empty_mask_is_infinite():
    dt = distance_transform(np.zeros((5, 8)))
    assert np.isinf(dt).all()


def test_distance_transform_matches_bruteforce():
    rng = np.random.default_rng(11)
    for _ in range(20):
        h, w = rng.integers(4, 33, size=2)
        mask = (rng.random((h, w)) < 0.15).astype(np.uint8)
        if not mask.any():
            mask[h // 2, w // 2] = 1
        assert np.allclose(distance_transform(mask), bf_distance_transform(mask),
                           atol=1e-6)


# --- viewpoints --------------------------------------------------------------

def test_single_viewpoint_is_frontal():
    vps = sample_viewpoints(1, 1, 4.0)
    assert len(vps) == 1
    vp = vps[0]
    assert vp.azimuth_deg == 0.0
    assert vp.elevation_deg == 0.0
    assert vp.distance == 4.0
    assert np.allclose(vp.apply(np.zeros(3), np.zeros(3)), [0.0, 0.0, 4.0],
                       atol=1e-12)


def test_viewpoint_grid_azimuths():
    vps = sample_viewpoints(2, 4, 3.0)
    assert len(vps) == 8
    azimuths = sorted({vp.azimuth_deg for vp in vps})
    assert azimuths == [0.0, 90.0, 180.0, 270.0]
    assert len({vp.elevation_deg for vp in vps}) == 2


def test_viewpoint_apply_is_rigid():
    rng = np.random.default_rng(12)
    vp = sample_viewpoints(3, 5, 2.5)[7]
    pts = rng.normal(size=(10, 3))
    center = rng.normal(size=3)
    out = vp.apply(pts, center)
    d_in = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d_out = np.linalg.norm(out[:, None] - out[None], axis=-1)
    assert np.allclose(d_in, d_out, atol=1e-9)
    assert np.allclose(vp.apply(center, center), [0.0, 0.0, 2.5], atol=1e-12)


def test_viewpoint_grid_validation():
    with pytest.raises(ValueError):
        sample_viewpoints(0, 4, 2.0)
    with pytest.raises(ValueError):
        sample_viewpoints(1, 1, 0.0)


# --- raster I/O --------------------------------------------------------------

def test_mask_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    mask = rng.integers(0, 7, size=(33, 41)).astype(np.uint8)
    path = tmp_path / "mask.png"
    render.save_mask(path, mask)
    assert np.array_equal(render.load_mask(path), mask)


def test_mask_rejects_wide_values(tmp_path):
    with pytest.raises(ValueError):
        render.save_mask(tmp_path / "bad.png", np.array([[0, 300]]))


def test_image_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    rgb = rng.integers(0, 256, size=(20, 24, 3)).astype(np.uint8)
    path = tmp_path / "img.png"
    render.save_image(path, rgb)
    assert np.array_equal(render.load_image(path), rgb)


def test_palette_file_covers_all_values(tmp_path):
    path = tmp_path / "pal.txt"
    render.save_palette(path, ["head", "torso"])
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("0 background")
    assert lines[1].split()[1] == "head"


def test_render_shaded_and_overlay(model, camera):
    pose, trans = body_model.frontal_pose(model, 2.2)
    posed = body_model.pose_mesh(model, pose, translation=trans)
    rgb = render.render_shaded(posed, camera, model.part_label)
    assert rgb.shape == (camera.height, camera.width, 3)
    assert rgb.dtype == np.uint8
    mask = rasterize(posed, camera, mode="silhouette")
    assert (rgb[mask == 0] == 0).all()
    base = np.full_like(rgb, 40)
    over = render.overlay_image(base, rgb, mask > 0, alpha=0.5)
    assert np.array_equal(over[mask == 0], base[mask == 0])
    assert not np.array_equal(over[mask > 0], base[mask > 0])
