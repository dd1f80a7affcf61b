"""Software rendering: pinhole projection, z-buffered rasterization,
exact Euclidean distance transforms and virtual viewpoint sampling.

Conventions: the camera looks down +z, image y grows downward, and integer
pixel coordinates are pixel centers.  A pixel is covered by a triangle when
its center lies inside the projected triangle.  Part masks store
``face part label + 1`` per pixel with 0 reserved for background.
"""

import colorsys
import dataclasses
import io

import numpy as np
import scipy.ndimage
from PIL import Image

from . import container

_Z_NEAR = 1e-6


class ProjectionError(ValueError):
    pass


class EmptyProjectionError(RuntimeError):
    """The mesh projected to zero covered pixels (or lies behind the camera)."""


@dataclasses.dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics; ``image_size`` is (width, height)."""

    focal: float
    principal_point: tuple
    image_size: tuple

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValueError("image size must be positive")

    @property
    def width(self):
        return int(self.image_size[0])

    @property
    def height(self):
        return int(self.image_size[1])

    def scaled(self, factor):
        """Camera for an image resampled by ``factor`` in both axes."""
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        cx, cy = self.principal_point
        return Camera(self.focal * factor, (cx * factor, cy * factor), (w, h))

    def to_dict(self):
        return {
            "focal": float(self.focal),
            "principal_point": [float(c) for c in self.principal_point],
            "image_size": [int(s) for s in self.image_size],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["focal"]), tuple(d["principal_point"]), tuple(d["image_size"]))


def project(points, cam):
    """Project (M, 3) camera-frame points to (M, 2) pixel coordinates.

    Raises ProjectionError if any point has non-positive depth.
    """
    points = np.asarray(points, dtype=float)
    single = points.ndim == 1
    pts = np.atleast_2d(points)
    z = pts[:, 2]
    if np.any(z <= _Z_NEAR):
        bad = int(np.argmax(z <= _Z_NEAR))
        raise ProjectionError(f"point {bad} has non-positive depth {z[bad]:.6g}")
    cx, cy = cam.principal_point
    uv = np.empty((pts.shape[0], 2))
    uv[:, 0] = cam.focal * pts[:, 0] / z + cx
    uv[:, 1] = cam.focal * pts[:, 1] / z + cy
    return uv[0] if single else uv


def render_buffers(mesh, cam, part_label=None):
    """Rasterize into per-pixel buffers.

    Faces with any vertex at non-positive depth are skipped.  Depth is
    interpolated perspective-correctly (1/z linear in screen space); depth
    ties keep the earlier face, so output is deterministic.

    Returns (labels, depth, face_ids): labels is uint8 with part+1 (0 for
    background, 1 everywhere covered when ``part_label`` is None), depth is
    float64 with +inf background, face_ids is int32 with -1 background.
    """
    w, h = cam.width, cam.height
    labels = np.zeros((h, w), dtype=np.uint8)
    depth = np.full((h, w), np.inf)
    face_ids = np.full((h, w), -1, dtype=np.int32)
    verts = mesh.vertices
    z = verts[:, 2]
    valid = z > _Z_NEAR
    uv = np.zeros((verts.shape[0], 2))
    cx, cy = cam.principal_point
    uv[valid, 0] = cam.focal * verts[valid, 0] / z[valid] + cx
    uv[valid, 1] = cam.focal * verts[valid, 1] / z[valid] + cy
    inv_z = np.zeros(verts.shape[0])
    inv_z[valid] = 1.0 / z[valid]

    for fi, face in enumerate(mesh.faces):
        if not valid[face].all():
            continue
        tri = uv[face]
        x0 = max(int(np.ceil(tri[:, 0].min())), 0)
        x1 = min(int(np.floor(tri[:, 0].max())), w - 1)
        y0 = max(int(np.ceil(tri[:, 1].min())), 0)
        y1 = min(int(np.floor(tri[:, 1].max())), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        ax, ay = tri[0]
        bx, by = tri[1]
        cx_, cy_ = tri[2]
        area = (bx - ax) * (cy_ - ay) - (by - ay) * (cx_ - ax)
        if abs(area) < 1e-12:
            continue
        xs = np.arange(x0, x1 + 1, dtype=float)
        ys = np.arange(y0, y1 + 1, dtype=float)
        px, py = np.meshgrid(xs, ys)
        w0 = ((cx_ - bx) * (py - by) - (cy_ - by) * (px - bx)) / area
        w1 = ((ax - cx_) * (py - cy_) - (ay - cy_) * (px - cx_)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        izf = inv_z[face]
        pix_inv_z = w0 * izf[0] + w1 * izf[1] + w2 * izf[2]
        pix_z = np.where(pix_inv_z > 0, 1.0 / np.maximum(pix_inv_z, 1e-300), np.inf)
        win = inside & (pix_z < depth[y0:y1 + 1, x0:x1 + 1])
        if not win.any():
            continue
        depth[y0:y1 + 1, x0:x1 + 1][win] = pix_z[win]
        value = 1 if part_label is None else int(part_label[fi]) + 1
        labels[y0:y1 + 1, x0:x1 + 1][win] = value
        face_ids[y0:y1 + 1, x0:x1 + 1][win] = fi
    return labels, depth, face_ids


def rasterize(mesh, cam, mode="silhouette", part_label=None):
    """Render a mesh to a mask.

    mode="silhouette": uint8 {0,1} occupancy.
    mode="parts": front-most face's part label + 1 per pixel, 0 background;
    labels default to ``mesh.part_label`` when the mesh carries one.
    A mesh that covers no pixels yields an all-zero mask; callers that treat
    that as exceptional should use :func:`require_nonempty`.
    """
    if mode not in ("silhouette", "parts"):
        raise ValueError(f"unknown rasterization mode {mode!r}")
    if mode == "parts" and part_label is None:
        part_label = getattr(mesh, "part_label", None)
        if part_label is None:
            raise ValueError("parts mode needs per-face labels")
    labels, _, _ = render_buffers(mesh, cam, part_label if mode == "parts" else None)
    if mode == "silhouette":
        return (labels > 0).astype(np.uint8)
    return labels


def require_nonempty(mask):
    if not np.any(mask):
        raise EmptyProjectionError("mesh projected to zero covered pixels")
    return mask


def distance_transform(mask):
    """Exact Euclidean distance (in pixels) to the nearest occupied pixel.

    Occupied pixels get 0.  An empty mask returns +inf everywhere.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be 2D")
    occupied = mask > 0
    if not occupied.any():
        return np.full(mask.shape, np.inf)
    return scipy.ndimage.distance_transform_edt(~occupied)


# ---------------------------------------------------------------------------
# virtual viewpoints

@dataclasses.dataclass(frozen=True)
class Viewpoint:
    """Rigid map from model space to camera space: p_cam = R (p - center) + [0, 0, d]."""

    rotation: np.ndarray  # (3, 3)
    distance: float
    azimuth_deg: float
    elevation_deg: float

    def apply(self, points, center):
        points = np.asarray(points, dtype=float)
        out = (points - center) @ self.rotation.T
        out = np.array(out)
        out[..., 2] += self.distance
        return out


@dataclasses.dataclass(frozen=True)
class ViewpointSet:
    viewpoints: tuple

    def __len__(self):
        return len(self.viewpoints)

    def __iter__(self):
        return iter(self.viewpoints)

    def __getitem__(self, i):
        return self.viewpoints[i]


def _look_rotation(azimuth_deg, elevation_deg):
    """World->camera rotation for a camera on the view sphere looking at the
    origin of a y-up world, image y pointing down."""
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    eye = np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    fwd = -eye  # unit: camera at distance 1 looking at the origin
    up = np.array([0.0, 1.0, 0.0])
    x = np.cross(fwd, up)
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # looking straight up/down; pick a stable right axis
        x = np.array([np.cos(az), 0.0, -np.sin(az)])
        nx = 1.0
    x = x / nx
    y = np.cross(fwd, x)
    y = y / np.linalg.norm(y)
    return np.stack([x, y, fwd / np.linalg.norm(fwd)])


def sample_viewpoints(n_elevations, n_azimuths, distance, elevation_band=(-15.0, 45.0)):
    """Grid of cameras on a sphere segment around the subject.

    Azimuths cover the full circle starting at 0 (frontal); elevations span
    ``elevation_band`` inclusively, except that a single elevation means a
    level (0 degree) camera.
    """
    if n_elevations < 1 or n_azimuths < 1:
        raise ValueError("viewpoint grid must be at least 1x1")
    if distance <= 0:
        raise ValueError("distance must be positive")
    lo, hi = elevation_band
    if n_elevations == 1:
        elevations = [0.0]
    else:
        elevations = list(np.linspace(lo, hi, n_elevations))
    azimuths = [360.0 * i / n_azimuths for i in range(n_azimuths)]
    vps = []
    for el in elevations:
        for az in azimuths:
            vps.append(Viewpoint(rotation=_look_rotation(az, el), distance=float(distance),
                                 azimuth_deg=float(az), elevation_deg=float(el)))
    return ViewpointSet(viewpoints=tuple(vps))


# ---------------------------------------------------------------------------
# mask and palette I/O

def save_mask(path, mask):
    """8-bit single-channel PNG."""
    mask = np.asarray(mask)
    if mask.dtype != np.uint8:
        if mask.max(initial=0) > 255 or mask.min(initial=0) < 0:
            raise ValueError("mask values do not fit in uint8")
        mask = mask.astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(mask, mode="L").save(buf, format="PNG")
    container.atomic_write_bytes(path, buf.getvalue())


def load_mask(path):
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def save_image(path, rgb):
    buf = io.BytesIO()
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(buf, format="PNG")
    container.atomic_write_bytes(path, buf.getvalue())


def load_image(path):
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def part_palette(num_parts):
    """Deterministic color table: row i is the RGB color of mask value i
    (value 0 = background, black)."""
    colors = np.zeros((num_parts + 1, 3), dtype=np.uint8)
    for i in range(1, num_parts + 1):
        hue = ((i - 1) * 0.618033988749895) % 1.0
        r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
        colors[i] = (int(r * 255), int(g * 255), int(b * 255))
    return colors


def save_palette(path, names):
    """Sidecar text palette: one line per mask value, ``id name r g b``."""
    colors = part_palette(len(names))
    lines = ["0 background 0 0 0"]
    for i, name in enumerate(names, start=1):
        r, g, b = colors[i]
        lines.append(f"{i} {name} {r} {g} {b}")
    container.atomic_write_text(path, "\n".join(lines) + "\n")


def render_shaded(mesh, cam, part_label=None, palette=None, light=(0.2, -0.4, -0.9)):
    """Flat-shaded RGB render (uint8 HxWx3) for visual review.

    Colors come from the part palette, brightness from the face normal
    (winding-agnostic, normals flipped toward the camera).
    """
    labels, _, face_ids = render_buffers(mesh, cam, part_label)
    if palette is None:
        palette = part_palette(max(int(labels.max()), 1))
    img = palette[labels].astype(float)

    light = np.asarray(light, dtype=float)
    light = light / np.linalg.norm(light)
    tri = mesh.vertices[mesh.faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    normals = normals / np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)
    toward = np.einsum("fi,fi->f", normals, tri.mean(axis=1))
    normals[toward > 0] *= -1.0
    shade_face = 0.45 + 0.55 * np.clip(-(normals @ light), 0.0, 1.0)

    covered = face_ids >= 0
    shade = np.ones(labels.shape)
    shade[covered] = shade_face[face_ids[covered]]
    return (img * shade[..., None]).clip(0, 255).astype(np.uint8)


def overlay_image(base, render_rgb, mask, alpha=0.5):
    """Blend a render over an image at the given opacity inside the mask."""
    base = np.asarray(base)
    if base.ndim == 2:
        base = np.stack([base] * 3, axis=-1)
    out = base.astype(float).copy()
    region = np.asarray(mask) > 0
    out[region] = (1 - alpha) * out[region] + alpha * np.asarray(render_rgb, dtype=float)[region]
    return out.clip(0, 255).astype(np.uint8)
