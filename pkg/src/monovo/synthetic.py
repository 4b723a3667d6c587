"""Deterministic synthetic worlds: scenes, observation streams, renders.

All randomness is drawn from the Philox 4x64 counter-based generator keyed
by (seed, stream), where the stream is the frame index for observation
noise and a fixed constant for scene layout or textures.  The same seed
therefore reproduces identical scenes, observations, and images on any
platform, and observations for frame k can be generated in any order.

Scenes place a camera trajectory above a landmark field, looking along +z:
  planar      landmarks on a single z = const plane
  volumetric  landmarks filling the depth band [2, 10]
  loop        a closed triangle traversed twice (returns to the start)

Textures are band-limited power-law ("pink") noise: they carry structure
at every pyramid scale, which is what multi-level LK needs, while the 3 px
wavelength floor keeps bilinear warps faithful to the continuous image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GenerationError
from .geometry import CameraModel, Pose, project, quat_mul, quat_to_matrix, so3_exp
from .imageproc import GrayImage

_SCENE_STREAM = 2**62
_TEXTURE_STREAM = 2**62 + 1

DEFAULT_FPS = 16.0


def _rng(seed: int, stream: int) -> np.random.Generator:
    key = np.array([seed & (2**64 - 1), stream & (2**64 - 1)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def default_camera(distorted: bool = True) -> CameraModel:
    dist = (-0.05, 0.01, 1e-4, -1e-4) if distorted else (0.0, 0.0, 0.0, 0.0)
    return CameraModel(fx=450.0, fy=450.0, cx=320.0, cy=240.0,
                       dist=dist, width=640, height=480)


@dataclass
class SyntheticScene:
    landmarks: np.ndarray          # (N, 3) world points
    trajectory: list               # world->camera Pose per frame
    cam: CameraModel
    seed: int
    kind: str = "volumetric"
    timestamps: np.ndarray = None  # seconds, DEFAULT_FPS spacing
    plane_z: float = None          # planar scenes only

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, dtype=float).reshape(-1, 3)
        if self.timestamps is None:
            self.timestamps = np.arange(len(self.trajectory)) / DEFAULT_FPS
        self.timestamps = np.asarray(self.timestamps, dtype=float)


def _triangle_position(s: float, verts) -> np.ndarray:
    """Point at arc length s along the closed polygon through verts."""
    sides = [np.linalg.norm(verts[(i + 1) % 3] - verts[i]) for i in range(3)]
    perim = sum(sides)
    s = s % perim
    for i in range(3):
        if s <= sides[i] or i == 2:
            a, b = verts[i], verts[(i + 1) % 3]
            return a + (b - a) * (s / sides[i])
        s -= sides[i]


def _wobble_rotation(t: float) -> np.ndarray:
    # small smooth attitude wobble, closed over t in [0, 1]
    yaw = 0.05 * np.sin(2 * np.pi * t)
    pitch = 0.04 * (np.cos(2 * np.pi * t) - 1.0)
    roll = 0.03 * np.sin(4 * np.pi * t)
    q = quat_mul(
        so3_exp(np.array([0.0, 0.0, yaw])),
        quat_mul(so3_exp(np.array([0.0, pitch, 0.0])),
                 so3_exp(np.array([roll, 0.0, 0.0]))),
    )
    return quat_to_matrix(q)


def _pose_from_center(r_cam_to_world: np.ndarray, center: np.ndarray) -> Pose:
    r = r_cam_to_world.T
    return Pose.from_rt(r, -r @ center)


def generate_scene(
    kind: str,
    n_landmarks: int,
    n_frames: int,
    seed: int,
    cam: CameraModel | None = None,
    min_visible: int = 30,
) -> SyntheticScene:
    """Build a deterministic scene of the given kind.

    Every frame must see at least `min_visible` landmarks, otherwise the
    configuration is infeasible and GenerationError is raised.
    """
    if n_landmarks < 50:
        raise ValueError("n_landmarks must be >= 50")
    if n_frames < 10:
        raise ValueError("n_frames must be >= 10")
    if kind not in ("planar", "volumetric", "loop"):
        raise ValueError(f"unknown scene kind: {kind}")
    cam = cam if cam is not None else default_camera()
    rng = _rng(seed, _SCENE_STREAM)

    ts = np.linspace(0.0, 1.0, n_frames)
    plane_z = None
    if kind == "loop":
        verts = [np.array([0.0, 0.0]), np.array([4.0, 0.0]), np.array([2.0, 3.0])]
        perim = sum(np.linalg.norm(verts[(i + 1) % 3] - verts[i]) for i in range(3))
        centers = np.array([
            list(_triangle_position(2.0 * t * perim, verts)) + [0.0] for t in ts
        ])
    else:
        centers = np.column_stack([
            2.5 * ts,
            0.3 * np.sin(2 * np.pi * ts),
            np.zeros(n_frames),
        ])
    trajectory = [
        _pose_from_center(_wobble_rotation(t), c) for t, c in zip(ts, centers)
    ]

    # landmark field sized to the union of visible footprints
    lo = centers.min(axis=0)
    hi = centers.max(axis=0)
    if kind == "planar":
        plane_z = 5.0
        half_x = cam.cx / cam.fx * plane_z * 0.85
        half_y = cam.cy / cam.fy * plane_z * 0.85
        xy = rng.uniform(
            [lo[0] - half_x, lo[1] - half_y], [hi[0] + half_x, hi[1] + half_y],
            size=(n_landmarks, 2),
        )
        landmarks = np.column_stack([xy, np.full(n_landmarks, plane_z)])
    else:
        z = rng.uniform(2.2, 9.8, size=n_landmarks)
        half_x = cam.cx / cam.fx * z * 0.85
        half_y = cam.cy / cam.fy * z * 0.85
        x = rng.uniform(lo[0] - half_x, hi[0] + half_x)
        y = rng.uniform(lo[1] - half_y, hi[1] + half_y)
        landmarks = np.column_stack([x, y, z])

    scene = SyntheticScene(
        landmarks=landmarks, trajectory=trajectory, cam=cam, seed=seed,
        kind=kind, timestamps=np.arange(n_frames) / DEFAULT_FPS, plane_z=plane_z,
    )
    for k in range(n_frames):
        n_vis = len(visible_landmarks(scene, k))
        if n_vis < min_visible:
            raise GenerationError(
                f"frame {k} sees only {n_vis} landmarks (< {min_visible})"
            )
    return scene


def visible_landmarks(scene: SyntheticScene, frame_idx: int) -> list:
    """(landmark id, exact pixel) for landmarks in view at this frame."""
    pose = scene.trajectory[frame_idx]
    out = []
    for i, p in enumerate(scene.landmarks):
        pc = pose.apply(p)
        if pc[2] <= 1e-9:
            continue
        pix = project(pose, scene.cam, p)
        if scene.cam.contains(pix):
            out.append((i, pix))
    return out


def observe(
    scene: SyntheticScene,
    frame_idx: int,
    pixel_noise_sigma: float = 0.0,
    dropout: float = 0.0,
    occlusion_events=(),
) -> list:
    """(track id, pixel) list for one frame, deterministic per (seed, frame).

    Projects visible landmarks, adds isotropic Gaussian pixel noise, drops
    each observation with probability `dropout`, and hides tracks listed in
    `occlusion_events` as (track_id, first_frame, last_frame) inclusive.
    """
    if not 0 <= frame_idx < len(scene.trajectory):
        raise ValueError(f"frame index {frame_idx} out of range")
    vis = visible_landmarks(scene, frame_idx)
    rng = _rng(scene.seed, frame_idx)
    noise = rng.standard_normal((len(vis), 2))
    drops = rng.random(len(vis))
    hidden = {
        tid for (tid, f0, f1) in occlusion_events if f0 <= frame_idx <= f1
    }
    out = []
    for k, (tid, pix) in enumerate(vis):
        if tid in hidden or drops[k] < dropout:
            continue
        noisy = pix + pixel_noise_sigma * noise[k]
        if scene.cam.contains(noisy):
            out.append((tid, noisy))
    return out


# ---------------------------------------------------------------------------
# textured renders
# ---------------------------------------------------------------------------


def _pink_texture(rng: np.random.Generator, width: int, height: int,
                  slope: float = 1.5, min_wavelength_px: float = 3.0) -> np.ndarray:
    spec = np.fft.rfft2(rng.standard_normal((height, width)))
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.rfftfreq(width)[None, :]
    f = np.hypot(fy, fx)
    f[0, 0] = 1.0
    spec /= f**slope
    spec[0, 0] = 0
    spec[f > 1.0 / min_wavelength_px] = 0
    img = np.fft.irfft2(spec, s=(height, width))
    img = (img - img.min()) / (img.max() - img.min())
    return 20.0 + img * 215.0


def _bilinear_sample(arr: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = arr.shape
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(x.astype(int), w - 2)
    y0 = np.minimum(y.astype(int), h - 2)
    fx = x - x0
    fy = y - y0
    return ((1 - fx) * (1 - fy) * arr[y0, x0] + fx * (1 - fy) * arr[y0, x0 + 1]
            + (1 - fx) * fy * arr[y0 + 1, x0] + fx * fy * arr[y0 + 1, x0 + 1])


def render_textured_pair(texture_seed: int, warp, size=(640, 480)):
    """(image, warped image, dense ground-truth flow) for tracker tests.

    `warp` is ("translation", (tx, ty)) or ("affine", M) with M a 2x3 matrix
    mapping first-image pixel [x, y] to its second-image position; a bare
    2-tuple means translation.  flow[y, x] = warp([x, y]) - [x, y].  The
    warp must keep at least 50% of the second image covered by the first.
    """
    width, height = size
    if isinstance(warp, (tuple, list)) and len(warp) == 2 and not isinstance(warp[0], str):
        warp = ("translation", warp)
    mode, params = warp
    if mode == "translation":
        m = np.array([[1.0, 0.0, params[0]], [0.0, 1.0, params[1]]])
    elif mode == "affine":
        m = np.asarray(params, dtype=float).reshape(2, 3)
    else:
        raise ValueError(f"unknown warp mode: {mode}")

    tex = _pink_texture(_rng(texture_seed, _TEXTURE_STREAM), width, height)
    img_a = np.rint(tex).clip(0, 255).astype(np.uint8)

    yy, xx = np.mgrid[0:height, 0:width].astype(float)
    flow = np.empty((height, width, 2))
    flow[:, :, 0] = m[0, 0] * xx + m[0, 1] * yy + m[0, 2] - xx
    flow[:, :, 1] = m[1, 0] * xx + m[1, 1] * yy + m[1, 2] - yy

    # second image samples the first through the inverse warp
    a_full = np.vstack([m, [0.0, 0.0, 1.0]])
    inv = np.linalg.inv(a_full)
    sx = inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2]
    sy = inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2]
    covered = (sx >= 0) & (sx <= width - 1) & (sy >= 0) & (sy <= height - 1)
    if covered.mean() < 0.5:
        raise GenerationError(
            f"warp keeps only {covered.mean():.0%} overlap (need >= 50%)"
        )
    img_b = np.rint(_bilinear_sample(tex, sx, sy)).clip(0, 255).astype(np.uint8)
    return (
        GrayImage.from_array(img_a),
        GrayImage.from_array(img_b),
        flow,
    )


def render_plane_sequence(scene: SyntheticScene, texture_seed: int) -> list:
    """Render the planar scene's camera views of a textured ground plane.

    The plane carries a band-limited texture sampled at roughly one texel
    per image pixel; each frame ray-casts the pixel grid onto the plane.
    Requires a planar scene and a distortion-free camera.
    """
    if scene.kind != "planar" or scene.plane_z is None:
        raise ValueError("plane rendering requires a planar scene")
    cam = scene.cam
    if any(abs(d) > 0 for d in cam.dist):
        raise ValueError("plane rendering requires a distortion-free camera")

    # world-plane rectangle covered by any frame, with margin
    centers = np.array([pose.center() for pose in scene.trajectory])
    depth = scene.plane_z - centers[:, 2].max()
    half_x = cam.cx / cam.fx * depth * 1.6
    half_y = cam.cy / cam.fy * depth * 1.6
    x0, x1 = centers[:, 0].min() - half_x, centers[:, 0].max() + half_x
    y0, y1 = centers[:, 1].min() - half_y, centers[:, 1].max() + half_y
    texel = depth / cam.fx  # ~1 texel per pixel at plane distance
    tw = int(np.ceil((x1 - x0) / texel)) + 2
    th = int(np.ceil((y1 - y0) / texel)) + 2
    tex = _pink_texture(_rng(texture_seed, _TEXTURE_STREAM), tw, th)

    vv, uu = np.mgrid[0:cam.height, 0:cam.width].astype(float)
    dirs_cam = np.stack([
        (uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)
    ], axis=-1)
    frames = []
    for pose in scene.trajectory:
        r_c2w = pose.rotation_matrix().T
        center = pose.center()
        d_world = dirs_cam @ r_c2w.T
        s = (scene.plane_z - center[2]) / d_world[:, :, 2]
        px = center[0] + s * d_world[:, :, 0]
        py = center[1] + s * d_world[:, :, 1]
        vals = _bilinear_sample(tex, (px - x0) / texel, (py - y0) / texel)
        frames.append(GrayImage.from_array(np.rint(vals).clip(0, 255)))
    return frames


# ---------------------------------------------------------------------------
# plain-text scene fixtures
# ---------------------------------------------------------------------------


def dump_scene(scene: SyntheticScene, path):
    """Write the scene in the plain-text fixture format.

    Format: header comment; `seed N`; `kind K`; optional `plane_z V`;
    `cam pinhole_radtan fx fy cx cy k1 k2 p1 p2 width height`;
    `landmarks N` then N lines `x y z`; `trajectory N` then N lines
    `timestamp qx qy qz qw tx ty tz` (world->camera).  All floats use
    full round-trip precision.
    """
    cam = scene.cam
    lines = ["# synthetic scene v1", f"seed {scene.seed}", f"kind {scene.kind}"]
    if scene.plane_z is not None:
        lines.append(f"plane_z {scene.plane_z!r}")
    lines.append(
        "cam pinhole_radtan " + " ".join(
            repr(float(v)) for v in
            (cam.fx, cam.fy, cam.cx, cam.cy, *cam.dist)
        ) + f" {cam.width} {cam.height}"
    )
    lines.append(f"landmarks {len(scene.landmarks)}")
    for p in scene.landmarks:
        lines.append(" ".join(repr(float(v)) for v in p))
    lines.append(f"trajectory {len(scene.trajectory)}")
    for ts, pose in zip(scene.timestamps, scene.trajectory):
        vals = [ts, *pose.q, *pose.t]
        lines.append(" ".join(repr(float(v)) for v in vals))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_scene(path) -> SyntheticScene:
    with open(path) as f:
        rows = [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
    it = iter(rows)
    seed = kind = cam = None
    plane_z = None
    landmarks = []
    timestamps = []
    trajectory = []
    for row in it:
        head, *rest = row.split()
        if head == "seed":
            seed = int(rest[0])
        elif head == "kind":
            kind = rest[0]
        elif head == "plane_z":
            plane_z = float(rest[0])
        elif head == "cam":
            if rest[0] != "pinhole_radtan":
                raise ValueError(f"unknown camera model: {rest[0]}")
            v = [float(x) for x in rest[1:]]
            cam = CameraModel(fx=v[0], fy=v[1], cx=v[2], cy=v[3],
                              dist=tuple(v[4:8]), width=int(v[8]), height=int(v[9]))
        elif head == "landmarks":
            for _ in range(int(rest[0])):
                landmarks.append([float(x) for x in next(it).split()])
        elif head == "trajectory":
            for _ in range(int(rest[0])):
                v = [float(x) for x in next(it).split()]
                timestamps.append(v[0])
                trajectory.append(Pose(q=np.array(v[1:5]), t=np.array(v[5:8])))
        else:
            raise ValueError(f"unknown scene field: {head}")
    if seed is None or kind is None or cam is None or not trajectory:
        raise ValueError("incomplete scene file")
    return SyntheticScene(
        landmarks=np.array(landmarks), trajectory=trajectory, cam=cam,
        seed=seed, kind=kind, timestamps=np.array(timestamps), plane_z=plane_z,
    )
