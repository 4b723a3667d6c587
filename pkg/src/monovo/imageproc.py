"""Tracking front-end: pyramids, Shi-Tomasi corners, pyramidal LK flow.

Images are 8-bit grayscale; all sub-pixel reads are bilinear and image
gradients use the Scharr stencil.  The per-level LK iteration is compiled
with numba; tracking 250 features over a 4-level pyramid runs at frame
rate on a laptop CPU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import ndimage

_SCHARR_X = np.array([[-3.0, 0.0, 3.0], [-10.0, 0.0, 10.0], [-3.0, 0.0, 3.0]]) / 32.0
_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True)
class GrayImage:
    """Row-major 8-bit grayscale image."""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if data.shape != (self.height, self.width):
            raise ValueError(
                f"data shape {data.shape} != (height, width) = {(self.height, self.width)}"
            )
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @staticmethod
    def from_array(arr: np.ndarray) -> "GrayImage":
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise ValueError("expected a 2D array")
        return GrayImage(width=arr.shape[1], height=arr.shape[0], data=arr.astype(np.uint8))


@dataclass
class Pyramid:
    """Image pyramid, level 0 full resolution, each next level half size."""

    levels: list
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def float_level(self, k: int):
        """(float32 image, scharr gx, scharr gy) for level k, lazily cached."""
        if k not in self._cache:
            f = self.levels[k].data.astype(np.float32)
            gx = ndimage.correlate(f, _SCHARR_X.astype(np.float32), mode="nearest")
            gy = ndimage.correlate(f, _SCHARR_X.T.astype(np.float32), mode="nearest")
            self._cache[k] = (f, gx, gy)
        return self._cache[k]


@dataclass
class TrackedPoint:
    position: np.ndarray
    status: str = "tracked"  # tracked | lost
    fb_error: float = np.nan

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(2)


def build_pyramid(img: GrayImage, levels: int) -> Pyramid:
    """Binomial-smoothed halving pyramid; smallest level must be >= 16x16."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    w, h = img.width, img.height
    for _ in range(levels - 1):
        w, h = w // 2, h // 2
    if w < 16 or h < 16:
        raise ValueError(
            f"image {img.width}x{img.height} too small for {levels} levels"
        )
    out = [img]
    cur = img.data.astype(np.float32)
    for _ in range(levels - 1):
        smooth = ndimage.correlate1d(cur, _BINOMIAL5.astype(np.float32), axis=0, mode="nearest")
        smooth = ndimage.correlate1d(smooth, _BINOMIAL5.astype(np.float32), axis=1, mode="nearest")
        nh, nw = cur.shape[0] // 2, cur.shape[1] // 2
        cur = smooth[0: 2 * nh: 2, 0: 2 * nw: 2]
        out.append(GrayImage.from_array(np.rint(cur).clip(0, 255)))
    return Pyramid(levels=out)


# ---------------------------------------------------------------------------
# Shi-Tomasi detection with grid bucketing
# ---------------------------------------------------------------------------


def _grid_shape(width: int, height: int, grid_cells: int):
    cols = max(1, int(round(np.sqrt(grid_cells * width / height))))
    rows = max(1, int(round(grid_cells / cols)))
    return rows, cols


def shi_tomasi_score(img: GrayImage) -> np.ndarray:
    """Minimum structure-tensor eigenvalue per pixel (3x3 aggregation)."""
    f = img.data.astype(np.float32)
    gx = ndimage.correlate(f, _SCHARR_X.astype(np.float32), mode="nearest")
    gy = ndimage.correlate(f, _SCHARR_X.T.astype(np.float32), mode="nearest")
    sxx = ndimage.uniform_filter(gx * gx, size=3, mode="nearest")
    sxy = ndimage.uniform_filter(gx * gy, size=3, mode="nearest")
    syy = ndimage.uniform_filter(gy * gy, size=3, mode="nearest")
    score = 0.5 * (sxx + syy - np.sqrt((sxx - syy) ** 2 + 4.0 * sxy * sxy))
    score[:2, :] = 0
    score[-2:, :] = 0
    score[:, :2] = 0
    score[:, -2:] = 0
    return score


def detect_shi_tomasi(
    img: GrayImage,
    grid_cells: int = 500,
    occupied=(),
    budget: int = 250,
    quality: float = 0.01,
) -> np.ndarray:
    """Up to `budget` corners, at most one per grid cell, strongest first.

    Cells containing an `occupied` pixel are skipped; corners must score at
    least `quality` times the global maximum; positions are refined to
    sub-pixel by quadratic interpolation of the score peak.  Returns an
    (n, 2) float array of (x, y).
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    if grid_cells < 1:
        raise ValueError("grid_cells must be >= 1")
    score = shi_tomasi_score(img)
    smax = float(score.max())
    if smax <= 0:
        return np.zeros((0, 2))
    rows, cols = _grid_shape(img.width, img.height, grid_cells)
    yy = np.arange(img.height) * rows // img.height
    xx = np.arange(img.width) * cols // img.width
    labels = yy[:, None] * cols + xx[None, :] + 1

    occupied_cells = set()
    for p in np.asarray(list(occupied), dtype=float).reshape(-1, 2):
        cx = min(max(int(p[0]), 0), img.width - 1)
        cy = min(max(int(p[1]), 0), img.height - 1)
        occupied_cells.add(int(labels[cy, cx]))

    free = [c for c in range(1, rows * cols + 1) if c not in occupied_cells]
    if not free:
        return np.zeros((0, 2))
    positions = ndimage.maximum_position(score, labels=labels, index=free)
    cand = []
    thresh = quality * smax
    for (y, x) in positions:
        s = score[y, x]
        if s >= thresh:
            cand.append((float(s), int(y), int(x)))
    if not cand:
        return np.zeros((0, 2))
    cand.sort(key=lambda c: (-c[0], c[1], c[2]))
    out = []
    for s, y, x in cand[:budget]:
        fx, fy = float(x), float(y)
        if 1 <= x < img.width - 1:
            den = score[y, x - 1] - 2 * score[y, x] + score[y, x + 1]
            if den < 0:
                fx += float(np.clip((score[y, x - 1] - score[y, x + 1]) / (2 * den), -0.5, 0.5))
        if 1 <= y < img.height - 1:
            den = score[y - 1, x] - 2 * score[y, x] + score[y + 1, x]
            if den < 0:
                fy += float(np.clip((score[y - 1, x] - score[y + 1, x]) / (2 * den), -0.5, 0.5))
        # refinement must not cross the cell boundary (one corner per cell)
        cx, cy = x * cols // img.width, y * rows // img.height
        fx = float(np.clip(fx, -(-cx * img.width // cols),
                           -(-(cx + 1) * img.width // cols) - 1))
        fy = float(np.clip(fy, -(-cy * img.height // rows),
                           -(-(cy + 1) * img.height // rows) - 1))
        out.append((fx, fy))
    return np.array(out)


# ---------------------------------------------------------------------------
# pyramidal Lucas-Kanade
# ---------------------------------------------------------------------------


@njit(cache=True)
def _lk_level(prev_f, gx_f, gy_f, cur_f, pts, flow, status, win, max_iters, eps):
    h, w = prev_f.shape
    side = 2 * win + 1
    npix = side * side
    Ip = np.empty(npix, np.float64)
    Gx = np.empty(npix, np.float64)
    Gy = np.empty(npix, np.float64)
    valid = np.empty(npix, np.uint8)
    for i in range(pts.shape[0]):
        if status[i] == 0:
            continue
        px = pts[i, 0]
        py = pts[i, 1]
        if px < -1.0 or px > w or py < -1.0 or py > h:
            status[i] = 0
            continue
        # floor-halved levels can push a border point fractionally outside
        if px < 0.0:
            px = 0.0
        elif px > w - 1.0:
            px = w - 1.0
        if py < 0.0:
            py = 0.0
        elif py > h - 1.0:
            py = h - 1.0
        a11 = 0.0
        a12 = 0.0
        a22 = 0.0
        cnt = 0
        k = 0
        for dy in range(-win, win + 1):
            for dx in range(-win, win + 1):
                sx = px + dx
                sy = py + dy
                if sx < 0.0 or sx > w - 1.0 or sy < 0.0 or sy > h - 1.0:
                    valid[k] = 0
                    k += 1
                    continue
                x0 = int(sx)
                if x0 > w - 2:
                    x0 = w - 2
                y0 = int(sy)
                if y0 > h - 2:
                    y0 = h - 2
                fx = sx - x0
                fy = sy - y0
                w00 = (1.0 - fx) * (1.0 - fy)
                w01 = fx * (1.0 - fy)
                w10 = (1.0 - fx) * fy
                w11 = fx * fy
                Ip[k] = (w00 * prev_f[y0, x0] + w01 * prev_f[y0, x0 + 1]
                         + w10 * prev_f[y0 + 1, x0] + w11 * prev_f[y0 + 1, x0 + 1])
                gxv = (w00 * gx_f[y0, x0] + w01 * gx_f[y0, x0 + 1]
                       + w10 * gx_f[y0 + 1, x0] + w11 * gx_f[y0 + 1, x0 + 1])
                gyv = (w00 * gy_f[y0, x0] + w01 * gy_f[y0, x0 + 1]
                       + w10 * gy_f[y0 + 1, x0] + w11 * gy_f[y0 + 1, x0 + 1])
                Gx[k] = gxv
                Gy[k] = gyv
                valid[k] = 1
                a11 += gxv * gxv
                a12 += gxv * gyv
                a22 += gyv * gyv
                cnt += 1
                k += 1
        if cnt < npix // 4:
            status[i] = 0
            continue
        trace = a11 + a22
        min_eig = 0.5 * (trace - np.sqrt((a11 - a22) * (a11 - a22) + 4.0 * a12 * a12))
        if min_eig < 1e-4 * cnt:
            status[i] = 0
            continue
        det = a11 * a22 - a12 * a12
        if det <= 0.0:
            status[i] = 0
            continue
        i11 = a22 / det
        i12 = -a12 / det
        i22 = a11 / det
        vx = flow[i, 0]
        vy = flow[i, 1]
        ok = True
        for _ in range(max_iters):
            cx = px + vx
            cy = py + vy
            if cx < -win or cx > w - 1.0 + win or cy < -win or cy > h - 1.0 + win:
                ok = False
                break
            bx = 0.0
            by = 0.0
            k = 0
            for dy in range(-win, win + 1):
                for dx in range(-win, win + 1):
                    if valid[k] == 0:
                        k += 1
                        continue
                    sx = px + dx + vx
                    sy = py + dy + vy
                    if sx < 0.0 or sx > w - 1.0 or sy < 0.0 or sy > h - 1.0:
                        k += 1
                        continue
                    x0 = int(sx)
                    if x0 > w - 2:
                        x0 = w - 2
                    y0 = int(sy)
                    if y0 > h - 2:
                        y0 = h - 2
                    fx = sx - x0
                    fy = sy - y0
                    ic = ((1.0 - fx) * (1.0 - fy) * cur_f[y0, x0]
                          + fx * (1.0 - fy) * cur_f[y0, x0 + 1]
                          + (1.0 - fx) * fy * cur_f[y0 + 1, x0]
                          + fx * fy * cur_f[y0 + 1, x0 + 1])
                    d = Ip[k] - ic
                    bx += d * Gx[k]
                    by += d * Gy[k]
                    k += 1
            ux = i11 * bx + i12 * by
            uy = i12 * bx + i22 * by
            vx += ux
            vy += uy
            step2 = ux * ux + uy * uy
            if step2 < eps * eps:
                break
            if step2 > 4.0 * win * win:
                ok = False
                break
        if not ok:
            status[i] = 0
            continue
        flow[i, 0] = vx
        flow[i, 1] = vy


def track_pyr_lk(
    prev: Pyramid,
    cur: Pyramid,
    points: np.ndarray,
    seeds: np.ndarray | None = None,
    window: int = 10,
    max_iters: int = 30,
) -> list:
    """Coarse-to-fine LK tracking of `points` from prev to cur.

    `seeds` are initial position guesses in cur (defaults to the points
    themselves).  Returns one TrackedPoint per input point; failures are
    encoded in status, never raised.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(points)
    if n == 0:
        return []
    if len(prev.levels) != len(cur.levels) or any(
        (a.width, a.height) != (b.width, b.height)
        for a, b in zip(prev.levels, cur.levels)
    ):
        raise ValueError("pyramids differ in geometry")
    seeds = points if seeds is None else np.asarray(seeds, dtype=float).reshape(-1, 2)
    if len(seeds) != n:
        raise ValueError("seeds length != points length")

    L = len(prev.levels)
    top_scale = float(2 ** (L - 1))
    flow = (seeds - points) / top_scale
    status = np.ones(n, dtype=np.uint8)
    for lvl in range(L - 1, -1, -1):
        pf, gx, gy = prev.float_level(lvl)
        cf, _, _ = cur.float_level(lvl)
        pts_l = points / float(2 ** lvl)
        _lk_level(pf, gx, gy, cf, pts_l, flow, status, window, max_iters, 0.01)
        if lvl > 0:
            flow *= 2.0
    final = points + flow
    w0, h0 = prev.levels[0].width, prev.levels[0].height
    out = []
    for i in range(n):
        inb = 0.0 <= final[i, 0] <= w0 - 1 and 0.0 <= final[i, 1] <= h0 - 1
        if status[i] and inb:
            out.append(TrackedPoint(position=final[i]))
        else:
            out.append(TrackedPoint(position=final[i], status="lost"))
    return out


def forward_backward_filter(
    prev: Pyramid,
    cur: Pyramid,
    points: np.ndarray,
    forward: list,
    threshold: float = 2.0,
    window: int = 10,
    max_iters: int = 30,
) -> list:
    """Backward-track forward survivors and reject round-trip deviations.

    A point whose backward track lands more than `threshold` px from its
    original position (or fails outright, fb_error = inf) is marked lost.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    idx = [i for i, tp in enumerate(forward) if tp.status == "tracked"]
    out = [TrackedPoint(tp.position.copy(), tp.status, tp.fb_error) for tp in forward]
    if not idx:
        return out
    fwd_pos = np.array([forward[i].position for i in idx])
    # backward is deliberately unseeded: a prior at the original position
    # would bias fb_error toward zero exactly when the patch is unmatchable
    back = track_pyr_lk(cur, prev, fwd_pos, window=window, max_iters=max_iters)
    for j, i in enumerate(idx):
        if back[j].status == "tracked":
            err = float(np.linalg.norm(back[j].position - points[i]))
        else:
            err = np.inf
        out[i].fb_error = err
        if err > threshold:
            out[i].status = "lost"
    return out


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def load_pgm(path) -> GrayImage:
    """Binary (P5) PGM loader, 8-bit maxval only."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    data = np.frombuffer(blob, dtype=np.uint8, count=width * height, offset=pos)
    return GrayImage(width=width, height=height, data=data.reshape(height, width))


def save_pgm(img: GrayImage, path):
    with open(path, "wb") as f:
        f.write(f"P5\n{img.width} {img.height}\n255\n".encode())
        f.write(img.data.tobytes())


def load_png(path) -> GrayImage:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return GrayImage.from_array(arr)


def load_image(path) -> GrayImage:
    p = str(path).lower()
    if p.endswith(".pgm"):
        return load_pgm(path)
    if p.endswith(".png"):
        return load_png(path)
    raise ValueError(f"unsupported image format: {path}")
