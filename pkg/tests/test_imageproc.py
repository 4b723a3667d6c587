import numpy as np
import pytest
from scipy import ndimage

from monovo.imageproc import (
    GrayImage,
    build_pyramid,
    detect_shi_tomasi,
    forward_backward_filter,
    load_image,
    load_pgm,
    load_png,
    save_pgm,
    track_pyr_lk,
)


def band_limited_texture(width=640, height=480, seed=0, slope=1.5):
    # power-law spectrum: structure at every pyramid scale, band-limited to
    # wavelengths >= 3 px so bilinear warps stay sub-pixel faithful
    rng = np.random.default_rng(seed)
    spec = np.fft.rfft2(rng.standard_normal((height, width)))
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.rfftfreq(width)[None, :]
    f = np.hypot(fy, fx)
    f[0, 0] = 1.0
    spec /= f**slope
    spec[0, 0] = 0
    spec[f > 1.0 / 3.0] = 0
    img = np.fft.irfft2(spec, s=(height, width))
    img = (img - img.min()) / (img.max() - img.min())
    return GrayImage.from_array(20 + img * 215)


def bilinear_shift(img, shift):
    # cur(x) = prev(x - shift), bilinear, edge-extended
    sx, sy = shift
    yy, xx = np.mgrid[0: img.height, 0: img.width].astype(float)
    warped = ndimage.map_coordinates(
        img.data.astype(float), [yy - sy, xx - sx], order=1, mode="nearest"
    )
    return GrayImage.from_array(np.rint(warped).clip(0, 255))


@pytest.fixture(scope="module")
def texture():
    return band_limited_texture()


@pytest.fixture(scope="module")
def texture_pyr(texture):
    return build_pyramid(texture, 4)


# ---------------------------------------------------------------------------
# pyramid construction
# ---------------------------------------------------------------------------


def test_pyramid_sizes_640x480_four_levels():
    img = band_limited_texture(640, 480, seed=1)
    pyr = build_pyramid(img, 4)
    sizes = [(lv.width, lv.height) for lv in pyr.levels]
    assert sizes == [(640, 480), (320, 240), (160, 120), (80, 60)]


def test_pyramid_odd_sizes_floor_halved():
    img = band_limited_texture(641, 481, seed=2)
    pyr = build_pyramid(img, 2)
    assert (pyr.levels[1].width, pyr.levels[1].height) == (320, 240)


def test_pyramid_constant_image_stays_constant():
    img = GrayImage.from_array(np.full((64, 96), 100, dtype=np.uint8))
    pyr = build_pyramid(img, 3)
    for lv in pyr.levels:
        assert np.all(lv.data == 100)


def test_pyramid_too_small_raises():
    img = GrayImage.from_array(np.zeros((16, 16), dtype=np.uint8))
    with pytest.raises(ValueError):
        build_pyramid(img, 5)
    build_pyramid(img, 1)  # single level is fine


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------


def test_detect_constant_image_empty():
    img = GrayImage.from_array(np.full((120, 160), 77, dtype=np.uint8))
    assert len(detect_shi_tomasi(img)) == 0


def test_detect_all_cells_occupied_empty(texture):
    xs = np.arange(0, texture.width, 8.0)
    ys = np.arange(0, texture.height, 8.0)
    occupied = np.array([(x, y) for y in ys for x in xs])
    assert len(detect_shi_tomasi(texture, grid_cells=500, occupied=occupied)) == 0


def quadrant_corner_image(cx, cy, width=640, height=480, hi=200, lo=50):
    # pixel (x, y) covers [x-.5, x+.5] x [y-.5, y+.5]; area-average the
    # quadrant pattern so the corner sits exactly at (cx, cy)
    u = np.clip(cx - (np.arange(width) - 0.5), 0, 1)[None, :]
    v = np.clip(cy - (np.arange(height) - 0.5), 0, 1)[:, None]
    img = u * v * hi + (1 - u) * (1 - v) * hi + u * (1 - v) * lo + (1 - u) * v * lo
    return GrayImage.from_array(np.rint(img))


def test_detect_checkerboard_corner_subpixel():
    img = quadrant_corner_image(100.0, 60.0)
    corners = detect_shi_tomasi(img, grid_cells=500, budget=10, quality=0.05)
    assert len(corners) >= 1
    d = np.linalg.norm(corners - [100.0, 60.0], axis=1)
    assert d.min() < 0.5


def test_detect_budget_and_one_per_cell(texture):
    corners = detect_shi_tomasi(texture, grid_cells=300, budget=50)
    assert 0 < len(corners) <= 50
    # 640x480 with 300 cells buckets into 20x15 cells of exactly 32x32
    cells = {(int(x) // 32, int(y) // 32) for x, y in corners}
    assert len(cells) == len(corners)


def test_detect_integer_translation_equivariance(texture):
    # shift by one full grid cell so interior cell contents map one-to-one
    dx, dy = 32, 32
    shifted = GrayImage.from_array(np.roll(np.roll(texture.data, dy, axis=0), dx, axis=1))
    base = detect_shi_tomasi(texture, grid_cells=300, budget=300)
    moved = detect_shi_tomasi(shifted, grid_cells=300, budget=300)
    interior = [
        p for p in base
        if 32 <= p[0] < texture.width - 2 * 32 and 32 <= p[1] < texture.height - 2 * 32
    ]
    assert len(interior) > 50
    for p in interior:
        d = np.linalg.norm(moved - (p + [dx, dy]), axis=1)
        assert d.min() < 0.5


def test_detect_occupied_cells_skipped(texture):
    base = detect_shi_tomasi(texture, grid_cells=300, budget=300)
    occ = base[:5]
    rest = detect_shi_tomasi(texture, grid_cells=300, occupied=occ, budget=300)
    occ_cells = {(int(x) // 32, int(y) // 32) for x, y in occ}
    new_cells = {(int(x) // 32, int(y) // 32) for x, y in rest}
    assert not (occ_cells & new_cells)


# ---------------------------------------------------------------------------
# LK tracking
# ---------------------------------------------------------------------------


def test_track_zero_motion(texture, texture_pyr):
    points = detect_shi_tomasi(texture, budget=80)
    tracked = track_pyr_lk(texture_pyr, texture_pyr, points)
    assert all(tp.status == "tracked" for tp in tracked)
    drift = [np.linalg.norm(tp.position - p) for tp, p in zip(tracked, points)]
    assert max(drift) < 0.05
    filtered = forward_backward_filter(texture_pyr, texture_pyr, points, tracked)
    assert all(tp.status == "tracked" for tp in filtered)
    assert max(tp.fb_error for tp in filtered) < 0.05


def test_track_integer_10px_shift(texture, texture_pyr):
    shift = np.array([10.0, 4.0])
    cur = GrayImage.from_array(np.roll(np.roll(texture.data, 4, axis=0), 10, axis=1))
    cur_pyr = build_pyramid(cur, 4)
    points = detect_shi_tomasi(texture, budget=150)
    keep = (points[:, 0] > 40) & (points[:, 0] < 580) & (points[:, 1] > 40) & (points[:, 1] < 430)
    points = points[keep]
    tracked = track_pyr_lk(texture_pyr, cur_pyr, points)
    errs = [
        np.linalg.norm(tp.position - (p + shift))
        for tp, p in zip(tracked, points)
        if tp.status == "tracked"
    ]
    assert len(errs) > 0.9 * len(points)
    assert np.median(errs) < 0.3


def test_track_subpixel_shifts_up_to_reach(texture, texture_pyr):
    # 4 levels, half-width 10: reach is well past 40 px of true motion
    points = detect_shi_tomasi(texture, budget=150)
    for shift in [(0.5, 0.25), (3.7, -2.2), (-12.3, 5.9), (25.1, -17.4), (28.3, 28.3)]:
        shift = np.array(shift)
        cur_pyr = build_pyramid(bilinear_shift(texture, shift), 4)
        dest = points + shift
        keep = ((dest[:, 0] > 45) & (dest[:, 0] < texture.width - 45)
                & (dest[:, 1] > 45) & (dest[:, 1] < texture.height - 45)
                & (points[:, 0] > 45) & (points[:, 0] < texture.width - 45)
                & (points[:, 1] > 45) & (points[:, 1] < texture.height - 45))
        pts = points[keep]
        tracked = track_pyr_lk(texture_pyr, cur_pyr, pts)
        errs = np.array([
            np.linalg.norm(tp.position - (p + shift))
            for tp, p in zip(tracked, pts)
            if tp.status == "tracked"
        ])
        assert len(errs) > 0.9 * len(pts), f"shift {shift}: too many lost"
        assert np.median(errs) < 0.3, f"shift {shift}: median {np.median(errs)}"
        assert np.percentile(errs, 95) < 1.0, f"shift {shift}: p95 {np.percentile(errs, 95)}"


def test_track_textureless_region_lost():
    arr = np.zeros((480, 640), dtype=np.uint8)
    rng = np.random.default_rng(3)
    arr[200:280, 300:380] = rng.integers(0, 255, (80, 80))
    img = GrayImage.from_array(arr)
    pyr = build_pyramid(img, 4)
    tracked = track_pyr_lk(pyr, pyr, np.array([[50.0, 50.0], [600.0, 400.0], [340.0, 240.0]]))
    assert tracked[0].status == "lost"
    assert tracked[1].status == "lost"
    assert tracked[2].status == "tracked"


def test_track_mismatched_pyramids_raise(texture, texture_pyr):
    other = build_pyramid(texture, 3)
    with pytest.raises(ValueError):
        track_pyr_lk(texture_pyr, other, np.array([[100.0, 100.0]]))


def test_track_empty_points(texture_pyr):
    assert track_pyr_lk(texture_pyr, texture_pyr, np.zeros((0, 2))) == []


# ---------------------------------------------------------------------------
# forward-backward filtering
# ---------------------------------------------------------------------------


def test_fb_infinite_threshold_is_noop(texture, texture_pyr):
    cur_pyr = build_pyramid(bilinear_shift(texture, (5.2, -3.1)), 4)
    points = detect_shi_tomasi(texture, budget=60)
    tracked = track_pyr_lk(texture_pyr, cur_pyr, points)
    filtered = forward_backward_filter(texture_pyr, cur_pyr, points, tracked,
                                       threshold=np.inf)
    assert [tp.status for tp in filtered] == [tp.status for tp in tracked]


def test_fb_symmetry_noise_free(texture, texture_pyr):
    cur_pyr = build_pyramid(bilinear_shift(texture, (4.6, 2.3)), 4)
    points = detect_shi_tomasi(texture, budget=100)
    keep = (points[:, 0] > 45) & (points[:, 0] < 590) & (points[:, 1] > 45) & (points[:, 1] < 430)
    points = points[keep]
    tracked = track_pyr_lk(texture_pyr, cur_pyr, points)
    filtered = forward_backward_filter(texture_pyr, cur_pyr, points, tracked)
    errs = [tp.fb_error for tp in filtered if tp.status == "tracked"]
    assert len(errs) > 0.9 * len(points)
    assert np.median(errs) < 0.1


def test_fb_planted_occlusion_rejected(texture, texture_pyr):
    # occluders are larger than the full tracking footprint so the forward
    # track cannot settle on a half-real boundary patch: flat cores starve
    # the gradient (min-eig loss), doppelganger cores backward-track to
    # their distant source
    shift = np.array([6.0, 3.0])
    cur = np.roll(np.roll(texture.data, 3, axis=0), 6, axis=1).copy()
    points = detect_shi_tomasi(texture, budget=120)
    keep = (points[:, 0] > 70) & (points[:, 0] < 570) & (points[:, 1] > 70) & (points[:, 1] < 405)
    points = points[keep]
    rng = np.random.default_rng(7)
    occluded_idx = rng.choice(len(points), size=6, replace=False)
    for k, i in enumerate(occluded_idx):
        cx, cy = np.rint(points[i] + shift).astype(int)
        if k % 2 == 0:
            cur[cy - 55: cy + 56, cx - 55: cx + 56] = 128
        else:
            sy = cy - 130 if cy > texture.height // 2 else cy + 130
            cur[cy - 55: cy + 56, cx - 55: cx + 56] = \
                texture.data[sy - 55: sy + 56, cx - 55: cx + 56]
    cur_pyr = build_pyramid(GrayImage.from_array(cur), 4)
    tracked = track_pyr_lk(texture_pyr, cur_pyr, points)
    filtered = forward_backward_filter(texture_pyr, cur_pyr, points, tracked, threshold=2.0)
    # zero false survivors among planted occlusions
    for i in occluded_idx:
        assert filtered[i].status == "lost"


def test_fb_clean_survival_near_occlusions(texture, texture_pyr):
    shift = np.array([6.0, 3.0])
    cur = np.roll(np.roll(texture.data, 3, axis=0), 6, axis=1).copy()
    points = detect_shi_tomasi(texture, budget=120)
    keep = (points[:, 0] > 60) & (points[:, 0] < 580) & (points[:, 1] > 60) & (points[:, 1] < 420)
    points = points[keep]
    rng = np.random.default_rng(7)
    occluder = band_limited_texture(64, 64, seed=99).data
    occluded_idx = rng.choice(len(points), size=10, replace=False)
    centers = []
    for i in occluded_idx:
        cx, cy = np.rint(points[i] + shift).astype(int)
        centers.append((cx, cy))
        cur[cy - 20: cy + 21, cx - 20: cx + 21] = occluder[:41, :41]
    cur_pyr = build_pyramid(GrayImage.from_array(cur), 4)
    tracked = track_pyr_lk(texture_pyr, cur_pyr, points)
    filtered = forward_backward_filter(texture_pyr, cur_pyr, points, tracked, threshold=2.0)
    # points far enough that no occluder touches even the coarse-level
    # tracking footprint must mostly survive with small round-trip error
    occluded_set = set(occluded_idx)
    clean = [
        i for i in range(len(points))
        if i not in occluded_set and all(
            np.max(np.abs(points[i] + shift - c)) > 60 for c in centers
        )
    ]
    assert len(clean) > 15
    survivors = sum(filtered[i].status == "tracked" for i in clean)
    assert survivors > 0.8 * len(clean)


# ---------------------------------------------------------------------------
# image file I/O
# ---------------------------------------------------------------------------


def test_pgm_round_trip(tmp_path, texture):
    path = tmp_path / "frame.pgm"
    save_pgm(texture, path)
    back = load_pgm(path)
    assert back.width == texture.width and back.height == texture.height
    assert np.array_equal(back.data, texture.data)
    assert np.array_equal(load_image(path).data, texture.data)


def test_pgm_header_comments(tmp_path):
    data = np.arange(12, dtype=np.uint8).reshape(3, 4)
    path = tmp_path / "c.pgm"
    with open(path, "wb") as f:
        f.write(b"P5\n# a comment\n4 3\n# another\n255\n")
        f.write(data.tobytes())
    img = load_pgm(path)
    assert np.array_equal(img.data, data)


def test_png_round_trip(tmp_path, texture):
    from PIL import Image

    path = tmp_path / "frame.png"
    Image.fromarray(texture.data).save(path)
    back = load_png(path)
    assert np.array_equal(back.data, texture.data)
    assert np.array_equal(load_image(path).data, texture.data)


def test_load_unknown_extension(tmp_path):
    path = tmp_path / "frame.xyz"
    path.write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_image(path)
