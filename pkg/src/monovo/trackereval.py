"""Feature-tracking survival harness over ordered image sequences.

Detects grid-bucketed corners once in the first image, then tracks that
fixed feature set sequentially image to image with pyramidal LK plus
forward-backward filtering; a feature that dies stays dead, so survival
counts are monotone non-increasing.  With a camera model the harness
additionally drops tracks that violate pairwise epipolar consistency
under essential-matrix RANSAC.  run_pairwise is the two-image protocol
variant: detect in the first image of each pair, track into a copy
shifted by a known translation.
"""

import numpy as np

from .errors import EstimationFailure
from .geometry import CameraModel, undistort_pixel
from .imageproc import (
    GrayImage,
    Pyramid,
    build_pyramid,
    detect_shi_tomasi,
    forward_backward_filter,
    track_pyr_lk,
)
from .multiview import epipolar_angular_residual, essential_5pt, ransac, refit_essential

PYRAMID_LEVELS = 4


def _check_sizes(images) -> None:
    if len(images) < 2:
        raise ValueError(f"need >= 2 images, got {len(images)}")
    w, h = images[0].width, images[0].height
    for k, im in enumerate(images[1:], start=1):
        if im.width != w or im.height != h:
            raise ValueError(
                f"image {k} is {im.width}x{im.height}, expected {w}x{h}"
            )


def _track_pair(prev: Pyramid, cur: Pyramid, positions: np.ndarray,
                fb_threshold: float, seeds: np.ndarray | None = None):
    """Indices and new positions of points surviving LK + FB filtering."""
    tracked = track_pyr_lk(prev, cur, positions, seeds=seeds)
    tracked = forward_backward_filter(
        prev, cur, positions, tracked, threshold=fb_threshold
    )
    keep = [i for i, tp in enumerate(tracked) if tp.status == "tracked"]
    new_pos = (
        np.array([tracked[i].position for i in keep])
        if keep else np.zeros((0, 2))
    )
    return keep, new_pos


def _epipolar_inliers(cam: CameraModel, prev_px: np.ndarray, cur_px: np.ndarray,
                      rng_seed: int) -> np.ndarray:
    """Indices epipolar-consistent with the best essential model.

    Threshold is the angle subtended by one pixel at the focal length.
    When no model wins (too few points, zero disparity, degenerate
    geometry) there is no evidence against anyone: all indices survive.
    """
    if any(cam.dist):
        prev_px = undistort_pixel(cam, prev_px)
        cur_px = undistort_pixel(cam, cur_px)
    ba = cam.pixel_to_bearing(prev_px)
    bb = cam.pixel_to_bearing(cur_px)
    try:
        res = ransac(
            (ba, bb),
            solver=lambda s: essential_5pt(s[0], s[1]),
            residual=epipolar_angular_residual,
            threshold=1.0 / cam.fx,
            sample_size=5,
            rng_seed=rng_seed,
            refit=refit_essential,
        )
    except EstimationFailure:
        return np.arange(len(prev_px))
    return res.inliers


def run_survival(images, cam: CameraModel | None = None, grid_cells: int = 500,
                 fb_threshold: float = 2.0) -> list:
    """Track image-0 detections through the sequence.

    Returns one (image_index, detected, tracked) row per image, where
    `detected` is the image-0 detection count (up to one corner per grid
    cell) and `tracked` the number of those features still alive.
    """
    _check_sizes(images)
    positions = detect_shi_tomasi(images[0], grid_cells=grid_cells,
                                  budget=grid_cells)
    detected = len(positions)
    rows = [(0, detected, detected)]
    prev = build_pyramid(images[0], PYRAMID_LEVELS)
    for k in range(1, len(images)):
        cur = build_pyramid(images[k], PYRAMID_LEVELS)
        if len(positions):
            keep, new_pos = _track_pair(prev, cur, positions, fb_threshold)
            if cam is not None and len(keep) >= 6:
                inl = _epipolar_inliers(cam, positions[keep], new_pos, rng_seed=k)
                new_pos = new_pos[inl]
            positions = new_pos
        rows.append((k, detected, len(positions)))
        prev = cur
    return rows


def run_pairwise(pairs, grid_cells: int = 500, fb_threshold: float = 2.0,
                 shift=(10.0, 0.0)) -> list:
    """Detect in the first image of each pair, track into the second.

    `shift` is the known translation applied to produce the second image
    and seeds the tracker at the expected location.  Returns one
    (pair_index, detected, tracked) row per pair.
    """
    rows = []
    shift = np.asarray(shift, dtype=float).reshape(2)
    for k, (first, second) in enumerate(pairs):
        _check_sizes([first, second])
        positions = detect_shi_tomasi(first, grid_cells=grid_cells,
                                      budget=grid_cells)
        if not len(positions):
            rows.append((k, 0, 0))
            continue
        prev = build_pyramid(first, PYRAMID_LEVELS)
        cur = build_pyramid(second, PYRAMID_LEVELS)
        keep, _ = _track_pair(prev, cur, positions, fb_threshold,
                              seeds=positions + shift)
        rows.append((k, len(positions), len(keep)))
    return rows


def write_survival_csv(rows, path) -> None:
    with open(path, "w") as f:
        f.write("image_index,detected,tracked\n")
        for idx, detected, tracked in rows:
            f.write(f"{idx},{detected},{tracked}\n")
