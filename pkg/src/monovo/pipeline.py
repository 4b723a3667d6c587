"""Keyframe-based monocular visual odometry state machine.

Per-frame flow in tracking mode: track active features with pyramidal LK
plus forward-backward filtering, attempt recovery of recently lost tracks
directly from their stored frame pyramids, gate keyframe-to-current
correspondences with essential-matrix RANSAC, estimate the pose with
P3P RANSAC plus LM refinement, then decide whether the frame becomes a
keyframe (median rotation-compensated disparity of pure-2d tracks, or
mapped-track survival), triangulating new landmarks and running windowed
robust bundle adjustment when it does.

Two drive modes share everything after feature positions are known:
image mode runs the tracker itself; injection mode consumes pre-tracked
(track id, pixel) streams from the synthetic harness, so the geometric
back-end is testable independently of the tracker.  In injection mode a
vanished id is a lost track and its reappearance within the retrack
window is a recovery.

Bundle adjustment runs synchronously at keyframe creation by default.
With ba_async=True it runs on a snapshot in a worker thread; its deltas
are merged at the next frame boundary and poses created since the
snapshot are re-based onto the optimized newest keyframe.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AmbiguousDecompositionError,
    CheiralityError,
    DegenerateConfigError,
    EstimationFailure,
    LowParallaxError,
)
from .geometry import (
    CameraModel,
    Landmark,
    Pose,
    compose,
    inverse,
    triangulate,
    undistort_pixel,
)
from .imageproc import (
    GrayImage,
    Pyramid,
    build_pyramid,
    detect_shi_tomasi,
    forward_backward_filter,
    track_pyr_lk,
)
from .multiview import (
    bearing_angular_residual,
    decompose_essential,
    decompose_homography,
    epipolar_angular_residual,
    essential_5pt,
    homography_4pt,
    homography_transfer_residual,
    p3p,
    ransac,
    refine_pose,
    refit_essential,
    refit_homography,
    validate_p3p,
)
from .optimizer import (
    BAOptions,
    Observation,
    OptimizationWindow,
    RobustKernel,
    cull_outliers,
    local_bundle_adjust,
)


@dataclass
class VoConfig:
    max_features: int = 250
    grid_cells: int = 500
    detect_quality: float = 0.01
    lk_window: int = 10
    lk_levels: int = 4
    lk_max_iters: int = 30
    fb_threshold_px: float = 2.0
    parallax_kf_px: float = 30.0
    init_parallax_px: float = 30.0
    kf_survival_ratio: float = 0.5
    retrack_window: int = 5
    ba_window: int = 5
    ba_mutable: int = 3
    ba_iters: int = 15
    huber_delta_px: float = 2.0
    cull_threshold_px: float = 3.0
    ransac_confidence: float = 0.99
    ransac_threshold_rad: float = 1.5e-3
    min_tracked: int = 12
    min_new_points: int = 8
    min_parallax_rad: float = 1e-3
    seed: int = 0
    ba_async: bool = False


@dataclass
class FeatureTrack:
    """One tracked feature.

    history holds ideal (undistortion-corrected) pixels, the coordinates
    every geometric stage works in; raw is the latest position in actual
    image coordinates, which is what LK seeds and detector occupancy need.
    For a distortion-free camera the two coincide.
    """

    id: int
    history: deque = field(default_factory=lambda: deque(maxlen=8))
    state: str = "pure2d"  # pure2d | mapped | lost
    landmark_id: int | None = None
    last_seen_frame: int = -1
    raw: np.ndarray | None = None

    @property
    def position(self) -> np.ndarray:
        return self.history[-1][1]

    def observe(self, frame_id: int, pixel: np.ndarray, raw: np.ndarray | None = None):
        pixel = np.asarray(pixel, dtype=float).reshape(2)
        self.history.append((frame_id, pixel))
        self.raw = pixel if raw is None else np.asarray(raw, dtype=float).reshape(2)
        self.last_seen_frame = frame_id


@dataclass
class RetrackEntry:
    frame_id: int
    pyramid: Pyramid | None  # None in injection mode
    tracks: dict = field(default_factory=dict)  # track id -> FeatureTrack


@dataclass
class Keyframe:
    id: int
    frame_id: int
    timestamp: float
    pose: Pose                                   # world -> camera
    observations: dict = field(default_factory=dict)  # landmark id -> pixel
    track_pixels: dict = field(default_factory=dict)  # track id -> pixel


@dataclass
class FrameResult:
    frame_id: int
    timestamp: float
    status: str                 # init | tracking | lost
    pose: Pose | None = None    # world -> camera
    n_active: int = 0
    n_inliers: int = 0
    keyframe: bool = False
    keyframe_reason: str | None = None
    new_landmarks: int = 0
    notes: list = field(default_factory=list)


def unrotate_features(pixels: np.ndarray, rel_rotation: np.ndarray, cam: CameraModel):
    """Remove the rotation component from current-frame feature positions.

    rel_rotation maps keyframe-camera vectors to current-camera vectors.
    Each pixel becomes a bearing, is rotated back into the keyframe camera,
    and is reprojected there; disparity between the keyframe pixel and this
    compensated pixel is then caused by translation alone.  Returns
    (compensated pixels, valid mask); entries behind the camera are invalid.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    out = np.full_like(pixels, np.nan)
    # R^-1 b = R^T b, i.e. row-stacked bearings right-multiplied by R
    rotated = cam.pixel_to_bearing(pixels) @ np.asarray(rel_rotation, dtype=float)
    valid = rotated[:, 2] > 1e-9
    if valid.any():
        out[valid] = cam.bearing_to_pixel(rotated[valid])
    return out, valid


def _same_motion(a: Pose, b: Pose) -> bool:
    """Whether two decomposition candidates describe one physical motion."""
    Ra, Rb = a.rotation_matrix(), b.rotation_matrix()
    cos_rot = (np.trace(Ra @ Rb.T) - 1.0) / 2.0
    if np.arccos(np.clip(cos_rot, -1.0, 1.0)) > 1e-2:
        return False
    ta = a.t / max(np.linalg.norm(a.t), 1e-12)
    tb = b.t / max(np.linalg.norm(b.t), 1e-12)
    return float(ta @ tb) > np.cos(5e-2)


class VisualOdometry:
    """Sequential monocular odometry over images or injected feature tracks."""

    def __init__(self, cam: CameraModel, config: VoConfig | None = None):
        self.cam = cam
        self.config = config if config is not None else VoConfig()
        self.mode = "uninitialized"
        self.frame_id = -1
        self.tracks: dict = {}      # active track id -> FeatureTrack
        self.keyframes: list = []
        self.landmarks: dict = {}   # landmark id -> Landmark
        self.retrack: dict = {}     # frame id -> RetrackEntry
        self.cur_pose = Pose.identity()
        self.prev_pose = Pose.identity()
        self.lost_episodes = 0
        self.warnings: list = []
        self._samples: list = []    # (timestamp, frame_id, world->camera Pose)
        self._next_track = 0
        self._next_landmark = 0
        self._next_keyframe = 0
        self._prev_pyramid = None
        self._init_ref = None       # (frame_id, timestamp, {track id -> pixel})
        self._ext_map: dict = {}    # injected id -> track id (injection mode)
        self._ba_thread = None
        self._ba_payload = None

    # ------------------------------------------------------------------
    # public API
    # ------------------------------------------------------------------

    def process_frame(self, image: GrayImage, timestamp: float) -> FrameResult:
        if image.width != self.cam.width or image.height != self.cam.height:
            raise ValueError(
                f"image {image.width}x{image.height} does not match camera "
                f"{self.cam.width}x{self.cam.height}"
            )
        self.frame_id += 1
        self._merge_async_ba()
        self._prune_retrack()
        pyr = build_pyramid(image, self.config.lk_levels)
        if self.mode == "lost":
            result = self._result("lost", timestamp)
        elif self.mode == "uninitialized":
            self._start_reference(pyr, timestamp)
            result = self._result("init", timestamp)
        elif self.mode == "initializing":
            self._track_image(pyr, buffer_lost=False)
            result = self._try_initialize(timestamp, pyr)
        else:
            self._track_image(pyr, buffer_lost=True)
            self._retrack_image(pyr)
            result = self._tracking_step(timestamp, pyr)
        self._prev_pyramid = pyr
        return result

    def process_observations(self, observations, timestamp: float) -> FrameResult:
        """Injection mode: observations is a list of (track id, pixel)."""
        self.frame_id += 1
        self._merge_async_ba()
        self._prune_retrack()
        if self.mode == "lost":
            return self._result("lost", timestamp)
        if self.mode == "uninitialized":
            self._ingest_observations(observations, buffer_lost=False)
            ref = {t.id: t.position.copy() for t in self.tracks.values()}
            self._init_ref = (self.frame_id, timestamp, ref)
            self.mode = "initializing"
            return self._result("init", timestamp)
        buffer_lost = self.mode == "tracking"
        self._ingest_observations(observations, buffer_lost=buffer_lost)
        if self.mode == "initializing":
            return self._try_initialize(timestamp)
        return self._tracking_step(timestamp, None)

    def trajectory(self):
        """Camera-in-world trajectory of all frames with a pose estimate."""
        from .evaluation import Trajectory

        ts = np.array([s[0] for s in self._samples])
        poses = tuple(inverse(s[2]) for s in self._samples)
        return Trajectory(timestamps=ts, poses=poses)

    # ------------------------------------------------------------------
    # feature ingestion
    # ------------------------------------------------------------------

    def _ideal(self, pixels: np.ndarray) -> np.ndarray:
        """Raw image pixels -> ideal pinhole pixels (no-op without distortion)."""
        pixels = np.asarray(pixels, dtype=float)
        if pixels.size == 0 or not any(self.cam.dist):
            return pixels
        return undistort_pixel(self.cam, pixels)

    def _new_track(self, pixel: np.ndarray, raw: np.ndarray) -> FeatureTrack:
        t = FeatureTrack(id=self._next_track)
        self._next_track += 1
        t.observe(self.frame_id, pixel, raw)
        self.tracks[t.id] = t
        return t

    def _detect_new(self, pyr: Pyramid, budget: int):
        if budget <= 0:
            return
        occupied = [t.raw for t in self.tracks.values()]
        corners = detect_shi_tomasi(
            pyr.levels[0],
            grid_cells=self.config.grid_cells,
            occupied=occupied,
            budget=budget,
            quality=self.config.detect_quality,
        )
        if len(corners):
            ideals = self._ideal(corners)
            for ideal, raw in zip(ideals, corners):
                self._new_track(ideal, raw)

    def _start_reference(self, pyr: Pyramid, timestamp: float):
        self._detect_new(pyr, self.config.max_features)
        self._reset_reference(timestamp)
        self.mode = "initializing"

    def _lose_track(self, track: FeatureTrack, pyramid: Pyramid | None):
        """Move an active track into the retrack buffer at its last frame."""
        self.tracks.pop(track.id, None)
        track.state = "lost"
        if self.config.retrack_window <= 0:
            return
        entry = self.retrack.get(track.last_seen_frame)
        if entry is None:
            entry = RetrackEntry(frame_id=track.last_seen_frame, pyramid=pyramid)
            self.retrack[track.last_seen_frame] = entry
        entry.tracks[track.id] = track

    def _prune_retrack(self):
        horizon = self.frame_id - self.config.retrack_window
        for fid in [f for f in self.retrack if f < horizon]:
            del self.retrack[fid]

    def _lk_between(self, src: Pyramid, dst: Pyramid, points: np.ndarray):
        fwd = track_pyr_lk(
            src, dst, points,
            window=self.config.lk_window, max_iters=self.config.lk_max_iters,
        )
        return forward_backward_filter(
            src, dst, points, fwd,
            threshold=self.config.fb_threshold_px,
            window=self.config.lk_window, max_iters=self.config.lk_max_iters,
        )

    def _track_image(self, pyr: Pyramid, buffer_lost: bool):
        if not self.tracks:
            return
        ids = sorted(self.tracks)
        points = np.array([self.tracks[i].raw for i in ids])
        filtered = self._lk_between(self._prev_pyramid, pyr, points)
        hit = [k for k, tp in enumerate(filtered) if tp.status == "tracked"]
        ideals = self._ideal(np.array([filtered[k].position for k in hit]))
        ideal_at = dict(zip(hit, ideals))
        for k, (tid, tp) in enumerate(zip(ids, filtered)):
            track = self.tracks[tid]
            if tp.status == "tracked":
                track.observe(self.frame_id, ideal_at[k], tp.position)
            elif buffer_lost:
                self._lose_track(track, self._prev_pyramid)
            else:
                self.tracks.pop(tid, None)

    def _retrack_image(self, pyr: Pyramid):
        """LK each buffered lost track from its stored pyramid to now."""
        for fid in sorted(self.retrack):
            entry = self.retrack[fid]
            if entry.pyramid is None or not entry.tracks:
                continue
            ids = sorted(entry.tracks)
            points = np.array([entry.tracks[i].raw for i in ids])
            filtered = self._lk_between(entry.pyramid, pyr, points)
            for tid, tp in zip(ids, filtered):
                if tp.status != "tracked":
                    continue
                track = entry.tracks.pop(tid)
                self._revive(track)
                track.observe(self.frame_id, self._ideal(tp.position), tp.position)
        for fid in [f for f in self.retrack if not self.retrack[f].tracks]:
            del self.retrack[fid]

    def _revive(self, track: FeatureTrack):
        """Reactivate a recovered track; its landmark resumes if still mapped."""
        if track.landmark_id is not None and track.landmark_id in self.landmarks:
            track.state = "mapped"
        else:
            track.state = "pure2d"
            track.landmark_id = None
        self.tracks[track.id] = track

    def _ingest_observations(self, observations, buffer_lost: bool):
        for ext_id, pixel in observations:
            tid = self._ext_map.get(ext_id)
            track = None
            if tid is not None:
                track = self.tracks.get(tid)
                if track is None:
                    track = self._find_buffered(tid)
            if track is None:
                self._ext_map[ext_id] = self._new_track(pixel, pixel).id
            else:
                track.observe(self.frame_id, pixel)
        # ids absent this frame are lost
        for tid, track in list(self.tracks.items()):
            if track.last_seen_frame != self.frame_id:
                if buffer_lost:
                    self._lose_track(track, None)
                else:
                    self.tracks.pop(tid, None)

    def _find_buffered(self, tid: int):
        """Recover a buffered lost track by id (injection-mode retracking)."""
        for entry in self.retrack.values():
            if tid in entry.tracks:
                track = entry.tracks.pop(tid)
                self._revive(track)
                return track
        return None

    # ------------------------------------------------------------------
    # initialization
    # ------------------------------------------------------------------

    def _try_initialize(self, timestamp: float, pyr: Pyramid | None = None) -> FrameResult:
        ref_frame, ref_ts, ref_pixels = self._init_ref
        pairs = [
            (tid, ref_pixels[tid], self.tracks[tid].position)
            for tid in sorted(self.tracks)
            if tid in ref_pixels
        ]
        if len(pairs) < max(8, self.config.min_new_points):
            # tracking collapsed before enough motion: restart from here
            if pyr is not None:
                self._detect_new(pyr, self.config.max_features - len(self.tracks))
            self._reset_reference(timestamp)
            return self._result("init", timestamp)
        disparity = np.median([np.linalg.norm(c - r) for _, r, c in pairs])
        if disparity < self.config.init_parallax_px:
            return self._result("init", timestamp)

        ids = [tid for tid, _, _ in pairs]
        ba = self.cam.pixel_to_bearing(np.array([r for _, r, _ in pairs]))
        bb = self.cam.pixel_to_bearing(np.array([c for _, _, c in pairs]))
        try:
            res_e = ransac(
                (ba, bb),
                solver=lambda s: essential_5pt(s[0], s[1]),
                residual=epipolar_angular_residual,
                threshold=self.config.ransac_threshold_rad,
                sample_size=5,
                confidence=self.config.ransac_confidence,
                rng_seed=self._rng_seed(0),
                refit=refit_essential,
            )
        except (EstimationFailure, DegenerateConfigError):
            res_e = None
        try:
            res_h = ransac(
                (ba, bb),
                solver=lambda s: homography_4pt(s[0], s[1]),
                residual=homography_transfer_residual,
                threshold=self.config.ransac_threshold_rad,
                sample_size=4,
                confidence=self.config.ransac_confidence,
                rng_seed=self._rng_seed(3),
                refit=refit_homography,
            )
        except (EstimationFailure, DegenerateConfigError):
            res_h = None
        if res_e is None and res_h is None:
            return self._result("init", timestamp)
        # model selection: a dominant plane gives the homography comparable
        # support and makes the essential solution a spurious member of the
        # planar two-parameter family, so route by relative support
        s_e = 0 if res_e is None else len(res_e.inliers)
        s_h = 0 if res_h is None else len(res_h.inliers)
        if s_h > 0.45 * (s_h + s_e):
            picked = self._motion_from_homography(res_h, ba, bb)
            if picked is None:
                # twofold planar ambiguity or rotation-only view change:
                # keep accumulating baseline instead of committing
                return self._result("init", timestamp)
            rel_pose, inlier_idx = picked
        else:
            try:
                rel_pose, _ = decompose_essential(
                    res_e.model, ba[res_e.inliers], bb[res_e.inliers]
                )
            except (AmbiguousDecompositionError, DegenerateConfigError):
                self._reset_reference(timestamp)
                return self._result("init", timestamp)
            inlier_idx = res_e.inliers

        # triangulate the epipolar inliers; pure rotation dies here because
        # world rays stay parallel no matter the fictitious unit baseline
        pose_a = Pose.identity()
        new_points = []
        for k in inlier_idx:
            tid = ids[k]
            try:
                point = triangulate(
                    pose_a, rel_pose, self.cam,
                    ref_pixels[tid], self.tracks[tid].position,
                    min_parallax_rad=self.config.min_parallax_rad,
                )
            except (LowParallaxError, CheiralityError):
                continue
            new_points.append((tid, point))
        if len(new_points) < self.config.min_new_points:
            return self._result("init", timestamp)

        kf0 = Keyframe(
            id=self._next_keyframe, frame_id=ref_frame, timestamp=ref_ts,
            pose=pose_a,
            track_pixels={tid: pix.copy() for tid, pix in ref_pixels.items()
                          if tid in self.tracks},
        )
        self._next_keyframe += 1
        kf1 = Keyframe(
            id=self._next_keyframe, frame_id=self.frame_id, timestamp=timestamp,
            pose=rel_pose,
        )
        self._next_keyframe += 1
        for tid, point in new_points:
            track = self.tracks[tid]
            lm = Landmark(
                id=self._next_landmark, position=point,
                observations={
                    kf0.id: ref_pixels[tid].copy(),
                    kf1.id: track.position.copy(),
                },
            )
            self._next_landmark += 1
            self.landmarks[lm.id] = lm
            track.state = "mapped"
            track.landmark_id = lm.id
            kf0.observations[lm.id] = lm.observations[kf0.id]
            kf1.observations[lm.id] = lm.observations[kf1.id]
        if pyr is not None:
            # refill detection, as at any other keyframe: fresh pure-2d
            # tracks feed the parallax criterion from here on
            self._detect_new(pyr, self.config.max_features - len(self.tracks))
        kf1.track_pixels = {t.id: t.position.copy() for t in self.tracks.values()}
        self.keyframes = [kf0, kf1]
        self.cur_pose = rel_pose
        self.prev_pose = rel_pose  # zero velocity right after init
        self.mode = "tracking"
        self._run_ba_sync()
        self._samples.append((ref_ts, ref_frame, self.keyframes[0].pose))
        self._samples.append((timestamp, self.frame_id, self.cur_pose))
        result = self._result("tracking", timestamp)
        result.keyframe = True
        result.keyframe_reason = "init"
        result.new_landmarks = len(new_points)
        result.pose = self.cur_pose
        return result

    def _motion_from_homography(self, res, ba, bb):
        """Relative pose from a planar view change, or None to wait.

        Both conjugate interpretations of a homography can carry full
        cheirality support at small baselines; committing to the wrong one
        yields a self-consistent but bent map.  Accept only a clear winner
        (near-full support, runner-up well behind); otherwise the caller
        defers until more baseline breaks the tie.
        """
        try:
            cands = decompose_homography(
                res.model, ba[res.inliers], bb[res.inliers],
                2.0 * self.config.ransac_threshold_rad,
            )
        except DegenerateConfigError:
            return None
        best_pose, _, best_support = cands[0]
        if best_support < 0.9 * len(res.inliers):
            return None
        if len(cands) > 1 and cands[1][2] > 0.75 * best_support:
            # motion along the plane normal collapses the two conjugates
            # into one; a duplicated winner is not an ambiguity
            if not _same_motion(best_pose, cands[1][0]):
                return None
        scale = float(np.linalg.norm(best_pose.t))
        if scale < 1e-9:
            return None
        rel = Pose.from_rt(best_pose.rotation_matrix(), best_pose.t / scale)
        return rel, res.inliers

    def _reset_reference(self, timestamp: float):
        ref = {t.id: t.position.copy() for t in self.tracks.values()}
        self._init_ref = (self.frame_id, timestamp, ref)

    # ------------------------------------------------------------------
    # tracking
    # ------------------------------------------------------------------

    def _tracking_step(self, timestamp: float, pyr: Pyramid | None) -> FrameResult:
        self._essential_gate(pyr)
        pose, inliers = self._estimate_pose(pyr)
        if pose is None:
            self.mode = "lost"
            self.lost_episodes += 1
            return self._result("lost", timestamp)
        self.prev_pose = self.cur_pose
        self.cur_pose = pose

        result = self._result("tracking", timestamp)
        result.n_inliers = inliers
        decision, reason = self._should_create_keyframe()
        if decision:
            n_new = self._create_keyframe(timestamp, pyr)
            result.keyframe = True
            result.keyframe_reason = reason
            result.new_landmarks = n_new
        self._samples.append((timestamp, self.frame_id, self.cur_pose))
        result.pose = self.cur_pose
        return result

    def _essential_gate(self, pyr: Pyramid | None):
        """Epipolar-consistency check of all tracks against the last keyframe."""
        kf = self.keyframes[-1]
        ids = [tid for tid in sorted(self.tracks) if tid in kf.track_pixels]
        if len(ids) < 10:
            return
        pix_kf = np.array([kf.track_pixels[tid] for tid in ids])
        pix_cur = np.array([self.tracks[tid].position for tid in ids])
        ba = self.cam.pixel_to_bearing(pix_kf)
        bb = self.cam.pixel_to_bearing(pix_cur)
        try:
            res = ransac(
                (ba, bb),
                solver=lambda s: essential_5pt(s[0], s[1]),
                residual=epipolar_angular_residual,
                threshold=self.config.ransac_threshold_rad,
                sample_size=5,
                confidence=self.config.ransac_confidence,
                rng_seed=self._rng_seed(1),
                refit=refit_essential,
            )
        except EstimationFailure:
            return
        # evict at twice the estimation threshold: the band between holds
        # the noise tail, not track failures, and should stay active
        residuals = epipolar_angular_residual(res.model, (ba, bb))
        for k, tid in enumerate(ids):
            if residuals[k] > 2.0 * self.config.ransac_threshold_rad:
                self._lose_track(self.tracks[tid], pyr)

    def _estimate_pose(self, pyr: Pyramid | None):
        """P3P RANSAC over mapped tracks, then LM refinement.

        Returns (pose, inlier count) or (None, 0) when tracking is lost.
        Outlier observations are routed to the retrack buffer.
        """
        ids = [
            tid for tid in sorted(self.tracks)
            if self.tracks[tid].state == "mapped"
            and self.tracks[tid].landmark_id in self.landmarks
        ]
        if len(ids) < max(4, self.config.min_tracked):
            return None, 0
        pixels = np.array([self.tracks[tid].position for tid in ids])
        bearings = self.cam.pixel_to_bearing(pixels)
        points = np.array(
            [self.landmarks[self.tracks[tid].landmark_id].position for tid in ids]
        )
        thr = self.config.ransac_threshold_rad
        predicted = compose(compose(self.cur_pose, inverse(self.prev_pose)),
                            self.cur_pose)
        pred_mask = bearing_angular_residual(predicted, (bearings, points)) <= thr
        # triangulation noise keeps even a perfect pose well below full
        # support at this threshold, so the prediction gate is a floor on
        # absolute support, not a fraction of optimum
        if int(pred_mask.sum()) >= max(self.config.min_tracked,
                                       int(np.ceil(0.3 * len(ids)))):
            model, mask = predicted, pred_mask
        else:
            try:
                res = ransac(
                    (bearings, points),
                    solver=lambda s: p3p(s[0], s[1]),
                    residual=bearing_angular_residual,
                    threshold=thr,
                    sample_size=3,
                    confidence=self.config.ransac_confidence,
                    rng_seed=self._rng_seed(2),
                    validate=validate_p3p,
                )
            except EstimationFailure:
                return None, 0
            model = res.model
            mask = np.zeros(len(ids), dtype=bool)
            mask[res.inliers] = True
        if int(mask.sum()) < self.config.min_tracked:
            return None, 0
        refined = refine_pose(model, self.cam, points[mask], pixels[mask])
        if not np.isfinite(refined.final_cost):
            return None, 0
        final_res = bearing_angular_residual(refined.pose, (bearings, points))
        n_inliers = int((final_res <= thr).sum())
        if n_inliers < self.config.min_tracked:
            return None, 0
        # eviction tolerates landmark noise: only tracks beyond the cull
        # equivalent are treated as tracking failures
        evict = final_res > self.config.cull_threshold_px / self.cam.fx
        for k, tid in enumerate(ids):
            if evict[k] and tid in self.tracks:
                self._lose_track(self.tracks[tid], pyr)
        return refined.pose, n_inliers

    # ------------------------------------------------------------------
    # keyframe decision and creation
    # ------------------------------------------------------------------

    def _should_create_keyframe(self):
        kf = self.keyframes[-1]
        mapped_now = sum(
            1 for t in self.tracks.values()
            if t.state == "mapped" and t.landmark_id in self.landmarks
        )
        if mapped_now < self.config.kf_survival_ratio * max(len(kf.observations), 1):
            return True, "survival"
        ids = [
            tid for tid in sorted(self.tracks)
            if self.tracks[tid].state == "pure2d" and tid in kf.track_pixels
        ]
        if ids:
            pix_cur = np.array([self.tracks[tid].position for tid in ids])
            pix_kf = np.array([kf.track_pixels[tid] for tid in ids])
            rel = self.cur_pose.rotation_matrix() @ kf.pose.rotation_matrix().T
            compensated, valid = unrotate_features(pix_cur, rel, self.cam)
            if valid.any():
                disparity = np.linalg.norm(
                    compensated[valid] - pix_kf[valid], axis=1
                )
                if np.median(disparity) >= self.config.parallax_kf_px:
                    return True, "parallax"
        return False, None

    def _create_keyframe(self, timestamp: float, pyr: Pyramid | None) -> int:
        kf_prev = self.keyframes[-1]
        kf = Keyframe(
            id=self._next_keyframe, frame_id=self.frame_id,
            timestamp=timestamp, pose=self.cur_pose,
        )
        self._next_keyframe += 1

        for tid in sorted(self.tracks):
            track = self.tracks[tid]
            if track.state == "mapped" and track.landmark_id in self.landmarks:
                pix = track.position.copy()
                kf.observations[track.landmark_id] = pix
                self.landmarks[track.landmark_id].observations[kf.id] = pix

        n_new = 0
        for tid in sorted(self.tracks):
            track = self.tracks[tid]
            if track.state != "pure2d" or tid not in kf_prev.track_pixels:
                continue
            try:
                point = triangulate(
                    kf_prev.pose, self.cur_pose, self.cam,
                    kf_prev.track_pixels[tid], track.position,
                    min_parallax_rad=self.config.min_parallax_rad,
                )
            except (LowParallaxError, CheiralityError):
                continue
            lm = Landmark(
                id=self._next_landmark, position=point,
                observations={
                    kf_prev.id: kf_prev.track_pixels[tid].copy(),
                    kf.id: track.position.copy(),
                },
            )
            self._next_landmark += 1
            self.landmarks[lm.id] = lm
            track.state = "mapped"
            track.landmark_id = lm.id
            kf_prev.observations[lm.id] = lm.observations[kf_prev.id]
            kf.observations[lm.id] = lm.observations[kf.id]
            n_new += 1
        if n_new < self.config.min_new_points:
            self.warnings.append(
                f"frame {self.frame_id}: keyframe {kf.id} added only "
                f"{n_new} new landmarks"
            )

        if pyr is not None:
            free = self.config.max_features - len(self.tracks)
            if free > 0:
                self._detect_new(pyr, free)

        kf.track_pixels = {t.id: t.position.copy() for t in self.tracks.values()}
        self.keyframes.append(kf)
        if self.config.ba_async:
            self._launch_ba_async()
        else:
            self._run_ba_sync()
        return n_new

    # ------------------------------------------------------------------
    # bundle adjustment over the keyframe window
    # ------------------------------------------------------------------

    def _build_window(self):
        kfs = self.keyframes[-self.config.ba_window:]
        n_mut = min(self.config.ba_mutable, len(kfs) - 1)
        if n_mut < 1:
            return None
        mutable = [k.id for k in kfs[-n_mut:]]
        fixed = [k.id for k in kfs[:-n_mut]]
        window_ids = set(mutable) | set(fixed)
        poses = {k.id: k.pose for k in kfs}
        landmarks = {}
        observations = []
        for lm in self.landmarks.values():
            in_window = [k for k in lm.observations if k in window_ids]
            if len(in_window) < 2:
                continue
            landmarks[lm.id] = lm.position.copy()
            for k in in_window:
                observations.append(
                    Observation(kf_id=k, lm_id=lm.id, pixel=lm.observations[k])
                )
        if not landmarks:
            return None
        scale_locked = None
        if len(fixed) == 1:
            anchor = poses[mutable[0]]
            if np.linalg.norm(anchor.t) > 1e-6:
                scale_locked = mutable[0]
        return OptimizationWindow(
            poses=poses, mutable_ids=mutable, fixed_ids=fixed,
            landmarks=landmarks, observations=observations,
            scale_locked=scale_locked,
        )

    def _apply_window(self, window: OptimizationWindow, culled: list):
        kf_by_id = {k.id: k for k in self.keyframes}
        for kid, pose in window.poses.items():
            if kid in kf_by_id:
                kf_by_id[kid].pose = pose
        for lid, pos in window.landmarks.items():
            if lid in self.landmarks:
                self.landmarks[lid].position = np.asarray(pos, dtype=float)
        for lid in culled:
            lm = self.landmarks.pop(lid, None)
            if lm is None:
                continue
            for kf in self.keyframes:
                kf.observations.pop(lid, None)
            for track in self.tracks.values():
                if track.landmark_id == lid:
                    track.state = "pure2d"
                    track.landmark_id = None
        newest = self.keyframes[-1]
        if newest.frame_id == self.frame_id:
            self.cur_pose = newest.pose

    def _run_ba_sync(self):
        window = self._build_window()
        if window is None:
            return
        local_bundle_adjust(
            window, self.cam,
            kernel=RobustKernel(kind="huber", delta=self.config.huber_delta_px),
            opts=BAOptions(max_iters=self.config.ba_iters),
        )
        culled = cull_outliers(window, self.cam, self.config.cull_threshold_px)
        self._apply_window(window, culled)

    def _launch_ba_async(self):
        self._merge_async_ba(wait=True)  # at most one BA in flight
        window = self._build_window()
        if window is None:
            return
        anchor = self.keyframes[-1]
        anchor_id, anchor_frame, anchor_pose = anchor.id, anchor.frame_id, anchor.pose

        def work():
            local_bundle_adjust(
                window, self.cam,
                kernel=RobustKernel(kind="huber", delta=self.config.huber_delta_px),
                opts=BAOptions(max_iters=self.config.ba_iters),
            )
            culled = cull_outliers(window, self.cam, self.config.cull_threshold_px)
            self._ba_payload = (window, culled, anchor_id, anchor_frame, anchor_pose)

        self._ba_thread = threading.Thread(target=work)
        self._ba_thread.start()

    def _merge_async_ba(self, wait: bool = False):
        if self._ba_thread is None:
            return
        if wait:
            self._ba_thread.join()
        elif self._ba_thread.is_alive():
            return
        self._ba_thread.join()
        self._ba_thread = None
        payload, self._ba_payload = self._ba_payload, None
        if payload is None:
            return
        window, culled, anchor_id, anchor_frame, anchor_old = payload
        anchor_new = window.poses[anchor_id]
        self._apply_window(window, culled)

        def rebase(p):
            # poses estimated since the snapshot were chained off the stale
            # newest keyframe: T' = (T anchor_old^-1) anchor_new
            return compose(compose(p, inverse(anchor_old)), anchor_new)

        for kf in self.keyframes:
            if kf.id > anchor_id:
                kf.pose = rebase(kf.pose)
        self._samples = [
            s if s[1] < anchor_frame else (s[0], s[1], rebase(s[2]))
            for s in self._samples
        ]
        self.cur_pose = rebase(self.cur_pose)
        self.prev_pose = rebase(self.prev_pose)

    # ------------------------------------------------------------------
    # helpers
    # ------------------------------------------------------------------

    def _rng_seed(self, salt: int) -> int:
        return (self.config.seed * 1000003 + self.frame_id * 31 + salt) % 2**63

    def _result(self, status: str, timestamp: float) -> FrameResult:
        return FrameResult(
            frame_id=self.frame_id, timestamp=timestamp, status=status,
            pose=self.cur_pose if status == "tracking" else None,
            n_active=len(self.tracks),
        )
