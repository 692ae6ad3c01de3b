"""Per-vehicle extended Kalman filtering, association and track lifecycle.

State is (x, y, v, a, phi, omega) in image coordinates: position in px,
speed px/s, acceleration px/s^2, heading rad in [0, 2pi), turn rate rad/s.
Rows grow downward, so the heading convention negates the row axis before
atan2 and straight-down motion has phi = 3pi/2. Only positions are observed;
speed and heading are inferred by the filter (or bootstrapped from the first
two observations).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .imaging import Rect

DEFAULT_Q = np.diag([1.0, 1.0, 4.0, 1.0, 0.01, 0.001])
DEFAULT_R = np.diag([4.0, 4.0])
DEFAULT_P0 = np.diag([25.0, 25.0, 100.0, 25.0, 1.0, 0.1])
DEFAULT_GATE_FRACTION = 0.25
DEFAULT_MAX_MISSES = 5

_H = np.array([[1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
               [0.0, 1.0, 0.0, 0.0, 0.0, 0.0]])


def normalize_angle(phi: float) -> float:
    """Map an angle to [0, 2pi)."""
    phi = math.fmod(phi, 2.0 * math.pi)
    if phi < 0.0:
        phi += 2.0 * math.pi
    return phi if phi < 2.0 * math.pi else 0.0


@dataclass(frozen=True)
class StateVector:
    x: float
    y: float
    v: float
    a: float
    phi: float
    omega: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.a, self.phi, self.omega])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "StateVector":
        x, y, v, a, phi, omega = (float(c) for c in arr)
        return cls(x, y, v, a, normalize_angle(phi), omega)


@dataclass(frozen=True)
class Measurement:
    """Detection centroid plus the rect it came from."""

    z_x: float
    z_y: float
    rect: Rect

    def __post_init__(self):
        cx, cy = self.rect.center()
        if self.z_x != cx or self.z_y != cy:
            raise ValueError(f"centroid ({self.z_x},{self.z_y}) is not the center of {self.rect}")

    @classmethod
    def from_rect(cls, rect: Rect) -> "Measurement":
        cx, cy = rect.center()
        return cls(cx, cy, rect)


@dataclass
class Track:
    """One tracked vehicle: filter state plus lifecycle bookkeeping.

    anchor is the filtered position at the latest observation; per-step
    displacement between consecutive anchors accumulates into
    total_distance. heading_valid is False for tracks maintained without
    the filter, whose phi never gets estimated.
    """

    id: int
    state: StateVector
    covariance: np.ndarray
    last_rect: Rect
    entry_position: tuple[float, float]
    frames_seen: int = 1
    misses: int = 0
    total_distance: float = 0.0
    last_seen_frame: int = 0
    heading_valid: bool = True
    anchor: tuple[float, float] = field(default=(0.0, 0.0))

    def position(self) -> tuple[float, float]:
        return self.state.x, self.state.y


def transition(state: StateVector, t: float) -> StateVector:
    """Constant-turn-rate/constant-acceleration step of length t seconds."""
    return StateVector(
        x=state.x + state.v * t * math.cos(state.phi),
        y=state.y + state.v * t * math.sin(state.phi),
        v=state.v + state.a * t,
        a=state.a,
        phi=normalize_angle(state.phi + state.omega * t),
        omega=state.omega,
    )


def jacobian(state: StateVector, t: float) -> np.ndarray:
    """Analytic Jacobian of transition at the given state."""
    c = math.cos(state.phi)
    s = math.sin(state.phi)
    f = np.eye(6)
    f[0, 2] = t * c
    f[0, 4] = -state.v * t * s
    f[1, 2] = t * s
    f[1, 4] = state.v * t * c
    f[2, 3] = t
    f[4, 5] = t
    return f


def predict(track: Track, t: float, q: np.ndarray = DEFAULT_Q) -> Track:
    """EKF time update: propagate the state and inflate P by F*P*F^T + q*t.

    q holds per-second process noise rates, hence the scaling by t.
    """
    if t <= 0.0:
        raise ValueError(f"time step must be positive, got {t}")
    f = jacobian(track.state, t)
    covariance = f @ track.covariance @ f.T + q * t
    return replace(track, state=transition(track.state, t), covariance=covariance)


def update(track: Track, z: Measurement, r: np.ndarray = DEFAULT_R) -> Track:
    """EKF measurement update from a position observation."""
    p = track.covariance
    innovation = np.array([z.z_x, z.z_y]) - _H @ track.state.as_array()
    s = _H @ p @ _H.T + r
    try:
        gain = p @ _H.T @ np.linalg.inv(s)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"singular innovation covariance {s!r}") from exc
    new_state = StateVector.from_array(track.state.as_array() + gain @ innovation)
    p = (np.eye(6) - gain @ _H) @ p
    p = (p + p.T) / 2.0
    step = math.hypot(new_state.x - track.anchor[0], new_state.y - track.anchor[1])
    return replace(
        track,
        state=new_state,
        covariance=p,
        frames_seen=track.frames_seen + 1,
        misses=0,
        total_distance=track.total_distance + step,
        anchor=(new_state.x, new_state.y),
        last_rect=z.rect,
    )


def derive_kinematics(track: Track, z: Measurement, t: float) -> Track:
    """Bootstrap speed and heading from the displacement to a new observation.

    Zero displacement keeps the previous heading and sets speed to zero.
    """
    if t <= 0.0:
        raise ValueError(f"time step must be positive, got {t}")
    dx = z.z_x - track.state.x
    dy = z.z_y - track.state.y
    if dx == 0.0 and dy == 0.0:
        state = replace(track.state, v=0.0)
    else:
        state = replace(
            track.state,
            v=math.hypot(dx, dy) / t,
            phi=normalize_angle(math.atan2(-dy, dx)),
        )
    return replace(track, state=state)


def associate(
    tracks: Sequence[Track], detections: Sequence[Rect], gate: float
) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Greedy nearest-first matching of track positions to detection centers.

    Returns (matched (track_id, detection_index) pairs, unmatched track ids,
    unmatched detection indices). Pairs beyond the gate distance are never
    considered; ties break by (track id, detection index).
    """
    if gate <= 0.0:
        raise ValueError(f"gate must be positive, got {gate}")
    candidates = []
    for track in tracks:
        tx, ty = track.position()
        for det_idx, rect in enumerate(detections):
            cx, cy = rect.center()
            distance = math.hypot(tx - cx, ty - cy)
            if distance <= gate:
                candidates.append((distance, track.id, det_idx))
    candidates.sort()
    matched_tracks: set[int] = set()
    matched_dets: set[int] = set()
    pairs = []
    for distance, track_id, det_idx in candidates:
        if track_id in matched_tracks or det_idx in matched_dets:
            continue
        pairs.append((track_id, det_idx))
        matched_tracks.add(track_id)
        matched_dets.add(det_idx)
    unmatched_tracks = [t.id for t in tracks if t.id not in matched_tracks]
    unmatched_dets = [i for i in range(len(detections)) if i not in matched_dets]
    return pairs, unmatched_tracks, unmatched_dets


class Tracker:
    """Sequential multi-object tracker over a frame stream.

    kind "ekf" runs the full predict/update filter; kind "none" keeps the
    same lifecycle and association but pins each track to its latest
    detection without estimating kinematics.
    """

    def __init__(
        self,
        kind: str = "ekf",
        gate: float = 60.0,
        max_misses: int = DEFAULT_MAX_MISSES,
        q: np.ndarray = DEFAULT_Q,
        r: np.ndarray = DEFAULT_R,
        p0: np.ndarray = DEFAULT_P0,
    ):
        if kind not in ("ekf", "none"):
            raise ValueError(f"tracker kind must be 'ekf' or 'none', got {kind!r}")
        if max_misses < 0:
            raise ValueError(f"max_misses must be >= 0, got {max_misses}")
        self.kind = kind
        self.gate = gate
        self.max_misses = max_misses
        self.q = q
        self.r = r
        self.p0 = p0
        self.tracks: list[Track] = []
        self.frame_idx = -1
        self._next_id = 0

    def _spawn(self, rect: Rect) -> Track:
        cx, cy = rect.center()
        track = Track(
            id=self._next_id,
            state=StateVector(cx, cy, 0.0, 0.0, 0.0, 0.0),
            covariance=self.p0.copy(),
            last_rect=rect,
            entry_position=(cx, cy),
            frames_seen=1,
            last_seen_frame=self.frame_idx,
            heading_valid=self.kind == "ekf",
            anchor=(cx, cy),
        )
        self._next_id += 1
        return track

    def _observe_naive(self, track: Track, z: Measurement) -> Track:
        step = math.hypot(z.z_x - track.anchor[0], z.z_y - track.anchor[1])
        return replace(
            track,
            state=replace(track.state, x=z.z_x, y=z.z_y),
            frames_seen=track.frames_seen + 1,
            misses=0,
            total_distance=track.total_distance + step,
            anchor=(z.z_x, z.z_y),
            last_rect=z.rect,
        )

    def step(self, detections: Sequence[Rect], t: float = 1.0) -> tuple[list[Track], list[Track]]:
        """Advance one frame; returns (live tracks, tracks finished this frame)."""
        if t <= 0.0:
            raise ValueError(f"time step must be positive, got {t}")
        self.frame_idx += 1
        if self.kind == "ekf":
            self.tracks = [predict(track, t, self.q) for track in self.tracks]
        pairs, unmatched_tracks, unmatched_dets = associate(self.tracks, detections, self.gate)
        by_id = {track.id: track for track in self.tracks}
        for track_id, det_idx in pairs:
            track = by_id[track_id]
            z = Measurement.from_rect(detections[det_idx])
            if self.kind == "ekf":
                if track.frames_seen == 1:
                    track = derive_kinematics(track, z, (track.misses + 1) * t)
                track = update(track, z, self.r)
            else:
                track = self._observe_naive(track, z)
            track.last_seen_frame = self.frame_idx
            by_id[track_id] = track
        for track_id in unmatched_tracks:
            track = by_id[track_id]
            by_id[track_id] = replace(track, misses=track.misses + 1)
        finished = []
        live = []
        for track in self.tracks:
            track = by_id[track.id]
            if track.misses > self.max_misses:
                finished.append(track)
            else:
                live.append(track)
        for det_idx in unmatched_dets:
            live.append(self._spawn(detections[det_idx]))
        self.tracks = live
        return live, finished

    def flush(self) -> list[Track]:
        """Finish every remaining track (end of the frame stream)."""
        finished = self.tracks
        self.tracks = []
        return finished


def track_log_line(frame_idx: int, track: Track) -> str:
    """One text-log line: frame_idx track_id x y v a phi omega frames_seen total_distance."""
    s = track.state
    return (
        f"{frame_idx} {track.id} {s.x:.6g} {s.y:.6g} {s.v:.6g} {s.a:.6g} "
        f"{s.phi:.6g} {s.omega:.6g} {track.frames_seen} {track.total_distance:.6g}"
    )
