"""Scenario data model, file formats and attribute derivation.

Coordinates are meters in a local scenario frame. A scenario holds every
track on one shared uniform time grid; steps where a track was not
observed are filled (linear interpolation inside gaps, edge hold outside)
and flagged in ``observed_mask``.

Map pixel ``(row i, col j)`` covers ``x in [ox + j*res, ox + (j+1)*res)``
and ``y in [oy + i*res, oy + (i+1)*res)``; row 0 is the first row stored
(the "top" of an image file), so rasters appear y-flipped when viewed.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

EPS_STILL = 1e-3
SMOOTH_WINDOW = 3
OBJECT_CLASSES = ("ego", "agent", "other")
ARGOVERSE_COLUMNS = ("TIMESTAMP", "TRACK_ID", "OBJECT_TYPE", "X", "Y", "CITY_NAME")
HISTORY_SECONDS = 2.0
FUTURE_SECONDS = 3.0

# raw timestamps further than this fraction of a sample period from the grid are rejected
_TIMESTAMP_SLACK = 0.25


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario data."""


class MissingColumnError(ScenarioError):
    pass


class TimestampError(ScenarioError):
    pass


class NoEgoError(ScenarioError):
    pass


def wrap_angle(angle):
    """Map angles onto (-pi, pi]."""
    wrapped = np.mod(np.asarray(angle, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def _smooth(values: np.ndarray, window: int) -> np.ndarray:
    # centered moving average whose half-width shrinks near the ends, so the
    # end samples are left untouched and linear signals pass through exactly
    if window <= 1 or len(values) < 3:
        return values.copy()
    half = window // 2
    n = len(values)
    out = np.empty_like(values)
    for i in range(n):
        k = min(half, i, n - 1 - i)
        out[i] = values[i - k:i + k + 1].mean(axis=0)
    return out


def derive_attributes(positions, dt: float, window: int = SMOOTH_WINDOW,
                      eps_still: float = EPS_STILL) -> np.ndarray:
    """Estimate (vx, vy, a, yaw, yaw_rate) per step from positions.

    Velocity uses central differences (one-sided at the ends) followed by
    a moving average of ``window`` samples; acceleration differentiates the
    speed; yaw comes from the direction of travel and is carried forward
    while the per-step displacement stays below ``eps_still``.
    """
    pos = np.asarray(positions, dtype=float)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise ScenarioError(f"positions must have shape (T, 2), got {pos.shape}")
    if len(pos) < 2:
        raise ScenarioError("derive_attributes needs at least 2 positions")
    if not dt > 0:
        raise ScenarioError(f"dt must be positive, got {dt}")

    vel = _smooth(np.gradient(pos, dt, axis=0), window)
    speed = np.hypot(vel[:, 0], vel[:, 1])
    accel = np.gradient(speed, dt)

    moving = speed * dt >= eps_still
    yaw = np.zeros(len(pos))
    if moving.any():
        raw = np.arctan2(vel[:, 1], vel[:, 0])
        first = int(np.argmax(moving))
        yaw[:first + 1] = raw[first]
        for i in range(first + 1, len(pos)):
            yaw[i] = raw[i] if moving[i] else yaw[i - 1]
    yaw_rate = np.gradient(np.unwrap(yaw), dt)
    return np.column_stack([vel, accel, wrap_angle(yaw), yaw_rate])


@dataclass(frozen=True, eq=False)
class ObjectTrack:
    track_id: str
    object_class: str
    timestamps: np.ndarray
    positions: np.ndarray
    attributes: np.ndarray
    observed_mask: np.ndarray
    # generator ground truth (a, yaw_rate) per step; never serialized
    true_actions: np.ndarray | None = None

    def __post_init__(self):
        if self.object_class not in OBJECT_CLASSES:
            raise ScenarioError(f"unknown object class {self.object_class!r}")
        n = len(self.timestamps)
        if self.positions.shape != (n, 2) or self.attributes.shape != (n, 5) \
                or self.observed_mask.shape != (n,):
            raise ScenarioError(f"track {self.track_id}: inconsistent sequence lengths")

    def __len__(self):
        return len(self.timestamps)

    @property
    def yaw(self) -> np.ndarray:
        return self.attributes[:, 3]

    @property
    def speed(self) -> np.ndarray:
        return np.hypot(self.attributes[:, 0], self.attributes[:, 1])


@dataclass(frozen=True, eq=False)
class MapGrid:
    driveable: np.ndarray
    resolution: float
    origin: tuple[float, float]
    channels: int = 1

    def __post_init__(self):
        mask = np.asarray(self.driveable)
        if mask.ndim != 2:
            raise ScenarioError("driveable mask must be 2-D")
        if not np.isin(mask, (0, 1)).all():
            raise ScenarioError("driveable mask values must be 0 or 1")
        if not self.resolution > 0:
            raise ScenarioError(f"map resolution must be positive, got {self.resolution}")
        object.__setattr__(self, "driveable", mask.astype(np.uint8))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def height(self) -> int:
        return self.driveable.shape[0]

    @property
    def width(self) -> int:
        return self.driveable.shape[1]

    @classmethod
    def all_driveable(cls, positions: np.ndarray, resolution: float = 0.5,
                      margin: float = 20.0) -> "MapGrid":
        lo = positions.min(axis=0) - margin
        hi = positions.max(axis=0) + margin
        shape = np.ceil((hi - lo) / resolution).astype(int)
        return cls(np.ones((shape[1], shape[0]), np.uint8), resolution, tuple(lo))

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Nearest-pixel lookup with coordinates clamped to the grid border."""
        cols = np.floor((points[..., 0] - self.origin[0]) / self.resolution).astype(int)
        rows = np.floor((points[..., 1] - self.origin[1]) / self.resolution).astype(int)
        cols = np.clip(cols, 0, self.width - 1)
        rows = np.clip(rows, 0, self.height - 1)
        return self.driveable[rows, cols]


@dataclass(frozen=True)
class EgoFrame:
    """Rigid transform from a world frame into an ego-centred frame.

    ``anchor`` is the world position of the ego at the anchor step and
    ``heading`` its world yaw. ``world_map`` keeps the untransformed map
    so the inverse can restore it.
    """
    anchor: tuple[float, float]
    heading: float
    world_map: MapGrid | None = None

    def _rot(self, angle):
        c, s = math.cos(angle), math.sin(angle)
        return np.array([[c, -s], [s, c]])

    def to_ego(self, points):
        pts = np.asarray(points, dtype=float)
        return (pts - np.asarray(self.anchor)) @ self._rot(-self.heading).T

    def to_world(self, points):
        pts = np.asarray(points, dtype=float)
        return pts @ self._rot(self.heading).T + np.asarray(self.anchor)

    def rotate_to_ego(self, vectors):
        return np.asarray(vectors, dtype=float) @ self._rot(-self.heading).T

    def rotate_to_world(self, vectors):
        return np.asarray(vectors, dtype=float) @ self._rot(self.heading).T


@dataclass(frozen=True, eq=False)
class Scenario:
    scenario_id: str
    frequency_hz: float
    tracks: tuple[ObjectTrack, ...]
    ego_index: int
    map: MapGrid
    split_index: int
    frame: EgoFrame | None = None

    def __post_init__(self):
        object.__setattr__(self, "tracks", tuple(self.tracks))
        if not self.tracks:
            raise ScenarioError("scenario has no tracks")
        if not 0 <= self.ego_index < len(self.tracks):
            raise NoEgoError(f"ego index {self.ego_index} out of range")
        n = len(self.tracks[0])
        if any(len(t) != n for t in self.tracks):
            raise ScenarioError("all tracks must share the scenario time grid")
        if not 1 <= self.split_index <= n:
            raise ScenarioError(f"split index {self.split_index} outside 1..{n}")

    @property
    def dt(self) -> float:
        return 1.0 / self.frequency_hz

    @property
    def ego(self) -> ObjectTrack:
        return self.tracks[self.ego_index]

    @property
    def num_steps(self) -> int:
        return len(self.tracks[0])

    @property
    def anchor_index(self) -> int:
        return self.split_index - 1


def _fill_track(steps: np.ndarray, xy: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(steps)
    steps, xy = steps[order], xy[order]
    mask = np.zeros(n, bool)
    mask[steps] = True
    grid = np.arange(n)
    filled = np.column_stack([np.interp(grid, steps, xy[:, k]) for k in range(2)])
    return filled, mask


def make_track(track_id: str, object_class: str, steps: Sequence[int], xy,
               num_steps: int, frequency_hz: float,
               true_actions: np.ndarray | None = None) -> ObjectTrack:
    """Place observations on the shared grid, fill gaps and derive attributes."""
    steps = np.asarray(steps, dtype=int)
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    if len(np.unique(steps)) != len(steps):
        raise TimestampError(f"track {track_id}: duplicate timestamps")
    positions, mask = _fill_track(steps, xy, num_steps)
    dt = 1.0 / frequency_hz
    return ObjectTrack(
        track_id=str(track_id),
        object_class=object_class,
        timestamps=np.arange(num_steps) * dt,
        positions=positions,
        attributes=derive_attributes(positions, dt),
        observed_mask=mask,
        true_actions=true_actions,
    )


def _steps_from_times(times: np.ndarray, t0: float, frequency_hz: float) -> np.ndarray:
    scaled = (np.asarray(times, dtype=float) - t0) * frequency_hz
    steps = np.rint(scaled).astype(int)
    worst = np.abs(scaled - steps).max(initial=0.0)
    if worst > _TIMESTAMP_SLACK:
        raise TimestampError(
            f"timestamps deviate from a uniform {frequency_hz} Hz grid "
            f"by {worst / frequency_hz:.4f} s")
    return steps


# ---------------------------------------------------------------- map io

def rle_encode(mask: np.ndarray) -> list[int]:
    """Run lengths of a binary mask, row-major, alternating 0-runs and 1-runs
    starting with a (possibly empty) run of zeros."""
    flat = np.asarray(mask, dtype=np.uint8).ravel()
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [len(flat)]])
    runs = np.diff(bounds).tolist()
    if len(flat) and flat[0] == 1:
        runs.insert(0, 0)
    return runs


def rle_decode(runs: Sequence[int], height: int, width: int) -> np.ndarray:
    runs = np.asarray(runs, dtype=int)
    if (runs < 0).any() or runs.sum() != height * width:
        raise ScenarioError(f"RLE covers {runs.sum()} pixels, expected {height * width}")
    values = np.arange(len(runs)) % 2
    return np.repeat(values, runs).astype(np.uint8).reshape(height, width)


def read_pgm(path, resolution: float | None = None,
             origin: tuple[float, float] | None = None) -> MapGrid:
    """Read a plain (P2) or binary (P5) PGM drivable mask.

    Comment lines ``# resolution: <m/px>`` and ``# origin: <x> <y>`` supply
    grid metadata; explicit arguments take precedence.
    """
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    meta: dict[str, str] = {}
    pos = 0
    # header: magic, width, height, maxval, with comments anywhere in between
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            end = data.index(b"\n", pos)
            key, _, value = data[pos + 1:end].decode().strip().partition(":")
            meta[key.strip().lower()] = value.strip()
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P5":
        if maxval > 255:
            raise ScenarioError("16-bit PGM not supported")
        pixels = np.frombuffer(data[pos + 1:pos + 1 + width * height], dtype=np.uint8)
    elif magic == b"P2":
        body = b" ".join(line.split(b"#")[0] for line in data[pos:].splitlines())
        pixels = np.array(body.split(), dtype=int)
    else:
        raise ScenarioError(f"unsupported PGM magic {magic!r}")
    if pixels.size != width * height:
        raise ScenarioError("PGM pixel count does not match header")
    img = pixels.reshape(height, width)
    if resolution is None:
        resolution = float(meta.get("resolution", 0.5))
    if origin is None:
        origin = tuple(float(v) for v in meta.get("origin", "0 0").split())
    return MapGrid((img > 0).astype(np.uint8), resolution, origin)


def write_pgm(path, image: np.ndarray, resolution: float | None = None,
              origin: tuple[float, float] | None = None) -> None:
    """Write a binary P5 PGM; nonzero pixels become 255."""
    img = np.where(np.asarray(image) > 0, 255, 0).astype(np.uint8)
    header = "P5\n"
    if resolution is not None:
        header += f"# resolution: {resolution!r}\n"
    if origin is not None:
        header += f"# origin: {origin[0]!r} {origin[1]!r}\n"
    header += f"{img.shape[1]} {img.shape[0]}\n255\n"
    Path(path).write_bytes(header.encode() + img.tobytes())


# ---------------------------------------------------------------- loaders

def _load_neutral(path: Path) -> Scenario:
    try:
        doc = json.loads(path.read_text())
        freq = float(doc["frequency_hz"])
        raw_tracks = doc["tracks"]
        ego_id = str(doc["ego_track_id"])
        split = int(doc["split_index"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"{path}: cannot parse scenario JSON ({exc})") from exc
    if not raw_tracks:
        raise ScenarioError(f"{path}: no tracks")
    all_times = [s["t"] for tr in raw_tracks for s in tr["states"]]
    t0 = min(all_times)
    steps_per_track = [_steps_from_times([s["t"] for s in tr["states"]], t0, freq)
                       for tr in raw_tracks]
    n = int(doc.get("num_steps", max(int(s.max()) for s in steps_per_track) + 1))

    tracks, ego_index = [], None
    for tr, steps in zip(raw_tracks, steps_per_track):
        xy = [(s["x"], s["y"]) for s in tr["states"]]
        tracks.append(make_track(tr["track_id"], tr.get("object_class", "other"),
                                 steps, xy, n, freq))
        if str(tr["track_id"]) == ego_id:
            ego_index = len(tracks) - 1
    if ego_index is None:
        raise NoEgoError(f"{path}: ego track {ego_id!r} not present")

    if doc.get("map") is not None:
        m = doc["map"]
        mask = rle_decode(m["driveable_rle"], int(m["height"]), int(m["width"]))
        grid = MapGrid(mask, float(m["resolution"]), tuple(m["origin"]))
    else:
        grid = MapGrid.all_driveable(np.concatenate([t.positions for t in tracks]))
    return Scenario(str(doc["scenario_id"]), freq, tuple(tracks), ego_index, grid, split)


def _load_argoverse(path: Path, frequency_hz: float = 10.0) -> Scenario:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in ARGOVERSE_COLUMNS if c not in header]
        if missing:
            raise MissingColumnError(f"{path}: missing column(s) {', '.join(missing)}")
        try:
            rows = [(float(r["TIMESTAMP"]), r["TRACK_ID"], r["OBJECT_TYPE"],
                     float(r["X"]), float(r["Y"])) for r in reader]
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"{path}: malformed row ({exc})") from exc
    if not rows:
        raise ScenarioError(f"{path}: no rows")

    times = np.array([r[0] for r in rows])
    t0 = times.min()
    steps = _steps_from_times(times, t0, frequency_hz)
    n = max(int(steps.max()) + 1, int(round((HISTORY_SECONDS + FUTURE_SECONDS) * frequency_hz)))

    by_track: dict[str, list[int]] = {}
    types: dict[str, str] = {}
    for i, r in enumerate(rows):
        by_track.setdefault(r[1], []).append(i)
        types[r[1]] = r[2]
    agents = [tid for tid, kind in types.items() if kind == "AGENT"]
    if not agents:
        raise NoEgoError(f"{path}: no AGENT track")

    tracks = []
    for tid in [agents[0]] + [t for t in by_track if t != agents[0]]:
        idx = by_track[tid]
        xy = np.array([(rows[i][3], rows[i][4]) for i in idx])
        cls = "ego" if tid == agents[0] else "other"
        tracks.append(make_track(tid, cls, steps[idx], xy, n, frequency_hz))
    split = int(round(HISTORY_SECONDS * frequency_hz))
    grid = MapGrid.all_driveable(np.concatenate([t.positions for t in tracks]))
    return Scenario(path.stem, frequency_hz, tuple(tracks), 0, grid, split)


def load_scenario(path, format: str = "neutral_json", map_path=None) -> Scenario:
    """Load a scenario file.

    ``format`` is ``"neutral_json"`` or ``"argoverse_csv"``. A PGM passed as
    ``map_path`` replaces whatever drivable mask the file carried (Argoverse
    CSVs carry none, so they default to an all-drivable grid).
    """
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"{path}: no such file")
    if format == "neutral_json":
        scenario = _load_neutral(path)
    elif format == "argoverse_csv":
        scenario = _load_argoverse(path)
    else:
        raise ScenarioError(f"unknown scenario format {format!r}")
    if map_path is not None:
        scenario = replace(scenario, map=read_pgm(map_path))
    return scenario


def scenario_to_dict(scenario: Scenario) -> dict:
    if scenario.frame is not None:
        raise ScenarioError("save the world-frame scenario, not an ego-frame view")
    tracks = []
    for tr in scenario.tracks:
        states = [{"t": float(t), "x": float(p[0]), "y": float(p[1])}
                  for t, p, ok in zip(tr.timestamps, tr.positions, tr.observed_mask) if ok]
        tracks.append({"track_id": tr.track_id, "object_class": tr.object_class,
                       "states": states})
    m = scenario.map
    return {
        "scenario_id": scenario.scenario_id,
        "frequency_hz": scenario.frequency_hz,
        "split_index": scenario.split_index,
        "num_steps": scenario.num_steps,
        "ego_track_id": scenario.ego.track_id,
        "tracks": tracks,
        "map": {"width": m.width, "height": m.height, "resolution": m.resolution,
                "origin": list(m.origin), "driveable_rle": rle_encode(m.driveable)},
    }


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(scenario)))


MANIFEST_NAME = "manifest.json"


def load_scenarios(directory, format: str = "neutral_json") -> list[Scenario]:
    """Every scenario file in ``directory`` (run manifests are skipped)."""
    suffix = ".json" if format == "neutral_json" else ".csv"
    files = sorted(f for f in Path(directory).glob(f"*{suffix}") if f.name != MANIFEST_NAME)
    return [load_scenario(f, format) for f in files]


# ---------------------------------------------------------------- frames

def resample_map(world_map: MapGrid, frame: EgoFrame, size: int,
                  resolution: float) -> MapGrid:
    """World map resampled (nearest pixel) onto an ego-centred square grid."""
    half = size * resolution / 2.0
    centers = (np.arange(size) + 0.5) * resolution - half
    gx, gy = np.meshgrid(centers, centers)
    world_pts = frame.to_world(np.stack([gx, gy], axis=-1))
    return MapGrid(world_map.sample(world_pts), resolution, (-half, -half))


def to_ego_frame(scenario: Scenario, raster_size: int = 128,
                 resolution: float = 0.5) -> Scenario:
    """Re-express a scenario so the ego sits at the origin with heading 0 at
    the last history step.

    The drivable mask is resampled (nearest pixel, border clamped) onto a
    ``raster_size`` square grid centred on the ego; the world map is kept on
    the returned frame for :func:`from_ego_frame`.
    """
    if scenario.frame is not None:
        scenario = from_ego_frame(scenario)
    anchor = scenario.anchor_index
    ego = scenario.ego
    if not ego.observed_mask[anchor]:
        raise ScenarioError(f"{scenario.scenario_id}: ego unobserved at anchor step {anchor}")
    frame = EgoFrame(tuple(ego.positions[anchor]), float(ego.yaw[anchor]), scenario.map)
    tracks = tuple(_transform_track(t, frame.to_ego, frame.rotate_to_ego, -frame.heading)
                   for t in scenario.tracks)
    grid = resample_map(scenario.map, frame, raster_size, resolution)
    return replace(scenario, tracks=tracks, map=grid, frame=frame)


def from_ego_frame(scenario: Scenario) -> Scenario:
    frame = scenario.frame
    if frame is None:
        return scenario
    tracks = tuple(_transform_track(t, frame.to_world, frame.rotate_to_world, frame.heading)
                   for t in scenario.tracks)
    return replace(scenario, tracks=tracks, map=frame.world_map, frame=None)


def _transform_track(track: ObjectTrack, move, rotate, dyaw: float) -> ObjectTrack:
    attrs = track.attributes.copy()
    attrs[:, :2] = rotate(attrs[:, :2])
    attrs[:, 3] = wrap_angle(attrs[:, 3] + dyaw)
    return replace(track, positions=move(track.positions), attributes=attrs)


def history_view(scenario: Scenario, start: int, stop: int) -> Scenario:
    """Tracks cut to steps ``[start, stop)`` with attributes re-derived from
    those positions only, so nothing after ``stop`` leaks into them."""
    dt = scenario.dt
    tracks = []
    for t in scenario.tracks:
        pos = t.positions[start:stop]
        tracks.append(replace(
            t,
            timestamps=np.arange(stop - start) * dt,
            positions=pos,
            attributes=derive_attributes(pos, dt),
            observed_mask=t.observed_mask[start:stop],
            true_actions=None,
        ))
    return replace(scenario, tracks=tuple(tracks), split_index=stop - start)


def observed_tracks_at(scenario: Scenario, step: int) -> list[int]:
    """Indices of tracks observed at ``step``, ego first."""
    order = [scenario.ego_index] + [i for i in range(len(scenario.tracks))
                                    if i != scenario.ego_index]
    return [i for i in order if scenario.tracks[i].observed_mask[step]]
