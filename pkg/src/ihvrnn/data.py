"""Multi-agent trajectory data: parsing, windowing, grouping, normalization.

Two on-disk formats are supported:

* pedestrian TSV — one record per line, ``frame_index agent_id x y``,
  whitespace separated, ``#`` starts a comment line;
* team track file — a JSON document with keys ``scene_id``,
  ``frame_rate_hz``, ``teams`` (two arrays of agent ids) and ``frames``
  (array of ``{"frame": int, "positions": {agent_id: [x, y]}}``), reals
  printed with 17 significant digits so a write/read round trip is
  bit-exact.

All operations here are pure and hold no shared mutable state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError

PED_FRAME_RATE_HZ = 2.5   # 0.4 s per frame
SOCCER_FRAME_RATE_HZ = 10.0


@dataclass
class Box:
    """Axis-aligned arena bounds in meters."""

    min_xy: np.ndarray
    max_xy: np.ndarray

    def __post_init__(self):
        self.min_xy = np.asarray(self.min_xy, dtype=np.float64)
        self.max_xy = np.asarray(self.max_xy, dtype=np.float64)

    def extent(self) -> np.ndarray:
        return self.max_xy - self.min_xy

    def contains(self, xy: np.ndarray) -> bool:
        return bool(np.all(xy >= self.min_xy - 1e-9) and np.all(xy <= self.max_xy + 1e-9))


@dataclass
class AgentTrack:
    """Timestamped 2-D positions of one agent."""

    agent_id: int
    frame_idx: np.ndarray      # [m] int64, strictly increasing
    xy: np.ndarray             # [m, 2] float64, finite
    static_group: int | None = None

    def __post_init__(self):
        self.frame_idx = np.asarray(self.frame_idx, dtype=np.int64)
        self.xy = np.asarray(self.xy, dtype=np.float64)
        if self.xy.ndim != 2 or self.xy.shape[1] != 2 or len(self.frame_idx) != len(self.xy):
            raise DataError(f"agent {self.agent_id}: frames/positions shape mismatch")
        if len(self.frame_idx) > 1 and not np.all(np.diff(self.frame_idx) > 0):
            raise DataError(f"agent {self.agent_id}: frame indices not strictly increasing")
        if not np.all(np.isfinite(self.xy)):
            raise DataError(f"agent {self.agent_id}: non-finite position")

    @property
    def n_frames(self) -> int:
        return len(self.frame_idx)


@dataclass
class Scene:
    """An unordered set of agent tracks sharing a frame clock."""

    scene_id: str
    frame_rate_hz: float
    agents: list[AgentTrack]
    arena: Box | None = None

    def __post_init__(self):
        if self.frame_rate_hz <= 0:
            raise DataError(f"scene {self.scene_id}: frame_rate_hz must be > 0")
        ids = [a.agent_id for a in self.agents]
        if len(ids) != len(set(ids)):
            raise DataError(f"scene {self.scene_id}: duplicate agent ids")

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def frame_list(self) -> np.ndarray:
        """Sorted unique frame indices observed anywhere in the scene."""
        if not self.agents:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate([a.frame_idx for a in self.agents]))


@dataclass
class GroupAssignment:
    """Per-timestep group membership for the agents of one window."""

    n_groups: int
    membership: np.ndarray     # [T, n] int64 in [0, n_groups)
    active: np.ndarray         # [T, n_groups] bool

    def __post_init__(self):
        self.membership = np.asarray(self.membership, dtype=np.int64)
        self.active = np.asarray(self.active, dtype=bool)
        if self.membership.min(initial=0) < 0 or self.membership.max(initial=0) >= self.n_groups:
            raise DataError("group index out of range")
        T, n = self.membership.shape
        if self.active.shape != (T, self.n_groups):
            raise DataError("active flags shape mismatch")

    @classmethod
    def from_membership(cls, membership: np.ndarray, n_groups: int) -> "GroupAssignment":
        membership = np.asarray(membership, dtype=np.int64)
        T = membership.shape[0]
        active = np.zeros((T, n_groups), dtype=bool)
        for t in range(T):
            counts = np.bincount(membership[t], minlength=n_groups)
            active[t] = counts > 0
        return cls(n_groups, membership, active)


@dataclass
class NormalizeTransform:
    """Shift-and-scale map; invert() recovers original units."""

    shift: np.ndarray          # [2]
    scale: float               # > 0

    def __post_init__(self):
        self.shift = np.asarray(self.shift, dtype=np.float64)

    def apply(self, xy: np.ndarray) -> np.ndarray:
        return (xy - self.shift) / self.scale

    def invert(self, xy: np.ndarray) -> np.ndarray:
        return xy * self.scale + self.shift


@dataclass
class SegmentWindow:
    """One (observation, prediction) sample with aligned agent ordering."""

    obs: np.ndarray            # [n, T_obs, 2]
    pred: np.ndarray           # [n, T_pre, 2]
    agent_ids: list[int]
    groups: GroupAssignment    # over the full T_obs + T_pre horizon
    normalizer: NormalizeTransform | None = None
    frame_rate_hz: float = PED_FRAME_RATE_HZ
    start_frame: int = 0
    scene_id: str = ""
    arena: Box | None = None

    @property
    def n_agents(self) -> int:
        return self.obs.shape[0]

    @property
    def t_obs(self) -> int:
        return self.obs.shape[1]

    @property
    def t_pre(self) -> int:
        return self.pred.shape[1]

    def full(self) -> np.ndarray:
        """Observation and prediction concatenated along time: [n, T, 2]."""
        return np.concatenate([self.obs, self.pred], axis=1)


# ---------------------------------------------------------------------------
# pedestrian TSV

def load_ped_tsv(path: str | Path) -> list[Scene]:
    """Parse one pedestrian TSV file into a single-scene list."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    seen: dict[tuple[int, int], int] = {}
    by_agent: dict[int, list[tuple[int, float, float]]] = {}
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) != 4:
                raise ParseError(f"{path.name}: line {lineno}: expected 4 fields, got {len(parts)}")
            try:
                frame = int(parts[0])
                agent = int(parts[1])
                x = float(parts[2])
                y = float(parts[3])
            except ValueError as exc:
                raise ParseError(f"{path.name}: line {lineno}: {exc}") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise DataError(f"{path.name}: line {lineno}: non-finite position")
            key = (frame, agent)
            if key in seen:
                raise DataError(
                    f"{path.name}: line {lineno}: duplicate (frame, agent) = {key}, "
                    f"first seen at line {seen[key]}")
            seen[key] = lineno
            by_agent.setdefault(agent, []).append((frame, x, y))
    if not by_agent:
        raise DataError(f"{path.name}: no tracks")
    agents = []
    for agent_id in sorted(by_agent):
        rows = sorted(by_agent[agent_id], key=lambda r: r[0])
        agents.append(AgentTrack(
            agent_id=agent_id,
            frame_idx=np.array([r[0] for r in rows], dtype=np.int64),
            xy=np.array([[r[1], r[2]] for r in rows], dtype=np.float64),
        ))
    return [Scene(scene_id=path.stem, frame_rate_hz=PED_FRAME_RATE_HZ, agents=agents)]


# ---------------------------------------------------------------------------
# team track file (JSON)

def _fmt_real(x: float) -> str:
    """17 significant digits: enough for an exact float64 round trip."""
    return f"{float(x):.17g}"


def save_soccer_json(scene: Scene, path: str | Path) -> None:
    """Write a Scene in the team track format; inverse of load_soccer_json."""
    path = Path(path)
    teams: list[list[int]] = [[], []]
    for a in scene.agents:
        if a.static_group not in (0, 1):
            raise DataError(f"agent {a.agent_id}: static_group must be 0 or 1 for team export")
        teams[a.static_group].append(a.agent_id)
    frames = scene.frame_list()
    track_of = {a.agent_id: a for a in scene.agents}
    for a in scene.agents:
        if a.n_frames != len(frames):
            raise DataError(f"agent {a.agent_id}: missing frames; team export needs full presence")
    lines = ["{"]
    lines.append(f'  "scene_id": {json.dumps(scene.scene_id)},')
    lines.append(f'  "frame_rate_hz": {_fmt_real(scene.frame_rate_hz)},')
    lines.append(f'  "teams": [{json.dumps(teams[0])}, {json.dumps(teams[1])}],')
    if scene.arena is not None:
        lo, hi = scene.arena.min_xy, scene.arena.max_xy
        lines.append('  "arena": [[{}, {}], [{}, {}]],'.format(
            _fmt_real(lo[0]), _fmt_real(lo[1]), _fmt_real(hi[0]), _fmt_real(hi[1])))
    lines.append('  "frames": [')
    for j, frame in enumerate(frames):
        pos_items = []
        for team in teams:
            for agent_id in team:
                xy = track_of[agent_id].xy[j]
                pos_items.append(f'"{agent_id}": [{_fmt_real(xy[0])}, {_fmt_real(xy[1])}]')
        tail = "," if j < len(frames) - 1 else ""
        lines.append(f'    {{"frame": {int(frame)}, "positions": {{{", ".join(pos_items)}}}}}{tail}')
    lines.append("  ]")
    lines.append("}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_soccer_json(path: str | Path) -> Scene:
    """Parse a team track file into a Scene with static_group 0/1 per agent."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path.name}: line {exc.lineno}: {exc.msg}") from None
    allowed = {"scene_id", "frame_rate_hz", "teams", "frames", "arena"}
    required = {"scene_id", "frame_rate_hz", "teams", "frames"}
    if not isinstance(doc, dict):
        raise DataError(f"{path.name}: top level must be an object")
    missing = required - doc.keys()
    if missing:
        raise DataError(f"{path.name}: missing keys {sorted(missing)}")
    unknown = doc.keys() - allowed
    if unknown:
        raise DataError(f"{path.name}: unknown keys {sorted(unknown)}")
    teams = doc["teams"]
    if (not isinstance(teams, list) or len(teams) != 2
            or not all(isinstance(t, list) for t in teams)):
        raise DataError(f"{path.name}: teams must be 2 arrays of agent ids")
    roster = [int(i) for i in teams[0]] + [int(i) for i in teams[1]]
    if len(roster) != len(set(roster)):
        raise DataError(f"{path.name}: duplicate agent id across teams")
    frames = doc["frames"]
    if not isinstance(frames, list) or not frames:
        raise DataError(f"{path.name}: no frames")
    frame_idx = np.zeros(len(frames), dtype=np.int64)
    xy = np.zeros((len(roster), len(frames), 2), dtype=np.float64)
    col = {agent_id: i for i, agent_id in enumerate(roster)}
    for j, rec in enumerate(frames):
        if not isinstance(rec, dict) or "frame" not in rec or "positions" not in rec:
            raise DataError(f"{path.name}: frame record {j} malformed")
        frame_idx[j] = int(rec["frame"])
        if j > 0 and frame_idx[j] != frame_idx[j - 1] + 1:
            raise DataError(
                f"{path.name}: missing frame between {frame_idx[j - 1]} and {frame_idx[j]}")
        positions = rec["positions"]
        got = {int(k) for k in positions}
        if got != set(roster):
            raise DataError(
                f"{path.name}: frame {frame_idx[j]}: team roster changed "
                f"(expected {len(roster)} agents, got {len(got)})")
        for key, val in positions.items():
            if not isinstance(val, list) or len(val) != 2:
                raise DataError(f"{path.name}: frame {frame_idx[j]}: agent {key}: bad position")
            xy[col[int(key)], j] = [float(val[0]), float(val[1])]
    if not np.all(np.isfinite(xy)):
        raise DataError(f"{path.name}: non-finite position")
    arena = None
    if "arena" in doc:
        box = doc["arena"]
        arena = Box(np.asarray(box[0], dtype=np.float64), np.asarray(box[1], dtype=np.float64))
    agents = []
    for agent_id in roster:
        agents.append(AgentTrack(
            agent_id=agent_id,
            frame_idx=frame_idx.copy(),
            xy=xy[col[agent_id]],
            static_group=0 if agent_id in set(int(i) for i in teams[0]) else 1,
        ))
    return Scene(scene_id=str(doc["scene_id"]), frame_rate_hz=float(doc["frame_rate_hz"]),
                 agents=agents, arena=arena)


# ---------------------------------------------------------------------------
# windowing / grouping / normalization

def window_segments(scene: Scene, t_obs: int, t_pre: int, stride: int) -> list[SegmentWindow]:
    """Sliding windows over the scene's frame sequence.

    A window is emitted only when at least two agents are present at every
    one of its T_obs + T_pre frames; agents with any gap inside the window
    are dropped from that window.
    """
    if t_obs < 1 or t_pre < 1 or stride < 1:
        raise DataError("t_obs, t_pre and stride must all be >= 1")
    frames = scene.frame_list()
    horizon = t_obs + t_pre
    n = scene.n_agents
    if n == 0 or len(frames) < horizon:
        return []
    col_of = {int(f): j for j, f in enumerate(frames)}
    pos = np.full((n, len(frames), 2), np.nan)
    present = np.zeros((n, len(frames)), dtype=bool)
    for i, track in enumerate(scene.agents):
        cols = np.array([col_of[int(f)] for f in track.frame_idx], dtype=np.int64)
        pos[i, cols] = track.xy
        present[i, cols] = True

    static = [a.static_group for a in scene.agents]
    has_static = all(g is not None for g in static)

    windows: list[SegmentWindow] = []
    for start in range(0, len(frames) - horizon + 1, stride):
        keep = np.where(present[:, start:start + horizon].all(axis=1))[0]
        if len(keep) < 2:
            continue
        block = pos[keep, start:start + horizon]
        if has_static:
            membership = np.tile(np.array([static[i] for i in keep], dtype=np.int64), (horizon, 1))
            groups = GroupAssignment.from_membership(membership, n_groups=2)
        else:
            groups = GroupAssignment.from_membership(
                np.zeros((horizon, len(keep)), dtype=np.int64), n_groups=1)
        windows.append(SegmentWindow(
            obs=block[:, :t_obs].copy(),
            pred=block[:, t_obs:].copy(),
            agent_ids=[scene.agents[i].agent_id for i in keep],
            groups=groups,
            frame_rate_hz=scene.frame_rate_hz,
            start_frame=int(frames[start]),
            scene_id=scene.scene_id,
            arena=scene.arena,
        ))
    return windows


def heading_quadrant(heading: np.ndarray) -> int:
    """Quadrant index of a heading vector: 0 = (+x,+y), counterclockwise."""
    theta = math.atan2(float(heading[1]), float(heading[0])) % (2.0 * math.pi)
    return min(3, int(theta / (0.5 * math.pi)))


def assign_groups_dynamic(window: SegmentWindow, n_groups: int = 4,
                          min_speed: float = 0.1) -> GroupAssignment:
    """Heading-quadrant membership re-evaluated at every timestep.

    The heading at t is the position difference over one frame (forward
    difference at t = 0).  Agents slower than ``min_speed`` (m/s) keep
    their previous group; agents that start slow go to group 0.
    """
    xy = window.full()
    n, T, _ = xy.shape
    membership = np.zeros((T, n), dtype=np.int64)
    for i in range(n):
        prev = 0
        for t in range(T):
            if t == 0:
                heading = xy[i, 1] - xy[i, 0]
            else:
                heading = xy[i, t] - xy[i, t - 1]
            speed = float(np.linalg.norm(heading)) * window.frame_rate_hz
            if speed < min_speed:
                membership[t, i] = prev
            else:
                membership[t, i] = heading_quadrant(heading)
            prev = membership[t, i]
    return GroupAssignment.from_membership(membership, n_groups=n_groups)


def normalize(window: SegmentWindow) -> tuple[SegmentWindow, NormalizeTransform]:
    """Shift by the observation mean and divide by the pooled coordinate std.

    The same transform is applied to obs and pred and stored on the window
    so metrics can be computed in original units.
    """
    if window.n_agents == 0:
        raise DataError("cannot normalize an empty window")
    shift = window.obs.reshape(-1, 2).mean(axis=0)
    scale = max(1e-6, float(window.obs.reshape(-1).std()))
    transform = NormalizeTransform(shift=shift, scale=scale)
    out = SegmentWindow(
        obs=transform.apply(window.obs),
        pred=transform.apply(window.pred),
        agent_ids=list(window.agent_ids),
        groups=window.groups,
        normalizer=transform,
        frame_rate_hz=window.frame_rate_hz,
        start_frame=window.start_frame,
        scene_id=window.scene_id,
        arena=window.arena,
    )
    return out, transform
