"""Synthetic scene generators whose ground truth contains exactly the
structure the model family targets: per-team latent regimes where one
team's regime best-responds to the other's previous regime, driving member
motion toward regime-specific formation targets.

Generators are pure functions of their config (seed included); all
randomness flows through named substreams so the outputs are stable across
runs and platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import AgentTrack, Box, Scene, window_segments
from .errors import ConfigError, DataError
from .rng import RNG_ALGORITHM, substream

DEFAULT_ARENA = ((0.0, 0.0), (30.0, 20.0))
CROSSING_ARENA = ((0.0, 0.0), (28.0, 8.0))


@dataclass
class TeamGameConfig:
    """Two teams of point agents chasing regime-dependent formations."""

    n_per_team: int = 5
    T: int = 80
    regime_count: int = 3
    switch_prob: float = 0.1
    coupling: float = 1.0          # P(B best-responds to A's previous regime)
    member_noise: float = 0.2      # per-step position noise std (m)
    seed: int = 0
    approach_rate: float = 0.1     # first-order pull toward the target
    arena: tuple = DEFAULT_ARENA

    def validate(self) -> None:
        if self.n_per_team < 2:
            raise ConfigError("team_game.n_per_team: must be >= 2")
        if self.T < 2:
            raise ConfigError("team_game.T: must be >= 2")
        if self.regime_count < 2:
            raise ConfigError("team_game.regime_count: must be >= 2")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise ConfigError("team_game.switch_prob: must be in [0, 1]")
        if not 0.0 <= self.coupling <= 1.0:
            raise ConfigError("team_game.coupling: must be in [0, 1]")
        if self.member_noise < 0:
            raise ConfigError("team_game.member_noise: must be >= 0")
        if not 0.0 < self.approach_rate <= 1.0:
            raise ConfigError("team_game.approach_rate: must be in (0, 1]")


@dataclass
class ScenarioTruth:
    """The latent structure behind one generated team-game scene."""

    strategy_sequence: np.ndarray     # [T, 2] regime index per (time, team)
    formation_targets: np.ndarray     # [2, R, n_per_team, 2] meters
    approach_rate: float
    regime_count: int

    def best_response(self, regime: int) -> int:
        return (int(regime) + 1) % self.regime_count


def best_response(regime: int, regime_count: int) -> int:
    """The fixed counter-strategy permutation: regime r -> (r + 1) mod R."""
    return (int(regime) + 1) % regime_count


def _markov_step(r: int, switch_prob: float, regime_count: int,
                 rng: np.random.Generator) -> int:
    if rng.uniform() < switch_prob:
        return (r + 1 + int(rng.integers(regime_count - 1))) % regime_count
    return r


def gen_team_game(config: TeamGameConfig) -> tuple[Scene, ScenarioTruth]:
    """Generate one scene plus its latent truth, deterministically."""
    config.validate()
    lo = np.array(config.arena[0], dtype=np.float64)
    hi = np.array(config.arena[1], dtype=np.float64)
    ext = hi - lo
    n, T, R = config.n_per_team, config.T, config.regime_count

    rng_targets = substream(config.seed, "scenario", (0,))
    rng_init = substream(config.seed, "scenario", (1,))
    rng_a = substream(config.seed, "scenario", (2,))
    rng_b = substream(config.seed, "scenario", (3,))
    rng_noise = substream(config.seed, "scenario", (4,))

    # Formation targets and start positions stay inside a 10% inset.
    targets = lo + 0.1 * ext + rng_targets.uniform(size=(2, R, n, 2)) * 0.8 * ext
    pos = np.zeros((2, n, T, 2))
    pos[:, :, 0] = lo + 0.1 * ext + rng_init.uniform(size=(2, n, 2)) * 0.8 * ext

    regimes = np.zeros((T, 2), dtype=np.int64)
    regimes[0, 0] = int(rng_a.integers(R))
    regimes[0, 1] = int(rng_b.integers(R))
    for t in range(1, T):
        regimes[t, 0] = _markov_step(regimes[t - 1, 0], config.switch_prob, R, rng_a)
        if rng_b.uniform() < config.coupling:
            regimes[t, 1] = best_response(regimes[t - 1, 0], R)
        else:
            regimes[t, 1] = _markov_step(regimes[t - 1, 1], config.switch_prob, R, rng_b)

    alpha = config.approach_rate
    for t in range(1, T):
        noise = rng_noise.standard_normal(size=(2, n, 2)) * config.member_noise
        for team in (0, 1):
            goal = targets[team, regimes[t, team]]
            step = pos[team, :, t - 1] + alpha * (goal - pos[team, :, t - 1]) + noise[team]
            pos[team, :, t] = np.clip(step, lo, hi)

    frame_idx = np.arange(T, dtype=np.int64)
    agents = []
    for team in (0, 1):
        for i in range(n):
            agents.append(AgentTrack(agent_id=team * n + i, frame_idx=frame_idx.copy(),
                                     xy=pos[team, i].copy(), static_group=team))
    scene = Scene(scene_id=f"team_game_seed{config.seed}", frame_rate_hz=10.0,
                  agents=agents, arena=Box(lo, hi))
    truth = ScenarioTruth(strategy_sequence=regimes, formation_targets=targets,
                          approach_rate=alpha, regime_count=R)
    return scene, truth


@dataclass
class CrossingConfig:
    """Two opposing pedestrian streams with soft pairwise avoidance."""

    n_per_stream: int = 4
    T: int = 60
    speed: float = 1.0             # desired speed (m/s)
    avoid_strength: float = 1.5    # repulsion velocity scale (m/s)
    avoid_radius: float = 0.7      # repulsion e-folding distance (m)
    member_noise: float = 0.02     # per-step position noise std (m)
    seed: int = 0
    frame_rate_hz: float = 2.5
    arena: tuple = CROSSING_ARENA

    def validate(self) -> None:
        if self.n_per_stream < 1:
            raise ConfigError("crossing.n_per_stream: must be >= 1")
        if self.T < 2:
            raise ConfigError("crossing.T: must be >= 2")
        if self.speed <= 0:
            raise ConfigError("crossing.speed: must be > 0")
        if self.avoid_strength < 0 or self.avoid_radius <= 0:
            raise ConfigError("crossing.avoid_*: strength >= 0, radius > 0")


def gen_crossing_flows(config: CrossingConfig) -> Scene:
    """East- and west-bound walkers in staggered lanes, deterministic."""
    config.validate()
    lo = np.array(config.arena[0], dtype=np.float64)
    hi = np.array(config.arena[1], dtype=np.float64)
    n, T = config.n_per_stream, config.T
    dt = 1.0 / config.frame_rate_hz
    rng_noise = substream(config.seed, "scenario", (10,))
    rng_lane = substream(config.seed, "scenario", (11,))

    # Opposing lanes are vertically interleaved with a 0.5 m offset plus a
    # small seeded jitter, so streams pass each other rather than collide.
    lane_span = hi[1] - lo[1] - 2.5
    pos = np.zeros((2 * n, T, 2))
    heading = np.zeros(2 * n)
    for i in range(n):
        frac = i / max(1, n - 1) if n > 1 else 0.5
        y = lo[1] + 1.0 + lane_span * frac + rng_lane.uniform(-0.1, 0.1)
        pos[i, 0] = (lo[0] + 1.0 + 0.1 * i, y)
        heading[i] = 1.0
    for i in range(n):
        frac = i / max(1, n - 1) if n > 1 else 0.5
        y = lo[1] + 1.5 + lane_span * frac + rng_lane.uniform(-0.1, 0.1)
        pos[n + i, 0] = (hi[0] - 1.0 - 0.1 * i, y)
        heading[n + i] = -1.0

    for t in range(1, T):
        noise = rng_noise.standard_normal(size=(2 * n, 2)) * config.member_noise
        prev = pos[:, t - 1]
        vel = np.zeros((2 * n, 2))
        vel[:, 0] = heading * config.speed
        if config.avoid_strength > 0:
            delta = prev[:, None, :] - prev[None, :, :]
            dist = np.linalg.norm(delta, axis=-1)
            np.fill_diagonal(dist, np.inf)
            push = config.avoid_strength * np.exp(-dist / config.avoid_radius)
            vel += (delta / dist[:, :, None] * push[:, :, None]).sum(axis=1)
        pos[:, t] = np.clip(prev + vel * dt + noise, lo, hi)

    frame_idx = np.arange(T, dtype=np.int64)
    agents = [AgentTrack(agent_id=i, frame_idx=frame_idx.copy(), xy=pos[i].copy())
              for i in range(2 * n)]
    return Scene(scene_id=f"crossing_seed{config.seed}", frame_rate_hz=config.frame_rate_hz,
                 agents=agents, arena=Box(lo, hi))


# ---------------------------------------------------------------------------
# oracle predictor

def oracle_rollout(window, truth: ScenarioTruth, config: TeamGameConfig,
                   t_pre: int) -> np.ndarray:
    """Expected future positions given the true regimes and dynamics.

    Propagates the noiseless first-order update from the last observed
    positions, reading the true regime at each future frame.  Returns
    [n, t_pre, 2] in raw meters.
    """
    lo = np.array(config.arena[0])
    hi = np.array(config.arena[1])
    n_team = config.n_per_team
    x = window.obs[:, -1].copy()
    out = np.zeros((window.n_agents, t_pre, 2))
    for j in range(t_pre):
        t_abs = window.start_frame + window.t_obs + j
        goals = np.zeros_like(x)
        for row, agent_id in enumerate(window.agent_ids):
            team = 0 if agent_id < n_team else 1
            member = agent_id - team * n_team
            goals[row] = truth.formation_targets[team, truth.strategy_sequence[t_abs, team], member]
        x = np.clip(x + truth.approach_rate * (goals - x), lo, hi)
        out[:, j] = x
    return out


def oracle_team_game_mse(config: TeamGameConfig, t_obs: int, t_pre: int,
                         n_windows: int, stride: int = 1,
                         per_window: bool = False):
    """Held-out squared error of the regime-informed predictor.

    This is the error floor no learned model should undercut beyond noise.
    Values are arena-normalized (positions divided by the arena extent)
    to match the team-sports evaluation metric.
    """
    scene, truth = gen_team_game(config)
    windows = window_segments(scene, t_obs, t_pre, stride)
    if not windows:
        raise DataError("oracle: the configured scene yields no windows")
    ext = np.array(config.arena[1]) - np.array(config.arena[0])
    errs = []
    for w in windows[:n_windows]:
        pred = oracle_rollout(w, truth, config, t_pre)
        diff = (pred - w.pred) / ext
        errs.append(float((diff ** 2).sum(axis=-1).mean()))
    errs = np.array(errs)
    if per_window:
        return errs
    return float(errs.mean())


# ---------------------------------------------------------------------------
# sidecar serialization

def save_truth_json(truth: ScenarioTruth, config: TeamGameConfig, path: str | Path) -> None:
    doc = {
        "strategy_sequence": truth.strategy_sequence.tolist(),
        "formation_targets": truth.formation_targets.tolist(),
        "approach_rate": truth.approach_rate,
        "regime_count": truth.regime_count,
        "best_response": "increment_mod",
        "rng_algorithm": RNG_ALGORITHM,
        "config": {
            "n_per_team": config.n_per_team, "T": config.T,
            "regime_count": config.regime_count, "switch_prob": config.switch_prob,
            "coupling": config.coupling, "member_noise": config.member_noise,
            "seed": config.seed, "approach_rate": config.approach_rate,
            "arena": [list(config.arena[0]), list(config.arena[1])],
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_truth_json(path: str | Path) -> tuple[ScenarioTruth, TeamGameConfig]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    truth = ScenarioTruth(
        strategy_sequence=np.asarray(doc["strategy_sequence"], dtype=np.int64),
        formation_targets=np.asarray(doc["formation_targets"], dtype=np.float64),
        approach_rate=float(doc["approach_rate"]),
        regime_count=int(doc["regime_count"]),
    )
    c = doc["config"]
    config = TeamGameConfig(
        n_per_team=c["n_per_team"], T=c["T"], regime_count=c["regime_count"],
        switch_prob=c["switch_prob"], coupling=c["coupling"],
        member_noise=c["member_noise"], seed=c["seed"],
        approach_rate=c["approach_rate"],
        arena=(tuple(c["arena"][0]), tuple(c["arena"][1])),
    )
    return truth, config
