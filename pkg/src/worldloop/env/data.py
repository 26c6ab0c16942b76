"""Dataset generation and manifest I/O.

Frames are 8-bit grayscale PNGs named ``ep{E:04}_f{T:04}.png`` under
``frames/``; the manifest is JSON Lines, one row per frame:
``{episode, t, frame_path, speed, steer, split}`` with full-precision
decimal numbers. Regeneration from (seed, config) is bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import EnvConfig
from .geometry import generate_track
from .raster import render
from .vehicle import ControlSignal, EgoState, ExpertController, VisionActionPair, step


@dataclass(frozen=True)
class Row:
    episode: int
    t: int
    frame_path: str
    speed: float
    steer: float
    split: str


def episode_seed(dataset_seed: int, episode: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([0x65700000, dataset_seed, episode])


def split_for_episode(episode: int) -> str:
    """Fixed 90/10 split: every tenth episode is validation."""
    return "val" if episode % 10 == 9 else "train"


def generate_dataset(
    out_dir,
    n_episodes: int,
    episode_len: int,
    seed: int,
    cfg: EnvConfig | None = None,
) -> Path:
    """Run the expert on fresh tracks and write frames plus manifest.

    Returns the manifest path. episode_len must be at least 8 (a training
    clip needs 4 history and 4 future frames).
    """
    if episode_len < 8:
        raise ValueError(f"episode_len must be >= 8, got {episode_len}")
    cfg = cfg or EnvConfig()
    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as mf:
        for e in range(n_episodes):
            track_seed = int(episode_seed(seed, e).generate_state(1)[0] % (2**31))
            track = generate_track(track_seed, cfg)
            x, y, h = track.pose(cfg.start_offset)
            state = EgoState(x, y, h, cfg.start_offset)
            expert = ExpertController(track, cfg)
            split = split_for_episode(e)
            for t in range(episode_len):
                action = expert.action(state)
                frame = render(state, track, cfg)
                name = f"ep{e:04d}_f{t:04d}.png"
                save_frame(frames_dir / name, frame)
                row = {
                    "episode": e,
                    "t": t,
                    "frame_path": f"frames/{name}",
                    "speed": action.speed,
                    "steer": action.steer,
                    "split": split,
                }
                mf.write(json.dumps(row) + "\n")
                state, _ = step(state, action, cfg.dt, cfg)
    return manifest_path


def save_frame(path, frame: np.ndarray):
    Image.fromarray(np.round(frame * 255.0).astype(np.uint8), mode="L").save(path)


def load_frame(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def load_manifest(path) -> list[Row]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            rows.append(Row(d["episode"], d["t"], d["frame_path"], d["speed"], d["steer"], d["split"]))
    return rows


class EpisodeIndex:
    """Manifest rows grouped by episode, with window helpers."""

    def __init__(self, manifest_path):
        self.manifest_path = Path(manifest_path)
        self.base_dir = self.manifest_path.parent
        self.rows = load_manifest(self.manifest_path)
        self.by_episode: dict[int, list[Row]] = {}
        for row in self.rows:
            self.by_episode.setdefault(row.episode, []).append(row)
        for ep, ep_rows in self.by_episode.items():
            ep_rows.sort(key=lambda r: r.t)

    def episodes(self, split: str | None = None) -> list[int]:
        return sorted(
            e for e, rows in self.by_episode.items() if split is None or rows[0].split == split
        )

    def windows(self, history: int = 3, future: int = 0, split: str | None = None):
        """(episode, t) pairs where t has ``history`` frames before it and
        ``future`` frames after it inside the episode."""
        out = []
        for e in self.episodes(split):
            n = len(self.by_episode[e])
            for t in range(history, n - future):
                out.append((e, t))
        return out

    def frame(self, row: Row) -> np.ndarray:
        return load_frame(self.base_dir / row.frame_path)

    def action(self, row: Row) -> ControlSignal:
        return ControlSignal(row.speed, row.steer)

    def pair(self, row: Row) -> VisionActionPair:
        return VisionActionPair(self.frame(row), self.action(row), row.t)

    def window_pairs(self, episode: int, t: int, history: int = 3):
        """history VisionActionPairs ending just before t, plus row at t."""
        ep_rows = self.by_episode[episode]
        assert ep_rows[t].t == t, "episode rows must be dense in t"
        pairs = [self.pair(ep_rows[i]) for i in range(t - history, t)]
        return pairs, ep_rows[t]
