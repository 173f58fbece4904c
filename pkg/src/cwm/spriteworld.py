"""Deterministic synthetic sprite videos with exact flow, masks and contact labels.

Episodes are pure functions of ``(WorldConfig, episode_index)``: the per-episode
seed is ``mix64(config.seed, index)``, so any episode can be regenerated on its
own, in any order, on any worker.

Ground-truth flow for transition ``t -> t+1`` is anchored on frame ``t+1``
pixels and holds the displacement that brought the content there, so
``frame[t+1][q] == frame[t][q - flow[q]]`` wherever the flow is defined.
Pixels of frame ``t+1`` with no visible source in frame ``t`` (disocclusions)
are NaN.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
RED = (0.90, 0.10, 0.10)
YELLOW = (0.95, 0.90, 0.10)
DISTRACTOR_COLORS = (
    (0.10, 0.30, 0.90),
    (0.10, 0.75, 0.20),
    (0.10, 0.80, 0.85),
    (0.75, 0.20, 0.80),
    (0.95, 0.95, 0.95),
)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def mix64(seed: int, index: int) -> int:
    """Order-independent 64-bit seed for stream ``index`` under ``seed``.

    ``splitmix64(splitmix64(seed) ^ index)``; both stages are the SplitMix64
    finalizer, a bijection on 64-bit integers.
    """
    return splitmix64(splitmix64(seed & MASK64) ^ (index & MASK64))


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    size: int = 64
    sprite_count: tuple[int, int] = (2, 3)
    shapes: tuple[str, ...] = ("rect", "disc")
    sprite_size: tuple[int, int] = (12, 20)
    speed: tuple[int, int] = (0, 4)
    background: str = "noise"
    frames: int = 8
    observed: int = 4
    patch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.speed[1] > self.patch_size:
            raise ValueError("max speed must not exceed the patch size")
        if self.sprite_size[1] >= self.size:
            raise ValueError("sprites must fit inside the canvas")
        if not 1 <= self.observed < self.frames:
            raise ValueError("observed window must be shorter than the episode")
        if self.sprite_count[0] < 2:
            raise ValueError("every episode carries the red/yellow query pair")
        if self.background not in ("noise", "solid"):
            raise ValueError(f"unknown background mode {self.background!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        for k in ("sprite_count", "sprite_size", "speed", "shapes"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Sprite:
    shape: str
    height: int
    width: int
    color: tuple[float, float, float]
    depth: int
    positions: np.ndarray  # (T, 2) integer top-left (row, col)
    velocities: np.ndarray  # (T, 2) velocity after each frame's update


@dataclass
class Episode:
    index: int
    seed: int
    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1], multiples of 1/255
    gt_flow: np.ndarray  # (T-1, H, W, 2) float32, NaN = undefined
    gt_masks: np.ndarray  # (T, S, H, W) bool, visible after occlusion
    full_masks: np.ndarray  # (T, S, H, W) bool, unoccluded shapes
    sprites: list[Sprite]
    contact: np.ndarray  # (T,) bool, query pair overlap per frame
    observed: int
    config: WorldConfig = field(repr=False, default_factory=WorldConfig)

    @property
    def contact_ocd(self) -> bool:
        return bool(self.contact[: self.observed].any())

    @property
    def contact_ocp(self) -> bool:
        return bool(not self.contact[: self.observed].any() and self.contact[self.observed:].any())

    def label(self, task: str) -> bool | None:
        """Label for ``task``; ``None`` if the episode does not belong to the task."""
        if task == "ocd":
            return self.contact_ocd
        if task == "ocp":
            if self.contact_ocd:
                return None
            return self.contact_ocp
        raise ValueError(f"unknown task {task!r}")

    def moving_mask(self, t: int) -> np.ndarray:
        """Pixels of frame ``t+1`` covered by a sprite that moved during ``t -> t+1``."""
        out = np.zeros(self.frames.shape[1:3], dtype=bool)
        for s, sp in enumerate(self.sprites):
            d = sp.positions[t + 1] - sp.positions[t]
            if np.any(d != 0):
                out |= self.gt_masks[t + 1, s]
        return out


def shape_mask(shape: str, top: int, left: int, h: int, w: int, size: int) -> np.ndarray:
    """Pixel-center rasterization of a sprite's full footprint."""
    m = np.zeros((size, size), dtype=bool)
    if shape == "rect":
        m[max(top, 0):max(top + h, 0), max(left, 0):max(left + w, 0)] = True
        return m
    rows = np.arange(size)[:, None] + 0.5
    cols = np.arange(size)[None, :] + 0.5
    cy, cx, r = top + h / 2.0, left + w / 2.0, h / 2.0
    return (rows - cy) ** 2 + (cols - cx) ** 2 <= r * r


def _value_noise(rng: np.random.Generator, size: int, cells: int = 5) -> np.ndarray:
    grid = rng.uniform(0.2, 0.6, size=(cells, cells, 3))
    coords = np.linspace(0, cells - 1, size)
    i0 = np.clip(np.floor(coords).astype(int), 0, cells - 2)
    f = coords - i0
    rows = grid[i0] * (1 - f)[:, None, None] + grid[i0 + 1] * f[:, None, None]
    img = rows[:, i0] * (1 - f)[None, :, None] + rows[:, i0 + 1] * f[None, :, None]
    return img


def _texture(rng: np.random.Generator, h: int, w: int, color) -> np.ndarray:
    cell = int(rng.integers(2, 5))
    yy, xx = np.mgrid[0:h, 0:w]
    checker = ((yy // cell + xx // cell) % 2).astype(np.float64)
    shade = 0.8 + 0.2 * checker
    return np.clip(np.asarray(color)[None, None, :] * shade[..., None], 0.0, 1.0)


def _step(pos: np.ndarray, vel: np.ndarray, h: int, w: int, size: int):
    pos = pos + vel
    vel = vel.copy()
    for ax, extent in ((0, h), (1, w)):
        hi = size - extent
        if pos[ax] < 0:
            pos[ax] = -pos[ax]
            vel[ax] = -vel[ax]
        elif pos[ax] > hi:
            pos[ax] = 2 * hi - pos[ax]
            vel[ax] = -vel[ax]
    return pos, vel


def _scene(config: WorldConfig, episode_index: int):
    """Every random draw of an episode: background, sprites and their textures."""
    seed = mix64(config.seed, episode_index)
    rng = np.random.default_rng(seed)
    size, T = config.size, config.frames

    if config.background == "noise":
        background = _value_noise(rng, size)
    else:
        background = np.broadcast_to(rng.uniform(0.2, 0.6, size=3), (size, size, 3)).copy()

    n_sprites = int(rng.integers(config.sprite_count[0], config.sprite_count[1] + 1))
    lo_s, hi_s = config.sprite_size
    lo_v, hi_v = config.speed

    for _ in range(100):
        specs = []
        for s in range(n_sprites):
            shape = config.shapes[int(rng.integers(len(config.shapes)))]
            h = int(rng.integers(lo_s, hi_s + 1))
            w = h if shape == "disc" else int(rng.integers(lo_s, hi_s + 1))
            top = int(rng.integers(0, size - h + 1))
            left = int(rng.integers(0, size - w + 1))
            while True:
                v = rng.integers(-hi_v, hi_v + 1, size=2)
                if np.abs(v).max() >= lo_v:
                    break
            if s == 0:
                color = RED
            elif s == 1:
                color = YELLOW
            else:
                color = DISTRACTOR_COLORS[int(rng.integers(len(DISTRACTOR_COLORS)))]
            specs.append((shape, h, w, top, left, v, color))
        masks0 = [shape_mask(sh, t_, l_, h_, w_, size) for sh, h_, w_, t_, l_, _, _ in specs]
        overlap = any((masks0[a] & masks0[b]).any()
                      for a in range(n_sprites) for b in range(a + 1, n_sprites))
        if not overlap:
            break
    else:
        raise PlacementError(f"episode {episode_index}: no valid placement after 100 attempts")

    depth = rng.permutation(n_sprites)
    sprites: list[Sprite] = []
    textures = []
    for s, (shape, h, w, top, left, v, color) in enumerate(specs):
        pos = np.zeros((T, 2), dtype=np.int64)
        vel = np.zeros((T, 2), dtype=np.int64)
        p, vv = np.array([top, left]), np.asarray(v, dtype=np.int64)
        for t in range(T):
            pos[t], vel[t] = p, vv
            p, vv = _step(p, vv, h, w, size)
        sprites.append(Sprite(shape, h, w, color, int(depth[s]), pos, vel))
        textures.append(_texture(rng, h, w, color))
    return seed, background, sprites, textures


def _render(background: np.ndarray, sprites: list[Sprite], textures: list, t: int):
    """Frame ``t`` (quantized to 1/255), per-sprite full masks and the owner map."""
    size = background.shape[0]
    img = background.copy()
    full = np.zeros((len(sprites), size, size), dtype=bool)
    owner = np.full((size, size), -1, dtype=np.int64)
    for s in sorted(range(len(sprites)), key=lambda k: sprites[k].depth):
        sp = sprites[s]
        top, left = sp.positions[t]
        m = shape_mask(sp.shape, int(top), int(left), sp.height, sp.width, size)
        full[s] = m
        tex = np.zeros((size, size, 3))
        tex[top:top + sp.height, left:left + sp.width] = textures[s]
        img[m] = tex[m]
        owner[m] = s
    return (np.round(img * 255.0) / 255.0).astype(np.float32), full, owner


def render_frames(config: WorldConfig, episode_index: int, times) -> np.ndarray:
    """Frames ``times`` of an episode, identical to ``generate(...).frames[times]`` but cheaper."""
    _, background, sprites, textures = _scene(config, episode_index)
    return np.stack([_render(background, sprites, textures, int(t))[0] for t in times])


def generate(config: WorldConfig, episode_index: int) -> Episode:
    seed, background, sprites, textures = _scene(config, episode_index)
    size, T = config.size, config.frames
    n_sprites = len(sprites)
    frames = np.empty((T, size, size, 3), dtype=np.float32)
    full = np.zeros((T, n_sprites, size, size), dtype=bool)
    owner = np.empty((T, size, size), dtype=np.int64)
    for t in range(T):
        frames[t], full[t], owner[t] = _render(background, sprites, textures, t)
    visible = owner[:, None] == np.arange(n_sprites)[None, :, None, None]

    flow = np.full((T - 1, size, size, 2), np.nan, dtype=np.float32)
    rows, cols = np.mgrid[0:size, 0:size]
    for t in range(T - 1):
        for s in range(-1, n_sprites):
            if s < 0:
                d = np.zeros(2, dtype=np.int64)
            else:
                d = sprites[s].positions[t + 1] - sprites[s].positions[t]
            here = owner[t + 1] == s
            sr, sc = rows - d[0], cols - d[1]
            inside = (sr >= 0) & (sr < size) & (sc >= 0) & (sc < size)
            src_owner = np.full((size, size), -2, dtype=np.int64)
            src_owner[inside] = owner[t][sr[inside], sc[inside]]
            ok = here & (src_owner == s)
            flow[t][ok] = d.astype(np.float32)

    contact = np.array([(full[t, 0] & full[t, 1]).any() for t in range(T)])
    return Episode(index=episode_index, seed=seed, frames=frames, gt_flow=flow, gt_masks=visible,
                   full_masks=full, sprites=sprites, contact=contact, observed=config.observed,
                   config=config)


def make_balanced_split(config: WorldConfig, n_train: int, n_test: int, task: str,
                        start: int = 0, budget_factor: int = 60) -> tuple[list[int], list[int]]:
    """Scan episode indices from ``start`` and keep a 50/50 label balance per split.

    The train split is filled before the test split, so the two index sets
    are disjoint by construction.
    """
    if n_train < 2 or n_test < 2:
        raise ValueError("each split needs at least 2 episodes")
    if task not in ("ocp", "ocd"):
        raise ValueError(f"unknown task {task!r}")
    splits = []
    idx = start
    budget = budget_factor * (n_train + n_test)
    for n in (n_train, n_test):
        want_pos, want_neg = n // 2 + n % 2, n // 2
        pos: list[int] = []
        neg: list[int] = []
        while len(pos) < want_pos or len(neg) < want_neg:
            if idx - start >= budget:
                raise RuntimeError(f"balance unreachable for {task}: {len(pos)} positive, "
                                   f"{len(neg)} negative after {budget} episodes")
            try:
                ep = generate(config, idx)
            except PlacementError as exc:
                log.warning("skipping episode: %s", exc)
                idx += 1
                continue
            lab = ep.label(task)
            if lab is True and len(pos) < want_pos:
                pos.append(idx)
            elif lab is False and len(neg) < want_neg:
                neg.append(idx)
            idx += 1
        splits.append(sorted(pos + neg))
    return splits[0], splits[1]


# -- export -----------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return (data.reshape(h, w, 3).astype(np.float32) / maxval).astype(np.float32)


def write_flow(path, flows: np.ndarray) -> None:
    """``flows`` is ``(N, H, W, 2)`` or ``(H, W, 2)``; little-endian float32, NaN = undefined."""
    arr = np.asarray(flows, dtype="<f4")
    Path(path).write_bytes(arr.tobytes())


def read_flow(path, height: int, width: int) -> np.ndarray:
    arr = np.frombuffer(Path(path).read_bytes(), dtype="<f4").astype(np.float32)
    return arr.reshape(-1, height, width, 2)


def export_episode(ep: Episode, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(ep.frames):
        write_ppm(directory / f"frame_{t:03d}.ppm", frame)
    write_flow(directory / "flow.bin", ep.gt_flow)
    meta = {
        "index": ep.index,
        "seed": ep.seed,
        "size": int(ep.frames.shape[1]),
        "frames": int(ep.frames.shape[0]),
        "observed": ep.observed,
        "contact": [bool(c) for c in ep.contact],
        "contact_ocd": ep.contact_ocd,
        "contact_ocp": ep.contact_ocp,
        "world": ep.config.to_dict(),
        "sprites": [
            {
                "shape": s.shape, "height": s.height, "width": s.width,
                "color": list(s.color), "depth": s.depth,
                "positions": s.positions.tolist(), "velocities": s.velocities.tolist(),
            }
            for s in ep.sprites
        ],
    }
    (directory / "episode.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_episode(directory) -> Episode:
    """Reload an exported episode; masks and sprite states are regenerated from its seed."""
    directory = Path(directory)
    meta_file = directory / "episode.json"
    if not meta_file.exists():
        raise FileNotFoundError(f"no episode.json in {directory}")
    meta = json.loads(meta_file.read_text())
    config = WorldConfig.from_dict(meta["world"])
    ep = generate(config, int(meta["index"]))
    frames = np.stack([read_ppm(directory / f"frame_{t:03d}.ppm") for t in range(meta["frames"])])
    if not np.array_equal(frames, ep.frames):
        raise ValueError(f"{directory}: frames do not match the regenerated episode")
    return ep

