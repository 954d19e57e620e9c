"""Procedural 2-D world with egocentric rendering, A* planning and trajectory generation.

Worlds are axis-aligned room partitions of a walled rectangle. The agent moves on
cells with a discrete heading; its first-person view is a forward cone painted
from room/landmark colors with a brightness falloff encoding depth.
"""

from __future__ import annotations

import heapq
import io
import random
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import (
    DimensionMismatch,
    GenerationFailed,
    InvalidPose,
    InvalidSpec,
    LengthOutOfRange,
    NoPath,
)

# headings
NORTH, EAST, SOUTH, WEST = 0, 1, 2, 3
HEADING_NAMES = ["N", "E", "S", "W"]
# (dx, dy) with y growing downwards
FORWARD = {NORTH: (0, -1), EAST: (1, 0), SOUTH: (0, 1), WEST: (-1, 0)}

FREE, WALL = 0, 1

ROOM_NAMES = [
    "kitchen", "hallway", "bedroom", "office", "lobby", "library",
    "pantry", "studio", "garage", "bathroom", "corridor", "atrium",
]
LANDMARK_NAMES = [
    "sofa", "plant", "lamp", "table", "shelf", "sink",
    "piano", "mirror", "statue", "fridge", "desk", "bench",
]

# room colors are picked with well-spread lumas so grayscale metrics can
# tell rooms apart
ROOM_RGB = [
    (250, 240, 200), (70, 90, 60), (210, 160, 120), (100, 60, 120),
    (170, 220, 240), (120, 120, 40), (230, 120, 90), (40, 70, 110),
    (190, 200, 90), (150, 100, 170), (240, 190, 230), (60, 140, 130),
]
LANDMARK_RGB = [
    (220, 40, 40), (30, 160, 50), (250, 210, 40), (120, 70, 20),
    (40, 60, 200), (230, 230, 240), (20, 20, 30), (170, 220, 245),
    (245, 245, 245), (240, 140, 30), (90, 40, 120), (60, 210, 180),
]
WALL_RGB = (92, 92, 96)


@dataclass(frozen=True)
class Pose:
    x: int
    y: int
    heading: int  # NORTH / EAST / SOUTH / WEST

    def forward_cell(self):
        dx, dy = FORWARD[self.heading]
        return self.x + dx, self.y + dy


@dataclass(frozen=True)
class WorldSpec:
    width: int
    height: int
    room_count: int
    landmark_count: int
    seed: int
    # per-world color/falloff variation; makes unseen worlds visually novel
    palette_jitter: bool = False


@dataclass
class Palette:
    room_rgb: list          # per room label
    landmark_rgb: list      # per landmark id
    wall_rgb: tuple = WALL_RGB
    falloff: float = 0.65
    dither: bool = False


@dataclass
class Landmark:
    x: int
    y: int
    lm_id: int


class WorldMap:
    """Grid of Free/Wall cells with per-cell room labels and point landmarks.

    `shade` (per-cell brightness multiplier) and `texture` (per-cell pattern id,
    see _PATTERNS) act as floor texture: they keep otherwise identical room
    views distinguishable from different cells.
    """

    def __init__(self, width, height, cells, room_labels, landmarks, palette,
                 room_style=None, lm_style=None, seed=0, shade=None, texture=None):
        self.width = int(width)
        self.height = int(height)
        self.cells = np.asarray(cells, dtype=np.uint8)
        self.room_labels = np.asarray(room_labels, dtype=np.int16)
        self.landmarks = list(landmarks)
        self.palette = palette
        self.room_style = list(room_style) if room_style is not None else list(range(len(palette.room_rgb)))
        self.lm_style = list(lm_style) if lm_style is not None else list(range(len(palette.landmark_rgb)))
        self.seed = seed
        if shade is None:
            shade = np.ones((self.height, self.width), dtype=np.float64)
        self.shade = np.asarray(shade, dtype=np.float64)
        if texture is None:
            texture = np.zeros((self.height, self.width), dtype=np.uint8)
        self.texture = np.asarray(texture, dtype=np.uint8)
        self._lm_at = {(lm.x, lm.y): lm.lm_id for lm in self.landmarks}
        self._check()

    def _check(self):
        if self.width < 4 or self.height < 4:
            raise InvalidSpec(f"world must be at least 4x4, got {self.width}x{self.height}")
        if self.cells.shape != (self.height, self.width):
            raise InvalidSpec("cell grid shape does not match width/height")
        border = np.concatenate([
            self.cells[0, :], self.cells[-1, :], self.cells[:, 0], self.cells[:, -1]])
        if not (border == WALL).all():
            raise InvalidSpec("border cells must be walls")
        free = self.cells == FREE
        if (self.room_labels[free] < 0).any():
            raise InvalidSpec("every free cell needs a room label")
        for lm in self.landmarks:
            if self.cells[lm.y, lm.x] != FREE:
                raise InvalidSpec(f"landmark at ({lm.x},{lm.y}) is not on a free cell")

    def in_bounds(self, x, y):
        return 0 <= x < self.width and 0 <= y < self.height

    def is_free(self, x, y):
        return self.in_bounds(x, y) and self.cells[y, x] == FREE

    def landmark_at(self, x, y):
        return self._lm_at.get((x, y))

    def room_name(self, label):
        return ROOM_NAMES[self.room_style[label % len(self.room_style)] % len(ROOM_NAMES)]

    def landmark_name(self, lm_id):
        return LANDMARK_NAMES[self.lm_style[lm_id % len(self.lm_style)] % len(LANDMARK_NAMES)]

    def free_cells(self):
        ys, xs = np.nonzero(self.cells == FREE)
        return [(int(x), int(y)) for x, y in zip(xs, ys)]

    def __eq__(self, other):
        if not isinstance(other, WorldMap):
            return NotImplemented
        return (self.width == other.width and self.height == other.height
                and np.array_equal(self.cells, other.cells)
                and np.array_equal(self.room_labels, other.room_labels)
                and [(l.x, l.y, l.lm_id) for l in self.landmarks]
                == [(l.x, l.y, l.lm_id) for l in other.landmarks]
                and self.room_style == other.room_style
                and self.lm_style == other.lm_style
                and np.array_equal(self.shade, other.shade)
                and np.array_equal(self.texture, other.texture)
                and self.palette.room_rgb == other.palette.room_rgb
                and self.palette.landmark_rgb == other.palette.landmark_rgb
                and tuple(self.palette.wall_rgb) == tuple(other.palette.wall_rgb)
                and self.palette.falloff == other.palette.falloff
                and self.palette.dither == other.palette.dither)

    def to_json(self):
        return {
            "width": self.width,
            "height": self.height,
            "cells": ["".join("#" if c else "." for c in row) for row in self.cells],
            "room_labels": self.room_labels.tolist(),
            "landmarks": [[lm.x, lm.y, lm.lm_id] for lm in self.landmarks],
            "room_style": self.room_style,
            "lm_style": self.lm_style,
            "shade": self.shade.tolist(),
            "texture": self.texture.tolist(),
            "palette": {
                "room_rgb": [list(c) for c in self.palette.room_rgb],
                "landmark_rgb": [list(c) for c in self.palette.landmark_rgb],
                "wall_rgb": list(self.palette.wall_rgb),
                "falloff": self.palette.falloff,
                "dither": self.palette.dither,
            },
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc):
        pal = Palette(
            room_rgb=[tuple(c) for c in doc["palette"]["room_rgb"]],
            landmark_rgb=[tuple(c) for c in doc["palette"]["landmark_rgb"]],
            wall_rgb=tuple(doc["palette"]["wall_rgb"]),
            falloff=doc["palette"]["falloff"],
            dither=doc["palette"]["dither"],
        )
        cells = np.array([[1 if ch == "#" else 0 for ch in row] for row in doc["cells"]], dtype=np.uint8)
        return cls(doc["width"], doc["height"], cells, np.array(doc["room_labels"]),
                   [Landmark(*t) for t in doc["landmarks"]], pal,
                   room_style=doc["room_style"], lm_style=doc["lm_style"],
                   seed=doc["seed"], shade=np.array(doc["shade"]),
                   texture=np.array(doc["texture"], dtype=np.uint8))


@dataclass
class EgoFrame:
    """RGB egocentric image, 8-bit channels, shape (H, W, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DimensionMismatch(f"expected HxWx3 pixel buffer, got {self.pixels.shape}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EgoFrame):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    def to_png_bytes(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.pixels, mode="RGB").save(buf, format="PNG")
        return buf.getvalue()

    @classmethod
    def from_png_bytes(cls, data: bytes) -> "EgoFrame":
        img = Image.open(io.BytesIO(data)).convert("RGB")
        return cls(np.asarray(img, dtype=np.uint8))


@dataclass
class SceneSegment:
    room_label: int
    start: int  # first frame index, inclusive
    end: int    # last frame index, exclusive
    sub_instruction: str = ""


@dataclass
class Trajectory:
    traj_id: str
    poses: list
    frames: list
    instruction: str
    segments: list
    room_ids: list
    world_seed: int = 0

    def __len__(self):
        return len(self.poses)

    def meta_json(self):
        """Trajectory metadata without pixel data (frames are stored as PNGs)."""
        return {
            "traj_id": self.traj_id,
            "poses": [[p.x, p.y, p.heading] for p in self.poses],
            "instruction": self.instruction,
            "segments": [[s.room_label, s.start, s.end, s.sub_instruction] for s in self.segments],
            "room_ids": [int(r) for r in self.room_ids],
            "world_seed": self.world_seed,
        }

    @classmethod
    def from_meta_json(cls, doc, frames):
        return cls(
            traj_id=doc["traj_id"],
            poses=[Pose(*t) for t in doc["poses"]],
            frames=frames,
            instruction=doc["instruction"],
            segments=[SceneSegment(*t) for t in doc["segments"]],
            room_ids=doc["room_ids"],
            world_seed=doc["world_seed"],
        )


@dataclass
class TrajConfig:
    min_len: int = 8
    max_len: int = 29
    frame_size: int = 32
    view_depth: int = 5


# ---------------------------------------------------------------------------
# world construction
# ---------------------------------------------------------------------------

def build_world(spec: WorldSpec) -> WorldMap:
    """Build a connected multi-room world, deterministic per seed."""
    if spec.width < 8 or spec.height < 8:
        raise InvalidSpec(f"world spec needs width/height >= 8, got {spec.width}x{spec.height}")
    if spec.room_count < 1:
        raise InvalidSpec("room_count must be >= 1")
    if spec.landmark_count < 0:
        raise InvalidSpec("landmark_count must be >= 0")

    for attempt in range(20):
        rng = random.Random(spec.seed * 1_000_003 + attempt)
        world = _try_build(spec, rng)
        if world is not None and _connected(world):
            return world
    raise GenerationFailed(f"could not build a connected {spec.room_count}-room world for seed {spec.seed}")


def _try_build(spec: WorldSpec, rng: random.Random):
    w, h = spec.width, spec.height
    cells = np.full((h, w), WALL, dtype=np.uint8)
    cells[1:h - 1, 1:w - 1] = FREE

    # rooms as inclusive interior rectangles, split until room_count reached
    rooms = [(1, 1, w - 2, h - 2)]
    while len(rooms) < spec.room_count:
        order = sorted(range(len(rooms)),
                       key=lambda i: -(rooms[i][2] - rooms[i][0] + 1) * (rooms[i][3] - rooms[i][1] + 1))
        split_done = False
        for i in order:
            x0, y0, x1, y1 = rooms[i]
            vertical_ok = x1 - x0 + 1 >= 5
            horizontal_ok = y1 - y0 + 1 >= 5
            if not vertical_ok and not horizontal_ok:
                continue
            if vertical_ok and (not horizontal_ok or (x1 - x0) >= (y1 - y0)):
                wx = rng.randint(x0 + 2, x1 - 2)
                door = rng.randint(y0, y1)
                cells[y0:y1 + 1, wx] = WALL
                cells[door, wx] = FREE
                rooms[i] = (x0, y0, wx - 1, y1)
                rooms.append((wx + 1, y0, x1, y1))
            else:
                wy = rng.randint(y0 + 2, y1 - 2)
                door = rng.randint(x0, x1)
                cells[wy, x0:x1 + 1] = WALL
                cells[wy, door] = FREE
                rooms[i] = (x0, y0, x1, wy - 1)
                rooms.append((x0, wy + 1, x1, y1))
            split_done = True
            break
        if not split_done:
            return None

    labels = np.full((h, w), -1, dtype=np.int16)
    for idx, (x0, y0, x1, y1) in enumerate(rooms):
        labels[y0:y1 + 1, x0:x1 + 1] = idx
    # door cells sit on former wall lines: adopt a neighboring room's label
    for y in range(1, h - 1):
        for x in range(1, w - 1):
            if cells[y, x] == FREE and labels[y, x] < 0:
                for dx, dy in ((0, -1), (1, 0), (0, 1), (-1, 0)):
                    if cells[y + dy, x + dx] == FREE and labels[y + dy, x + dx] >= 0:
                        labels[y, x] = labels[y + dy, x + dx]
                        break
                if labels[y, x] < 0:
                    return None

    free = [(x, y) for y in range(h) for x in range(w) if cells[y, x] == FREE]
    if len(free) < spec.landmark_count:
        return None
    lm_cells = rng.sample(free, spec.landmark_count)
    landmarks = [Landmark(x, y, i) for i, (x, y) in enumerate(lm_cells)]

    n_styles = len(ROOM_NAMES)
    room_off = rng.randrange(n_styles)
    lm_off = rng.randrange(n_styles)
    room_style = [(room_off + i) % n_styles for i in range(len(rooms))]
    lm_style = [(lm_off + i) % n_styles for i in range(max(1, spec.landmark_count))]
    room_rgb = [ROOM_RGB[s] for s in room_style]
    wall_rgb = WALL_RGB
    falloff = 0.65
    if spec.palette_jitter:
        def jit(c, span):
            return max(0, min(255, c + rng.randint(-span, span)))

        room_rgb = [tuple(jit(c, 28) for c in rgb) for rgb in room_rgb]
        base = jit(WALL_RGB[0], 35)
        wall_rgb = (base, base, min(255, base + 4))
        falloff = rng.choice((0.55, 0.62, 0.70, 0.78))
    palette = Palette(
        room_rgb=room_rgb,
        landmark_rgb=[LANDMARK_RGB[s] for s in lm_style],
        wall_rgb=wall_rgb,
        falloff=falloff,
    )
    shade = np.ones((h, w), dtype=np.float64)
    texture = np.zeros((h, w), dtype=np.uint8)
    levels = (0.70, 0.80, 0.90, 1.0)
    for x, y in free:
        shade[y, x] = levels[rng.randrange(4)]
        texture[y, x] = rng.randrange(4)
    return WorldMap(w, h, cells, labels, landmarks, palette,
                    room_style=room_style, lm_style=lm_style, seed=spec.seed,
                    shade=shade, texture=texture)


def _connected(world: WorldMap) -> bool:
    free = world.free_cells()
    if not free:
        return False
    seen = {free[0]}
    stack = [free[0]]
    while stack:
        x, y = stack.pop()
        for dx, dy in ((0, -1), (1, 0), (0, 1), (-1, 0)):
            nxt = (x + dx, y + dy)
            if nxt not in seen and world.is_free(*nxt):
                seen.add(nxt)
                stack.append(nxt)
    return len(seen) == len(free)


# ---------------------------------------------------------------------------
# egocentric rendering
# ---------------------------------------------------------------------------

def _bound(total, i, n):
    # round-half-up split of `total` pixels into n slots; mirror-symmetric for odd n
    return (2 * total * i + n) // (2 * n)


def render_ego(world: WorldMap, pose: Pose, size: int, depth: int = 5) -> EgoFrame:
    """Paint the forward-facing cone of `depth` cell rows into a size x size frame.

    Tiles are room-colored (landmarks drawn as inner rectangles), occluding walls
    project over everything behind them, and brightness falls off with distance.
    """
    if size <= 0 or size % 4 != 0:
        raise DimensionMismatch(f"frame size must be a positive multiple of 4, got {size}")
    if not world.is_free(pose.x, pose.y):
        raise InvalidPose(f"pose ({pose.x},{pose.y}) is not on a free cell")

    fx, fy = FORWARD[pose.heading]
    rx, ry = FORWARD[(pose.heading + 1) % 4]  # right-hand direction
    pal = world.palette
    frame = np.zeros((size, size, 3), dtype=np.uint8)

    def scale(rgb, factor):
        col = np.clip(np.floor(np.array(rgb, dtype=np.float64) * factor + 0.5), 0, 255)
        return col.astype(np.uint8)

    def paint(r0, r1, c0, c1, rgb, d, cell, shaded=False, pattern=0):
        factor = pal.falloff ** (d - 1)
        if shaded and cell is not None:
            factor *= world.shade[cell[1], cell[0]]
            if pal.dither and (cell[0] + cell[1]) % 2:
                factor *= 0.9
        frame[r0:r1, c0:c1] = scale(rgb, factor)
        # cell texture patterns; all are left-right symmetric within the tile
        if pattern and r1 - r0 > 2 and c1 - c0 > 2:
            dark = scale(rgb, factor * 0.5)
            if pattern == 1:      # border
                frame[r0, c0:c1] = dark
                frame[r1 - 1, c0:c1] = dark
                frame[r0:r1, c0] = dark
                frame[r0:r1, c1 - 1] = dark
            elif pattern == 2:    # horizontal mid stripe
                mr = (r1 - r0) // 3
                frame[r0 + mr:r1 - mr, c0:c1] = dark
            elif pattern == 3:    # vertical mid stripe
                mc = (c1 - c0) // 3
                frame[r0:r1, c0 + mc:c1 - mc] = dark

    # state per (d, l): None while line of sight is open, else (depth, cell) of the
    # nearest blocking wall on the sight chain
    state = {}
    for d in range(1, depth + 1):
        n = 2 * d - 1
        r0 = _bound(size, depth - d, depth)
        r1 = _bound(size, depth - d + 1, depth)
        for l in range(-(d - 1), d):
            c0 = _bound(size, l + d - 1, n)
            c1 = _bound(size, l + d, n)
            cx = pose.x + d * fx + l * rx
            cy = pose.y + d * fy + l * ry
            if d == 1:
                parent_state = None
            else:
                pl = max(-(d - 2), min(d - 2, l))
                parent_state = state[(d - 1, pl)]
            if parent_state is not None:
                bd, bcell = parent_state
                paint(r0, r1, c0, c1, pal.wall_rgb, bd, bcell)
                state[(d, l)] = parent_state
            elif not world.is_free(cx, cy):
                paint(r0, r1, c0, c1, pal.wall_rgb, d, (cx, cy))
                state[(d, l)] = (d, (cx, cy))
            else:
                label = int(world.room_labels[cy, cx])
                paint(r0, r1, c0, c1, pal.room_rgb[label % len(pal.room_rgb)], d, (cx, cy),
                      shaded=True, pattern=int(world.texture[cy, cx]))
                lm = world.landmark_at(cx, cy)
                if lm is not None:
                    mr = (r1 - r0) // 4
                    mc = (c1 - c0) // 4
                    paint(r0 + mr, r1 - mr, c0 + mc, c1 - mc,
                          pal.landmark_rgb[lm % len(pal.landmark_rgb)], d, (cx, cy),
                          shaded=True)
                state[(d, l)] = None
    return EgoFrame(frame)


def wall_fill_frame(world: WorldMap, size: int) -> EgoFrame:
    """The constant frame seen when a wall sits directly ahead at distance 1."""
    rgb = np.array(world.palette.wall_rgb, dtype=np.uint8)
    return EgoFrame(np.tile(rgb, (size, size, 1)))


def open_view_count(world: WorldMap, pose: Pose, depth: int = 5) -> int:
    """Number of free cells visible from a pose under the renderer's sight rule."""
    fx, fy = FORWARD[pose.heading]
    rx, ry = FORWARD[(pose.heading + 1) % 4]
    state = {}
    count = 0
    for d in range(1, depth + 1):
        for l in range(-(d - 1), d):
            cx, cy = pose.x + d * fx + l * rx, pose.y + d * fy + l * ry
            blocked = None if d == 1 else state[(d - 1, max(-(d - 2), min(d - 2, l)))]
            if blocked:
                state[(d, l)] = blocked
            elif not world.is_free(cx, cy):
                state[(d, l)] = True
            else:
                state[(d, l)] = None
                count += 1
    return count


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------

def _validate_pose(world, pose, what):
    if not world.is_free(pose.x, pose.y):
        raise InvalidPose(f"{what} pose ({pose.x},{pose.y}) is not on a free cell")
    if pose.heading not in (NORTH, EAST, SOUTH, WEST):
        raise InvalidPose(f"{what} pose has bad heading {pose.heading}")


def _neighbors(world, pose, blocked):
    # move order fixes A* tie-breaking: forward, turn-left, turn-right
    out = []
    nx, ny = pose.forward_cell()
    if world.is_free(nx, ny) and (nx, ny) not in blocked:
        out.append(Pose(nx, ny, pose.heading))
    out.append(Pose(pose.x, pose.y, (pose.heading + 3) % 4))
    out.append(Pose(pose.x, pose.y, (pose.heading + 1) % 4))
    return out


def plan_path(world: WorldMap, start: Pose, goal: Pose, blocked=None) -> list:
    """A* over (x, y, heading) states; moves are forward / turn-left / turn-right.

    Returns the pose sequence from `start` to the first pose reaching the goal
    cell (any heading); minimal in move count.
    """
    blocked = frozenset(blocked) if blocked else frozenset()
    _validate_pose(world, start, "start")
    _validate_pose(world, goal, "goal")
    if (goal.x, goal.y) in blocked:
        raise NoPath("goal cell is blocked")
    if (start.x, start.y) in blocked:
        raise NoPath("start cell is blocked")

    def h(p):
        return abs(p.x - goal.x) + abs(p.y - goal.y)

    seq = 0
    open_heap = [(h(start), 0, start)]
    g = {start: 0}
    parent = {}
    closed = set()
    while open_heap:
        f, _, cur = heapq.heappop(open_heap)
        if cur in closed:
            continue
        closed.add(cur)
        if (cur.x, cur.y) == (goal.x, goal.y):
            path = [cur]
            while path[-1] in parent:
                path.append(parent[path[-1]])
            path.reverse()
            return path
        for nxt in _neighbors(world, cur, blocked):
            ng = g[cur] + 1
            if ng < g.get(nxt, 1 << 30):
                g[nxt] = ng
                parent[nxt] = cur
                seq += 1
                heapq.heappush(open_heap, (ng + h(nxt), seq, nxt))
    raise NoPath(f"no path from ({start.x},{start.y}) to ({goal.x},{goal.y})")


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def classify_move(a: Pose, b: Pose) -> str:
    if (b.x - a.x, b.y - a.y) == FORWARD[a.heading] and a.heading == b.heading:
        return "F"
    if (a.x, a.y) == (b.x, b.y):
        if b.heading == (a.heading + 3) % 4:
            return "L"
        if b.heading == (a.heading + 1) % 4:
            return "R"
    raise InvalidPose(f"poses {a} -> {b} are not one legal move apart")


def run_length_segments(labels) -> list:
    """Maximal runs of identical labels as (start, end, label) with end exclusive."""
    runs = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            runs.append((start, i, labels[start]))
            start = i
    return runs


def _segment_parts(world, poses, seg_start, seg_end, next_label, is_last):
    moves = [classify_move(poses[j], poses[j + 1])
             for j in range(seg_start, min(seg_end, len(poses) - 1))]
    parts = []
    for m in moves:
        if m == "F":
            if parts and parts[-1] == "go straight":
                continue
            parts.append("go straight")
        elif m == "L":
            parts.append("turn left")
        else:
            parts.append("turn right")
    if is_last:
        goal = poses[-1]
        lm = world.landmark_at(goal.x, goal.y)
        if lm is not None:
            name = world.landmark_name(lm)
            if parts and parts[-1] == "go straight":
                parts[-1] = f"go straight until the {name}"
            else:
                parts.append(f"stop at the {name}")
        else:
            parts.append("stop")
    else:
        parts.append(f"enter the {world.room_name(next_label)}")
    return " then ".join(parts)


def synthesize_instruction(world: WorldMap, poses, runs) -> list:
    """One template sub-instruction per room run; returns the list of strings."""
    subs = []
    for i, (s, e, label) in enumerate(runs):
        is_last = i == len(runs) - 1
        next_label = runs[i + 1][2] if not is_last else None
        subs.append(_segment_parts(world, poses, s, e, next_label, is_last))
    return subs


def generate_trajectory(world: WorldMap, start: Pose, goal: Pose,
                        cfg: TrajConfig = None, traj_id: str = "traj",
                        blocked=None) -> Trajectory:
    cfg = cfg or TrajConfig()
    poses = plan_path(world, start, goal, blocked=blocked)
    if not (cfg.min_len <= len(poses) <= cfg.max_len):
        raise LengthOutOfRange(
            f"path length {len(poses)} outside [{cfg.min_len}, {cfg.max_len}]")
    frames = [render_ego(world, p, cfg.frame_size, cfg.view_depth) for p in poses]
    room_ids = [int(world.room_labels[p.y, p.x]) for p in poses]
    runs = run_length_segments(room_ids)
    subs = synthesize_instruction(world, poses, runs)
    segments = [SceneSegment(label, s, e, sub) for (s, e, label), sub in zip(runs, subs)]
    return Trajectory(traj_id, poses, frames, " then ".join(subs), segments,
                      room_ids, world_seed=world.seed)


def segment_scenes(traj: Trajectory) -> list:
    """Recompute maximal same-room runs over the trajectory's frames."""
    runs = run_length_segments(list(traj.room_ids))
    own = {(s.start, s.end, s.room_label): s.sub_instruction for s in traj.segments}
    return [SceneSegment(label, s, e, own.get((s, e, label), "")) for s, e, label in runs]
