"""Trajectory sampling, sliding-window sample extraction, split management and
the on-disk dataset format (JSONL manifest + PNG frames).

Frames are stored losslessly and tokens are always recomputed from the
codebook, which stays the single source of truth.
"""

from __future__ import annotations

import json
import random
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    BadRatios,
    GenerationFailed,
    ManifestCorrupt,
    TrajectoryTooShort,
)
from .gridworld import (
    EgoFrame,
    Pose,
    TrajConfig,
    Trajectory,
    WorldMap,
    generate_trajectory,
    open_view_count,
)
from .metrics import ssim
from .reasoning import sample_intermediates

SCHEMA_VERSION = 1
SPLIT_NAMES = ("train", "val_seen", "val_unseen", "test")


@dataclass
class VizSample:
    """One sliding-window forecasting sample: k consecutive context frames, the
    trajectory goal frame, and the frame right after the window as target."""

    traj_id: str
    context: list       # frame indices, length k
    goal: int           # frame index of the trajectory's final frame
    target: int         # frame index to predict
    step: int           # 1-based window position


@dataclass
class InstrSample:
    traj_id: str
    initial: int
    intermediates: list  # strictly increasing frame indices
    goal: int
    instruction: str


@dataclass
class DatasetSplit:
    name: str
    traj_ids: list


@dataclass
class GeneratedDataset:
    trajectories: dict          # traj_id -> Trajectory
    viz_samples: list
    instr_samples: list
    splits: list
    k: int
    m: int
    frame_size: int

    def split_of(self, traj_id: str) -> str:
        for s in self.splits:
            if traj_id in s.traj_ids:
                return s.name
        return ""

    def trajs_in(self, split_name: str):
        for s in self.splits:
            if s.name == split_name:
                return [self.trajectories[t] for t in s.traj_ids]
        return []


# ---------------------------------------------------------------------------
# trajectory sampling
# ---------------------------------------------------------------------------

def sample_trajectories(worlds, count: int, cfg: TrajConfig, seed: int,
                        min_goal_open: int = 4, distinct_goal_tau: float | None = None,
                        id_prefix: str = "t") -> list:
    """Sample start/goal pairs uniformly over free cells and keep trajectories
    whose planned length fits the config bounds.

    Goals must see at least `min_goal_open` free cells so the goal view depicts
    a place rather than a wall. With `distinct_goal_tau`, additionally require
    every non-final frame to stay at or below that SSIM against the goal frame,
    which makes threshold termination unambiguous.
    """
    rng = random.Random(seed)
    out = []
    for i in range(count):
        world = worlds[i % len(worlds)]  # round-robin keeps worlds balanced
        free = world.free_cells()
        traj = None
        for _ in range(400):
            sx, sy = free[rng.randrange(len(free))]
            gx, gy = free[rng.randrange(len(free))]
            start = Pose(sx, sy, rng.randrange(4))
            goal = Pose(gx, gy, rng.randrange(4))
            try:
                cand = generate_trajectory(world, start, goal, cfg,
                                           traj_id=f"{id_prefix}{i:05d}")
            except Exception:
                continue
            if open_view_count(world, cand.poses[-1], cfg.view_depth) < min_goal_open:
                continue
            if distinct_goal_tau is not None:
                goal_frame = cand.frames[-1]
                if any(ssim(f, goal_frame) > distinct_goal_tau for f in cand.frames[:-1]):
                    continue
            traj = cand
            break
        if traj is None:
            raise GenerationFailed(
                f"world seed {world.seed} produced no acceptable trajectory in 400 attempts")
        out.append(traj)
    return out


# ---------------------------------------------------------------------------
# sample extraction
# ---------------------------------------------------------------------------

def extract_viz_samples(traj: Trajectory, k: int) -> list:
    length = len(traj)
    if length <= k:
        raise TrajectoryTooShort(f"trajectory of length {length} cannot serve k={k}")
    samples = []
    for i in range(1, length - k + 1):  # 1-based window start
        samples.append(VizSample(
            traj_id=traj.traj_id,
            context=list(range(i - 1, i - 1 + k)),
            goal=length - 1,
            target=i - 1 + k,
            step=i,
        ))
    return samples


def extract_instr_samples(traj: Trajectory, m: int) -> list:
    if m < 2:
        raise TrajectoryTooShort("instruction context m must be >= 2")
    if len(traj) < 2 or not traj.segments:
        raise TrajectoryTooShort("trajectory too short for instruction samples")
    samples = []
    for seg in traj.segments:
        interior = list(range(seg.start + 1, seg.end - 1))
        count = min(m - 1, len(interior))
        picked = [interior[i] for i in sample_intermediates(interior, count)]
        samples.append(InstrSample(
            traj_id=traj.traj_id,
            initial=seg.start,
            intermediates=picked,
            goal=seg.end - 1,
            instruction=seg.sub_instruction,
        ))
    return samples


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split_dataset(trajs, ratios, seed: int) -> list:
    """Partition trajectories into train/val_seen/val_unseen/test.

    val_unseen and test only contain whole held-out worlds (no world seed
    shared with train or val_seen); val_seen shares worlds with train.
    """
    ratios = list(ratios)
    if len(ratios) != 4:
        raise BadRatios(f"need 4 ratios (train, val_seen, val_unseen, test), got {len(ratios)}")
    if any(r < 0 for r in ratios):
        raise BadRatios("ratios must be non-negative")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must sum to 1, got {sum(ratios)}")

    by_world = {}
    for t in trajs:
        by_world.setdefault(t.world_seed, []).append(t)
    worlds = sorted(by_world)
    rng = random.Random(seed)
    rng.shuffle(worlds)
    # placing the biggest worlds first keeps small pools from starving
    worlds.sort(key=lambda w: -len(by_world[w]))

    total = len(trajs)
    pool_share = {"seen": ratios[0] + ratios[1], "val_unseen": ratios[2], "test": ratios[3]}
    pool_count = {p: 0 for p in pool_share}
    pool_worlds = {p: [] for p in pool_share}
    for w in worlds:
        deficits = {p: pool_share[p] * total - pool_count[p] for p in pool_share}
        target = max(("seen", "val_unseen", "test"), key=lambda p: deficits[p])
        pool_worlds[target].append(w)
        pool_count[target] += len(by_world[w])

    seen_trajs = [t for w in pool_worlds["seen"] for t in by_world[w]]
    rng.shuffle(seen_trajs)
    seen_share = ratios[0] + ratios[1]
    n_train = round(len(seen_trajs) * (ratios[0] / seen_share)) if seen_share > 0 else 0
    train_ids = [t.traj_id for t in seen_trajs[:n_train]]
    val_seen_ids = [t.traj_id for t in seen_trajs[n_train:]]
    unseen_ids = [t.traj_id for w in pool_worlds["val_unseen"] for t in by_world[w]]
    test_ids = [t.traj_id for w in pool_worlds["test"] for t in by_world[w]]
    return [
        DatasetSplit("train", sorted(train_ids)),
        DatasetSplit("val_seen", sorted(val_seen_ids)),
        DatasetSplit("val_unseen", sorted(unseen_ids)),
        DatasetSplit("test", sorted(test_ids)),
    ]


def build_dataset(trajs, splits, k: int, m: int, frame_size: int) -> GeneratedDataset:
    ds = GeneratedDataset(
        trajectories={t.traj_id: t for t in trajs},
        viz_samples=[], instr_samples=[], splits=splits,
        k=k, m=m, frame_size=frame_size,
    )
    for t in trajs:
        ds.viz_samples.extend(extract_viz_samples(t, k))
        ds.instr_samples.extend(extract_instr_samples(t, m))
    return ds


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def _frame_rel_path(split: str, traj_id: str, index: int) -> str:
    return f"{split}/{traj_id}/{index:03d}.png"


def _record_crc(record: dict) -> int:
    body = {k: v for k, v in record.items() if k != "crc"}
    return zlib.crc32(json.dumps(body, sort_keys=True).encode())


def write_dataset(ds: GeneratedDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    split_of = {tid: ds.split_of(tid) for tid in ds.trajectories}
    for tid, traj in ds.trajectories.items():
        frame_dir = out / split_of[tid] / tid
        frame_dir.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(traj.frames):
            (frame_dir / f"{i:03d}.png").write_bytes(frame.to_png_bytes())

    with open(out / "trajs.json", "w") as fh:
        json.dump({
            "trajectories": [t.meta_json() for t in ds.trajectories.values()],
            "splits": [{"name": s.name, "traj_ids": list(s.traj_ids)} for s in ds.splits],
        }, fh, indent=1, sort_keys=True)

    records = []
    for i, s in enumerate(ds.viz_samples):
        split = split_of[s.traj_id]
        rec = {
            "id": f"viz-{i:06d}", "kind": "viz", "split": split, "traj_id": s.traj_id,
            "context": [_frame_rel_path(split, s.traj_id, j) for j in s.context],
            "goal": _frame_rel_path(split, s.traj_id, s.goal),
            "target": _frame_rel_path(split, s.traj_id, s.target),
            "step": s.step,
        }
        rec["crc"] = _record_crc(rec)
        records.append(rec)
    for i, s in enumerate(ds.instr_samples):
        split = split_of[s.traj_id]
        rec = {
            "id": f"instr-{i:06d}", "kind": "instr", "split": split, "traj_id": s.traj_id,
            "initial": _frame_rel_path(split, s.traj_id, s.initial),
            "intermediates": [_frame_rel_path(split, s.traj_id, j) for j in s.intermediates],
            "goal": _frame_rel_path(split, s.traj_id, s.goal),
            "instruction": s.instruction,
        }
        rec["crc"] = _record_crc(rec)
        records.append(rec)

    header = {"schema": SCHEMA_VERSION, "k": ds.k, "m": ds.m,
              "frame_size": ds.frame_size, "count": len(records)}
    with open(out / "manifest.jsonl", "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return out


def _parse_index(rel_path: str) -> int:
    return int(Path(rel_path).stem)


def read_dataset(in_dir) -> GeneratedDataset:
    root = Path(in_dir)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise ManifestCorrupt(f"no manifest at {manifest}")

    with open(manifest) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ManifestCorrupt("manifest is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestCorrupt(f"manifest line 1 is not valid JSON: {exc}") from exc
    if header.get("schema") != SCHEMA_VERSION:
        raise ManifestCorrupt(f"unsupported manifest schema {header.get('schema')!r}")

    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestCorrupt(f"manifest line {lineno} is corrupt: {exc}") from exc
        if "crc" not in rec or _record_crc(rec) != rec["crc"]:
            raise ManifestCorrupt(f"manifest line {lineno} fails its checksum")
        records.append(rec)
    if len(records) != header.get("count"):
        raise ManifestCorrupt(
            f"manifest declares {header.get('count')} records but has {len(records)}")

    with open(root / "trajs.json") as fh:
        tdoc = json.load(fh)
    splits = [DatasetSplit(s["name"], list(s["traj_ids"])) for s in tdoc["splits"]]
    split_of = {tid: s.name for s in splits for tid in s.traj_ids}

    trajectories = {}
    for meta in tdoc["trajectories"]:
        tid = meta["traj_id"]
        frame_dir = root / split_of[tid] / tid
        frames = []
        for i in range(len(meta["poses"])):
            frames.append(EgoFrame.from_png_bytes((frame_dir / f"{i:03d}.png").read_bytes()))
        trajectories[tid] = Trajectory.from_meta_json(meta, frames)

    viz, instr = [], []
    for rec in records:
        if rec["kind"] == "viz":
            viz.append(VizSample(
                traj_id=rec["traj_id"],
                context=[_parse_index(p) for p in rec["context"]],
                goal=_parse_index(rec["goal"]),
                target=_parse_index(rec["target"]),
                step=rec["step"],
            ))
        elif rec["kind"] == "instr":
            instr.append(InstrSample(
                traj_id=rec["traj_id"],
                initial=_parse_index(rec["initial"]),
                intermediates=[_parse_index(p) for p in rec["intermediates"]],
                goal=_parse_index(rec["goal"]),
                instruction=rec["instruction"],
            ))
        else:
            raise ManifestCorrupt(f"unknown sample kind {rec['kind']!r}")
    return GeneratedDataset(trajectories=trajectories, viz_samples=viz,
                            instr_samples=instr, splits=splits,
                            k=header["k"], m=header["m"],
                            frame_size=header["frame_size"])
