import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from navgen.errors import InvalidSpec, LengthOutOfRange, NoPath
from navgen.gridworld import (
    EAST,
    FREE,
    NORTH,
    SOUTH,
    WALL,
    WEST,
    Landmark,
    Palette,
    Pose,
    TrajConfig,
    WorldMap,
    WorldSpec,
    build_world,
    generate_trajectory,
    plan_path,
    render_ego,
    run_length_segments,
    segment_scenes,
    wall_fill_frame,
)
from oracles import bfs_optimal_moves


def flood_fill_size(world, start):
    seen = {start}
    stack = [start]
    while stack:
        x, y = stack.pop()
        for dx, dy in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            if world.is_free(x + dx, y + dy) and (x + dx, y + dy) not in seen:
                seen.add((x + dx, y + dy))
                stack.append((x + dx, y + dy))
    return len(seen)


class TestBuildWorld:
    def test_single_room_interior_all_free(self):
        w = build_world(WorldSpec(8, 8, 1, 0, seed=1))
        assert (w.cells[1:7, 1:7] == FREE).all()
        assert (w.cells[0, :] == WALL).all() and (w.cells[:, 0] == WALL).all()

    def test_connectivity_flood_fill(self):
        w = build_world(WorldSpec(16, 16, 4, 6, seed=7))
        free = w.free_cells()
        assert flood_fill_size(w, free[0]) == len(free)

    def test_deterministic(self):
        a = build_world(WorldSpec(16, 16, 4, 6, seed=7))
        b = build_world(WorldSpec(16, 16, 4, 6, seed=7))
        assert a == b

    def test_different_seeds_differ(self):
        a = build_world(WorldSpec(16, 16, 4, 6, seed=1))
        b = build_world(WorldSpec(16, 16, 4, 6, seed=2))
        assert a != b

    def test_every_free_cell_labeled(self):
        for seed in range(5):
            w = build_world(WorldSpec(16, 16, 4, 4, seed=seed))
            assert (w.room_labels[w.cells == FREE] >= 0).all()

    def test_landmarks_on_free_cells(self):
        w = build_world(WorldSpec(16, 16, 3, 8, seed=3))
        assert len(w.landmarks) == 8
        for lm in w.landmarks:
            assert w.cells[lm.y, lm.x] == FREE

    def test_invalid_spec(self):
        with pytest.raises(InvalidSpec):
            build_world(WorldSpec(6, 8, 1, 0, seed=0))
        with pytest.raises(InvalidSpec):
            build_world(WorldSpec(8, 8, 0, 0, seed=0))
        with pytest.raises(InvalidSpec):
            build_world(WorldSpec(8, 8, 1, -1, seed=0))

    def test_json_round_trip(self):
        w = build_world(WorldSpec(16, 16, 4, 6, seed=11))
        assert WorldMap.from_json(w.to_json()) == w


def _symmetric_world():
    """Hand-built map that is mirror symmetric about its vertical center line."""
    size = 9
    cells = np.full((size, size), WALL, dtype=np.uint8)
    cells[1:8, 1:8] = FREE
    cells[3, 2] = WALL
    cells[3, 6] = WALL  # mirror of (3, 2)
    labels = np.where(cells == FREE, 0, -1).astype(np.int16)
    shade = np.ones((size, size))
    shade[5, 1] = shade[5, 7] = 0.8
    shade[2, 3] = shade[2, 5] = 0.9
    texture = np.zeros((size, size), dtype=np.uint8)
    texture[6, 2] = texture[6, 6] = 2
    texture[4, 4] = 1
    lms = [Landmark(2, 5, 0), Landmark(6, 5, 0)]
    pal = Palette(room_rgb=[(250, 240, 200)], landmark_rgb=[(220, 40, 40)])
    return WorldMap(size, size, cells, labels, lms, pal, shade=shade, texture=texture)


class TestRenderEgo:
    def test_wall_ahead_gives_wall_fill(self):
        w = build_world(WorldSpec(16, 16, 4, 6, seed=7))
        pose = next(
            Pose(x, y, h)
            for (x, y) in w.free_cells()
            for h in range(4)
            if not w.is_free(*Pose(x, y, h).forward_cell())
        )
        assert render_ego(w, pose, 32) == wall_fill_frame(w, 32)

    def test_deterministic(self):
        w = build_world(WorldSpec(16, 16, 4, 6, seed=5))
        p = Pose(2, 2, SOUTH)
        assert render_ego(w, p, 32) == render_ego(w, p, 32)

    def test_mirror_symmetry(self):
        w = _symmetric_world()
        # east and west views from the center column are left-right mirrors
        fe = render_ego(w, Pose(4, 4, EAST), 32)
        fw = render_ego(w, Pose(4, 4, WEST), 32)
        assert np.array_equal(fe.pixels, fw.pixels[:, ::-1, :])
        fn = render_ego(w, Pose(2, 6, NORTH), 32)
        fm = render_ego(w, Pose(6, 6, NORTH), 32)
        assert np.array_equal(fn.pixels, fm.pixels[:, ::-1, :])

    def test_frame_shape_and_dtype(self):
        w = build_world(WorldSpec(8, 8, 1, 0, seed=1))
        f = render_ego(w, Pose(3, 3, NORTH), 64)
        assert f.pixels.shape == (64, 64, 3)
        assert f.pixels.dtype == np.uint8

    def test_bad_size_rejected(self):
        from navgen.errors import DimensionMismatch

        w = build_world(WorldSpec(8, 8, 1, 0, seed=1))
        with pytest.raises(DimensionMismatch):
            render_ego(w, Pose(3, 3, NORTH), 30)

    def test_invalid_pose_rejected(self):
        from navgen.errors import InvalidPose

        w = build_world(WorldSpec(8, 8, 1, 0, seed=1))
        with pytest.raises(InvalidPose):
            render_ego(w, Pose(0, 0, NORTH), 32)


class TestPlanPath:
    def test_straight_line(self):
        w = build_world(WorldSpec(12, 12, 1, 0, seed=0))
        path = plan_path(w, Pose(2, 5, EAST), Pose(9, 5, EAST))
        assert len(path) == 8  # 7 forward moves
        assert all(p.heading == EAST for p in path)
        assert [(p.x, p.y) for p in path] == [(x, 5) for x in range(2, 10)]

    def test_detour_matches_bfs(self):
        size = 12
        cells = np.full((size, size), WALL, dtype=np.uint8)
        cells[1:11, 1:11] = FREE
        cells[2:10, 6] = WALL  # wall with a gap at the top row only
        labels = np.where(cells == FREE, 0, -1).astype(np.int16)
        pal = Palette(room_rgb=[(250, 240, 200)], landmark_rgb=[(220, 40, 40)])
        w = WorldMap(size, size, cells, labels, [], pal)
        start, goal = Pose(3, 8, EAST), Pose(9, 8, EAST)
        path = plan_path(w, start, goal)
        assert len(path) - 1 == bfs_optimal_moves(w, start, goal)

    def test_unreachable_goal(self):
        size = 10
        cells = np.full((size, size), WALL, dtype=np.uint8)
        cells[1:9, 1:9] = FREE
        cells[4:7, 4:7] = WALL
        cells[5, 5] = FREE  # free island enclosed by wall
        labels = np.where(cells == FREE, 0, -1).astype(np.int16)
        pal = Palette(room_rgb=[(250, 240, 200)], landmark_rgb=[(220, 40, 40)])
        w = WorldMap(size, size, cells, labels, [], pal)
        with pytest.raises(NoPath):
            plan_path(w, Pose(1, 1, EAST), Pose(5, 5, EAST))

    def test_blocked_cells_force_detour(self):
        w = build_world(WorldSpec(12, 12, 1, 0, seed=0))
        start, goal = Pose(2, 5, EAST), Pose(9, 5, EAST)
        blocked = {(6, 5)}
        path = plan_path(w, start, goal, blocked=blocked)
        assert all((p.x, p.y) not in blocked for p in path)
        assert len(path) - 1 == bfs_optimal_moves(w, start, goal, blocked)
        assert len(path) > 8

    def test_random_worlds_match_bfs_oracle(self):
        rng = random.Random(1234)
        for trial in range(25):
            w = build_world(WorldSpec(16, 16, rng.randint(1, 5), rng.randint(0, 6), seed=trial))
            free = w.free_cells()
            start = Pose(*rng.choice(free), rng.randrange(4))
            goal = Pose(*rng.choice(free), rng.randrange(4))
            path = plan_path(w, start, goal)
            assert len(path) - 1 == bfs_optimal_moves(w, start, goal)
            # legality of each consecutive move
            from navgen.gridworld import classify_move

            for a, b in zip(path, path[1:]):
                classify_move(a, b)

    def test_deterministic(self):
        w = build_world(WorldSpec(16, 16, 4, 6, seed=9))
        a = plan_path(w, Pose(2, 2, SOUTH), Pose(13, 13, NORTH))
        b = plan_path(w, Pose(2, 2, SOUTH), Pose(13, 13, NORTH))
        assert a == b


def _corridor_world():
    """11-wide single-room strip with a landmark at the east end."""
    cells = np.full((5, 13), WALL, dtype=np.uint8)
    cells[2, 1:12] = FREE
    labels = np.where(cells == FREE, 0, -1).astype(np.int16)
    pal = Palette(room_rgb=[(250, 240, 200)], landmark_rgb=[(250, 210, 40)])
    lms = [Landmark(11, 2, 0)]
    return WorldMap(13, 5, cells, labels, lms, pal, lm_style=[2])


class TestTrajectories:
    def test_corridor_single_segment_instruction(self):
        w = _corridor_world()
        t = generate_trajectory(w, Pose(1, 2, EAST), Pose(11, 2, EAST), TrajConfig(), "c0")
        assert len(t.segments) == 1
        assert t.instruction == "go straight until the lamp"
        assert len(t) == 11

    def test_multi_room_segments_partition(self):
        w = build_world(WorldSpec(16, 16, 4, 6, seed=7))
        t = generate_trajectory(w, Pose(2, 2, EAST), Pose(13, 13, NORTH),
                        TrajConfig(max_len=40), "t0")
        segs = t.segments
        assert segs[0].start == 0 and segs[-1].end == len(t)
        for a, b in zip(segs, segs[1:]):
            assert a.end == b.start
            assert a.room_label != b.room_label
        # segment count equals room transitions + 1
        transitions = sum(1 for a, b in zip(t.room_ids, t.room_ids[1:]) if a != b)
        assert len(segs) == transitions + 1

    def test_deterministic(self):
        w = build_world(WorldSpec(16, 16, 4, 6, seed=7))
        a = generate_trajectory(w, Pose(2, 2, EAST), Pose(13, 13, NORTH),
                        TrajConfig(max_len=40), "t")
        b = generate_trajectory(w, Pose(2, 2, EAST), Pose(13, 13, NORTH),
                        TrajConfig(max_len=40), "t")
        assert a.instruction == b.instruction
        assert all(fa == fb for fa, fb in zip(a.frames, b.frames))
        assert a.poses == b.poses

    def test_length_bounds_enforced(self):
        w = _corridor_world()
        with pytest.raises(LengthOutOfRange):
            generate_trajectory(w, Pose(1, 2, EAST), Pose(3, 2, EAST), TrajConfig(), "x")

    def test_frames_rendered_at_poses(self):
        w = build_world(WorldSpec(16, 16, 2, 3, seed=2))
        t = generate_trajectory(w, Pose(2, 2, EAST), Pose(13, 12, NORTH), TrajConfig(), "t")
        for pose, frame in zip(t.poses, t.frames):
            assert frame == render_ego(w, pose, 32)

    def test_six_plus_goal_input_shape(self):
        # every generated trajectory supports a 6-frame initial window plus goal
        w = build_world(WorldSpec(16, 16, 4, 6, seed=7))
        t = generate_trajectory(w, Pose(2, 2, EAST), Pose(13, 13, NORTH),
                        TrajConfig(max_len=40), "t")
        assert len(t) >= 8
        window = t.frames[:6] + [t.frames[-1]]
        assert len(window) == 7

    def test_meta_round_trip(self):
        from navgen.gridworld import Trajectory

        w = build_world(WorldSpec(16, 16, 4, 6, seed=7))
        t = generate_trajectory(w, Pose(2, 2, EAST), Pose(13, 13, NORTH),
                        TrajConfig(max_len=40), "t")
        t2 = Trajectory.from_meta_json(t.meta_json(), t.frames)
        assert t2.poses == t.poses
        assert t2.instruction == t.instruction
        assert [(s.room_label, s.start, s.end) for s in t2.segments] == [
            (s.room_label, s.start, s.end) for s in t.segments
        ]


class TestSegmentScenes:
    def test_single_room(self):
        w = _corridor_world()
        t = generate_trajectory(w, Pose(1, 2, EAST), Pose(11, 2, EAST), TrajConfig(), "c")
        segs = segment_scenes(t)
        assert [(s.start, s.end) for s in segs] == [(0, len(t))]
        assert segs[0].sub_instruction == t.segments[0].sub_instruction

    def test_run_length_example(self):
        labels = ["A", "A", "B", "B", "B", "A"]
        assert run_length_segments(labels) == [(0, 2, "A"), (2, 5, "B"), (5, 6, "A")]

    @given(st.lists(st.integers(min_value=0, max_value=3), min_size=1, max_size=40))
    @settings(max_examples=50, deadline=None)
    def test_segment_count_equals_transitions(self, labels):
        runs = run_length_segments(labels)
        transitions = sum(1 for a, b in zip(labels, labels[1:]) if a != b)
        assert len(runs) == transitions + 1
        assert runs[0][0] == 0 and runs[-1][1] == len(labels)
        for (s0, e0, _), (s1, e1, _) in zip(runs, runs[1:]):
            assert e0 == s1
