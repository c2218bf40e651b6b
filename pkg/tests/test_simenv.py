import numpy as np
import pytest

from vnafford.geometry import HANDLE, random_rigid_transform, random_rotation
from vnafford.simenv import (GRIPPER_APERTURE, STROKE, GripperAction, ObjectSpec, ObjectState, PrimitiveType,
                             dump_specs, execute_primitive, generate_specs, ground_truth_success_grid,
                             initial_state, load_specs, part_areas, render_cloud, sample_object, surface_distance)

# closing along local z, approach into the front face (-x)
GRASP = np.array([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
# closing along local y, for the vertical door handle
GRASP_Y = np.column_stack([[0.0, 1.0, 0.0], [0.0, 0.0, -1.0], [-1.0, 0.0, 0.0]])


def drawer(seed, setting="identity"):
    return sample_object("drawer", np.random.default_rng(seed), setting)


def handle_front(spec):
    """Local point on the handle surface facing away from the slab, at mid-length."""
    return spec.moving_part_center + spec.handle.center_offset + [spec.handle.radius, 0.0, 0.0]


def world_action(spec, prim, local_point, local_rot):
    pose = spec.base_pose
    return GripperAction(prim, pose.apply_points(local_point), pose.rotation @ local_rot)


def test_sample_object_deterministic():
    assert drawer(0, "so3") == drawer(0, "so3")
    assert drawer(0) != drawer(1)


def test_drawer_is_prismatic_out_of_front_face():
    for seed in range(20):
        s = drawer(seed)
        assert s.joint_kind == "prismatic"
        assert np.array_equal(s.joint_axis, [1.0, 0.0, 0.0])
        assert s.moving_part_center[0] > s.body_size[0] / 2


def test_door_is_revolute():
    s = sample_object("door", np.random.default_rng(0))
    assert s.joint_kind == "revolute"
    with pytest.raises(ValueError):
        sample_object("window", np.random.default_rng(0))


@pytest.mark.parametrize("family", ["drawer", "door"])
def test_thousand_specs_valid(family):
    for s in generate_specs(family, 1000, 3, setting="so3"):
        lo, hi = s.joint_range
        assert lo < hi
        assert s.handle.radius < GRIPPER_APERTURE / 2
        assert np.all((s.body_size >= 0.3) & (s.body_size <= 1.0))
        assert 0.005 <= s.handle.radius <= 0.02
        assert s.handle.length <= 0.2 and s.handle.length > 0
        assert np.all(s.moving_part_size > 0)


def test_spec_validation():
    s = drawer(0)
    with pytest.raises(ValueError):
        ObjectSpec(**{**s.__dict__, "joint_range": (0.3, 0.3)})
    bad = type(s.handle)(s.handle.center_offset, s.handle.axis, s.handle.length, GRIPPER_APERTURE)
    with pytest.raises(ValueError):
        ObjectSpec(**{**s.__dict__, "handle": bad})


def test_spec_json_roundtrip(tmp_path):
    specs = generate_specs("door", 5, 4, setting="so3") + generate_specs("drawer", 5, 4)
    dump_specs(specs, tmp_path / "specs.json")
    assert load_specs(tmp_path / "specs.json") == specs


def test_joint_value_clamped():
    s = drawer(5)
    lo, hi = s.joint_range
    assert ObjectState(s, hi + 10).joint_value == hi
    assert ObjectState(s, lo - 10).joint_value == lo
    assert ObjectState(s, (lo + hi) / 2).fraction == pytest.approx(0.5)


def test_render_deterministic():
    s = drawer(6, "so3")
    a = render_cloud(initial_state(s, np.random.default_rng(1)), 256, np.random.default_rng(2))
    b = render_cloud(initial_state(s, np.random.default_rng(1)), 256, np.random.default_rng(2))
    assert a == b
    with pytest.raises(ValueError):
        render_cloud(initial_state(s, np.random.default_rng(1)), 63, np.random.default_rng(2))


@pytest.mark.parametrize("family", ["drawer", "door"])
def test_rendered_points_on_surface(family):
    rng = np.random.default_rng(7)
    for _ in range(10):
        st = initial_state(sample_object(family, rng, "so3"), rng)
        c = render_cloud(st, 512, rng)
        assert np.max(surface_distance(st, c.points)) < 1e-6


def test_handle_fraction_matches_area_share():
    rng = np.random.default_rng(8)
    for _ in range(10):
        s = sample_object("drawer", rng)
        st = ObjectState(s, s.joint_range[0])
        (sx, sy, sz), (t, w, h) = s.body_size, s.moving_part_size
        r, length = s.handle.radius, s.handle.length
        # closed drawer: body box, slab without its back face, capped cylinder
        handle = 2 * np.pi * r * length + 2 * np.pi * r ** 2
        total = 2 * (sx * sy + sy * sz + sx * sz) + 2 * t * w + 2 * t * h + w * h + handle
        assert part_areas(st)[HANDLE] == pytest.approx(handle, rel=1e-12)
        assert sum(part_areas(st).values()) == pytest.approx(total, rel=1e-12)
        c = render_cloud(st, 4096, rng)
        share = np.mean(c.part_labels == HANDLE)
        assert abs(share / (handle / total) - 1) < 0.2


@pytest.mark.parametrize("setting", ["identity", "so3"])
def test_pull_at_handle_opens_closed_drawer(setting):
    for seed in range(10):
        s = drawer(seed, setting)
        st = ObjectState(s, s.joint_range[0])
        res, nxt = execute_primitive(st, world_action(s, "pull", handle_front(s), GRASP))
        assert res == 1
        # straight pull along the slide: full stroke, range is at least 0.15 m
        assert nxt.joint_value == pytest.approx(s.joint_range[0] + STROKE, abs=1e-12)


def test_pull_with_closing_along_handle_fails():
    s = drawer(0)
    st = ObjectState(s, 0.0)
    assert execute_primitive(st, world_action(s, "pull", handle_front(s), GRASP_Y))[0] == 0


def test_pull_on_base_fails():
    s = drawer(1, "so3")
    st = initial_state(s, np.random.default_rng(0))
    top = np.array([0.0, 0.0, s.body_size[2] / 2])
    res, nxt = execute_primitive(st, world_action(s, "pull", top, GRASP))
    assert res == 0 and nxt == st


def test_pull_off_surface_fails():
    s = drawer(2)
    st = ObjectState(s, 0.0)
    far = handle_front(s) + [0.01, 0.0, 0.0]
    assert execute_primitive(st, world_action(s, "pull", far, GRASP))[0] == 0


def test_push_closed_drawer_is_clamped():
    s = drawer(3, "so3")
    st = ObjectState(s, s.joint_range[0])
    t, w, h = s.moving_part_size
    front = s.moving_part_center + [t / 2, 0.45 * w, 0.45 * h]
    res, nxt = execute_primitive(st, world_action(s, "push", front, GRASP))
    assert res == 0 and nxt.joint_value == s.joint_range[0]
    # the same push closes a half-open drawer
    lo, hi = s.joint_range
    half = ObjectState(s, (lo + hi) / 2)
    moved = front + [half.joint_value, 0.0, 0.0]
    res, nxt = execute_primitive(half, world_action(s, "push", moved, GRASP))
    assert res == 1 and nxt.joint_value == pytest.approx(half.joint_value - STROKE, abs=1e-12)


def test_state_stays_in_range():
    rng = np.random.default_rng(9)
    for _ in range(200):
        s = sample_object(["drawer", "door"][rng.integers(2)], rng, "so3")
        st = initial_state(s, rng)
        c = render_cloud(st, 128, rng)
        for p in c.points[:5]:
            _, nxt = execute_primitive(st, GripperAction(list(PrimitiveType)[rng.integers(6)], p, random_rotation(rng)))
            lo, hi = s.joint_range
            assert lo <= nxt.joint_value <= hi


def scene_actions(rng, n):
    """Object state plus actions near the handle (often successful) and random surface actions."""
    s = sample_object(["drawer", "door"][rng.integers(2)], rng, "so3")
    st = initial_state(s, rng)
    c = render_cloud(st, 256, rng)
    handle = np.flatnonzero(c.part_labels == HANDLE)
    out = []
    for _ in range(n):
        if rng.random() < 0.5 and len(handle):
            p = c.points[rng.choice(handle)]
            grasp = GRASP if s.family == "drawer" else GRASP_Y
            r = s.base_pose.rotation @ grasp if rng.random() < 0.7 else random_rotation(rng)
            out.append(GripperAction("pull", p, r))
        else:
            p = c.points[rng.integers(len(c))]
            out.append(GripperAction(list(PrimitiveType)[rng.integers(6)], p, random_rotation(rng)))
    return st, out


def moved(st, t):
    return ObjectState(st.spec.with_pose(t.compose(st.spec.base_pose)), st.joint_value)


def test_simulator_equivariance_500_trials():
    rng = np.random.default_rng(10)
    n_pos = 0
    for _ in range(100):
        st, actions = scene_actions(rng, 5)
        t = random_rigid_transform(rng)
        st2 = moved(st, t)
        for a in actions:
            b = GripperAction(a.primitive, t.apply_points(a.contact_point), t.rotation @ a.orientation)
            ra, na = execute_primitive(st, a)
            rb, nb = execute_primitive(st2, b)
            assert ra == rb
            assert nb.spec == st2.spec
            assert nb.joint_value == pytest.approx(na.joint_value, abs=1e-12)
            n_pos += ra
    assert n_pos > 20


def test_execute_is_deterministic():
    st, actions = scene_actions(np.random.default_rng(11), 20)
    assert [execute_primitive(st, a)[0] for a in actions] == [execute_primitive(st, a)[0] for a in actions]


def grid_inputs(seed, m=48, l=24):
    rng = np.random.default_rng(seed)
    st, _ = scene_actions(rng, 0)
    c = render_cloud(st, 256, rng)
    pts = c.points[rng.choice(len(c), m, replace=False)]
    handle = c.points[c.part_labels == HANDLE][:8]
    rots = [random_rotation(rng) for _ in range(l)] + [st.spec.base_pose.rotation @ GRASP]
    return st, np.concatenate([pts, handle]), np.array(rots)


@pytest.mark.parametrize("prim", ["pull", "push", "pull_up", "push_left"])
def test_grid_matches_pointwise(prim):
    st, pts, rots = grid_inputs(12)
    grid = ground_truth_success_grid(st, prim, pts, rots)
    assert grid.shape == (len(pts), len(rots))
    for i, p in enumerate(pts):
        for j, r in enumerate(rots):
            assert grid[i, j] == (execute_primitive(st, GripperAction(prim, p, r))[0] == 1)


def test_grid_on_base_is_zero_for_pull():
    st, _, rots = grid_inputs(13)
    c = render_cloud(st, 512, np.random.default_rng(0))
    base = c.points[c.part_labels == 0]
    for prim in ("pull", "pull_up", "pull_left"):
        assert not ground_truth_success_grid(st, prim, base, rots).any()


def test_grid_co_rotation_identical():
    hits = 0
    for seed in range(5):
        st, pts, rots = grid_inputs(20 + seed)
        t = random_rigid_transform(np.random.default_rng(seed))
        for prim in ("pull", "push"):
            a = ground_truth_success_grid(st, prim, pts, rots)
            b = ground_truth_success_grid(moved(st, t), prim, t.apply_points(pts), t.rotation @ rots)
            assert np.array_equal(a, b)
            hits += a.sum()
    assert hits > 0
