"""Procedural driving worlds, synthetic LiDAR sequences and their conditions.

A world is a flat ground plane with a straight two-lane road along the world
x axis, roadside props (box buildings, cylinder trees/shrubs) and agents
(oriented boxes with constant planar velocity).  The ego vehicle drives along
+x; the sensor sits ``sensor_height`` above the ground with yaw 0, so the
sensor frame is the world frame translated by the ego position.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from seqlidar import l4dt
from seqlidar.codec import (
    EquirectImage,
    OrientedBox,
    PointCloud,
    SensorConfig,
    bin_indices,
    project,
    render_box_layer,
    render_object_prior,
    render_road_sketch,
    save_image,
)
from seqlidar.errors import GenerationError, IngestionError, ValidationError, VocabularyError

FRAME_DT = 0.5

REFLECTANCE = {
    "ground": 0.1,
    "building": 0.4,
    "tree": 0.3,
    "car": 0.6,
    "truck": 0.6,
    "pedestrian": 0.5,
}

TIMES = ("day", "night", "dusk")
WEATHERS = ("clear", "rain", "fog", "cloudy")
BACKGROUNDS = ("buildings", "trees", "grassy", "mixed")
CATEGORIES = ("car", "truck", "pedestrian")

VOCAB = ("PAD",) + tuple(w.upper() for w in TIMES + WEATHERS + BACKGROUNDS + CATEGORIES)
TOKEN_ID = {name: i for i, name in enumerate(VOCAB)}
MAX_CAPTION = 16
CAPTION_SLOTS = {"time_of_day": 0, "weather": 1, "background": 2}

SIZE_RANGES = {
    "car": ((3.8, 4.8), (1.7, 2.0), (1.4, 1.7)),
    "truck": ((6.0, 9.0), (2.3, 2.6), (2.8, 3.6)),
    "pedestrian": ((0.5, 0.8), (0.5, 0.8), (1.6, 1.9)),
}


@dataclass
class WorldParams:
    n_agents: tuple = (1, 6)
    n_props: tuple = (4, 14)
    time_weights: tuple = (0.6, 0.2, 0.2)
    weather_weights: tuple = (0.55, 0.15, 0.1, 0.2)
    background_weights: tuple = (0.25, 0.25, 0.25, 0.25)
    category_weights: tuple = (0.6, 0.15, 0.25)
    lane_half_width: float = 1.75
    ego_speed: tuple = (0.0, 5.0)
    sensor_height: float = 1.8
    road_extent: float = 100.0

    def __post_init__(self):
        lo, hi = self.n_agents
        if not 0 <= lo <= hi <= 8:
            raise ValidationError(f"agent count range must lie in [0, 8], got {self.n_agents}")
        lo, hi = self.n_props
        if not 0 <= lo <= hi <= 20:
            raise ValidationError(f"prop count range must lie in [0, 20], got {self.n_props}")
        if self.ego_speed[1] * FRAME_DT >= 3.0:
            raise ValidationError("ego speed too high for continuous poses")


@dataclass
class Agent:
    id: int
    box: OrientedBox
    velocity: tuple

    def box_at(self, time):
        cx, cy, cz = self.box.center
        vx, vy = self.velocity
        return OrientedBox((cx + vx * time, cy + vy * time, cz), self.box.l, self.box.w, self.box.h,
                           self.box.heading, self.box.category)


@dataclass
class Cylinder:
    x: float
    y: float
    radius: float
    height: float


@dataclass
class SceneWorld:
    seed: int
    lane_half_width: float
    road_extent: float
    sensor_height: float
    buildings: list = field(default_factory=list)
    trees: list = field(default_factory=list)
    agents: list = field(default_factory=list)
    ego_start: tuple = (0.0, -1.75)
    ego_speed: float = 0.0
    attributes: dict = field(default_factory=dict)

    @property
    def road_half_width(self):
        return 2.0 * self.lane_half_width

    def layout(self):
        """Curb and lane polylines in the world frame (z = 0)."""
        e, half = self.road_extent, self.road_half_width
        return [
            np.array([[-e, -half, 0.0], [e, -half, 0.0]]),
            np.array([[-e, half, 0.0], [e, half, 0.0]]),
            np.array([[-e, 0.0, 0.0], [e, 0.0, 0.0]]),
        ]

    def ego_pose(self, time):
        """(x, y, yaw) of the ego vehicle at ``time`` seconds."""
        x0, y0 = self.ego_start
        return (x0 + self.ego_speed * time, y0, 0.0)

    def agent_boxes(self, time):
        return [a.box_at(time) for a in self.agents]


def _choice(rng, options, weights):
    w = np.asarray(weights, float)
    return options[int(rng.choice(len(options), p=w / w.sum()))]


def _footprint(box):
    return box.corners()[::2, :2][[0, 1, 3, 2]]


def footprints_overlap(a, b):
    """Separating-axis test for two upright boxes' ground footprints."""
    pa, pb = _footprint(a), _footprint(b)
    for poly in (pa, pb):
        for k in range(4):
            edge = poly[(k + 1) % 4] - poly[k]
            axis = np.array([-edge[1], edge[0]])
            ra, rb = pa @ axis, pb @ axis
            if ra.max() <= rb.min() or rb.max() <= ra.min():
                return False
    return True


def _cylinder_box(c):
    return OrientedBox((c.x, c.y, c.height / 2), 2 * c.radius, 2 * c.radius, c.height, 0.0, "tree")


def _sample_agent(rng, params, idx, half):
    category = _choice(rng, CATEGORIES, params.category_weights)
    (l0, l1), (w0, w1), (h0, h1) = SIZE_RANGES[category]
    l, w, h = rng.uniform(l0, l1), rng.uniform(w0, w1), rng.uniform(h0, h1)
    lhw = params.lane_half_width
    if category == "pedestrian":
        side = rng.choice([-1.0, 1.0])
        x = rng.uniform(-30.0, 30.0)
        y = side * (half + rng.uniform(1.0, 3.0))
        heading = rng.uniform(-math.pi, math.pi)
        speed = rng.uniform(0.0, 1.5)
    else:
        lane = rng.choice([-1.0, 1.0])
        x = rng.uniform(-40.0, 40.0)
        y = lane * lhw
        heading = 0.0 if lane < 0 else math.pi
        speed = rng.uniform(0.0, 8.0)
    velocity = (speed * math.cos(heading), speed * math.sin(heading))
    box = OrientedBox((x, y, h / 2), l, w, h, heading, category)
    return Agent(idx, box, velocity)


def synth_world(seed, params=None):
    """Deterministically generate a world from ``seed``.

    Raises:
        GenerationError: if non-overlapping agents cannot be placed within
            1000 rejection attempts.
    """
    params = params or WorldParams()
    rng = np.random.default_rng(seed)
    attrs = {
        "time_of_day": _choice(rng, TIMES, params.time_weights),
        "weather": _choice(rng, WEATHERS, params.weather_weights),
        "background_kind": _choice(rng, BACKGROUNDS, params.background_weights),
    }
    lhw = params.lane_half_width
    half = 2.0 * lhw
    world = SceneWorld(
        seed=int(seed),
        lane_half_width=lhw,
        road_extent=params.road_extent,
        sensor_height=params.sensor_height,
        ego_start=(0.0, -lhw),
        ego_speed=float(rng.uniform(*params.ego_speed)),
        attributes=attrs,
    )
    n_props = int(rng.integers(params.n_props[0], params.n_props[1] + 1))
    kind = attrs["background_kind"]
    for _ in range(n_props):
        side = rng.choice([-1.0, 1.0])
        x = rng.uniform(-60.0, 60.0)
        make_building = kind == "buildings" or (kind == "mixed" and rng.random() < 0.5)
        if make_building:
            l, w, h = rng.uniform(8, 20), rng.uniform(6, 12), rng.uniform(4, 15)
            y = side * (half + 4.0 + w / 2 + rng.uniform(0, 6))
            world.buildings.append(OrientedBox((x, y, h / 2), l, w, h, 0.0, "building"))
        else:
            shrub = kind == "grassy"
            radius = rng.uniform(0.6, 1.4) if shrub else rng.uniform(0.8, 1.6)
            height = rng.uniform(0.4, 1.0) if shrub else rng.uniform(4.0, 8.0)
            y = side * (half + 2.5 + radius + rng.uniform(0, 8))
            world.trees.append(Cylinder(x, y, radius, height))

    n_agents = int(rng.integers(params.n_agents[0], params.n_agents[1] + 1))
    ego_box = OrientedBox((world.ego_start[0], world.ego_start[1], 0.8), 4.6, 1.9, 1.6, 0.0, "car")
    obstacles = [ego_box] + world.buildings + [_cylinder_box(c) for c in world.trees]
    attempts = 0
    while len(world.agents) < n_agents:
        if attempts >= 1000:
            raise GenerationError(f"could not place {n_agents} agents after 1000 attempts (seed {seed})")
        attempts += 1
        agent = _sample_agent(rng, params, len(world.agents), half)
        others = obstacles + [a.box for a in world.agents]
        if any(footprints_overlap(agent.box, o) for o in others):
            continue
        world.agents.append(agent)
    return world


def validate_world(world, frames=1, dt=FRAME_DT):
    """Return a list of invariant violations (empty when the world is valid)."""
    problems = []
    boxes = [a.box for a in world.agents]
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if footprints_overlap(boxes[i], boxes[j]):
                problems.append(f"agents {i} and {j} interpenetrate")
        if abs(boxes[i].center[2] - boxes[i].h / 2) > 1e-12:
            problems.append(f"agent {i} is not on the ground")
    if len(world.agents) > 8:
        problems.append("more than 8 agents")
    if len(world.buildings) + len(world.trees) > 20:
        problems.append("more than 20 props")
    for k in range(1, frames):
        a, b = world.ego_pose((k - 1) * dt), world.ego_pose(k * dt)
        if math.hypot(b[0] - a[0], b[1] - a[1]) >= 3.0:
            problems.append(f"ego jumps at frame {k}")
    for key, options in (("time_of_day", TIMES), ("weather", WEATHERS), ("background_kind", BACKGROUNDS)):
        if world.attributes.get(key) not in options:
            problems.append(f"bad attribute {key}")
    return problems


# -- sensor frame -------------------------------------------------------------------


def to_sensor(points, pose, sensor_height):
    """World points -> sensor frame for an ego pose ``(x, y, yaw)``."""
    x, y, yaw = pose
    c, s = math.cos(yaw), math.sin(yaw)
    p = np.asarray(points, float) - np.array([x, y, sensor_height])
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    return p @ rot.T


def box_to_sensor(box, pose, sensor_height):
    center = to_sensor(np.asarray(box.center)[None], pose, sensor_height)[0]
    return OrientedBox(tuple(center), box.l, box.w, box.h, box.heading - pose[2], box.category)


# -- ray casting --------------------------------------------------------------------


def _ray_boxes(dirs, boxes):
    best = np.full(len(dirs), np.inf)
    for box in boxes:
        rot = box.rotation()
        o = -np.asarray(box.center) @ rot
        d = dirs @ rot
        half = 0.5 * np.array([box.l, box.w, box.h])
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - o) / d
            t2 = (half - o) / d
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tmax >= tmin) & (tmin > 0)
        best = np.where(hit & (tmin < best), tmin, best)
    return best


def _ray_cylinders(dirs, cylinders, ground_z):
    best = np.full(len(dirs), np.inf)
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    a = dx * dx + dy * dy
    for cyl in cylinders:
        cx, cy = cyl.x, cyl.y
        b = -2.0 * (dx * cx + dy * cy)
        c = cx * cx + cy * cy - cyl.radius**2
        disc = b * b - 4 * a * c
        ok = (disc >= 0) & (a > 0)
        root = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t_side = (-b - root) / (2 * a)
        z = t_side * dz
        side = ok & (t_side > 0) & (z >= ground_z) & (z <= ground_z + cyl.height)
        best = np.where(side & (t_side < best), t_side, best)
        top = ground_z + cyl.height
        with np.errstate(divide="ignore", invalid="ignore"):
            t_top = top / dz
        px, py = t_top * dx - cx, t_top * dy - cy
        cap = (t_top > 0) & (px * px + py * py <= cyl.radius**2)
        best = np.where(cap & (t_top < best), t_top, best)
    return best


def raycast_frame(world, ego_pose, cfg, time=0.0):
    """Cast one ray per bin centre; return the nearest hits as a point cloud."""
    dirs = cfg.ray_directions().reshape(-1, 3)
    h = world.sensor_height
    ground_z = -h
    with np.errstate(divide="ignore"):
        t_ground = np.where(dirs[:, 2] < 0, ground_z / dirs[:, 2], np.inf)
    candidates = [(t_ground, REFLECTANCE["ground"])]
    buildings = [box_to_sensor(b, ego_pose, h) for b in world.buildings]
    candidates.append((_ray_boxes(dirs, buildings), REFLECTANCE["building"]))
    trees = [Cylinder(*to_sensor([[c.x, c.y, 0.0]], ego_pose, h)[0, :2], c.radius, c.height)
             for c in world.trees]
    candidates.append((_ray_cylinders(dirs, trees, ground_z), REFLECTANCE["tree"]))
    for agent_box in world.agent_boxes(time):
        sb = box_to_sensor(agent_box, ego_pose, h)
        candidates.append((_ray_boxes(dirs, [sb]), REFLECTANCE[sb.category]))
    ts = np.stack([c[0] for c in candidates])
    refl = np.array([c[1] for c in candidates])
    which = np.argmin(ts, axis=0)
    t = ts[which, np.arange(len(dirs))]
    hit = np.isfinite(t) & (t <= cfg.d_max)
    pts = dirs[hit] * t[hit, None]
    return PointCloud(np.concatenate([pts, refl[which[hit]][:, None]], axis=1))


# -- object conditions and priors -----------------------------------------------------


@dataclass
class ObjectCondition:
    category: str
    l: float
    w: float
    h: float
    rho: float
    theta: float
    phi: float
    heading: float

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValidationError(f"unknown category {self.category!r}")
        if min(self.l, self.w, self.h) <= 0:
            raise ValidationError("object extents must be positive")
        if not self.rho > 0:
            raise ValidationError("object range must be positive")
        if not -math.pi <= self.theta < math.pi:
            raise ValidationError(f"azimuth {self.theta} outside [-pi, pi)")

    @classmethod
    def from_box(cls, box):
        x, y, z = box.center
        rho = math.sqrt(x * x + y * y + z * z)
        theta = math.atan2(y, x)
        if theta >= math.pi:
            theta -= 2 * math.pi
        return cls(box.category, box.l, box.w, box.h, rho, theta, math.asin(z / rho), box.heading)

    @classmethod
    def on_ground(cls, category, l, w, h, rho_xy, theta, heading, sensor_height):
        """Condition for an object standing on the ground at planar range ``rho_xy``."""
        z = h / 2 - sensor_height
        rho = math.hypot(rho_xy, z)
        return cls(category, l, w, h, rho, theta, math.atan2(z, rho_xy), heading)

    def to_box(self):
        c = math.cos(self.phi)
        center = (self.rho * c * math.cos(self.theta), self.rho * c * math.sin(self.theta),
                  self.rho * math.sin(self.phi))
        return OrientedBox(center, self.l, self.w, self.h, self.heading, self.category)


PRIOR_DENSITY = 4000.0  # points per m^2 at 1 m; falls off as 1/range^2


def _box_faces(box):
    """(centre, normal, u-axis, v-axis, half-u, half-v) for the six faces."""
    rot = box.rotation()
    half = 0.5 * np.array([box.l, box.w, box.h])
    faces = []
    for axis in range(3):
        u_ax, v_ax = [a for a in range(3) if a != axis]
        for sign in (-1.0, 1.0):
            n_local = np.zeros(3)
            n_local[axis] = sign
            normal = rot @ n_local
            center = np.asarray(box.center) + normal * half[axis]
            faces.append((center, normal, rot[:, u_ax], rot[:, v_ax], half[u_ax], half[v_ax]))
    return faces


def sample_object_prior(obj, seed, d_max=80.0, density=PRIOR_DENSITY):
    """Points on the sensor-facing surface of a procedural object.

    Vehicles use the faces of their oriented box whose outward normal points
    towards the sensor; pedestrians use the front half of a vertical capsule.
    Point count scales with visible area / range^2.
    """
    if obj.rho > d_max:
        raise ValidationError(f"object range {obj.rho} exceeds d_max {d_max}")
    rng = np.random.default_rng(seed)
    box = obj.to_box()
    scale = density / (obj.rho * obj.rho)
    chunks = []
    if obj.category == "pedestrian":
        pts = _capsule_points(box, rng, scale)
        chunks.append(pts)
    else:
        for center, normal, u, v, hu, hv in _box_faces(box):
            if float(normal @ center) >= 0.0:
                continue
            n = int(round(scale * 4 * hu * hv))
            if n == 0:
                continue
            a = rng.uniform(-hu, hu, size=(n, 1))
            b = rng.uniform(-hv, hv, size=(n, 1))
            chunks.append(center + a * u + b * v)
    pts = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    refl = np.full((len(pts), 1), REFLECTANCE[obj.category])
    return PointCloud(np.concatenate([pts, refl], axis=1))


def _capsule_points(box, rng, scale):
    r = 0.5 * min(box.l, box.w)
    cyl_h = max(box.h - 2 * r, 0.0)
    cx, cy, cz = box.center
    area_side = 2 * math.pi * r * cyl_h
    area_caps = 4 * math.pi * r * r
    n = int(round(scale * (area_side + area_caps)))
    if n == 0:
        return np.zeros((0, 3))
    on_side = rng.random(n) < area_side / (area_side + area_caps)
    psi = rng.uniform(-math.pi, math.pi, n)
    z = rng.uniform(-cyl_h / 2, cyl_h / 2, n)
    normals = np.stack([np.cos(psi), np.sin(psi), np.zeros(n)], axis=1)
    offsets = np.stack([np.zeros(n), np.zeros(n), z], axis=1)
    sph = rng.standard_normal((n, 3))
    sph /= np.linalg.norm(sph, axis=1, keepdims=True)
    sph_off = np.where(sph[:, 2:3] >= 0, cyl_h / 2, -cyl_h / 2) * np.array([0.0, 0.0, 1.0])
    normals = np.where(on_side[:, None], normals, sph)
    offsets = np.where(on_side[:, None], offsets, sph_off)
    pts = np.array([cx, cy, cz]) + offsets + r * normals
    visible = np.einsum("ij,ij->i", normals, pts) < 0
    return pts[visible]


# -- captions -----------------------------------------------------------------------


def caption_tokens(time_of_day, weather, background_kind, categories):
    names = [time_of_day.upper(), weather.upper(), background_kind.upper()]
    names += [c.upper() for c in sorted(categories, key=CATEGORIES.index)]
    return encode_caption(names)


def derive_caption(world):
    """Token ids for the world's attributes and the multiset of agent categories."""
    a = world.attributes
    return caption_tokens(a["time_of_day"], a["weather"], a["background_kind"],
                          [ag.box.category for ag in world.agents])


def encode_caption(names):
    try:
        ids = [TOKEN_ID[n] for n in names]
    except KeyError as exc:
        raise VocabularyError(f"unknown caption token {exc.args[0]!r}") from None
    if len(ids) > MAX_CAPTION:
        raise ValidationError(f"caption longer than {MAX_CAPTION} tokens")
    return ids


def decode_caption(ids):
    for i in ids:
        if not 0 <= i < len(VOCAB):
            raise VocabularyError(f"token id {i} outside vocabulary")
    return [VOCAB[i] for i in ids]


# -- sequences ------------------------------------------------------------------------


@dataclass
class SequenceSample:
    seed: int
    images: list
    sketches: np.ndarray
    priors: np.ndarray
    caption: list
    boxes: list

    @property
    def frames(self):
        return len(self.images)

    def x(self):
        """Stacked image channels, shape [F, 2, H, W]."""
        return np.stack([img.channels for img in self.images])

    def bundle(self):
        from seqlidar.bundle import ConditionBundle

        return ConditionBundle(self.sketches, self.priors, self.caption)


def prior_seed(sample_seed, box_id):
    return int(np.random.SeedSequence([int(sample_seed), int(box_id), 7919]).generate_state(1)[0])


def box_record(box, box_id, frame):
    return {
        "id": int(box_id),
        "category": box.category,
        "l": float(box.l),
        "w": float(box.w),
        "h": float(box.h),
        "center": [float(c) for c in box.center],
        "heading": float(box.heading),
        "frame": int(frame),
    }


def record_box(rec):
    return OrientedBox(tuple(rec["center"]), rec["l"], rec["w"], rec["h"], rec["heading"], rec["category"])


def render_prior_frame(records, sample_seed, cfg, seeds=None):
    """Object-prior image for one frame's box annotations.

    Each object's points are drawn with ``seeds[id]`` if given, else the
    record's own ``prior_seed``, else a seed derived from the sample seed.
    """
    clouds = []
    for rec in records:
        obj = ObjectCondition.from_box(record_box(rec))
        if obj.rho > cfg.d_max:
            continue
        seed = (seeds or {}).get(rec["id"], rec.get("prior_seed", prior_seed(sample_seed, rec["id"])))
        clouds.append(sample_object_prior(obj, seed, cfg.d_max))
    return render_object_prior(PointCloud.concat(clouds), cfg)


def render_frame_conditions(layout_sensor, records, sample_seed, cfg):
    boxes = [record_box(r) for r in records]
    sketch = render_road_sketch(layout_sensor, boxes, cfg)
    prior = render_prior_frame(records, sample_seed, cfg)
    return sketch, prior


def simulate_sequence(world, frames, cfg, dt=FRAME_DT):
    """Ray-cast ``frames`` consecutive sweeps and derive all conditions."""
    if frames < 1:
        raise ValidationError("need at least one frame")
    images, sketches, priors, records = [], [], [], []
    h = world.sensor_height
    for k in range(frames):
        time = k * dt
        pose = world.ego_pose(time)
        img = project(raycast_frame(world, pose, cfg, time), cfg)
        layout = [to_sensor(p, pose, h) for p in world.layout()]
        frame_records = [
            dict(box_record(box_to_sensor(a.box_at(time), pose, h), a.id, k), prior_seed=prior_seed(world.seed, a.id))
            for a in world.agents
        ]
        frame_records = [json.loads(json.dumps(r)) for r in frame_records]
        sketch, prior = render_frame_conditions(layout, frame_records, world.seed, cfg)
        images.append(img)
        sketches.append(sketch)
        priors.append(prior)
        records.extend(frame_records)
    return SequenceSample(
        seed=world.seed,
        images=images,
        sketches=np.stack(sketches).astype(np.float32),
        priors=np.stack(priors).astype(np.float32),
        caption=derive_caption(world),
        boxes=records,
    )


def box_pixel_footprint(box, cfg, step=0.05, dilate=1):
    """Pixels covered by a box's surface, dilated by ``dilate`` pixels (wrapping in azimuth)."""
    samples = []
    for center, _, u, v, hu, hv in _box_faces(box):
        nu = max(2, int(math.ceil(2 * hu / step)) + 1)
        nv = max(2, int(math.ceil(2 * hv / step)) + 1)
        a, b = np.meshgrid(np.linspace(-hu, hu, nu), np.linspace(-hv, hv, nv), indexing="ij")
        samples.append(center + a.reshape(-1, 1) * u + b.reshape(-1, 1) * v)
    row, col, _, keep = bin_indices(np.concatenate(samples), cfg)
    mask = np.zeros((cfg.H, cfg.W), dtype=bool)
    mask[row[keep], col[keep]] = True
    for _ in range(dilate):
        grown = mask.copy()
        grown[1:] |= mask[:-1]
        grown[:-1] |= mask[1:]
        grown |= np.roll(mask, 1, axis=1) | np.roll(mask, -1, axis=1)
        mask = grown
    return mask


def check_consistency(sample, cfg):
    """Frames whose prior or box-sketch pixels fall outside the annotated boxes."""
    bad = []
    for k in range(sample.frames):
        recs = [r for r in sample.boxes if r["frame"] == k]
        allowed = np.zeros((cfg.H, cfg.W), dtype=bool)
        for r in recs:
            allowed |= box_pixel_footprint(record_box(r), cfg)
        prior_px = sample.priors[k, 0] > -1.0
        sketch_px = sample.sketches[k, 1] > 0
        if np.any(prior_px & ~allowed) or np.any(sketch_px & ~allowed):
            bad.append(k)
    return bad


# -- dataset directories ------------------------------------------------------------------


def write_sample(root, sample, cfg):
    out = Path(root) / str(sample.seed)
    out.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(sample.images):
        save_image(out / f"frame_{k}.l4dt", img, out / f"mask_{k}.l4dt")
        l4dt.save(out / f"sketch_{k}.l4dt", sample.sketches[k].astype(np.float32))
        l4dt.save(out / f"prior_{k}.l4dt", sample.priors[k].astype(np.float32))
    (out / "caption.txt").write_text(" ".join(decode_caption(sample.caption)) + "\n")
    with open(out / "boxes.jsonl", "w") as fh:
        for rec in sample.boxes:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return out


def write_manifest(root, seeds):
    Path(root, "manifest.txt").write_text("".join(f"{s}\n" for s in seeds))


def read_manifest(root):
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise IngestionError(f"missing {path}")
    return [int(line) for line in path.read_text().split()]


def count_frames(sample_dir):
    k = 0
    while (Path(sample_dir) / f"frame_{k}.l4dt").exists():
        k += 1
    return k


def read_caption(path):
    return encode_caption(Path(path).read_text().split())


def read_boxes(path):
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def read_sample(sample_dir, require_conditions=True):
    """Load one seed directory back into a :class:`SequenceSample`."""
    from seqlidar.codec import load_image

    d = Path(sample_dir)
    frames = count_frames(d)
    if frames == 0:
        raise IngestionError(f"{d}: no frame_0.l4dt")
    needed = []
    if require_conditions:
        needed = [f"sketch_{k}.l4dt" for k in range(frames)] + [f"prior_{k}.l4dt" for k in range(frames)]
        needed.append("caption.txt")
    missing = [n for n in needed if not (d / n).exists()]
    if missing:
        raise IngestionError(f"{d}: missing {', '.join(missing)}")
    images = [load_image(d / f"frame_{k}.l4dt", d / f"mask_{k}.l4dt") for k in range(frames)]
    H, W = images[0].channels.shape[1:]
    if require_conditions:
        sketches = np.stack([l4dt.load(d / f"sketch_{k}.l4dt") for k in range(frames)])
        priors = np.stack([l4dt.load(d / f"prior_{k}.l4dt") for k in range(frames)])
        caption = read_caption(d / "caption.txt")
    else:
        sketches = np.zeros((frames, 2, H, W), np.float32)
        priors = np.zeros((frames, 2, H, W), np.float32)
        priors[:, 0] = -1.0
        caption = []
    try:
        seed = int(d.name)
    except ValueError:
        seed = 0
    return SequenceSample(seed, images, sketches.astype(np.float32), priors.astype(np.float32),
                          caption, read_boxes(d / "boxes.jsonl"))


def read_dataset(root, require_conditions=True):
    return [read_sample(Path(root) / str(s), require_conditions) for s in read_manifest(root)]


def world_params_dict(params):
    return asdict(params)


__all__ = [
    "CATEGORIES",
    "EquirectImage",
    "ObjectCondition",
    "SceneWorld",
    "SensorConfig",
    "SequenceSample",
    "VOCAB",
    "WorldParams",
    "derive_caption",
    "raycast_frame",
    "render_box_layer",
    "sample_object_prior",
    "simulate_sequence",
    "synth_world",
]
