"""Synthetic driving-like scenes with exact depth and panoptic ground truth.

A scene is a ground plane under a sky, a row of textured static buildings,
and moving cars and pedestrians. All objects are fronto-parallel and have
one depth each, so drawing them far-to-near (painter's algorithm) gives the
exact visible surface. Scenes are grouped into episodes: the layout is drawn
once per episode and dynamic objects move with constant velocity inside it.

Also here: weather-like domain shifts and reading/writing frame directories.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from .errors import ConfigError, IngestionError, InputError
from .segmentation import LABEL_NAMES, PanopticMask
from .signal import CameraIntrinsics

LABEL_IDS = {name: i for i, name in LABEL_NAMES.items()}
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ObjectCatalog:
    """Size (m), depth (m) and lateral speed (m/frame) ranges of one object kind."""

    label: str
    width: tuple
    height: tuple
    depth: tuple
    speed: tuple = (0.0, 0.0)
    shape: str = "rect"


DEFAULT_CATALOGS = (
    ObjectCatalog("car", width=(1.8, 4.5), height=(1.3, 1.7), depth=(4.0, 25.0), speed=(0.1, 0.4)),
    ObjectCatalog("person", width=(0.5, 0.8), height=(1.6, 1.9), depth=(4.0, 15.0),
                  speed=(0.02, 0.08), shape="ellipse"),
    ObjectCatalog("building", width=(6.0, 18.0), height=(6.0, 20.0), depth=(25.0, 60.0)),
)


@dataclass(frozen=True)
class SceneConfig:
    resolution: tuple = (64, 64)
    n_dynamic: tuple = (2, 5)
    n_static: tuple = (2, 4)
    intrinsics: Optional[CameraIntrinsics] = None
    camera_height: float = 1.5
    sky_depth: float = 80.0
    episode_length: int = 25
    catalogs: tuple = DEFAULT_CATALOGS
    seed: int = 0

    def __post_init__(self):
        h, w = self.resolution
        if h < 8 or w < 8:
            raise ConfigError(f"resolution {self.resolution} too small")
        for name in ("n_dynamic", "n_static"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"{name} range {(lo, hi)} is empty or negative")
        if self.episode_length < 1:
            raise ConfigError("episode_length must be >= 1")
        if self.intrinsics is None:
            f = 0.9 * w
            object.__setattr__(self, "intrinsics", CameraIntrinsics(f, f, w / 2.0, 0.4 * h))

    def catalog(self, label):
        for c in self.catalogs:
            if c.label == label:
                return c
        raise ConfigError(f"no catalog entry for {label!r}")

    def to_dict(self):
        d = asdict(self)
        d["intrinsics"] = self.intrinsics.to_dict()
        d["catalogs"] = [asdict(c) for c in self.catalogs]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "intrinsics" in d and d["intrinsics"] is not None:
            k = d["intrinsics"]
            d["intrinsics"] = CameraIntrinsics.from_matrix(k) if isinstance(k, list) else CameraIntrinsics(**k)
        if "catalogs" in d:
            d["catalogs"] = tuple(
                ObjectCatalog(**{k: tuple(v) if isinstance(v, list) else v for k, v in c.items()})
                for c in d["catalogs"]
            )
        for key in ("resolution", "n_dynamic", "n_static"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SceneObject:
    instance_id: int
    label: str
    x: float  # lateral centre, metres
    depth: float
    width: float
    height: float
    color: tuple
    shape: str = "rect"
    texture_seed: int = 0
    floating: float = 0.0  # metres above the ground (unused for the defaults)

    def footprint(self, cfg):
        """Boolean ``H x W`` array of pixels covered by the object, ignoring occlusion."""
        h, w = cfg.resolution
        K = cfg.intrinsics
        bottom = K.cy + K.fy * (cfg.camera_height - self.floating) / self.depth
        top = bottom - K.fy * self.height / self.depth
        left = K.cx + K.fx * (self.x - self.width / 2) / self.depth
        right = K.cx + K.fx * (self.x + self.width / 2) / self.depth
        vv, uu = np.mgrid[0:h, 0:w] + 0.5
        inside = (vv >= top) & (vv < bottom) & (uu >= left) & (uu < right)
        if self.shape == "ellipse":
            cy, cx = (top + bottom) / 2, (left + right) / 2
            ry, rx = (bottom - top) / 2, (right - left) / 2
            inside = ((vv - cy) / ry) ** 2 + ((uu - cx) / rx) ** 2 <= 1.0
        return inside


@dataclass
class Frame:
    index: int
    image: np.ndarray
    gt_depth: Optional[np.ndarray]
    panoptic: PanopticMask
    domain: str = "source"
    objects: list = field(default_factory=list)

    @property
    def resolution(self):
        return self.image.shape[:2]


# ------------------------------------------------------------------ rendering


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _episode_layout(cfg, episode):
    rng = np.random.default_rng([cfg.seed, episode])
    objects = []
    next_id = 1
    n_static = int(rng.integers(cfg.n_static[0], cfg.n_static[1] + 1))
    building = cfg.catalog("building")
    for _ in range(n_static):
        depth = _uniform(rng, building.depth)
        half_fov = depth * cfg.intrinsics.cx / cfg.intrinsics.fx
        objects.append(dict(
            instance_id=next_id, label="building", x=float(rng.uniform(-half_fov, half_fov)),
            depth=depth, width=_uniform(rng, building.width), height=_uniform(rng, building.height),
            color=tuple(float(c) for c in rng.uniform(0.25, 0.7, 3)), shape=building.shape,
            texture_seed=int(rng.integers(1 << 30)), vx=0.0, vz=0.0,
        ))
        next_id += 1
    n_dyn = int(rng.integers(cfg.n_dynamic[0], cfg.n_dynamic[1] + 1))
    dynamic_kinds = [c for c in cfg.catalogs if c.label in ("car", "person")]
    for _ in range(n_dyn):
        cat = dynamic_kinds[int(rng.integers(len(dynamic_kinds)))]
        depth = _uniform(rng, cat.depth)
        half_fov = depth * cfg.intrinsics.cx / cfg.intrinsics.fx
        speed = _uniform(rng, cat.speed) * (1 if rng.random() < 0.5 else -1)
        objects.append(dict(
            instance_id=next_id, label=cat.label, x=float(rng.uniform(-0.8 * half_fov, 0.8 * half_fov)),
            depth=depth, width=_uniform(rng, cat.width), height=_uniform(rng, cat.height),
            color=tuple(float(c) for c in rng.uniform(0.1, 0.9, 3)), shape=cat.shape,
            texture_seed=int(rng.integers(1 << 30)), vx=speed,
            vz=float(rng.uniform(-0.05, 0.05)) * depth,
        ))
        next_id += 1
    ground_seed = int(rng.integers(1 << 30))
    return objects, ground_seed


def scene_objects(cfg, t):
    """Objects present at frame ``t``, positioned for that instant."""
    layout, _ = _episode_layout(cfg, t // cfg.episode_length)
    tau = t % cfg.episode_length
    out = []
    for spec in layout:
        spec = dict(spec)
        vx, vz = spec.pop("vx"), spec.pop("vz")
        spec["x"] += vx * tau
        spec["depth"] = max(spec["depth"] + vz * tau / cfg.episode_length, 2.0)
        out.append(SceneObject(**spec))
    return out


def _background(cfg, ground_seed):
    h, w = cfg.resolution
    K = cfg.intrinsics
    v = np.arange(h)[:, None] + 0.5
    below = v > K.cy
    with np.errstate(divide="ignore"):
        ground_depth = np.where(below, K.fy * cfg.camera_height / np.maximum(v - K.cy, 1e-9), np.inf)
    depth = np.minimum(np.broadcast_to(ground_depth, (h, w)), cfg.sky_depth).astype(np.float64)
    is_ground = np.broadcast_to(below & (ground_depth < cfg.sky_depth), (h, w))

    rng = np.random.default_rng(ground_seed)
    image = np.empty((h, w, 3))
    frac = np.clip(v / max(K.cy, 1.0), 0.0, 1.0)
    sky = np.stack([0.45 + 0.25 * frac, 0.6 + 0.2 * frac, 0.85 + 0.1 * frac], axis=-1)
    image[:] = np.broadcast_to(sky, (h, w, 3))
    # ground: asphalt darkening with proximity, lane stripes, fine noise
    shade = 0.25 + 0.25 * np.clip(depth / cfg.sky_depth, 0, 1)
    ground = np.stack([shade, shade, shade * 1.05], axis=-1) + rng.normal(0, 0.02, (h, w, 3))
    uu = np.arange(w)[None, :] + 0.5
    lane_x = K.cx + K.fx * np.array([-1.8, 1.8])[:, None, None] / depth[None]
    stripe = (np.abs(uu[None] - lane_x) < 0.6).any(axis=0) & is_ground
    ground[stripe] = 0.85
    image[is_ground] = ground[is_ground]
    label = np.where(is_ground, LABEL_IDS["ground"], LABEL_IDS["sky"]).astype(np.int32)
    return image, depth, label


def _paint_texture(obj, region, image, cfg):
    h, w = cfg.resolution
    rng = np.random.default_rng(obj.texture_seed)
    color = np.array(obj.color)
    vv, uu = np.nonzero(region)
    values = np.broadcast_to(color, (len(vv), 3)).copy()
    K = cfg.intrinsics
    if obj.label == "building":
        # window grid with ~1.5 m pitch in object coordinates
        pitch = max(K.fy * 1.5 / obj.depth, 2.0)
        win = ((vv % pitch) < pitch / 2) & ((uu % pitch) < pitch / 2)
        values[win] = color * 0.45 + 0.1
    elif obj.label == "car":
        top = vv.min() if len(vv) else 0
        band = vv < top + max((vv.max() - top + 1) // 3, 1) if len(vv) else vv
        values[band] = 0.15 + 0.2 * color
    values += rng.normal(0, 0.015, values.shape)
    image[vv, uu] = values


def render(cfg, t, objects=None):
    """Render frame ``t``; returns ``(image, depth, panoptic, objects)``."""
    layout_objects = scene_objects(cfg, t) if objects is None else objects
    _, ground_seed = _episode_layout(cfg, t // cfg.episode_length)
    image, depth, label = _background(cfg, ground_seed)
    instance = np.zeros(cfg.resolution, dtype=np.int32)
    for obj in sorted(layout_objects, key=lambda o: (-o.depth, o.instance_id)):
        region = obj.footprint(cfg)
        if not region.any():
            continue
        depth[region] = obj.depth
        label[region] = LABEL_IDS[obj.label]
        instance[region] = obj.instance_id
        _paint_texture(obj, region, image, cfg)
    image = np.clip(image, 0.0, 1.0)
    return image, depth, PanopticMask(instance, label), layout_objects


def generate_frame(cfg, t):
    image, depth, panoptic, objects = render(cfg, t)
    return Frame(index=t, image=image.astype(np.float32), gt_depth=depth.astype(np.float32),
                 panoptic=panoptic, domain="source", objects=objects)


def generate_stream(cfg, n_frames, shift=None, start=0):
    """Yield ``n_frames`` consecutive frames, each passed through ``shift``."""
    for t in range(start, start + n_frames):
        frame = generate_frame(cfg, t)
        yield frame if shift is None else apply_domain_shift(frame, shift)


# -------------------------------------------------------------- domain shift


_SHIFT_RANGES = {"none": (0.0, 0.0), "fog": (0.0, 1.0), "rain": (0.0, 1.0), "brightness": (0.0, 4.0)}


@dataclass(frozen=True)
class DomainShift:
    """A synthetic weather condition.

    ``fog``: ``value`` is the extinction coefficient ``k`` in 1/m, [0, 1].
    ``rain``: ``value`` is streak density, [0, 1].
    ``brightness``: ``value`` is a multiplicative factor, [0, 4].
    """

    kind: str = "none"
    value: float = 0.0
    airlight: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _SHIFT_RANGES:
            raise ConfigError(f"unknown domain shift {self.kind!r}")
        lo, hi = _SHIFT_RANGES[self.kind]
        if self.kind != "none" and not lo <= self.value <= hi:
            raise ConfigError(f"{self.kind} parameter {self.value} outside [{lo}, {hi}]")
        if not 0.0 <= self.airlight <= 1.0:
            raise ConfigError(f"airlight {self.airlight} outside [0, 1]")

    @property
    def tag(self):
        return {"none": "source", "fog": "foggy", "rain": "rainy", "brightness": "bright"}[self.kind]

    @classmethod
    def parse(cls, text):
        """Parse ``"fog:0.05"``, ``"rain:0.3"``, ``"brightness:1.5"`` or ``"none"``."""
        if text in (None, "", "none"):
            return cls()
        kind, _, value = text.partition(":")
        try:
            return cls(kind=kind, value=float(value or 0.0))
        except ValueError as exc:
            raise ConfigError(f"bad domain shift {text!r}: {exc}") from None


def apply_domain_shift(frame, shift):
    """Return a copy of ``frame`` with its image degraded by ``shift``.

    Depth and panoptic ground truth are never modified.
    """
    if isinstance(shift, str):
        shift = DomainShift.parse(shift)
    if shift.kind == "none":
        return frame
    img = frame.image.astype(np.float64)
    if shift.kind == "fog":
        if frame.gt_depth is None:
            raise InputError("fog needs ground-truth depth")
        trans = np.exp(-shift.value * frame.gt_depth.astype(np.float64))[..., None]
        img = img * trans + shift.airlight * (1.0 - trans)
    elif shift.kind == "rain":
        h, w = img.shape[:2]
        rng = np.random.default_rng([shift.seed, int(frame.index)])
        streaks = np.zeros((h, w))
        n = int(round(shift.value * h * w / 20))
        for _ in range(n):
            y, x = int(rng.integers(h)), int(rng.integers(w))
            length = int(rng.integers(3, 7))
            for s in range(length):
                yy, xx = y + s, x + s // 3
                if yy < h and xx < w:
                    streaks[yy, xx] = 0.35
        img = img * (1 - 0.15 * shift.value) + streaks[..., None]
    elif shift.kind == "brightness":
        img = img * shift.value
    img = np.clip(img, 0.0, 1.0).astype(frame.image.dtype)
    return replace(frame, image=img, domain=shift.tag)


# ------------------------------------------------------------------------ IO


def write_pfm(path, data):
    data = np.asarray(data, dtype="<f4")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path):
    """Read a single-channel PFM file into an ``H x W`` float32 array."""
    raw = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(3):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise IngestionError(path, pos, "truncated PFM header")
        fields.append((pos, raw[pos:end].strip()))
        pos = end + 1
    (o0, magic), (o1, dims), (o2, scale) = fields
    if magic != b"Pf":
        raise IngestionError(path, o0, f"expected 'Pf' magic, got {magic[:8]!r}")
    try:
        w, h = (int(v) for v in dims.split())
    except ValueError:
        raise IngestionError(path, o1, f"bad dimensions {dims!r}") from None
    try:
        sc = float(scale)
    except ValueError:
        raise IngestionError(path, o2, f"bad scale {scale!r}") from None
    if sc == 0:
        raise IngestionError(path, o2, "scale must be nonzero")
    need = w * h * 4
    if len(raw) - pos < need:
        raise IngestionError(path, len(raw), f"expected {need} data bytes, found {len(raw) - pos}")
    arr = np.frombuffer(raw, dtype="<f4" if sc < 0 else ">f4", count=w * h, offset=pos)
    return arr.reshape(h, w)[::-1].astype(np.float32)


def _read_png(path, mode16=False):
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.array(im)
    except FileNotFoundError:
        raise
    except Exception as exc:  # Pillow raises a variety of types
        raise IngestionError(path, 0, f"cannot decode PNG: {exc}") from None
    if mode16:
        if arr.ndim != 2:
            raise IngestionError(path, 0, f"panoptic PNG must be single-channel, got shape {arr.shape}")
        return arr.astype(np.uint16)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise IngestionError(path, 0, f"image PNG must be 8-bit RGB, got {arr.dtype} {arr.shape}")
    return arr


def write_frame_dir(frames, path, label_names=None):
    """Materialize frames as PNG/PFM files plus a ``manifest.json``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    resolution = None
    for frame in frames:
        resolution = list(frame.resolution)
        stem = f"{frame.index:06d}"
        img8 = np.round(np.clip(frame.image, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(img8).save(root / f"image_{stem}.png")
        Image.fromarray(frame.panoptic.encode16()).save(root / f"panoptic_{stem}.png")
        depth_name = None
        if frame.gt_depth is not None:
            depth_name = f"depth_{stem}.pfm"
            write_pfm(root / depth_name, frame.gt_depth)
        entries.append({
            "index": int(frame.index), "image": f"image_{stem}.png", "depth": depth_name,
            "panoptic": f"panoptic_{stem}.png", "domain": frame.domain,
        })
    manifest = {
        "version": MANIFEST_VERSION,
        "resolution": resolution,
        "label_names": {str(k): v for k, v in (label_names or LABEL_NAMES).items()},
        "frames": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root / "manifest.json"


def load_frame_dir(path, manifest="manifest.json", resolution=None) -> Iterator[Frame]:
    """Yield frames listed in the directory's JSON manifest, in order.

    Images are 8-bit RGB PNG, depth is float32 PFM (optional per frame), and
    panoptic masks are 16-bit PNG with the label id in the high byte and the
    instance id in the low byte.
    """
    root = Path(path)
    mpath = root / manifest
    try:
        meta = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise IngestionError(mpath, exc.pos, f"invalid JSON: {exc.msg}") from None
    names = {int(k): v for k, v in meta.get("label_names", {}).items()} or dict(LABEL_NAMES)
    expected = tuple(resolution) if resolution is not None else None
    for entry in meta.get("frames", []):
        img8 = _read_png(root / entry["image"])
        hw = img8.shape[:2]
        if expected is not None and hw != expected:
            raise InputError(f"{entry['image']}: resolution {hw} does not match expected {expected}")
        packed = _read_png(root / entry["panoptic"], mode16=True)
        if packed.shape != hw:
            raise InputError(f"{entry['panoptic']}: shape {packed.shape} does not match image {hw}")
        depth = None
        if entry.get("depth"):
            depth = read_pfm(root / entry["depth"])
            if depth.shape != hw:
                raise InputError(f"{entry['depth']}: shape {depth.shape} does not match image {hw}")
        yield Frame(
            index=int(entry["index"]), image=(img8.astype(np.float32) / 255.0), gt_depth=depth,
            panoptic=PanopticMask.decode16(packed, names), domain=entry.get("domain", "source"),
        )
