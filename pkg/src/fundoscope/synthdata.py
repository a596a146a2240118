"""Synthetic fundus images with exact lesion annotations and NPDR grades.

Lesion classes: 1 microaneurysm (small dark dot), 2 hemorrhage (larger
irregular dark blob), 3 exudate (bright yellowish blob). Images are uint8
arrays shaped 3×S×S.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

MA, HEM, EXU = 1, 2, 3


class InfeasiblePlacement(ValueError):
    pass


@dataclass(frozen=True)
class Lesion:
    cls: int
    x: float  # left edge, pixels
    y: float  # top edge
    w: float
    h: float

    @property
    def center(self):
        return self.x + self.w / 2, self.y + self.h / 2

    def as_list(self):
        return [self.cls, self.x, self.y, self.w, self.h]


@dataclass
class SynthSpec:
    seed: int = 0
    side: int = 800
    disk_radius: tuple = (0.42, 0.48)  # fraction of side
    vessel_count: tuple = (6, 10)
    vessel_width: tuple = (2.0, 6.0)
    ma_count: int = 0
    hem_count: int = 0
    exu_count: int = 0
    ma_radius: tuple = (1.0, 3.0)
    hem_radius: tuple = (5.0, 20.0)
    exu_radius: tuple = (4.0, 15.0)
    ma_contrast: tuple = (0.45, 0.65)  # fraction of brightness removed
    hem_contrast: tuple = (0.40, 0.65)
    exu_contrast: tuple = (0.45, 0.80)  # fraction of headroom to 255 added
    vessel_contrast: tuple = (0.20, 0.40)
    noise: float = 3.0

    def __post_init__(self):
        if min(self.ma_count, self.hem_count, self.exu_count) < 0:
            raise ValueError("lesion counts must be non-negative")
        for name in ("ma_radius", "hem_radius", "exu_radius"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be a positive range")
        if self.ma_radius[1] >= self.hem_radius[0]:
            raise ValueError("microaneurysms must be strictly smaller than hemorrhages")


@dataclass
class LabeledImage:
    image: np.ndarray  # uint8 3×S×S
    grade: int
    lesions: list = field(default_factory=list)
    source_id: str = ""

    def manifest_record(self, path=""):
        return {"id": self.source_id, "path": str(path), "grade": self.grade,
                "lesions": [l.as_list() for l in self.lesions]}


@dataclass(frozen=True)
class GradeRule:
    severe_hem_count: int = 15
    severe_hem_box: float = 40.0


def assign_grade(lesions, rule: GradeRule = GradeRule()):
    """0 none; 1 microaneurysms only; 3 many or large hemorrhages; 2 otherwise."""
    classes = {l.cls for l in lesions}
    if not classes:
        return 0
    if classes == {MA}:
        return 1
    hems = [l for l in lesions if l.cls == HEM]
    if len(hems) >= rule.severe_hem_count or any(max(l.w, l.h) >= rule.severe_hem_box for l in hems):
        return 3
    return 2


# ----------------------------------------------------------------- rendering

def _blob_mask(rng, radius, irregular, size):
    """Boolean mask of a (possibly irregular) blob centred in a size×size window."""
    c = (size - 1) / 2
    yy, xx = np.mgrid[:size, :size]
    dy, dx = yy - c, xx - c
    rho = np.hypot(dx, dy)
    if irregular:
        phi = np.arctan2(dy, dx)
        edge = np.ones_like(phi)
        for k in (2, 3, 4):
            edge += rng.uniform(0, 0.18) * np.cos(k * phi + rng.uniform(0, 2 * np.pi))
        return rho <= radius * edge
    return rho <= radius


def _background(rng, spec: SynthSpec):
    s = spec.side
    cy = cx = (s - 1) / 2
    r = rng.uniform(*spec.disk_radius) * s
    yy, xx = np.mgrid[:s, :s].astype(float)
    rho = np.hypot(yy - cy, xx - cx) / r
    disk = rho <= 1
    angle = rng.uniform(0, 2 * np.pi)
    ramp = ((xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)) / r
    shade = (0.85 + 0.15 * ramp) * (1 - 0.25 * rho ** 2)
    base = np.array([rng.uniform(170, 210), rng.uniform(80, 110), rng.uniform(35, 55)])
    img = base[:, None, None] * shade[None]
    return img, disk, r


def _draw_vessels(rng, img, disk, r, spec: SynthSpec):
    s = spec.side
    cy = cx = (s - 1) / 2
    # vessels fan out from an off-centre papilla
    oy = cy + rng.uniform(-0.1, 0.1) * r
    ox = cx + rng.choice([-1, 1]) * rng.uniform(0.25, 0.4) * r
    canvas = Image.new("F", (s, s), 0.0)
    draw = ImageDraw.Draw(canvas)
    for _ in range(rng.integers(spec.vessel_count[0], spec.vessel_count[1] + 1)):
        heading = rng.uniform(0, 2 * np.pi)
        curl = rng.uniform(-1.2, 1.2) / r
        width = rng.uniform(*spec.vessel_width)
        x, y = ox, oy
        pts = [(x, y)]
        step = max(2.0, r / 60)
        for _ in range(int(2.2 * r / step)):
            heading += curl * step + rng.normal(0, 0.03)
            x += step * math.cos(heading)
            y += step * math.sin(heading)
            pts.append((x, y))
            width = max(1.0, width * 0.995)
        draw.line(pts, fill=rng.uniform(*spec.vessel_contrast), width=max(1, int(round(width))),
                  joint="curve")
    strength = ndimage.gaussian_filter(np.asarray(canvas), 0.7) * disk
    img *= 1 - strength[None]


def _place(rng, disk_r, side, radius, placed, tries=400):
    c = (side - 1) / 2
    for _ in range(tries):
        rad = disk_r - radius * 1.3 - 3
        if rad <= 0:
            break
        a = rng.uniform(0, 2 * np.pi)
        rr = rad * math.sqrt(rng.uniform(0, 1))
        y, x = c + rr * math.sin(a), c + rr * math.cos(a)
        if all(math.hypot(y - py, x - px) > radius * 1.3 + pr * 1.3 + 2 for py, px, pr in placed):
            placed.append((y, x, radius))
            return y, x
    raise InfeasiblePlacement(f"cannot place a lesion of radius {radius:.1f}; too many lesions for the disk")


def _stamp(rng, img, cls, cy, cx, radius, spec: SynthSpec):
    size = int(2 * math.ceil(radius * 1.25) + 3)
    mask = _blob_mask(rng, radius, irregular=cls != MA, size=size)
    top, left = int(round(cy)) - size // 2, int(round(cx)) - size // 2
    soft = ndimage.gaussian_filter(mask.astype(float), 0.6 if cls == MA else 1.0)
    region = img[:, top:top + size, left:left + size]
    if cls == EXU:
        k = rng.uniform(*spec.exu_contrast)
        tint = np.array([1.0, 0.95, 0.45])[:, None, None]
        region += k * soft[None] * tint * (255 - region)
    else:
        k = rng.uniform(*(spec.ma_contrast if cls == MA else spec.hem_contrast))
        tint = np.array([0.8, 1.0, 1.0])[:, None, None]
        region *= 1 - k * soft[None] * tint
    ys, xs = np.nonzero(mask)
    return Lesion(cls, float(left + xs.min()), float(top + ys.min()),
                  float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))


def generate(spec: SynthSpec, rule: GradeRule = GradeRule(), source_id="") -> LabeledImage:
    """Render one synthetic fundus deterministically from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    img, disk, r = _background(rng, spec)
    _draw_vessels(rng, img, disk, r, spec)
    placed, lesions = [], []
    plan = ([HEM] * spec.hem_count + [EXU] * spec.exu_count + [MA] * spec.ma_count)
    radii = {MA: spec.ma_radius, HEM: spec.hem_radius, EXU: spec.exu_radius}
    for cls in plan:
        radius = rng.uniform(*radii[cls])
        cy, cx = _place(rng, r, spec.side, radius, placed)
        lesions.append(_stamp(rng, img, cls, cy, cx, radius, spec))
    img += rng.normal(0, spec.noise, img.shape)
    img *= disk[None]
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return LabeledImage(img, assign_grade(lesions, rule), lesions, source_id)


def spec_for_grade(grade, rng, base: SynthSpec, rule: GradeRule = GradeRule()):
    """Lesion counts and size limits that realise the requested grade."""
    ma_hi = max(1, int(round(base.side / 100)))
    if grade == 0:
        counts = dict(ma_count=0, hem_count=0, exu_count=0)
    elif grade == 1:
        counts = dict(ma_count=int(rng.integers(1, ma_hi + 3)), hem_count=0, exu_count=0)
    elif grade == 2:
        hem = int(rng.integers(0, 5))
        exu = int(rng.integers(0 if hem else 1, 5))
        counts = dict(ma_count=int(rng.integers(0, ma_hi + 3)), hem_count=hem, exu_count=exu)
    elif grade == 3:
        hem = int(rng.integers(rule.severe_hem_count, rule.severe_hem_count + 6))
        counts = dict(ma_count=int(rng.integers(0, ma_hi + 3)), hem_count=hem,
                      exu_count=int(rng.integers(0, 4)))
    else:
        raise ValueError(f"grade must be 0-3, got {grade}")
    # keep hemorrhage boxes clear of the large-blot threshold
    cap = (rule.severe_hem_box - 3) / 2 / 1.2
    hem_r = (min(base.hem_radius[0], cap), min(base.hem_radius[1], cap))
    return replace(base, seed=int(rng.integers(2 ** 32)), hem_radius=hem_r, **counts)


def generate_graded(grade, seed, base: SynthSpec, rule: GradeRule = GradeRule(), source_id="",
                    attempts=20) -> LabeledImage:
    rng = np.random.default_rng(seed)
    for _ in range(attempts):
        spec = spec_for_grade(grade, rng, base, rule)
        try:
            item = generate(spec, rule, source_id)
        except InfeasiblePlacement:
            continue
        if item.grade == grade:
            return item
    raise InfeasiblePlacement(f"could not realise grade {grade} with the given sizes")


def graded_corpus(n_per_grade, base: SynthSpec, seed=0, rule: GradeRule = GradeRule()):
    """``n_per_grade`` images of each grade, interleaved 0,1,2,3,0,1,..."""
    out = []
    for i in range(n_per_grade):
        for g in range(4):
            child = np.random.SeedSequence([seed, g, i]).generate_state(1)[0]
            out.append(generate_graded(g, int(child), base, rule, source_id=f"img{len(out):05d}"))
    return out


# ------------------------------------------------------------- augmentation

def _forward_matrix(side, angle_deg, crop, offset, scale):
    """3×3 map from input pixel-edge (x, y) to output (x, y)."""
    c = side / 2
    t = math.radians(angle_deg)
    cos, sin = math.cos(t), math.sin(t)
    # counter-clockwise as displayed (y axis points down)
    rot = np.array([[cos, sin, c - c * cos - c * sin],
                    [-sin, cos, c + c * sin - c * cos],
                    [0, 0, 1]])
    ox, oy = offset
    crop_m = np.array([[1 / crop, 0, -ox / crop], [0, 1 / crop, -oy / crop], [0, 0, 1]])
    zoom = np.array([[scale, 0, c - c * scale], [0, scale, c - c * scale], [0, 0, 1]])
    return zoom @ crop_m @ rot


def transform_box(lesion: Lesion, matrix) -> Lesion:
    corners = np.array([[lesion.x, lesion.y, 1], [lesion.x + lesion.w, lesion.y, 1],
                        [lesion.x, lesion.y + lesion.h, 1], [lesion.x + lesion.w, lesion.y + lesion.h, 1]]).T
    q = matrix @ corners
    # snap away round-off so quarter turns of integer boxes stay integral
    q = np.round(q, 9)
    x0, y0 = q[0].min(), q[1].min()
    return Lesion(lesion.cls, float(x0), float(y0), float(q[0].max() - x0), float(q[1].max() - y0))


def _warp(image, matrix):
    """Resample ``image`` (C×S×S) so that output = input ∘ matrix⁻¹ (bilinear, zero fill)."""
    inv = np.linalg.inv(matrix)
    # pixel centres sit at edge coordinate i + 0.5; ndimage works in (row, col) index space
    a = np.array([[inv[1, 1], inv[1, 0]], [inv[0, 1], inv[0, 0]]])
    shift_edge = np.array([inv[1, 2], inv[0, 2]])
    offset = shift_edge + a @ np.array([0.5, 0.5]) - 0.5
    out = np.stack([ndimage.affine_transform(ch.astype(float), a, offset=offset, order=1,
                                             mode="constant", cval=0.0) for ch in image])
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def augment(item: LabeledImage, rotate=None, crop=None, scale=None, seed=0,
            rule: GradeRule = GradeRule(), max_tries=25) -> LabeledImage:
    """Rotation (degrees, counter-clockwise), centred-random crop and zoom about the centre.

    Unspecified operations are drawn from ``seed``. The output keeps the
    input grade; transforms that would change it (lesions pushed out of frame,
    hemorrhage boxes crossing the size threshold) are rejected and redrawn.
    """
    side = item.image.shape[-1]
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        angle = rng.uniform(0, 360) if rotate is None else float(rotate)
        frac = rng.uniform(0.7 + 1e-9, 1.0) if crop is None else float(crop)
        zoom = rng.uniform(0.8, 1.25) if scale is None else float(scale)
        if not 0.7 < frac <= 1 or not 0.8 <= zoom <= 1.25:
            raise ValueError("crop must lie in (0.7, 1] and scale in [0.8, 1.25]")
        slack = side * (1 - frac)
        offset = (rng.uniform(0, slack), rng.uniform(0, slack)) if slack > 0 else (0.0, 0.0)
        if angle % 360 == 0 and frac == 1 and zoom == 1:
            return LabeledImage(item.image.copy(), item.grade, list(item.lesions), item.source_id)
        matrix = _forward_matrix(side, angle, frac, offset, zoom)
        lesions = []
        for l in item.lesions:
            t = transform_box(l, matrix)
            cx, cy = t.center
            if 0 <= cx < side and 0 <= cy < side:
                lesions.append(t)
        if assign_grade(lesions, rule) != item.grade:
            if rotate is not None and crop is not None and scale is not None:
                raise ValueError("requested augmentation changes the grade")
            continue
        if angle % 90 == 0 and frac == 1 and zoom == 1:
            image = np.rot90(item.image, k=int(angle // 90) % 4, axes=(1, 2)).copy()
        else:
            image = _warp(item.image, matrix)
        return LabeledImage(image, item.grade, lesions, item.source_id)
    raise ValueError("no grade-preserving augmentation found")


# ---------------------------------------------------------------- patches

def patch_label(lesions, y0, x0, h):
    """Class of the lesion centred in the window (largest box overlap wins), else 0."""
    best, best_key = 0, None
    for l in lesions:
        cx, cy = l.center
        if x0 <= cx < x0 + h and y0 <= cy < y0 + h:
            ox = max(0.0, min(l.x + l.w, x0 + h) - max(l.x, x0))
            oy = max(0.0, min(l.y + l.h, y0 + h) - max(l.y, y0))
            key = (ox * oy, l.cls)
            if best_key is None or key > best_key:
                best, best_key = l.cls, key
    return best


def make_patch_dataset(items, geometry):
    """Every grid window of every image with its lesion label.

    ``items`` is a sequence of ``(pixels C×d×d, lesions)`` in the d×d frame.
    Returns ``(patches, labels, index)`` with ``index`` rows ``(item, row, col)``.
    """
    h = geometry.h
    patches, labels, index = [], [], []
    for k, (pixels, lesions) in enumerate(items):
        for r, c, y0, x0 in geometry.windows():
            patches.append(pixels[:, y0:y0 + h, x0:x0 + h])
            labels.append(patch_label(lesions, y0, x0, h))
            index.append((k, r, c))
    if not patches:
        return np.zeros((0, 3, h, h)), np.zeros(0, dtype=np.int64), np.zeros((0, 3), dtype=np.int64)
    return np.stack(patches), np.asarray(labels, dtype=np.int64), np.asarray(index, dtype=np.int64)


def patch_corpus(n_per_class, size=32, seed=0, noise=4.0):
    """Stand-alone 4-class patches: plain, small dark dot, large dark blob, bright blob.

    Returns float arrays ``(X, y)`` with ``X`` shaped (4n, 3, size, size) in [0, 255].
    """
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    yy, xx = np.mgrid[:size, :size].astype(float)
    for i in range(n_per_class):
        for cls in range(4):
            base = np.array([rng.uniform(150, 210), rng.uniform(70, 110), rng.uniform(30, 55)])
            angle = rng.uniform(0, 2 * np.pi)
            ramp = 1 + 0.1 * ((xx - size / 2) * np.cos(angle) + (yy - size / 2) * np.sin(angle)) / size
            img = base[:, None, None] * ramp[None]
            if cls:
                radius = {1: rng.uniform(1.0, 2.0), 2: rng.uniform(size / 7, size / 4),
                          3: rng.uniform(size / 8, size / 4.5)}[cls]
                m = int(math.ceil(radius)) + 2
                cy, cx = rng.uniform(m, size - m, 2)
                soft = np.clip(radius + 0.5 - np.hypot(yy - cy, xx - cx), 0, 1)
                if cls == 3:
                    img += rng.uniform(0.5, 0.8) * soft[None] * (255 - img)
                else:
                    img *= 1 - rng.uniform(0.45, 0.65) * soft[None]
            img += rng.normal(0, noise, img.shape)
            xs.append(np.clip(img, 0, 255))
            ys.append(cls)
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


# ---------------------------------------------------------------- manifest

def write_manifest(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def lesions_from_record(record):
    return [Lesion(int(c), float(x), float(y), float(w), float(h)) for c, x, y, w, h in record["lesions"]]


def spec_to_dict(spec: SynthSpec):
    return asdict(spec)
