"""Synthetic weather corruption plus a procedural paired-view dataset.

Corruption laws (chosen for determinism and for monotone damage in the
intensity parameter; all outputs clamped to [-1, 1]):

    fog     out = (1 - i) * in + i            alpha-blend toward white (+1)
    rain    oriented line streaks, +0.8 brightness on streak pixels,
            streak count proportional to i
    snow    bright disks blended 90% toward white, count proportional to i
    dark    out = a * in - (1 - a)^2,  a = 1 - 0.75 i   (compress toward -1)
    light   out = a * in + (1 - a)^2,  a = 1 - 0.75 i   (compress toward +1)

Composite kinds ("fog+rain", ...) apply their constituents sequentially in
listed order, each with the composite's intensity and seed, so the result
is bit-identical to chaining the single corruptions by hand.

The dataset generator builds one procedural scene per location (textured
background plus a handful of colored shapes), renders a canonical overhead
satellite view, and renders each drone view of the same scene under a
rotation in 45-degree increments and a +/-10% zoom. Drone views are stored
clean together with their assigned weather condition; `corrupt` is a pure
function of (image, condition), so the corrupted form is reproducible at
training, evaluation, and export time while the clean target stays
available for the restoration loss.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, ShapeError

BASE_KINDS = ("clean", "fog", "rain", "snow", "dark", "light")
COMPOSITE_KINDS = ("fog+rain", "fog+snow", "rain+snow", "dark+rain")
ALL_KINDS = BASE_KINDS + COMPOSITE_KINDS

POSE_ANGLES = tuple(float(a) for a in range(0, 360, 45))


@dataclass(frozen=True)
class WeatherCondition:
    kind: str
    intensity: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise InputError(f"unknown weather kind {self.kind!r}")
        if not 0.0 <= self.intensity <= 1.0:
            raise InputError(f"intensity must be in [0, 1], got {self.intensity}")


@dataclass
class LocationSample:
    """One geo-location: a satellite view plus posed drone views.

    Each drone view is stored as (clean image, weather condition, pose in
    degrees). Distractor locations carry an empty drone view list.
    """

    location_id: int
    satellite_view: np.ndarray
    drone_views: list[tuple[np.ndarray, WeatherCondition, float]]


def _check_image(img: np.ndarray) -> None:
    if img.ndim != 3:
        raise ShapeError(f"expected (C, H, W) image, got {img.shape}")
    if img.min() < -1.0 or img.max() > 1.0:
        raise InputError("image values must lie in [-1, 1]")


def _fog(img, intensity, rng):
    return (1.0 - intensity) * img + intensity


def _dark(img, intensity, rng):
    a = 1.0 - 0.75 * intensity
    return a * img - (1.0 - a) ** 2


def _light(img, intensity, rng):
    a = 1.0 - 0.75 * intensity
    return a * img + (1.0 - a) ** 2


def _streak_mask(shape, n, length, angle_deg, rng):
    _, h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    if n <= 0:
        return mask
    r0 = rng.uniform(-length, h - 1, size=n)
    c0 = rng.uniform(0, w - 1, size=n)
    ang = np.deg2rad(angle_deg + rng.uniform(-5.0, 5.0, size=n))
    steps = np.arange(length)[:, None]
    rr = np.rint(r0 + steps * np.cos(ang)).astype(int)
    cc = np.rint(c0 + steps * np.sin(ang)).astype(int)
    keep = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    mask[rr[keep], cc[keep]] = True
    return mask


def _rain(img, intensity, rng):
    _, h, w = img.shape
    n = int(round(40.0 * intensity * (h * w) / 1024.0))
    length = max(3, h // 3)
    mask = _streak_mask(img.shape, n, length, angle_deg=70.0, rng=rng)
    out = img.copy()
    out[:, mask] += 0.8
    return out


def _snow(img, intensity, rng):
    _, h, w = img.shape
    n = int(round(30.0 * intensity * (h * w) / 1024.0))
    mask = np.zeros((h, w), dtype=bool)
    if n > 0:
        cy = rng.uniform(0, h - 1, size=n)
        cx = rng.uniform(0, w - 1, size=n)
        rad = rng.uniform(0.8, 1.8, size=n)
        yy, xx = np.mgrid[0:h, 0:w]
        for y0, x0, r in zip(cy, cx, rad):
            mask |= (yy - y0) ** 2 + (xx - x0) ** 2 <= r * r
    out = img.copy()
    out[:, mask] = 0.1 * out[:, mask] + 0.9
    return out


_SINGLE = {"fog": _fog, "rain": _rain, "snow": _snow, "dark": _dark,
           "light": _light}


def corrupt(img: np.ndarray, cond: WeatherCondition) -> np.ndarray:
    """Apply a weather corruption; deterministic in (img, cond)."""
    _check_image(img)
    if cond.kind == "clean":
        return img.copy()
    if "+" in cond.kind:
        out = img
        for part in cond.kind.split("+"):
            out = corrupt(out, WeatherCondition(part, cond.intensity, cond.seed))
        return out
    rng = np.random.default_rng(cond.seed)
    out = _SINGLE[cond.kind](img.astype(np.float32), cond.intensity, rng)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Procedural scene rendering


def _scene_params(rng: np.random.Generator) -> dict:
    n_shapes = int(rng.integers(3, 7))
    shapes = []
    for _ in range(n_shapes):
        kind = ("disk", "box", "bar")[int(rng.integers(3))]
        if kind == "disk":
            size = (float(rng.uniform(0.10, 0.30)),) * 2
        elif kind == "box":
            size = (float(rng.uniform(0.10, 0.30)), float(rng.uniform(0.10, 0.30)))
        else:
            size = (float(rng.uniform(0.25, 0.50)), float(rng.uniform(0.03, 0.08)))
        shapes.append({
            "kind": kind,
            "center": rng.uniform(-0.55, 0.55, size=2),
            "size": size,
            "angle": float(rng.uniform(0.0, math.pi)),
            "color": rng.uniform(-0.9, 0.9, size=3),
        })
    theta = float(rng.uniform(0.0, math.pi))
    return {
        "base": rng.uniform(-0.7, 0.7, size=3),
        "amp": rng.uniform(0.05, 0.20, size=3),
        "freq": float(rng.uniform(1.0, 3.0)),
        "dir": np.array([math.cos(theta), math.sin(theta)]),
        "phase": rng.uniform(0.0, 2.0 * math.pi, size=3),
        "shapes": shapes,
    }


def _render_scene(scene: dict, size: int, rot_deg: float = 0.0,
                  zoom: float = 1.0) -> np.ndarray:
    """Sample the scene on a size x size grid after rotating/zooming the
    view. The background texture is defined on the whole plane, so rotated
    views have no empty corners."""
    axis = np.linspace(-1.0, 1.0, size)
    xx, yy = np.meshgrid(axis, axis)
    th = math.radians(rot_deg)
    qx = zoom * (math.cos(th) * xx - math.sin(th) * yy)
    qy = zoom * (math.sin(th) * xx + math.cos(th) * yy)

    proj = qx * scene["dir"][0] + qy * scene["dir"][1]
    img = np.empty((3, size, size), dtype=np.float64)
    for c in range(3):
        img[c] = scene["base"][c] + scene["amp"][c] * np.sin(
            2.0 * math.pi * scene["freq"] * proj + scene["phase"][c])

    edge = 0.08
    for sh in scene["shapes"]:
        dx = qx - sh["center"][0]
        dy = qy - sh["center"][1]
        ca, sa = math.cos(-sh["angle"]), math.sin(-sh["angle"])
        lx = ca * dx - sa * dy
        ly = sa * dx + ca * dy
        if sh["kind"] == "disk":
            d = np.hypot(lx, ly) - sh["size"][0]
        else:
            d = np.maximum(np.abs(lx) - sh["size"][0], np.abs(ly) - sh["size"][1])
        mask = np.clip(0.5 - d / edge, 0.0, 1.0)
        for c in range(3):
            img[c] = mask * sh["color"][c] + (1.0 - mask) * img[c]
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def generate_dataset(
    n_locations: int,
    views_per_location: int,
    image_size: int = 32,
    conditions: tuple[str, ...] = ALL_KINDS,
    seed: int = 0,
    distractors: int = 0,
    intensity_range: tuple[float, float] = (0.3, 0.8),
) -> list[LocationSample]:
    """Build a reproducible toy cross-view dataset.

    Returns ``n_locations`` samples with drone views followed by
    ``distractors`` satellite-only samples (empty drone view lists).
    """
    if n_locations < 2:
        raise ConfigError(f"need at least 2 locations, got {n_locations}")
    if image_size < 8:
        raise ConfigError(f"image size must be >= 8, got {image_size}")
    if views_per_location < 1:
        raise ConfigError("views_per_location must be >= 1")
    for kind in conditions:
        if kind not in ALL_KINDS:
            raise ConfigError(f"unknown weather kind {kind!r} in condition set")
    lo, hi = intensity_range
    if not (0.0 <= lo <= hi <= 1.0):
        raise ConfigError(f"bad intensity range {intensity_range}")

    samples = []
    for loc in range(n_locations + distractors):
        rng = np.random.default_rng(np.random.SeedSequence([seed, loc]))
        scene = _scene_params(rng)
        sat = _render_scene(scene, image_size)
        views: list[tuple[np.ndarray, WeatherCondition, float]] = []
        if loc < n_locations:
            poses = rng.choice(len(POSE_ANGLES), size=views_per_location,
                               replace=views_per_location > len(POSE_ANGLES))
            for v in range(views_per_location):
                pose = POSE_ANGLES[int(poses[v])]
                zoom = float(rng.uniform(0.9, 1.1))
                kind = conditions[int(rng.integers(len(conditions)))]
                intensity = 0.0 if kind == "clean" else float(rng.uniform(lo, hi))
                cond = WeatherCondition(kind, intensity,
                                        seed=int(rng.integers(2**63)))
                views.append((_render_scene(scene, image_size, pose, zoom),
                              cond, pose))
        samples.append(LocationSample(loc, sat, views))
    return samples


# ---------------------------------------------------------------------------
# Export: PPM images plus a CSV manifest


def write_ppm(path, img: np.ndarray) -> None:
    """8-bit binary PPM; [-1, 1] maps to [0, 255] with round-half-up."""
    _check_image(img)
    if img.shape[0] != 3:
        raise ShapeError(f"PPM needs 3 channels, got {img.shape}")
    v = np.floor((img + 1.0) * 0.5 * 255.0 + 0.5)
    v = np.clip(v, 0, 255).astype(np.uint8)
    _, h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(v.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise InputError(f"{path}: not an 8-bit P6 PPM")
    w, h = int(fields[1]), int(fields[2])
    pos += 1
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    img = raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32)
    return img / 255.0 * 2.0 - 1.0


def export_dataset(samples: list[LocationSample], out_dir,
                   image_format: str = "ppm") -> Path:
    """Write one directory per location plus ``manifest.csv``.

    Drone views are written in their corrupted form (the observation a
    query would see); satellites are written clean.
    """
    if image_format not in ("ppm", "mcgt"):
        raise ConfigError(f"unknown image format {image_format!r}")
    from . import tensorio

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []

    def save(img, path, record_id):
        if image_format == "ppm":
            write_ppm(path, img)
        else:
            tensorio.write_tensors(path, [(record_id, img)])

    for s in samples:
        loc_dir = out / f"loc_{s.location_id:05d}"
        loc_dir.mkdir(exist_ok=True)
        sat_path = loc_dir / f"satellite.{image_format}"
        save(s.satellite_view, sat_path, f"sat_{s.location_id}")
        rows.append([s.location_id, "satellite",
                     str(sat_path.relative_to(out)), "clean", 0.0, 0.0])
        for i, (view, cond, pose) in enumerate(s.drone_views):
            path = loc_dir / f"drone_{i:02d}.{image_format}"
            save(corrupt(view, cond), path, f"drone_{s.location_id}_{i}")
            rows.append([s.location_id, "drone", str(path.relative_to(out)),
                         cond.kind, cond.intensity, pose])

    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["location_id", "role", "path", "weather_kind",
                         "intensity", "pose_deg"])
        writer.writerows(rows)
    return manifest
