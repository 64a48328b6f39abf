"""Snell-law geometry and the synthetic through-water scene generator.

A two-camera nadir-convergent rig stands in for a full photogrammetric
survey: every seabed point is traced through the water surface to both
cameras, the straight in-air back-projections are intersected below the
surface, and the resulting apparent depth is what a matcher would have
reconstructed. The generator renders a coregistered orthoimage from a
per-band attenuation model and carves data gaps where image texture is
poor or the bottom is too deep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import config as cfgmod
from .rasters import NODATA_DEFAULT, DepthRaster, RgbRaster, check_coregistered


class TotalInternalReflectionError(ValueError):
    """No transmitted ray exists for the requested media/angle combination."""


class RefractionSolveError(RuntimeError):
    """Surface-crossing root find failed; carries the final residual."""


@dataclass
class WaterInterface:
    """Flat air/water boundary at elevation ``surface_z``."""

    n_air: float = 1.0
    n_water: float = 1.34
    surface_z: float = 0.0

    def __post_init__(self):
        if not (self.n_water >= self.n_air > 0):
            raise ValueError(f"need n_water >= n_air > 0, got {self.n_water} vs {self.n_air}")


@dataclass
class CameraPose:
    """Pinhole camera reduced to its optical center; rays are what matter here."""

    x: float
    y: float
    z: float

    def validate_above(self, iface: WaterInterface):
        if self.z <= iface.surface_z:
            raise ValueError(f"camera z={self.z} must be above the water surface z={iface.surface_z}")


@dataclass
class DepthPairSet:
    """Matched apparent (Z0) and true (Z) depths, both negative below datum."""

    apparent: np.ndarray
    true: np.ndarray

    def __post_init__(self):
        self.apparent = np.asarray(self.apparent, dtype=np.float64)
        self.true = np.asarray(self.true, dtype=np.float64)
        if self.apparent.shape != self.true.shape:
            raise ValueError("apparent and true depth arrays must align")
        if np.any(np.abs(self.apparent) > np.abs(self.true) + 1e-6):
            raise ValueError("refraction makes depths look shallower: |Z0| <= |Z| must hold")

    def __len__(self):
        return self.apparent.size


def snell_refract(incident_dir, normal, n_from, n_to):
    """Refract a unit direction through a planar interface (vector Snell's law)."""
    d = np.asarray(incident_dir, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9 or abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ValueError("incident direction and normal must be unit vectors")
    if float(np.dot(d, n)) > 0:
        n = -n
    cos_i = -float(np.dot(d, n))
    eta = n_from / n_to
    sin2_t = eta * eta * (1.0 - cos_i * cos_i)
    if sin2_t > 1.0:
        raise TotalInternalReflectionError(
            f"sin^2 of transmitted angle is {sin2_t:.6f} > 1 for n {n_from}->{n_to}"
        )
    t = eta * d + (eta * cos_i - np.sqrt(1.0 - sin2_t)) * n
    return t / np.linalg.norm(t)


def _solve_crossing(horiz_dist, cam_height, depth_below, n_air, n_water, tol=1e-8, max_iter=200):
    """Horizontal offset (from the bottom point) where the refracted ray crosses the surface.

    Solves n_w * sin(angle in water) = n_a * sin(angle in air) by bisection;
    the residual is monotone in the offset, so the root is unique. All
    arguments may be arrays (vectorized over scene grids).
    """
    r = np.asarray(horiz_dist, dtype=np.float64)
    hc = np.broadcast_to(np.asarray(cam_height, dtype=np.float64), r.shape).copy()
    hp = np.broadcast_to(np.asarray(depth_below, dtype=np.float64), r.shape).copy()

    def residual(x):
        return n_water * x / np.sqrt(x * x + hp * hp) - n_air * (r - x) / np.sqrt(
            (r - x) ** 2 + hc * hc
        )

    lo = np.zeros_like(r)
    hi = r.copy()
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        res = residual(mid)
        hi = np.where(res > 0, mid, hi)
        lo = np.where(res > 0, lo, mid)
        if np.max(hi - lo) < tol:
            break
    x = 0.5 * (lo + hi)
    final = np.abs(residual(x))
    # residual is in sine units; scale tolerance generously vs the x tolerance
    if np.max(hi - lo) >= tol and np.max(final) > 1e-6:
        raise RefractionSolveError(f"surface crossing did not converge, residual {np.max(final):.3e}")
    return x


def _backproject_pair(px, py, pz, cam_a, cam_b, iface):
    """Apparent elevation from intersecting the two straight in-air rays."""
    origins = []
    dirs = []
    for cam in (cam_a, cam_b):
        dx = cam.x - px
        dy = cam.y - py
        r = np.sqrt(dx * dx + dy * dy)
        hc = cam.z - iface.surface_z
        hp = iface.surface_z - pz
        x = _solve_crossing(r, hc, hp, iface.n_air, iface.n_water)
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = np.where(r > 0, x / np.where(r > 0, r, 1.0), 0.0)
        sx = px + frac * dx
        sy = py + frac * dy
        sz = np.broadcast_to(np.float64(iface.surface_z), np.shape(sx))
        origin = np.stack(np.broadcast_arrays(np.float64(cam.x), np.float64(cam.y), np.float64(cam.z)), axis=-1)
        direction = np.stack((sx - cam.x, sy - cam.y, sz - cam.z), axis=-1)
        norm = np.linalg.norm(direction, axis=-1, keepdims=True)
        origins.append(np.broadcast_to(origin, direction.shape))
        dirs.append(direction / norm)

    o1, o2 = origins
    d1, d2 = dirs
    w0 = o1 - o2
    a = np.sum(d1 * d1, axis=-1)
    b = np.sum(d1 * d2, axis=-1)
    c = np.sum(d2 * d2, axis=-1)
    d = np.sum(d1 * w0, axis=-1)
    e = np.sum(d2 * w0, axis=-1)
    denom = a * c - b * b
    if np.any(np.abs(denom) < 1e-14):
        raise RefractionSolveError("back-projected rays are parallel; cameras must be distinct")
    s = (b * e - c * d) / denom
    t = (a * e - b * d) / denom
    p1 = o1 + s[..., None] * d1
    p2 = o2 + t[..., None] * d2
    return 0.5 * (p1[..., 2] + p2[..., 2])


def apparent_depth(true_point, cam_a: CameraPose, cam_b: CameraPose, iface: WaterInterface):
    """Apparent elevation Z0 of a submerged point as seen by a two-camera rig."""
    px, py, pz = (float(v) for v in true_point)
    if pz >= iface.surface_z:
        raise ValueError(f"point z={pz} must be below the water surface z={iface.surface_z}")
    cam_a.validate_above(iface)
    cam_b.validate_above(iface)
    if (cam_a.x, cam_a.y, cam_a.z) == (cam_b.x, cam_b.y, cam_b.z):
        raise ValueError("cameras must be distinct")
    z0 = _backproject_pair(np.float64(px), np.float64(py), np.float64(pz), cam_a, cam_b, iface)
    return float(z0)


def apparent_depth_grid(xs, ys, depths, cam_a, cam_b, iface):
    """Vectorized ``apparent_depth`` over coregistered coordinate/depth grids."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    cam_a.validate_above(iface)
    cam_b.validate_above(iface)
    return _backproject_pair(xs, ys, depths, cam_a, cam_b, iface)


# -- scene synthesis ------------------------------------------------------------

SUBSTRATE_ALBEDOS = (
    (0.58, 0.54, 0.44),  # sand: bright, visually flat
    (0.10, 0.24, 0.15),  # seagrass: dark green
    (0.40, 0.36, 0.33),  # rock: mid grey, strong texture
)
SUBSTRATE_TEXTURE = (0.010, 0.022, 0.110)


@dataclass
class SceneConfig:
    """Everything the synthetic scene generator needs, seeded and explicit."""

    width: int = 64
    height: int = 64
    gsd: float = 0.25
    depth_range: tuple = (-8.0, -1.5)  # (deepest, shallowest), both < 0
    bump_count: int = 12
    smoothness: float = 0.22  # bump radius as a fraction of scene extent
    cam_height: float = 150.0
    cam_baseline: float = 60.0
    n_water: float = 1.34
    attenuation: tuple = (0.35, 0.12, 0.06)  # per RGB band, 1/m
    path_radiance: tuple = (0.04, 0.05, 0.07)
    column_radiance: tuple = (0.03, 0.08, 0.10)
    glint_fraction: float = 0.002
    gap_fraction: float = 0.40
    texture_window: int = 5
    depth_cutoff: float = 7.5  # |depth| beyond which matching fails, meters
    noise_sigma: float = 0.10
    seed: int = 0
    class_albedos: tuple = SUBSTRATE_ALBEDOS
    class_textures: tuple = SUBSTRATE_TEXTURE

    def __post_init__(self):
        deep, shallow = self.depth_range
        if not (deep <= shallow < 0):
            raise cfgmod.ConfigError(f"depth_range must satisfy deep <= shallow < 0, got {self.depth_range}")
        if min(self.attenuation) < 0:
            raise cfgmod.ConfigError("attenuation coefficients must be non-negative")
        if self.width <= 0 or self.height <= 0:
            raise cfgmod.ConfigError("scene dimensions must be positive")

    @classmethod
    def from_file(cls, path):
        raw = cfgmod.read_config(path)
        return cls(
            width=cfgmod.get_int(raw, "width", 64),
            height=cfgmod.get_int(raw, "height", 64),
            gsd=cfgmod.get_float(raw, "gsd", 0.25),
            depth_range=cfgmod.get_floats(raw, "depth_range", (-8.0, -1.5), count=2),
            bump_count=cfgmod.get_int(raw, "bump_count", 12),
            smoothness=cfgmod.get_float(raw, "smoothness", 0.22),
            cam_height=cfgmod.get_float(raw, "cam_height", 150.0),
            cam_baseline=cfgmod.get_float(raw, "cam_baseline", 60.0),
            n_water=cfgmod.get_float(raw, "n_water", 1.34),
            attenuation=cfgmod.get_floats(raw, "attenuation", (0.35, 0.12, 0.06), count=3),
            path_radiance=cfgmod.get_floats(raw, "path_radiance", (0.04, 0.05, 0.07), count=3),
            column_radiance=cfgmod.get_floats(raw, "column_radiance", (0.03, 0.08, 0.10), count=3),
            glint_fraction=cfgmod.get_float(raw, "glint_fraction", 0.002),
            gap_fraction=cfgmod.get_float(raw, "gap_fraction", 0.40),
            texture_window=cfgmod.get_int(raw, "texture_window", 5),
            depth_cutoff=cfgmod.get_float(raw, "depth_cutoff", 7.5),
            noise_sigma=cfgmod.get_float(raw, "noise_sigma", 0.10),
            seed=cfgmod.get_int(raw, "seed", 0),
        )

    def interface(self):
        return WaterInterface(n_water=self.n_water)

    def cameras(self):
        """Symmetric nadir-convergent pair centered over the scene."""
        cx = 0.5 * self.width * self.gsd
        cy = 0.5 * self.height * self.gsd
        half = 0.5 * self.cam_baseline
        return (
            CameraPose(cx - half, cy, self.cam_height),
            CameraPose(cx + half, cy, self.cam_height),
        )


def _bump_field(shape, count, smoothness, rng):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    extent = max(h, w)
    field = 0.12 * (rng.uniform(-1, 1) * xs + rng.uniform(-1, 1) * ys) / extent
    for _ in range(count):
        cx = rng.uniform(0, w)
        cy = rng.uniform(0, h)
        sigma = max(2.0, rng.uniform(0.5, 1.5) * smoothness * extent)
        amp = rng.uniform(-1.0, 1.0)
        field += amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma))
    return field


def synth_seabed(cfg: SceneConfig, rng) -> DepthRaster:
    """Random smooth seabed: tilted plane plus radial bumps, scaled to depth_range."""
    field = _bump_field((cfg.height, cfg.width), cfg.bump_count, cfg.smoothness, rng)
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-12:
        field = np.zeros_like(field)
        lo, hi = 0.0, 1.0
    deep, shallow = cfg.depth_range
    depths = deep + (field - lo) / (hi - lo) * (shallow - deep)
    return DepthRaster(depths, gsd=cfg.gsd)


def synth_albedo(cfg: SceneConfig, rng) -> np.ndarray:
    """Float albedo map in [0,1]: substrate classes plus class-specific texture."""
    zones = _bump_field((cfg.height, cfg.width), max(4, cfg.bump_count // 2), cfg.smoothness * 1.6, rng)
    n_classes = len(cfg.class_albedos)
    edges = np.quantile(zones, np.linspace(0, 1, n_classes + 1)[1:-1])
    labels = np.digitize(zones, edges)
    albedo = np.zeros((cfg.height, cfg.width, 3), dtype=np.float64)
    for cls in range(n_classes):
        within = labels == cls
        jitter = rng.normal(0.0, cfg.class_textures[cls], size=(cfg.height, cfg.width, 1))
        albedo += within[:, :, None] * (np.asarray(cfg.class_albedos[cls]) + jitter)
    return np.clip(albedo, 0.0, 1.0)


def render_orthoimage(true_dsm: DepthRaster, albedo, attenuation, glint_fraction=0.0,
                      seed=0, path_radiance=(0.04, 0.05, 0.07), column_radiance=(0.03, 0.08, 0.10)):
    """Render per-band radiance: path + glint + water column + attenuated bottom.

    The bottom term decays as exp(-2 k |depth|) (down- and up-welling path);
    the column term saturates toward its asymptote with the same exponent.
    Glint is salt noise: a random pixel fraction forced to near-white.
    """
    if isinstance(albedo, RgbRaster):
        check_coregistered(true_dsm, albedo)
        albedo_f = albedo.pixels.astype(np.float64) / 255.0
    else:
        albedo_f = np.asarray(albedo, dtype=np.float64)
        if albedo_f.shape != (true_dsm.height, true_dsm.width, 3):
            raise ValueError(f"albedo shape {albedo_f.shape} does not match the depth grid")
    k = np.asarray(attenuation, dtype=np.float64)
    if np.any(k < 0):
        raise cfgmod.ConfigError("attenuation coefficients must be non-negative")
    depth_mag = np.abs(true_dsm.values)[:, :, None]
    decay = np.exp(-2.0 * k[None, None, :] * depth_mag)
    radiance = (
        np.asarray(path_radiance)[None, None, :]
        + albedo_f * decay
        + np.asarray(column_radiance)[None, None, :] * (1.0 - decay)
    )
    if glint_fraction > 0:
        rng = np.random.default_rng(seed)
        hits = rng.random((true_dsm.height, true_dsm.width)) < glint_fraction
        radiance[hits] = rng.uniform(0.93, 1.0, size=(int(hits.sum()), 3))
    pixels = np.clip(np.rint(radiance * 255.0), 0, 255).astype(np.uint8)
    return RgbRaster(pixels, gsd=true_dsm.gsd)


def local_texture_variance(image: RgbRaster, window: int) -> np.ndarray:
    """Per-pixel luminance variance over a window x window neighborhood."""
    lum = image.pixels.astype(np.float64).mean(axis=2)
    pad = window // 2
    padded = np.pad(lum, pad, mode="reflect")
    # box sums via integral images keep this exact and O(1) per pixel
    integral = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1))
    integral[1:, 1:] = padded.cumsum(0).cumsum(1)
    integral2 = np.zeros_like(integral)
    integral2[1:, 1:] = (padded * padded).cumsum(0).cumsum(1)
    h, w = lum.shape
    s = (
        integral[window:, window:]
        - integral[:-window, window:]
        - integral[window:, :-window]
        + integral[:-window, :-window]
    )[:h, :w]
    s2 = (
        integral2[window:, window:]
        - integral2[:-window, window:]
        - integral2[window:, :-window]
        + integral2[:-window, :-window]
    )[:h, :w]
    n = window * window
    return np.maximum(s2 / n - (s / n) ** 2, 0.0)


def carve_gaps(apparent_dsm: DepthRaster, image: RgbRaster, cfg: SceneConfig, texture_threshold):
    """Mark nodata where texture is flat or the bottom too deep; noise survivors.

    Returns the carved raster and the achieved gap fraction. The input
    raster is not modified; reference (true) depths are never carved.
    """
    check_coregistered(apparent_dsm, image)
    variance = local_texture_variance(image, cfg.texture_window)
    gaps = (variance < texture_threshold) | (np.abs(apparent_dsm.values) > cfg.depth_cutoff)
    rng = np.random.default_rng(cfg.seed + 0x5F3)
    noisy = apparent_dsm.values + rng.normal(0.0, cfg.noise_sigma, apparent_dsm.values.shape)
    noisy = np.minimum(noisy, 0.0)
    values = np.where(gaps, apparent_dsm.nodata, noisy)
    carved = DepthRaster(values, gsd=apparent_dsm.gsd, nodata=apparent_dsm.nodata)
    return carved, float(gaps.mean())


def tune_texture_threshold(apparent_dsm, image, cfg: SceneConfig, rel_tol=0.10, max_iter=48):
    """Bisect the texture threshold until the gap fraction hits the configured target."""
    variance = local_texture_variance(image, cfg.texture_window)
    lo, hi = 0.0, float(variance.max()) + 1.0

    def fraction(threshold):
        gaps = (variance < threshold) | (np.abs(apparent_dsm.values) > cfg.depth_cutoff)
        return float(gaps.mean())

    target = cfg.gap_fraction
    if fraction(lo) >= target:
        return lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if fraction(mid) < target:
            lo = mid
        else:
            hi = mid
    # pick whichever bound lands closer to the target
    return hi if abs(fraction(hi) - target) <= abs(fraction(lo) - target) else lo


@dataclass
class SceneBundle:
    """One synthetic survey: image, gappy apparent-depth DSM, complete truth."""

    image: RgbRaster
    sfm: DepthRaster
    truth: DepthRaster
    gap_fraction: float
    texture_threshold: float


def generate_scene(cfg: SceneConfig) -> SceneBundle:
    """Full synthesis: seabed, albedo, rendering, refraction, gap carving."""
    rng = np.random.default_rng(cfg.seed)
    truth = synth_seabed(cfg, rng)
    albedo = synth_albedo(cfg, rng)
    image = render_orthoimage(
        truth,
        albedo,
        cfg.attenuation,
        glint_fraction=cfg.glint_fraction,
        seed=cfg.seed + 0x9E37,
        path_radiance=cfg.path_radiance,
        column_radiance=cfg.column_radiance,
    )
    cam_a, cam_b = cfg.cameras()
    iface = cfg.interface()
    ys, xs = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(np.float64)
    xs = (xs + 0.5) * cfg.gsd
    ys = (ys + 0.5) * cfg.gsd
    apparent_values = apparent_depth_grid(xs, ys, truth.values, cam_a, cam_b, iface)
    apparent = DepthRaster(np.minimum(apparent_values, 0.0), gsd=cfg.gsd)
    threshold = tune_texture_threshold(apparent, image, cfg)
    sfm, achieved = carve_gaps(apparent, image, cfg, threshold)
    return SceneBundle(image=image, sfm=sfm, truth=truth, gap_fraction=achieved, texture_threshold=threshold)


def generate_depth_pairs(cfg: SceneConfig, cameras=None, iface=None, grid=40) -> DepthPairSet:
    """Training pairs for refraction correction: uniform depths on a ground grid."""
    rng = np.random.default_rng(cfg.seed + 0x51)
    if cameras is None:
        cameras = cfg.cameras()
    if iface is None:
        iface = cfg.interface()
    cam_a, cam_b = cameras
    extent_x = cfg.width * cfg.gsd
    extent_y = cfg.height * cfg.gsd
    xs, ys = np.meshgrid(
        np.linspace(0.05 * extent_x, 0.95 * extent_x, grid),
        np.linspace(0.05 * extent_y, 0.95 * extent_y, grid),
    )
    deep, shallow = cfg.depth_range
    depths = rng.uniform(deep, shallow, size=xs.shape)
    apparent = apparent_depth_grid(xs, ys, depths, cam_a, cam_b, iface)
    return DepthPairSet(apparent=np.minimum(apparent, 0.0).ravel(), true=depths.ravel())
