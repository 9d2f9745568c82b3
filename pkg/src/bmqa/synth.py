"""Deterministic synthetic low-light quality dataset with planted ground truth.

Each scene fixes a layout (four shapes, a four-colour palette, how many
objects its description names); each variant draws capture latents

    L  luminance          ~ U(luminance_range)
    S  saturation         ~ U(0, 1)
    N  noise level        ~ U(0, 1)
    B  blur level         ~ U(0, 1)
    C  colours shown      ~ uniform on {0, ..., 4}

and its MOS is ``clip(w . (L, S, N, B, C/4), *clamp)``. The transcript is
templated from what a describer perceives: luminance keyword from the band
of ``L + e``, a subset of the shown colours (dim scenes hide colours), and
distortion words from thresholded, jittered latents. Object words are drawn
per variant and carry no visual or quality signal.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .data import QualityDataset, QualitySample, atomic_write_text, load_lexicon, manifest_line
from .errors import ConfigError, DataError
from .image import encode_ppm, to_uint8

LUMINANCE_WORDS = ("dark", "dim", "light", "bright")
CHROMATIC = 12
NEUTRAL = 0.6

_RGB = {
    "red": (0.9, 0.1, 0.1), "orange": (0.95, 0.55, 0.1), "yellow": (0.95, 0.9, 0.15),
    "green": (0.15, 0.8, 0.2), "cyan": (0.1, 0.85, 0.9), "blue": (0.15, 0.25, 0.95),
    "purple": (0.55, 0.15, 0.85), "pink": (0.95, 0.45, 0.7), "brown": (0.55, 0.3, 0.1),
    "magenta": (0.9, 0.1, 0.8), "teal": (0.05, 0.55, 0.5), "gold": (0.85, 0.7, 0.2),
}


@dataclass
class SynthConfig:
    n_scenes: int = 600
    variants: int = 5
    image_size: int = 64
    band_edges: tuple = (0.25, 0.45, 0.65)
    weights: tuple = (0.6, 0.25, -0.2, -0.15, 0.25)
    clamp: tuple = (0.02, 0.98)
    seed: int = 7
    luminance_range: tuple = (0.05, 0.95)
    perception_noise: float = 0.15
    color_visibility: tuple = (0.1, 0.8)
    n_devices: int = 5
    raters: int = 0
    rater_noise: float = 0.3
    quantize: bool = True

    def validate(self):
        edges = tuple(self.band_edges)
        if len(edges) != 3 or not all(0 < e < 1 for e in edges) or not all(np.diff(edges) > 0):
            raise ConfigError(f"band edges must be strictly increasing in (0, 1): {edges}")
        if len(self.weights) != 5 or not np.all(np.isfinite(self.weights)):
            raise ConfigError("weights must be five finite numbers")
        if not 1 <= self.variants <= 5:
            raise ConfigError("variants per scene must be in 1..5")
        if self.n_scenes < 1 or self.image_size < 8:
            raise ConfigError("need n_scenes >= 1 and image_size >= 8")
        return self

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def mos_from_latents(lat, weights, clamp):
    """Planted MOS: clipped weighted sum of (L, S, N, B, C/4)."""
    x = np.array([lat["L"], lat["S"], lat["N"], lat["B"], lat["C"] / 4.0])
    return float(np.clip(float(np.dot(weights, x)), clamp[0], clamp[1]))


def luminance_word(value, edges):
    return LUMINANCE_WORDS[int(np.searchsorted(np.asarray(edges), value, side="right"))]


def _scene_layout(cfg, scene_idx):
    rng = np.random.default_rng([cfg.seed, scene_idx])
    s = cfg.image_size
    shapes = []
    for _ in range(4):
        ry, rx = rng.uniform(0.1, 0.2, size=2) * s
        cy, cx = rng.uniform(0.2, 0.8, size=2) * s
        shapes.append((int(rng.integers(2)), cy, cx, ry, rx))
    palette = [int(i) for i in rng.choice(CHROMATIC, size=4, replace=False)]
    n_objects = int(rng.integers(1, 4))
    tilt = rng.uniform(-0.08, 0.08)
    return {"shapes": shapes, "palette": palette, "n_objects": n_objects, "tilt": tilt}


def _draw_latents(cfg, rng):
    lo, hi = cfg.luminance_range
    return {
        "L": float(rng.uniform(lo, hi)),
        "S": float(rng.uniform(0.0, 1.0)),
        "N": float(rng.uniform(0.0, 1.0)),
        "B": float(rng.uniform(0.0, 1.0)),
        "C": int(rng.integers(0, 5)),
    }


def _box_blur(img, radius):
    if radius <= 0:
        return img
    k = 2 * radius + 1
    pad = np.pad(img, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    csum = np.cumsum(np.cumsum(pad, axis=0), axis=1)
    csum = np.pad(csum, ((1, 0), (1, 0), (0, 0)))
    h, w = img.shape[:2]
    total = csum[k:k + h, k:k + w] - csum[:h, k:k + w] - csum[k:k + h, :w] + csum[:h, :w]
    return total / (k * k)


def render(layout, lat, size, colors, rng):
    """Render one variant as float RGB in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    refl = np.empty((size, size, 3))
    refl[:] = (0.45 + layout["tilt"] * (xx / size - 0.5))[..., None]
    for i, (kind, cy, cx, ry, rx) in enumerate(layout["shapes"]):
        if kind == 0:
            inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        if i < lat["C"]:
            rgb = np.asarray(_RGB[colors[layout["palette"][i]]])
            gray = float(rgb @ (0.299, 0.587, 0.114))
            rgb = gray + lat["S"] * (rgb - gray)
        else:
            rgb = np.full(3, NEUTRAL)
        refl[inside] = rgb
    img = np.clip(refl * 1.4 * lat["L"], 0.0, 1.0)
    img = _box_blur(img, int(round(3 * lat["B"])))
    img = img + rng.normal(0.0, 0.1 * lat["N"], size=img.shape)
    return np.clip(img, 0.0, 1.0)


def describe(layout, lat, cfg, colors, objects, rng):
    """Template a transcript from jittered perception of the latents."""
    jitter = cfg.perception_noise
    seen_l = lat["L"] + rng.normal(0.0, jitter)
    words = ["a", luminance_word(seen_l, cfg.band_edges), "photo", "of"]
    objs = rng.choice(len(objects), size=layout["n_objects"], replace=False)
    words += " and ".join(objects[int(i)] for i in objs).split()
    base, slope = cfg.color_visibility
    p_show = min(1.0, base + slope * lat["L"])
    shown = [colors[layout["palette"][i]] for i in range(lat["C"]) if rng.random() < p_show]
    if shown:
        words += ["in"] + " and ".join(shown).split()
    dist = []
    if lat["N"] + rng.normal(0.0, jitter) > 0.55:
        dist.append("noisy")
    if lat["B"] + rng.normal(0.0, jitter) > 0.55:
        dist.append("blurred")
    s_seen = lat["S"] + rng.normal(0.0, jitter)
    if s_seen < 0.3:
        dist.append("dull")
    elif s_seen > 0.75:
        dist.append("vivid")
    words += ["looking"] + (" and ".join(dist).split() if dist else ["clean"])
    return " ".join(words)


def synth_samples(cfg):
    """Yield ``(QualitySample, uint8 pixels)`` in scene/variant order."""
    cfg.validate()
    colors = load_lexicon("colors")
    objects = load_lexicon("objects")
    for scene_idx in range(cfg.n_scenes):
        layout = _scene_layout(cfg, scene_idx)
        scene = f"s{scene_idx:04d}"
        for v in range(cfg.variants):
            rng = np.random.default_rng([cfg.seed, scene_idx, v + 1])
            lat = _draw_latents(cfg, rng)
            pixels = to_uint8(render(layout, lat, cfg.image_size, colors, rng))
            qsd = describe(layout, lat, cfg, colors, objects, rng)
            mos = mos_from_latents(lat, cfg.weights, cfg.clamp)
            extra = {"latents": lat, "scene_class": layout["palette"][0]}
            raters = None
            if cfg.raters:
                scores = np.clip(mos + rng.normal(0.0, cfg.rater_noise, size=cfg.raters), 0.0, 1.0)
                if cfg.quantize:
                    scores = np.round(scores * 10.0) / 10.0
                raters = [float(x) for x in scores]
                extra["mos_latent"] = mos
                mos = float(sum(raters) / len(raters))
            sample = QualitySample(
                image=f"images/{scene}_v{v}.ppm",
                qsd=qsd,
                mos=mos,
                scene=scene,
                device=f"device-{v % cfg.n_devices + 1}",
                raters=raters,
                extra=extra,
            )
            yield sample, pixels


def synth_dataset(cfg):
    """Generate the dataset in memory as a :class:`QualityDataset`."""
    samples, images = [], []
    for sample, pixels in synth_samples(cfg):
        samples.append(sample)
        images.append(pixels)
    return QualityDataset(samples, np.stack(images))


def synth_generate(cfg, out_dir):
    """Write ``images/*.ppm``, ``manifest.jsonl`` and ``synth_config.json`` under ``out_dir``."""
    try:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
        lines = []
        for sample, pixels in synth_samples(cfg):
            path = os.path.join(out_dir, sample.image)
            tmp = f"{path}.tmp{os.getpid()}"
            with open(tmp, "wb") as fh:
                fh.write(encode_ppm(pixels))
            os.replace(tmp, path)
            lines.append(manifest_line(sample) + "\n")
        atomic_write_text(os.path.join(out_dir, "manifest.jsonl"), "".join(lines))
        atomic_write_text(
            os.path.join(out_dir, "synth_config.json"),
            json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n",
        )
    except OSError as exc:
        raise DataError(f"cannot write synthetic dataset to {out_dir}: {exc.strerror}") from None
    return os.path.join(out_dir, "manifest.jsonl")
