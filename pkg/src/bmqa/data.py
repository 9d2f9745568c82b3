"""Dataset records, manifest I/O, scene-stratified splitting and MOS aggregation."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import DataError
from .image import decode_ppm

MOS_TOLERANCE = 1e-9
REQUIRED_FIELDS = ("image", "qsd", "mos", "scene", "device")


@dataclass
class QualitySample:
    image: str
    qsd: str
    mos: float
    scene: str
    device: str
    raters: list | None = None
    extra: dict = field(default_factory=dict)

    def validate(self, line=None):
        if not isinstance(self.mos, (int, float)) or isinstance(self.mos, bool):
            raise DataError(f"mos must be a number, got {self.mos!r}", line)
        if not (0.0 <= self.mos <= 1.0) or not math.isfinite(self.mos):
            raise DataError(f"mos {self.mos} outside [0, 1]", line)
        if not isinstance(self.qsd, str):
            raise DataError("qsd must be text", line)
        for name in ("image", "scene", "device"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise DataError(f"{name} must be a non-empty string", line)
        if self.raters is not None:
            if not isinstance(self.raters, list) or not self.raters:
                raise DataError("raters must be a non-empty list", line)
            for r in self.raters:
                if not isinstance(r, (int, float)) or isinstance(r, bool) or not 0.0 <= r <= 1.0:
                    raise DataError(f"rater score {r!r} outside [0, 1]", line)
            mean = sum(self.raters) / len(self.raters)
            if abs(mean - self.mos) > MOS_TOLERANCE:
                raise DataError(f"mos {self.mos} differs from rater mean {mean}", line)
        return self

    def to_record(self):
        rec = {
            "image": self.image,
            "qsd": self.qsd,
            "mos": self.mos,
            "scene": self.scene,
            "device": self.device,
        }
        if self.raters is not None:
            rec["raters"] = list(self.raters)
        rec.update(self.extra)
        return rec


def parse_record(text, line=None):
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON ({exc.msg})", line) from None
    if not isinstance(rec, dict):
        raise DataError("record must be a JSON object", line)
    missing = [f for f in REQUIRED_FIELDS if f not in rec]
    if missing:
        raise DataError(f"missing field(s): {', '.join(missing)}", line)
    extra = {k: v for k, v in rec.items() if k not in REQUIRED_FIELDS and k != "raters"}
    sample = QualitySample(
        image=rec["image"],
        qsd=rec["qsd"],
        mos=rec["mos"],
        scene=rec["scene"],
        device=rec["device"],
        raters=rec.get("raters"),
        extra=extra,
    )
    return sample.validate(line)


def parse_manifest(path):
    """Read a JSON-lines manifest; blank lines are skipped."""
    samples = []
    try:
        with open(path, encoding="utf-8") as fh:
            for n, text in enumerate(fh, start=1):
                if text.strip():
                    samples.append(parse_record(text, line=n))
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not UTF-8 ({exc.reason})") from None
    return samples


def manifest_line(sample):
    return json.dumps(sample.to_record(), sort_keys=True, ensure_ascii=False)


def write_manifest(path, samples):
    atomic_write_text(path, "".join(manifest_line(s) + "\n" for s in samples))


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path, data):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def split_by_scene(samples, ratios=(8, 1, 1), seed=0):
    """Shuffle scenes with ``seed`` and partition them train/val/test.

    Every sample of a scene lands in the same split. Scene counts are
    ``round(n * r / sum(ratios))`` for train and val; test takes the rest.
    """
    scenes = sorted({s.scene for s in samples})
    if len(scenes) < 10:
        raise DataError(f"need at least 10 distinct scenes to split, found {len(scenes)}")
    order = [scenes[i] for i in np.random.default_rng(seed).permutation(len(scenes))]
    total = float(sum(ratios))
    n_train = int(round(len(scenes) * ratios[0] / total))
    n_val = int(round(len(scenes) * ratios[1] / total))
    groups = (
        set(order[:n_train]),
        set(order[n_train:n_train + n_val]),
        set(order[n_train + n_val:]),
    )
    return tuple([s for s in samples if s.scene in g] for g in groups)


def aggregate_mos(scores, z=1.96):
    """Mean opinion score and 95% confidence half-width ``z * s / sqrt(n)``."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 2:
        raise DataError("need at least two rater scores")
    if np.any((scores < 0) | (scores > 1)):
        raise DataError("rater scores must lie in [0, 1]")
    return float(scores.mean()), float(z * scores.std(ddof=1) / math.sqrt(scores.size))


def load_lexicon(name):
    text = resources.files("bmqa").joinpath(f"lexicons/{name}.txt").read_text(encoding="utf-8")
    return [w for w in text.split("\n") if w]


class QualityDataset:
    """In-memory samples with uint8 pixels, as consumed by the trainer."""

    def __init__(self, samples, images):
        if len(samples) != len(images):
            raise DataError("samples and images differ in length")
        self.samples = list(samples)
        self.images = np.asarray(images, dtype=np.uint8)

    def __len__(self):
        return len(self.samples)

    @property
    def mos(self):
        return np.array([s.mos for s in self.samples])

    @property
    def transcripts(self):
        return [s.qsd for s in self.samples]

    def field(self, name):
        return [getattr(s, name) if hasattr(s, name) else s.extra.get(name) for s in self.samples]

    def subset(self, samples):
        pos = {id(s): i for i, s in enumerate(self.samples)}
        idx = [pos[id(s)] for s in samples]
        return QualityDataset([self.samples[i] for i in idx], self.images[idx])

    def float_images(self, idx=None):
        pix = self.images if idx is None else self.images[idx]
        return pix.astype(np.float64) / 255.0

    @classmethod
    def from_manifest(cls, path):
        samples = parse_manifest(path)
        if not samples:
            raise DataError(f"{path}: manifest is empty")
        root = os.path.dirname(os.path.abspath(path))
        images = []
        for n, s in enumerate(samples, start=1):
            img_path = s.image if os.path.isabs(s.image) else os.path.join(root, s.image)
            try:
                with open(img_path, "rb") as fh:
                    images.append(decode_ppm(fh.read()))
            except OSError as exc:
                raise DataError(f"cannot read image {s.image}: {exc.strerror}", n) from None
        shapes = {im.shape for im in images}
        if len(shapes) != 1:
            raise DataError(f"images have mixed sizes: {sorted(shapes)[:3]}")
        return cls(samples, np.stack(images))
