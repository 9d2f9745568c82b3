"""Transcript statistics: keyword-conditioned MOS histograms and count tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import aggregate_mos, load_lexicon
from .errors import DegenerateInputError, EmptyInputError
from .text import normalize

N_BINS = 20


@dataclass(frozen=True)
class GaussianFit:
    mu: float
    sigma: float
    amplitude: float


def gaussian_fit(centers, masses):
    """Moment-matching Gaussian for a histogram.

    ``mu`` and ``sigma`` are the mass-weighted mean and standard deviation of
    the bin centers; ``amplitude = total / (sigma * sqrt(2 pi))``.
    """
    centers = np.asarray(centers, dtype=np.float64)
    masses = np.asarray(masses, dtype=np.float64)
    if centers.shape != masses.shape or centers.ndim != 1:
        raise DegenerateInputError("centers and masses must be equal-length vectors")
    if np.any(masses < 0):
        raise DegenerateInputError("histogram masses must be non-negative")
    total = masses.sum()
    if not total > 0:
        raise EmptyInputError("histogram has no mass")
    nonzero = int(np.count_nonzero(masses))
    if nonzero < 3:
        raise DegenerateInputError(f"sigma undefined: only {nonzero} non-empty bin(s), need 3")
    w = masses / total
    mu = float(w @ centers)
    sigma = math.sqrt(float(w @ (centers - mu) ** 2))
    return GaussianFit(mu, sigma, float(total / (sigma * math.sqrt(2.0 * math.pi))))


def histogram(values, n_bins=N_BINS):
    """Counts of ``values`` over equal bins of [0, 1]; returns ``(centers, masses)``."""
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    masses, _ = np.histogram(np.clip(values, 0.0, 1.0), bins=edges)
    return (edges[:-1] + edges[1:]) / 2.0, masses.astype(np.int64)


@dataclass
class CountTable:
    counts: list
    n: list
    mean_mos: list

    def to_csv(self):
        rows = ["count,n,mean_mos"]
        rows += [f"{c},{n},{m!r}" for c, n, m in zip(self.counts, self.n, self.mean_mos)]
        return "\n".join(rows) + "\n"


@dataclass
class StatsReport:
    n: int
    centers: np.ndarray
    luminance: dict
    fits: dict
    colors: CountTable
    objects: CountTable
    distortion: CountTable
    mos_hist: np.ndarray
    ci_halfwidths: np.ndarray | None = None
    notes: list = field(default_factory=list)

    def _hist_csv(self, masses, centers=None):
        centers = self.centers if centers is None else centers
        return "bin,mass\n" + "".join(f"{c:.4f},{int(m)}\n" for c, m in zip(centers, masses))

    def tables(self):
        """CSV tables keyed by file stem."""
        out = {"mos_histogram": self._hist_csv(self.mos_hist)}
        for word, masses in self.luminance.items():
            out[f"luminance_{word}"] = self._hist_csv(masses)
        out["color_count"] = self.colors.to_csv()
        out["object_count"] = self.objects.to_csv()
        out["distortion_count"] = self.distortion.to_csv()
        if self.ci_halfwidths is not None:
            c, m = histogram(self.ci_halfwidths / 0.5, N_BINS)
            out["ci_histogram"] = self._hist_csv(m, c * 0.5)
        return out

    def to_text(self):
        lines = [f"samples: {self.n}", "", "luminance keyword  n      mu      sigma"]
        for word, masses in self.luminance.items():
            fit = self.fits.get(word)
            if fit is None:
                lines.append(f"{word:<18} {int(masses.sum()):<6} (no fit)")
            else:
                lines.append(f"{word:<18} {int(masses.sum()):<6} {fit.mu:.4f}  {fit.sigma:.4f}")
        for title, table in (("color words", self.colors), ("object words", self.objects),
                             ("distortion words", self.distortion)):
            lines += ["", f"{title}: count  n  mean MOS"]
            for c, n, m in zip(table.counts, table.n, table.mean_mos):
                lines.append(f"  {c:>5}  {n:>5}  {m:.4f}")
        span = self.colors.mean_mos[-1] - self.colors.mean_mos[0] if self.colors.counts else float("nan")
        lines += ["", f"mean MOS span over color-word counts: {span:.4f}"]
        if self.ci_halfwidths is not None:
            ci = self.ci_halfwidths
            lines.append(f"95% CI half-width: min {ci.min():.4f} median {np.median(ci):.4f} max {ci.max():.4f}")
        lines += self.notes
        return "\n".join(lines) + "\n"


def _count_table(counts, mos):
    counts = np.asarray(counts)
    values = sorted(set(counts.tolist()))
    n = [int(np.sum(counts == v)) for v in values]
    means = [float(mos[counts == v].mean()) for v in values]
    return CountTable(values, n, means)


def analyze(samples, n_bins=N_BINS):
    """Keyword statistics over a list of samples (pure function of the records)."""
    lum = load_lexicon("luminance")
    colors = set(load_lexicon("colors"))
    objects = set(load_lexicon("objects"))
    distortion = set(load_lexicon("distortion"))
    mos = np.array([s.mos for s in samples], dtype=np.float64)
    centers, mos_hist = histogram(mos, n_bins)
    words = [normalize(s.qsd) for s in samples]
    luminance, fits, notes = {}, {}, []
    for key in lum:
        sel = np.array([key in w for w in words], dtype=bool)
        _, masses = histogram(mos[sel], n_bins) if sel.any() else (centers, np.zeros(n_bins, np.int64))
        luminance[key] = masses
        if np.count_nonzero(masses) >= 3:
            fits[key] = gaussian_fit(centers, masses)
        elif masses.sum():
            notes.append(f"note: '{key}' bucket too narrow to fit")
    ci = None
    rated = [s.raters for s in samples if s.raters and len(s.raters) >= 2]
    if rated:
        ci = np.array([aggregate_mos(r)[1] for r in rated])
    return StatsReport(
        n=len(samples),
        centers=centers,
        luminance=luminance,
        fits=fits,
        colors=_count_table([sum(t in colors for t in w) for w in words], mos),
        objects=_count_table([sum(t in objects for t in w) for w in words], mos),
        distortion=_count_table([sum(t in distortion for t in w) for w in words], mos),
        mos_hist=mos_hist,
        ci_halfwidths=ci,
        notes=notes,
    )
