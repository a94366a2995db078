"""PSNR, SSIM and 8-bit pixel histograms."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _pair(ref: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"image shapes differ: {ref.shape} vs {test.shape}")
    return np.clip(ref, 0.0, 1.0), np.clip(test, 0.0, 1.0)


def psnr(ref: np.ndarray, test: np.ndarray) -> float:
    """PSNR in dB for [0, 1] images (peak 1); both are clipped first."""
    ref, test = _pair(ref, test)
    mse = float(np.mean(np.square(ref - test)))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # separable filter, mirror reflection (edge pixel not repeated) at borders
    r = len(taps) // 2
    p = np.pad(img, r, mode="reflect")
    rows = sliding_window_view(p, len(taps), axis=1) @ taps
    return sliding_window_view(rows, len(taps), axis=0) @ taps


def ssim_map(ref: np.ndarray, test: np.ndarray) -> np.ndarray:
    ref, test = _pair(ref, test)
    if ref.ndim != 2:
        raise ValueError(f"ssim expects 2-D images, got shape {ref.shape}")
    if min(ref.shape) < SSIM_WINDOW:
        raise ValueError(f"image {ref.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    taps = gaussian_window()
    mu_x = _filter(ref, taps)
    mu_y = _filter(test, taps)
    var_x = _filter(ref * ref, taps) - mu_x * mu_x
    var_y = _filter(test * test, taps) - mu_y * mu_y
    cov = _filter(ref * test, taps) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return num / den


def ssim(ref: np.ndarray, test: np.ndarray) -> float:
    """Mean SSIM over an 11x11 Gaussian window (std 1.5) on [0, 1] images."""
    return float(np.mean(ssim_map(ref, test)))


@dataclass
class Histogram:
    counts: np.ndarray  # (256,) int64
    total: int

    def normalized(self) -> np.ndarray:
        if self.total <= 0:
            raise ValueError("empty histogram")
        return self.counts / float(self.total)


def histogram(img: np.ndarray) -> Histogram:
    """Counts of ``round(clip(v) * 255)`` over the 256 byte values."""
    q = np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.int64)
    counts = np.bincount(q.ravel(), minlength=256)
    return Histogram(counts, int(q.size))


def hist_distance(a: Histogram, b: Histogram) -> float:
    """One minus the intersection of the two normalized histograms."""
    inter = np.minimum(a.normalized(), b.normalized()).sum()
    return float(min(1.0, max(0.0, 1.0 - inter)))


def _fmt(x: float) -> str:
    return repr(float(x))


def format_sigma(sigma: float) -> str:
    return str(int(sigma)) if float(sigma).is_integer() else repr(float(sigma))


@dataclass
class MetricsRow:
    method: str
    sigma: float
    image: str
    psnr: float
    ssim: float


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)

    def add(self, method: str, sigma: float, image: str, psnr_db: float, ssim_val: float) -> None:
        self.rows.append(MetricsRow(method, float(sigma), image, float(psnr_db), float(ssim_val)))

    def extend(self, other: "MetricsReport") -> None:
        self.rows.extend(other.rows)

    def keys(self) -> list[tuple[str, float]]:
        seen: dict[tuple[str, float], None] = {}
        for r in self.rows:
            seen.setdefault((r.method, r.sigma), None)
        return list(seen)

    def means(self) -> dict[tuple[str, float], tuple[float, float]]:
        """Mean (psnr, ssim) per (method, sigma), in first-seen order."""
        out = {}
        for key in self.keys():
            members = [r for r in self.rows if (r.method, r.sigma) == key]
            out[key] = (
                float(np.mean([r.psnr for r in members])),
                float(np.mean([r.ssim for r in members])),
            )
        return out

    def mean_psnr(self, sigma: float, method: str | None = None) -> float:
        vals = [r.psnr for r in self.rows if r.sigma == sigma and (method is None or r.method == method)]
        if not vals:
            raise KeyError(f"no rows for sigma={sigma} method={method}")
        return float(np.mean(vals))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "sigma", "image", "psnr_db", "ssim"])
        for r in self.rows:
            w.writerow([r.method, format_sigma(r.sigma), r.image, _fmt(r.psnr), _fmt(r.ssim)])
        for (method, sigma), (p, s) in self.means().items():
            w.writerow([method, format_sigma(sigma), "MEAN", _fmt(p), _fmt(s)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        """Parse per-image rows back; MEAN rows are skipped (they are derived)."""
        report = cls()
        for rec in csv.DictReader(io.StringIO(text)):
            if rec["image"] == "MEAN":
                continue
            report.add(rec["method"], float(rec["sigma"]), rec["image"], float(rec["psnr_db"]), float(rec["ssim"]))
        return report
