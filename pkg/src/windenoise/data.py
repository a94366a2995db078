"""AWGN corruption, patch extraction, dihedral augmentation and the training stream."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .nn import DTYPE

BLIND_SIGMA_MAX = 70.0


class ManifestError(ValueError):
    """Corpus manifest is missing, empty or lists unreadable entries."""


@dataclass
class ImagePair:
    clean: np.ndarray
    noisy: np.ndarray
    sigma: float
    seed: int


@dataclass
class PatchSet:
    patches: np.ndarray  # (N, 1, s, s)
    # (image id, (top, left), augmentation code) per patch
    provenance: list[tuple[int, tuple[int, int], int]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.patches.shape[0]


def read_manifest(path: str | Path) -> list[Path]:
    """Image paths listed one per line; ``#`` starts a comment.

    Relative entries are resolved against the manifest's directory.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc.strerror or exc}") from None
    entries = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            p = Path(line)
            entries.append(p if p.is_absolute() else path.parent / p)
    if not entries:
        raise ManifestError(f"manifest {path} lists no images")
    return entries


def noise_seed(seed: int, image_id: str, sigma: float) -> int:
    """Derive the noise seed for one (image, sigma) cell of an experiment.

    Keyed by the image's name rather than its position so that the same
    image sees the same noise field in every subcommand and manifest.
    """
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(image_id.encode("utf-8")), int(round(sigma * 1000))]
    return int(np.random.SeedSequence(key).generate_state(1, dtype=np.uint64)[0])


def add_awgn(img: np.ndarray, sigma: float, seed: int) -> ImagePair:
    """Return ``clean + g`` with ``g ~ N(0, (sigma/255)^2)`` i.i.d.; not clipped."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    clean = np.asarray(img, dtype=DTYPE)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(clean.shape, dtype=DTYPE) * DTYPE(sigma / 255.0)
    return ImagePair(clean, clean + noise, float(sigma), seed)


def extract_patches(img: np.ndarray, size: int, stride: int, image_id: int = 0) -> PatchSet:
    img = np.asarray(img, dtype=DTYPE)
    h, w = img.shape
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if size < 1 or size > min(h, w):
        raise ValueError(f"patch size {size} does not fit in a {h}x{w} image")
    tops = range(0, h - size + 1, stride)
    lefts = range(0, w - size + 1, stride)
    patches = np.empty((len(tops) * len(lefts), 1, size, size), dtype=DTYPE)
    provenance = []
    k = 0
    for top in tops:
        for left in lefts:
            patches[k, 0] = img[top : top + size, left : left + size]
            provenance.append((image_id, (top, left), 0))
            k += 1
    return PatchSet(patches, provenance)


def augment(patch: np.ndarray, code: int) -> np.ndarray:
    """One of the 8 dihedral transforms on the last two axes.

    Bits 0-1 give the number of 90-degree counter-clockwise turns; bit 2
    flips left-right before turning. Code 0 is the identity.
    """
    if not 0 <= code <= 7:
        raise ValueError(f"augmentation code must be in 0..7, got {code}")
    patch = np.asarray(patch)
    if patch.shape[-1] != patch.shape[-2]:
        raise ValueError(f"augment needs square patches, got {patch.shape[-2:]}")
    if code & 4:
        patch = patch[..., ::-1]
    return np.ascontiguousarray(np.rot90(patch, k=code & 3, axes=(-2, -1)))


@dataclass(frozen=True)
class SigmaRegime:
    """Either one fixed sigma or per-patch uniform sampling on [0, high]."""

    blind: bool
    value: float = 0.0
    high: float = BLIND_SIGMA_MAX

    @classmethod
    def single(cls, sigma: float) -> "SigmaRegime":
        if sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {sigma}")
        return cls(False, float(sigma))

    @classmethod
    def uniform(cls, high: float = BLIND_SIGMA_MAX) -> "SigmaRegime":
        return cls(True, 0.0, float(high))

    @classmethod
    def parse(cls, spec: str | float | int) -> "SigmaRegime":
        if isinstance(spec, str):
            if spec.strip().lower() == "blind":
                return cls.uniform()
            spec = float(spec)
        return cls.single(float(spec))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.blind:
            return rng.uniform(0.0, self.high, size=n)
        return np.full(n, self.value)

    def label(self) -> str:
        return f"blind[0,{self.high:g}]" if self.blind else f"{self.value:g}"


@dataclass
class Batch:
    noisy: np.ndarray
    clean: np.ndarray
    sigmas: np.ndarray  # per patch, 0-255 scale
    step: int


class TrainingStream:
    """Infinite, seed-deterministic iterator of (noisy, clean) batches.

    Batch ``g`` is a pure function of (patches, regime, batch size, seed, g):
    patch order comes from successive per-pass permutations, and each batch
    draws its sigmas, augmentation codes and noise from its own generator.
    This is what lets a resumed run pick up mid-stream by ``start_step``.
    """

    def __init__(
        self,
        patches: PatchSet,
        regime: SigmaRegime,
        batch: int,
        seed: int,
        augment: bool = True,
        start_step: int = 0,
    ):
        if len(patches) == 0:
            raise ValueError("empty patch set")
        if batch < 1:
            raise ValueError(f"batch size must be >= 1, got {batch}")
        if batch > len(patches):
            raise ValueError(f"batch size {batch} exceeds the {len(patches)} available patches")
        self.patches = patches
        self.regime = regime
        self.batch = batch
        self.seed = int(seed)
        self.augment = augment
        self.step = start_step
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, pass_idx: int) -> np.ndarray:
        if pass_idx not in self._perms:
            if len(self._perms) > 4:
                self._perms.clear()
            rng = np.random.default_rng([self.seed, 0, pass_idx])
            self._perms[pass_idx] = rng.permutation(len(self.patches))
        return self._perms[pass_idx]

    def indices(self, step: int) -> np.ndarray:
        n = len(self.patches)
        flat = np.arange(step * self.batch, (step + 1) * self.batch)
        return np.array([self._perm(int(i // n))[i % n] for i in flat])

    def batch_at(self, step: int) -> Batch:
        idx = self.indices(step)
        rng = np.random.default_rng([self.seed, 1, step])
        sigmas = self.regime.sample(rng, self.batch)
        codes = rng.integers(0, 8, size=self.batch) if self.augment else np.zeros(self.batch, dtype=int)
        noise = rng.standard_normal((self.batch, 1) + self.patches.patches.shape[2:], dtype=DTYPE)
        clean = np.stack([augment(self.patches.patches[i], int(c)) for i, c in zip(idx, codes)])
        scale = (sigmas / 255.0).astype(DTYPE)[:, None, None, None]
        return Batch(clean + noise * scale, clean, sigmas, step)

    def __iter__(self) -> Iterator[Batch]:
        return self

    def __next__(self) -> Batch:
        b = self.batch_at(self.step)
        self.step += 1
        return b


def corpus_patches(images: Sequence[np.ndarray], size: int, stride: int) -> PatchSet:
    """Pool patches from every image; images smaller than ``size`` are rejected."""
    if not images:
        raise ValueError("empty corpus")
    sets = [extract_patches(img, size, stride, image_id=i) for i, img in enumerate(images)]
    return PatchSet(
        np.concatenate([s.patches for s in sets]),
        [prov for s in sets for prov in s.provenance],
    )


def make_training_stream(
    corpus: Sequence[np.ndarray] | PatchSet,
    regime: SigmaRegime | str | float,
    patch: int = 64,
    stride: int = 32,
    batch: int = 32,
    seed: int = 0,
    augment: bool = True,
    start_step: int = 0,
) -> TrainingStream:
    if not isinstance(regime, SigmaRegime):
        regime = SigmaRegime.parse(regime)
    patches = corpus if isinstance(corpus, PatchSet) else corpus_patches(corpus, patch, stride)
    return TrainingStream(patches, regime, batch, seed, augment=augment, start_step=start_step)
