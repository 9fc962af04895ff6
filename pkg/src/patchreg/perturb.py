"""Surface-statistic perturbations: Fourier-domain filtering and color maps.

Images here are float arrays in [0, 1]. Frequency masks are binary grids
stored in the centered convention (zero frequency at (H//2, W//2)); the
DC bin is always kept so every filter preserves the image mean. Filtering
a real image through any mask produced here returns a (numerically) real
image because random masks are made conjugate-symmetric.

The DFT is the direct separable O(N^3)-per-axis matrix form, not a fast
transform: images are small, and at 4x4 the double-sum definition doubles
as an oracle for it.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .exceptions import ConfigError, InputError, ShapeError

__all__ = [
    "FreqMask",
    "dft2",
    "idft2",
    "radial_mask",
    "random_mask",
    "fourier_filter",
    "negative_color",
    "greyscale",
    "PatternAssignment",
    "make_pattern_kernels",
    "attach_pattern",
    "attach_uniform",
    "assignment_manifest",
    "parse_assignment_manifest",
    "KERNEL_IDS",
]

KERNEL_IDS = ("original", "radial", "random")


@dataclass(frozen=True)
class FreqMask:
    """Binary frequency mask in the centered convention.

    values[H//2, W//2] is the DC bin and must be 1.
    """

    height: int
    width: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.height, self.width):
            raise ShapeError(f"mask values shape {v.shape} does not match {self.height}x{self.width}")
        if not np.all((v == 0.0) | (v == 1.0)):
            raise InputError("mask values must be binary (0 or 1)")
        if v[self.height // 2, self.width // 2] != 1.0:
            raise InputError("the DC bin (center) of a frequency mask must be 1")
        object.__setattr__(self, "values", v)

    def standard_order(self) -> np.ndarray:
        """Mask re-indexed to match dft2 output (zero frequency at [0, 0])."""
        return np.roll(self.values, (-(self.height // 2), -(self.width // 2)), axis=(0, 1))


@lru_cache(maxsize=16)
def _dft_matrix(n: int) -> np.ndarray:
    jk = np.outer(np.arange(n), np.arange(n))
    return np.exp(-2j * np.pi * jk / n)


def dft2(image) -> np.ndarray:
    """Two-dimensional DFT of an (H, W) image: a row pass then a column pass.

    Returns the complex spectrum with the zero-frequency bin at [0, 0].
    """
    x = np.asarray(image)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError(f"dft2 expects a 2-d image, got shape {x.shape}")
    h, w = x.shape
    return _dft_matrix(h) @ (x @ _dft_matrix(w))


def idft2(spectrum) -> np.ndarray:
    """Inverse of dft2, normalized so idft2(dft2(x)) = x. Returns a complex array."""
    s = np.asarray(spectrum)
    if s.ndim != 2:
        raise ShapeError(f"idft2 expects a 2-d spectrum, got shape {s.shape}")
    h, w = s.shape
    return (_dft_matrix(h).conj() @ (s @ _dft_matrix(w).conj())) / (h * w)


def radial_mask(height: int, width: int, radius: float) -> FreqMask:
    """Keep every bin within Euclidean distance `radius` of the centered DC bin."""
    if radius < 0:
        raise InputError(f"radius must be non-negative, got {radius!r}")
    du = np.arange(height) - height // 2
    dv = np.arange(width) - width // 2
    dist2 = du[:, None] ** 2 + dv[None, :] ** 2
    vals = (dist2 <= radius * radius).astype(np.float64)
    vals[height // 2, width // 2] = 1.0
    return FreqMask(height, width, vals)


def random_mask(height: int, width: int, keep_prob: float, seed: int) -> FreqMask:
    """Keep each bin independently with probability keep_prob, then symmetrize.

    Conjugate symmetry is imposed by copying each canonical bin's draw to
    its mirror partner, so the per-bin keep probability stays keep_prob.
    The DC bin is always kept.
    """
    if not 0.0 <= keep_prob <= 1.0:
        raise InputError(f"keep_prob must lie in [0, 1], got {keep_prob!r}")
    rng = np.random.default_rng(seed)
    m = (rng.random((height, width)) < keep_prob).astype(np.float64)
    # Standard (unshifted) indexing: bin (u, v) pairs with (-u mod H, -v mod W).
    for u in range(height):
        for v in range(width):
            pu, pv = (-u) % height, (-v) % width
            if (u, v) < (pu, pv):
                m[pu, pv] = m[u, v]
    m[0, 0] = 1.0
    centered = np.roll(m, (height // 2, width // 2), axis=(0, 1))
    return FreqMask(height, width, centered)


def fourier_filter(image, mask: FreqMask) -> np.ndarray:
    """Zero out masked frequency bins; the result is clamped back to [0, 1].

    Accepts (H, W) or (C, H, W); multichannel images are filtered per channel.
    """
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[-2:] != (mask.height, mask.width):
        raise ShapeError(
            f"image spatial axes {x.shape[-2:] if x.ndim >= 2 else x.shape} do not match "
            f"mask {mask.height}x{mask.width}"
        )
    keep = mask.standard_order()
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        out[c] = idft2(dft2(x[c]) * keep).real
    out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


def _filter_batch(images: np.ndarray, mask: FreqMask, chunk: int = 2048) -> np.ndarray:
    """fourier_filter over a (N, C, H, W) stack, vectorized over samples."""
    n, c, h, w = images.shape
    keep = mask.standard_order()
    fh, fw = _dft_matrix(h), _dft_matrix(w)
    ih, iw = fh.conj(), fw.conj()
    out = np.empty_like(images)
    flat = images.reshape(n * c, h, w)
    oflat = out.reshape(n * c, h, w)
    for lo in range(0, n * c, chunk):
        hi = min(lo + chunk, n * c)
        spec = (fh @ flat[lo:hi]) @ fw
        spec *= keep
        oflat[lo:hi] = ((ih @ spec) @ iw).real / (h * w)
    np.clip(out, 0.0, 1.0, out=out)
    return out


def negative_color(image) -> np.ndarray:
    """Elementwise 1 - x for an image with values in [0, 1]."""
    x = np.asarray(image, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise InputError("negative_color expects values in [0, 1]")
    return 1.0 - x


_LUMA = np.array([0.299, 0.587, 0.114])


def greyscale(image) -> np.ndarray:
    """Replace all three channels with the 0.299/0.587/0.114 luminance."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeError(f"greyscale expects a 3-channel image (3, H, W), got shape {x.shape}")
    lum = np.tensordot(_LUMA, x, axes=(0, 0))
    return np.repeat(lum[None], 3, axis=0)


@dataclass(frozen=True)
class PatternAssignment:
    """Which kernel was applied to each sample, and under which protocol."""

    mode: str
    kernel_ids: tuple[str, ...]


def make_pattern_kernels(height: int, width: int, radial_radius: float = 12.0,
                         random_keep_prob: float = 0.5, mask_seed: int = 7):
    """The three named kernels: identity plus the two frequency masks."""
    return {
        "original": None,
        "radial": radial_mask(height, width, radial_radius),
        "random": random_mask(height, width, random_keep_prob, mask_seed),
    }


def _check_kernel_id(kid: str, kernels) -> None:
    if kid not in KERNEL_IDS:
        raise ConfigError(f"unknown kernel id {kid!r}, expected one of {KERNEL_IDS}")
    if kid not in kernels:
        raise ConfigError(f"kernel {kid!r} missing from the supplied kernel table")


def _apply_assignment(dataset, ids: np.ndarray, kernels, mode: str):
    from .data import LabeledDataset  # local import, data depends on nothing here

    images = dataset.images.copy()
    for kid in np.unique(ids):
        mask = kernels[kid]
        if mask is None:
            continue
        sel = np.flatnonzero(ids == kid)
        images[sel] = _filter_batch(images[sel], mask)
    assignment = PatternAssignment(mode, tuple(str(k) for k in ids))
    return LabeledDataset(images, dataset.labels.copy(), num_classes=dataset.num_classes,
                          assignment=assignment)


def attach_pattern(dataset, mode: str, kernel_a: str, kernel_b: str, seed: int, kernels=None):
    """Attach one of two kernels to every sample.

    dependent: labels 0..4 get kernel_a, labels 5..9 get kernel_b.
    independent: a per-sample coin drawn from default_rng(seed XOR index).
    "original" means the identity transform. Returns a new dataset whose
    assignment records the protocol and the kernel id per sample.
    """
    if mode not in ("independent", "dependent"):
        raise ConfigError(f"mode must be independent or dependent, got {mode!r}")
    if kernel_a == kernel_b:
        raise ConfigError(f"attach_pattern needs two distinct kernels, got {kernel_a!r} twice")
    if kernels is None:
        h, w = dataset.images.shape[-2:]
        kernels = make_pattern_kernels(h, w)
    _check_kernel_id(kernel_a, kernels)
    _check_kernel_id(kernel_b, kernels)
    labels = dataset.labels
    n = len(labels)
    if mode == "dependent":
        ids = np.where(labels <= 4, kernel_a, kernel_b)
    else:
        coins = np.array([np.random.default_rng(seed ^ i).integers(0, 2) for i in range(n)])
        ids = np.where(coins == 0, kernel_a, kernel_b)
    return _apply_assignment(dataset, ids, kernels, mode)


def attach_uniform(dataset, kernel_id: str, kernels=None):
    """Attach one kernel to every sample (how a held-out test set is built)."""
    if kernels is None:
        h, w = dataset.images.shape[-2:]
        kernels = make_pattern_kernels(h, w)
    _check_kernel_id(kernel_id, kernels)
    ids = np.full(len(dataset.labels), kernel_id, dtype=object)
    return _apply_assignment(dataset, ids, kernels, "uniform")


def assignment_manifest(dataset) -> str:
    """Plain-text manifest: one 'index label kernel' line per sample."""
    a = dataset.assignment
    if a is None:
        raise InputError("dataset has no pattern assignment")
    lines = [f"mode {a.mode}"]
    for i, (label, kid) in enumerate(zip(dataset.labels, a.kernel_ids)):
        lines.append(f"{i} {int(label)} {kid}")
    return "\n".join(lines) + "\n"


def parse_assignment_manifest(text: str):
    """Inverse of assignment_manifest: returns (mode, labels, kernel_ids)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("mode "):
        raise InputError("assignment manifest must start with a 'mode' line")
    mode = lines[0].split(maxsplit=1)[1]
    labels, ids = [], []
    for ln in lines[1:]:
        idx, label, kid = ln.split()
        labels.append(int(label))
        ids.append(kid)
    return mode, np.array(labels, dtype=np.int64), tuple(ids)
