"""Datasets, multiview sampling and augmentation protocols.

Images are (C, H, W) float64 arrays in [0, 1]. A view group holds the L
augmentations (or same-class draws) standing in for one source image; its
empirical conditional over the views is what couples the two hierarchy
levels. Augmentation is a pure function of (protocol seed, source index,
step, view index), so any batch can be re-materialized bit-exactly.

Three distortion dials, each in [0, 1]:

* crop    -- square crop of side uniform in [1 - c*(1 - 1/H), 1] of the
             image side (so strength 1 admits 1x1 crops), random position,
             bilinear corner-aligned resize back;
* jitter  -- brightness/contrast/saturation factors uniform in
             [1 - 0.8j, 1 + 0.8j] and a luma-preserving hue rotation by a
             fraction uniform in +-0.2j of the full circle;
* gray    -- full grayscale conversion with probability equal to the dial.

Strength 0 disables a distortion entirely (bit-exact identity).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DataError",
    "AugmentProtocol",
    "ViewGroup",
    "LabeledDataset",
    "sample_views",
    "sample_same_class",
    "view_conditional",
    "patch_conditional_support",
    "generate_synthetic",
    "load_cifar10",
    "save_cifar_binary",
    "resize_bilinear",
    "to_grayscale",
]

_LUMA = np.array([0.299, 0.587, 0.114])
_RGB_TO_IQ = np.array(
    [[0.595716, -0.274453, -0.321263], [0.211456, -0.522591, 0.311135]]
)
_YIQ_TO_RGB = np.array([[0.9563, 0.6210], [-0.2721, -0.6474], [-1.1070, 1.7046]])


class DataError(ValueError):
    pass


@dataclass
class AugmentProtocol:
    crop_strength: float = 0.0
    jitter_strength: float = 0.0
    gray_strength: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("crop_strength", "jitter_strength", "gray_strength"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise DataError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class ViewGroup:
    source_index: int
    views: np.ndarray  # (L, C, H, W)

    @property
    def count(self) -> int:
        return self.views.shape[0]


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int class ids
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError("images and labels disagree")
        if self.images.min(initial=0.0) < 0.0 or self.images.max(initial=0.0) > 1.0:
            raise DataError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError("label outside class range")

    def __len__(self) -> int:
        return self.images.shape[0]


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resample of a (C, H, W) image."""
    c, h, w = img.shape
    ys = np.array([(h - 1) / 2.0]) if out_h == 1 else np.linspace(0.0, h - 1.0, out_h)
    xs = np.array([(w - 1) / 2.0]) if out_w == 1 else np.linspace(0.0, w - 1.0, out_w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bottom = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bottom * wy


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Replicate the luma across the three channels."""
    if img.shape[0] != 3:
        raise DataError("grayscale conversion expects 3 channels")
    luma = np.tensordot(_LUMA, img, axes=(0, 0))
    return np.repeat(luma[None], 3, axis=0)


def _rotate_hue(img: np.ndarray, angle: float) -> np.ndarray:
    """Rotate the chroma plane while keeping the luma unchanged."""
    luma = np.tensordot(_LUMA, img, axes=(0, 0))
    iq = np.tensordot(_RGB_TO_IQ, img, axes=(1, 0))
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    rot = np.stack(
        [cos_a * iq[0] - sin_a * iq[1], sin_a * iq[0] + cos_a * iq[1]], axis=0
    )
    return luma[None] + np.tensordot(_YIQ_TO_RGB, rot, axes=(1, 0))


def _augment_once(x: np.ndarray, protocol: AugmentProtocol, rng: np.random.Generator) -> np.ndarray:
    """One view. Draws follow a fixed schedule (crop scale, crop offsets,
    three jitter factors, hue shift, gray coin) so the stream layout does
    not depend on which distortions happen to be active."""
    c, h, w = x.shape
    out = x
    # crop
    lo = 1.0 - protocol.crop_strength * (1.0 - 1.0 / h)
    frac = rng.uniform(lo, 1.0)
    side = int(np.clip(np.round(frac * h), 1, min(h, w)))
    i0 = int(rng.integers(0, h - side + 1))
    j0 = int(rng.integers(0, w - side + 1))
    if side != h or side != w or i0 or j0:
        out = resize_bilinear(out[:, i0 : i0 + side, j0 : j0 + side], h, w)
    # jitter
    j = protocol.jitter_strength
    brightness = rng.uniform(1.0 - 0.8 * j, 1.0 + 0.8 * j)
    contrast = rng.uniform(1.0 - 0.8 * j, 1.0 + 0.8 * j)
    saturation = rng.uniform(1.0 - 0.8 * j, 1.0 + 0.8 * j)
    hue_shift = rng.uniform(-0.2 * j, 0.2 * j)
    if brightness != 1.0:
        out = np.clip(out * brightness, 0.0, 1.0)
    if contrast != 1.0:
        anchor = np.tensordot(_LUMA, out, axes=(0, 0)).mean()
        out = np.clip((out - anchor) * contrast + anchor, 0.0, 1.0)
    if saturation != 1.0:
        luma = np.tensordot(_LUMA, out, axes=(0, 0))[None]
        out = np.clip(luma + (out - luma) * saturation, 0.0, 1.0)
    if hue_shift != 0.0:
        out = np.clip(_rotate_hue(out, 2.0 * np.pi * hue_shift), 0.0, 1.0)
    # grayscale
    coin = rng.random()
    if coin < protocol.gray_strength:
        out = to_grayscale(out)
    return out


def _view_rng(protocol: AugmentProtocol, source_index: int, step: int, view: int):
    seq = np.random.SeedSequence(entropy=protocol.seed, spawn_key=(source_index, step, view))
    return np.random.default_rng(seq)


def sample_views(
    x: np.ndarray,
    protocol: AugmentProtocol,
    views: int,
    source_index: int = 0,
    step: int = 0,
) -> ViewGroup:
    """L independent augmentations of one source image."""
    if views < 1:
        raise DataError("need at least one view")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DataError("source image must be (C, H, W)")
    stack = np.stack(
        [
            _augment_once(x, protocol, _view_rng(protocol, source_index, step, l))
            for l in range(views)
        ]
    )
    return ViewGroup(source_index=source_index, views=stack)


def sample_same_class(
    dataset: LabeledDataset,
    x_index: int,
    views: int,
    rng: np.random.Generator,
) -> ViewGroup:
    """View 1 is the image itself; the rest are same-class draws with
    replacement (the supervised stand-in for augmentation)."""
    if views < 1:
        raise DataError("need at least one view")
    label = dataset.labels[x_index]
    members = np.flatnonzero(dataset.labels == label)
    if members.size == 0:
        raise DataError(f"class {label} has no members")
    picks = [x_index] + [int(members[rng.integers(0, members.size)]) for _ in range(views - 1)]
    return ViewGroup(source_index=int(x_index), views=dataset.images[picks].copy())


def view_conditional(group: ViewGroup, candidate: np.ndarray) -> float:
    """Empirical conditional mass of a candidate image under the group:
    the fraction of views it exactly equals."""
    candidate = np.asarray(candidate, dtype=np.float64)
    if candidate.shape != group.views.shape[1:]:
        raise DataError("candidate dims differ from the views")
    hits = sum(1 for v in group.views if np.array_equal(v, candidate))
    return hits / group.count


def patch_conditional_support(
    parent_dims: tuple[int, int], child_dims: tuple[int, int]
) -> tuple[int, list[tuple[int, int]]]:
    """All subpatch offsets of a child window inside a parent patch; each is
    equally likely under the empirical patch conditional."""
    ph, pw = parent_dims
    ch, cw = child_dims
    if ch > ph or cw > pw:
        raise DataError(f"child {ch}x{cw} larger than parent {ph}x{pw}")
    offsets = [(di, dj) for di in range(ph - ch + 1) for dj in range(pw - cw + 1)]
    return len(offsets), offsets


# ---------------------------------------------------------------------------
# datasets

_GOLDEN = 0.6180339887498949


def _class_color(label: int, rng: np.random.Generator) -> np.ndarray:
    hue = (0.11 + label * _GOLDEN) % 1.0
    base = _hsv_to_rgb(hue, 0.85, 0.9)
    return np.clip(base + rng.uniform(-0.08, 0.08, 3), 0.0, 1.0)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array(
        [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    )


def _shape_mask(kind: int, variant: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    ii, jj = np.mgrid[0:h, 0:w]
    if kind == 0:  # bar
        t = max(2, h // 6)
        pos = int(rng.integers(0, h - t + 1))
        if variant == 0:
            mask[pos : pos + t, :] = True
        else:
            mask[:, pos : pos + t] = True
    elif kind == 1:  # disc / ring
        r = max(2, h // 5)
        ci = int(rng.integers(r, h - r))
        cj = int(rng.integers(r, w - r))
        d2 = (ii - ci) ** 2 + (jj - cj) ** 2
        mask = d2 <= r * r if variant == 0 else (d2 <= r * r) & (d2 >= (r - 2) ** 2)
    elif kind == 2:  # cross: plus or diagonal
        t = max(1, h // 8)
        ci = int(rng.integers(h // 4, 3 * h // 4))
        cj = int(rng.integers(w // 4, 3 * w // 4))
        if variant == 0:
            mask[np.abs(np.arange(h) - ci) < t, :] = True
            mask[:, np.abs(np.arange(w) - cj) < t] = True
        else:
            mask = (np.abs((ii - ci) - (jj - cj)) < t) | (np.abs((ii - ci) + (jj - cj)) < t)
    else:  # checkerboard
        tile = 2 if variant == 0 else 4
        phase = int(rng.integers(0, 2))
        mask = ((ii // tile + jj // tile + phase) % 2) == 0
    return mask


def generate_synthetic(
    n: int, classes: int, dims: tuple[int, int] = (16, 16), seed: int = 0
) -> LabeledDataset:
    """Procedurally rendered class-distinctive shapes on noisy backgrounds.

    Classes cycle through bars, discs, crosses and checkerboards (with a
    second variant beyond four classes); each image places its shape at a
    random position in a class-typical color. Labels are assigned round
    robin, so class counts differ by at most one, and the whole dataset is
    a pure function of the seed.
    """
    h, w = int(dims[0]), int(dims[1])
    if h < 8 or w < 8:
        raise DataError("dims must be at least 8x8")
    if not (1 <= classes <= 8):
        raise DataError("classes must lie in 1..8")
    images = np.zeros((n, 3, h, w))
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        label = i % classes
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        img = rng.uniform(0.0, 0.12, (3, h, w))
        color = _class_color(label, rng)
        mask = _shape_mask(label % 4, label // 4, h, w, rng)
        img[:, mask] = color[:, None]
        images[i] = img
        labels[i] = label
    return LabeledDataset(images=images, labels=labels, class_count=classes)


_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes


def load_cifar10(path) -> LabeledDataset:
    """Parse files in the CIFAR-10 binary layout.

    ``path`` may be one .bin file or a directory of them (read in sorted
    order). Each 3073-byte record is a label byte followed by the red,
    green and blue 32x32 planes, row-major; pixels are scaled to [0, 1].
    """
    import pathlib

    p = pathlib.Path(path)
    files = sorted(p.glob("*.bin")) if p.is_dir() else [p]
    if not files:
        raise DataError(f"no .bin files under {path}")
    raw = b"".join(f.read_bytes() for f in files)
    if not raw or len(raw) % _RECORD:
        raise DataError(f"byte length {len(raw)} is not a whole number of 3073-byte records")
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _RECORD)
    labels = buf[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise DataError(f"label byte {labels.max()} exceeds 9")
    images = buf[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledDataset(images=images, labels=labels, class_count=10)


def save_cifar_binary(dataset: LabeledDataset, path) -> None:
    """Write a dataset in the CIFAR-10 binary layout (requires 3x32x32
    images); pixels are rounded to the nearest uint8 step."""
    if dataset.images.shape[1:] != (3, 32, 32):
        raise DataError("the binary layout is fixed at 3x32x32 images")
    quantized = np.round(dataset.images * 255.0).astype(np.uint8)
    records = np.empty((len(dataset), _RECORD), dtype=np.uint8)
    records[:, 0] = dataset.labels.astype(np.uint8)
    records[:, 1:] = quantized.reshape(len(dataset), -1)
    with open(path, "wb") as fh:
        fh.write(records.tobytes())
