"""Domain datasets, the colorized digit domain, watermarks and augmentations.

Every sample tensor is float32 ``N×C×H×W`` scaled to [-1, 1].

Catalog (``load_domain``):

``mnist``
    Full MNIST when the IDX files or ``mnist.npz`` are in the cache directory,
    otherwise the 5 000-image MNIST subset shipped inside ``mlxtend``
    (4 000 train / 1 000 test, stratified).
``usps``
    USPS from ``usps.bz2`` / ``usps.t.bz2`` (libsvm format) or ``usps.h5``.
``optdigits``
    The 8×8 UCI handwritten digits bundled with scikit-learn, upsampled and
    framed like MNIST (20×20 glyph, 4 px margin).
``mnist-color``
    MNIST with random colored backgrounds, see :func:`make_colorized_variant`.

The cache directory is ``$NTMASK_DATA_DIR`` (default ``~/.cache/ntmask``).
"""

from __future__ import annotations

import bz2
import gzip
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

SPLITS = ("train", "test")

# --------------------------------------------------------------------------
# Access hooks (used to prove training paths never touch real data)
# --------------------------------------------------------------------------

_access_hooks: list[Callable[[str, str, str], None]] = []


def add_access_hook(fn: Callable[[str, str, str], None]) -> None:
    """Register ``fn(event, domain, split)``; events are load/samples/labels."""
    _access_hooks.append(fn)


def remove_access_hook(fn) -> None:
    if fn in _access_hooks:
        _access_hooks.remove(fn)


def _notify(event: str, domain: str, split: str) -> None:
    for fn in list(_access_hooks):
        fn(event, domain, split)


class DomainDataset:
    """Immutable labeled or unlabeled image set tagged with its domain."""

    def __init__(self, samples: torch.Tensor, labels: torch.Tensor | None, domain: str,
                 split: str = "train", num_classes: int = 10, origin: str = ""):
        if samples.dim() != 4:
            raise ValueError(f"{domain}: samples must be N×C×H×W, got {tuple(samples.shape)}")
        if labels is not None:
            if len(labels) != len(samples):
                raise ValueError(f"{domain}: {len(samples)} samples but {len(labels)} labels")
            if len(labels) and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
                raise ValueError(f"{domain}: labels outside [0, {num_classes})")
        self._samples = samples
        self._labels = labels
        self.domain = domain
        self.split = split
        self.num_classes = num_classes
        self.origin = origin

    @property
    def samples(self) -> torch.Tensor:
        _notify("samples", self.domain, self.split)
        return self._samples

    @property
    def labels(self) -> torch.Tensor | None:
        _notify("labels", self.domain, self.split)
        return self._labels

    @property
    def has_labels(self) -> bool:
        return self._labels is not None

    @property
    def sample_shape(self) -> tuple:
        return tuple(self._samples.shape[1:])

    def __len__(self) -> int:
        return len(self._samples)

    def __repr__(self) -> str:
        return (f"DomainDataset({self.domain!r}, split={self.split!r}, n={len(self)}, "
                f"shape={self.sample_shape}, labeled={self.has_labels})")

    def replace(self, **kw) -> "DomainDataset":
        args = dict(samples=self._samples, labels=self._labels, domain=self.domain,
                    split=self.split, num_classes=self.num_classes, origin=self.origin)
        args.update(kw)
        return DomainDataset(**args)

    def unlabeled(self) -> "DomainDataset":
        return self.replace(labels=None)

    def take(self, n: int | None) -> "DomainDataset":
        if n is None or n >= len(self):
            return self
        lab = None if self._labels is None else self._labels[:n]
        return self.replace(samples=self._samples[:n], labels=lab)


# --------------------------------------------------------------------------
# Loaders
# --------------------------------------------------------------------------

def cache_dir() -> Path:
    return Path(os.environ.get("NTMASK_DATA_DIR", Path.home() / ".cache" / "ntmask"))


def _to_unit_range(x: np.ndarray, vmax: float) -> torch.Tensor:
    t = torch.from_numpy(np.asarray(x, dtype=np.float32) / float(vmax))
    return t * 2.0 - 1.0


def _stratified_split(y: np.ndarray, test_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    train, test = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        n_test = int(round(len(idx) * test_fraction))
        test.append(idx[len(idx) - n_test:])
        train.append(idx[: len(idx) - n_test])
    # fixed shuffle so that any prefix (``limit``) covers every class
    rng = np.random.default_rng(0)
    return rng.permutation(np.concatenate(train)), rng.permutation(np.concatenate(test))


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    ndim = raw[3]
    dims = [int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    return np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def _find(root: Path, stem: str) -> Path | None:
    for cand in (root / stem, root / (stem + ".gz"), root / "raw" / stem, root / "raw" / (stem + ".gz")):
        if cand.exists():
            return cand
    return None


def _load_mnist(split: str) -> tuple[torch.Tensor, torch.Tensor, str]:
    root = cache_dir() / "mnist"
    prefix = "train" if split == "train" else "t10k"
    img = _find(root, f"{prefix}-images-idx3-ubyte")
    lab = _find(root, f"{prefix}-labels-idx1-ubyte")
    if img is not None and lab is not None:
        x, y = _read_idx(img), _read_idx(lab)
        return _to_unit_range(x[:, None], 255.0), torch.from_numpy(y.astype(np.int64)), "mnist-full"
    npz = root / "mnist.npz"
    if npz.exists():
        with np.load(npz) as f:
            x, y = f[f"x_{split}"], f[f"y_{split}"]
        return _to_unit_range(x[:, None], 255.0), torch.from_numpy(y.astype(np.int64)), "mnist-full"
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - mlxtend is a declared dependency
        raise FileNotFoundError(
            f"MNIST not found under {root}. Place train/t10k IDX files or mnist.npz there "
            "(e.g. from https://ossci-datasets.s3.amazonaws.com/mnist/) or install mlxtend.") from exc
    log.info("full MNIST not in %s; using the 5k MNIST subset bundled with mlxtend", root)
    x, y = mnist_data()
    tr, te = _stratified_split(y, 0.2)
    idx = tr if split == "train" else te
    x = x[idx].reshape(-1, 1, 28, 28)
    return _to_unit_range(x, 255.0), torch.from_numpy(y[idx].astype(np.int64)), "mnist-mlxtend-5k"


def _load_usps(split: str) -> tuple[torch.Tensor, torch.Tensor, str]:
    root = cache_dir() / "usps"
    name = "usps.bz2" if split == "train" else "usps.t.bz2"
    path = root / name
    if path.exists():
        with bz2.open(path, "rt") as fh:
            rows = [line.split() for line in fh if line.strip()]
        y = np.array([int(float(r[0])) - 1 for r in rows], dtype=np.int64)
        x = np.array([[float(tok.split(":")[1]) for tok in r[1:]] for r in rows], dtype=np.float32)
        return torch.from_numpy(x.reshape(-1, 1, 16, 16)).clamp(-1, 1), torch.from_numpy(y), "usps"
    h5 = root / "usps.h5"
    if h5.exists():
        import h5py
        with h5py.File(h5, "r") as f:
            grp = f[split]
            x = grp["data"][:].astype(np.float32).reshape(-1, 1, 16, 16)
            y = grp["target"][:].astype(np.int64)
        return torch.from_numpy(x * 2 - 1), torch.from_numpy(y), "usps"
    raise FileNotFoundError(
        f"USPS not found. Download usps.bz2 and usps.t.bz2 from "
        f"https://www.csie.ntu.edu.tw/~cjlin/libsvmtools/datasets/multiclass.html#usps "
        f"into {root} (or set NTMASK_DATA_DIR).")


def _load_optdigits(split: str) -> tuple[torch.Tensor, torch.Tensor, str]:
    from sklearn.datasets import load_digits
    d = load_digits()
    tr, te = _stratified_split(d.target, 0.2)
    idx = tr if split == "train" else te
    x = torch.from_numpy(d.images[idx].astype(np.float32) / 16.0)[:, None]
    x = F.interpolate(x, size=(20, 20), mode="bilinear", align_corners=False).clamp(0, 1)
    x = F.pad(x, (4, 4, 4, 4))
    return x * 2 - 1, torch.from_numpy(d.target[idx].astype(np.int64)), "sklearn-optdigits"


COLOR_SEEDS = {"train": 1234, "test": 4321}

_LOADERS: dict[str, Callable[[str], tuple]] = {
    "mnist": _load_mnist,
    "usps": _load_usps,
    "optdigits": _load_optdigits,
}


def known_domains() -> list[str]:
    return sorted([*_LOADERS, "mnist-color"])


def load_domain(name: str, split: str = "train", limit: int | None = None) -> DomainDataset:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    if name == "mnist-color":
        base = load_domain("mnist", split, limit)
        return make_colorized_variant(base, COLOR_SEEDS[split])
    if name not in _LOADERS:
        raise KeyError(f"unknown domain {name!r}; known domains: {', '.join(known_domains())}")
    _notify("load", name, split)
    x, y, origin = _LOADERS[name](split)
    d = DomainDataset(x.float(), y, name, split, origin=origin)
    return d.take(limit)


def is_available(name: str) -> bool:
    try:
        load_domain(name, "test", limit=1)
    except FileNotFoundError:
        return False
    return True


def conform(d: DomainDataset, shape: tuple) -> DomainDataset:
    """Resize/replicate channels so samples match a network input shape."""
    c, h, w = shape
    x = d._samples
    if x.shape[1] != c:
        if x.shape[1] == 1:
            x = x.expand(-1, c, -1, -1)
        elif c == 1:
            x = x.mean(dim=1, keepdim=True)
        else:
            raise ValueError(f"{d.domain}: cannot map {x.shape[1]} channels to {c}")
    if tuple(x.shape[2:]) != (h, w):
        x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False, antialias=True).clamp(-1, 1)
    return d.replace(samples=x.contiguous())


# --------------------------------------------------------------------------
# Colorized variant
# --------------------------------------------------------------------------

def make_colorized_variant(d: DomainDataset, seed: int) -> DomainDataset:
    """Paint grayscale digits over random colored textures.

    Each sample gets a smooth random RGB background (intensity <= 0.6) and a
    random stroke color (each channel in [0.5, 1]); the digit intensity is the
    blending weight between them.
    """
    if d.sample_shape[0] != 1:
        raise ValueError(f"{d.domain}: colorization expects grayscale input, got {d.sample_shape[0]} channels")
    g = torch.Generator().manual_seed(int(seed))
    n, _, h, w = d._samples.shape
    coarse = torch.rand(n, 3, 4, 4, generator=g)
    tint = torch.rand(n, 3, 1, 1, generator=g)
    texture = F.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=False)
    bg = 0.6 * (0.5 * texture + 0.5 * tint)
    fg = 0.5 + 0.5 * torch.rand(n, 3, 1, 1, generator=g)
    digit = (d._samples + 1) / 2
    out = (bg * (1 - digit) + fg * digit) * 2 - 1
    return d.replace(samples=out.clamp(-1, 1).contiguous(), domain=f"{d.domain}-color",
                     origin=f"{d.origin}+color{seed}")


# --------------------------------------------------------------------------
# Watermark
# --------------------------------------------------------------------------

ANCHORS = ("bottom-right", "bottom-left", "top-right", "top-left")


@dataclass
class WatermarkSpec:
    size: int = 8
    blend: float = 1.0
    anchor: str = "bottom-right"
    kind: str = "checkerboard"
    seed: int = 0

    def validate(self) -> "WatermarkSpec":
        if not 0 < self.blend <= 1:
            raise ValueError("watermark.blend: must satisfy 0 < blend <= 1")
        if self.anchor not in ANCHORS:
            raise ValueError(f"watermark.anchor: must be one of {ANCHORS}")
        if self.kind not in ("checkerboard", "random"):
            raise ValueError("watermark.kind: must be 'checkerboard' or 'random'")
        if self.size < 1:
            raise ValueError("watermark.size: must satisfy size >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def pattern(self, channels: int) -> torch.Tensor:
        s = self.size
        if self.kind == "checkerboard":
            ii, jj = torch.meshgrid(torch.arange(s), torch.arange(s), indexing="ij")
            p = ((ii + jj) % 2).float() * 2 - 1
        else:
            g = torch.Generator().manual_seed(self.seed)
            p = torch.randint(0, 2, (s, s), generator=g).float() * 2 - 1
        return p.expand(channels, s, s)


def apply_watermark(d: DomainDataset, w: WatermarkSpec) -> DomainDataset:
    w.validate()
    c, h, wd = d.sample_shape
    s = w.size
    if s > h or s > wd:
        raise ValueError(f"watermark of size {s} does not fit samples of size {h}×{wd}")
    top = h - s if w.anchor.startswith("bottom") else 0
    left = wd - s if w.anchor.endswith("right") else 0
    x = d._samples.clone()
    patch = x[:, :, top:top + s, left:left + s]
    x[:, :, top:top + s, left:left + s] = (1 - w.blend) * patch + w.blend * w.pattern(c)
    return d.replace(samples=x, domain=f"{d.domain}+wm", origin=f"{d.origin}+wm")


# --------------------------------------------------------------------------
# Augmentations
# --------------------------------------------------------------------------

def _affine(x: torch.Tensor, angle: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    cos, sin = torch.cos(angle), torch.sin(angle)
    theta = torch.zeros(len(x), 2, 3, dtype=x.dtype)
    theta[:, 0, 0], theta[:, 0, 1], theta[:, 0, 2] = cos, -sin, shift[:, 0]
    theta[:, 1, 0], theta[:, 1, 1], theta[:, 1, 2] = sin, cos, shift[:, 1]
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)


def _identity(x, g):
    return x


def _rotate(x, g):
    angle = (torch.rand(len(x), generator=g) * 2 - 1) * math.radians(10)
    return _affine(x, angle, torch.zeros(len(x), 2))


def _translate(x, g):
    px = torch.randint(-2, 3, (len(x), 2), generator=g).float()
    # affine_grid uses normalized coordinates: 2 px == 4 / width
    shift = px * 2.0 / torch.tensor([x.shape[3], x.shape[2]], dtype=torch.float32)
    return _affine(x, torch.zeros(len(x)), shift)


def _brightness(x, g):
    delta = (torch.rand(len(x), 1, 1, 1, generator=g) * 2 - 1) * 0.2 * 2  # ±0.2 of the [0,1] range
    return (x + delta).clamp(-1, 1)


def _noise(x, g):
    return (x + 0.05 * torch.randn(x.shape, generator=g)).clamp(-1, 1)


TRANSFORMS = {"identity": _identity, "rotate": _rotate, "translate": _translate,
              "brightness": _brightness, "noise": _noise}
DEFAULT_ORDER = ("identity", "rotate", "translate", "brightness", "noise")


class AugmentationSet:
    """Ordered, seed-deterministic, label-preserving transforms (slot 0 is identity)."""

    def __init__(self, n_aug: int = 4, names: tuple[str, ...] | None = None):
        if n_aug < 1:
            raise ValueError("n_aug must be >= 1")
        names = names or tuple(DEFAULT_ORDER[i % len(DEFAULT_ORDER)] for i in range(n_aug))
        unknown = [n for n in names if n not in TRANSFORMS]
        if unknown:
            raise ValueError(f"unknown transforms {unknown}; available: {sorted(TRANSFORMS)}")
        self.names = tuple(names)

    def __len__(self) -> int:
        return len(self.names)

    def apply(self, x: torch.Tensor, i: int, seed: int = 0) -> torch.Tensor:
        if not 0 <= i < len(self):
            raise IndexError(f"augmentation index {i} out of range for {len(self)} transforms")
        g = torch.Generator().manual_seed(int(seed) * 1009 + i)
        out = TRANSFORMS[self.names[i]](x, g)
        return out.contiguous()


def augment(x: torch.Tensor, a: AugmentationSet, i: int, seed: int = 0) -> torch.Tensor:
    return a.apply(x, i, seed)
