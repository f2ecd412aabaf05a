"""Datasets, convolution geometry and hyperparameters.

Inputs are stored as a ``(P, N0)`` float array and labels as a length-``P``
float vector. Binary tasks keep their 0/1 labels as floats because the loss is
quadratic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        x = np.array(self.inputs, dtype=float, copy=True)
        y = np.array(self.labels, dtype=float, copy=True).reshape(-1)
        if x.ndim != 2 or x.shape[1] < 1:
            raise ValueError(f"inputs must be a (P, N0) matrix with N0 >= 1, got shape {x.shape}")
        if y.shape[0] != x.shape[0]:
            raise ValueError(f"{y.shape[0]} labels for {x.shape[0]} patterns")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite entries")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    @property
    def n_patterns(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def __len__(self):
        return self.n_patterns

    def subset(self, index, name=None) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.inputs[index], self.labels[index], name or self.name)


@dataclass(frozen=True)
class ConvGeometry:
    """Placement of a convolutional mask over the input, periodic boundaries.

    For ``dimensionality == 2`` the input is a ``side x side`` image flattened
    row-major, ``n0 == side**2``, and ``mask``/``stride`` are linear sizes.
    """

    n0: int
    mask: int
    stride: int
    dimensionality: int = 1

    def __post_init__(self):
        if self.dimensionality not in (1, 2):
            raise ValueError("dimensionality must be 1 or 2")
        if self.n0 < 1 or self.mask < 1 or self.stride < 1:
            raise ValueError("n0, mask and stride must be positive")
        if self.dimensionality == 1:
            if self.mask > self.n0:
                raise ValueError(f"mask {self.mask} larger than input size {self.n0}")
            if self.mask % 2 == 0 and self.stride < self.mask:
                raise ValueError("overlapping 1d masks must have odd size")
            if self.n0 // self.stride < 1:
                raise ValueError("stride larger than input: no patches")
        else:
            side = self.side
            if side * side != self.n0:
                raise ValueError(f"2d geometry needs a square input, n0={self.n0}")
            if self.stride != self.mask or side % self.mask:
                raise ValueError("2d geometry supports non-overlapping tiles only (stride == mask, mask | side)")

    @property
    def side(self) -> int:
        return int(round(np.sqrt(self.n0)))

    @property
    def patch_count(self) -> int:
        if self.dimensionality == 1:
            return self.n0 // self.stride
        return (self.side // self.mask) ** 2

    @property
    def patch_size(self) -> int:
        return self.mask if self.dimensionality == 1 else self.mask ** 2

    def patch_indices(self) -> np.ndarray:
        return patch_indices(self)

    @classmethod
    def single_patch(cls, n0: int) -> "ConvGeometry":
        """Geometry whose only patch is the whole input (the FC reduction)."""
        return cls(n0=n0, mask=n0, stride=n0)


def patch_indices(geometry: ConvGeometry) -> np.ndarray:
    """Input coordinates read by each patch, shape ``(patch_count, patch_size)``.

    1d patch ``i`` reads ``(S*i + m) mod N0`` for ``m`` in
    ``-floor(M/2) .. -floor(M/2) + M - 1`` (the centred mask for odd ``M``).
    2d patches are the disjoint ``M x M`` tiles enumerated row-major, pixels
    inside a tile also row-major.
    """
    g = geometry
    if g.dimensionality == 1:
        starts = g.stride * np.arange(g.patch_count) - g.mask // 2
        return (starts[:, None] + np.arange(g.mask)[None, :]) % g.n0
    side, m = g.side, g.mask
    tiles = side // m
    rows = np.arange(m)[:, None] * side + np.arange(m)[None, :]
    offsets = (np.arange(tiles)[:, None] * m * side + np.arange(tiles)[None, :] * m).ravel()
    return offsets[:, None] + rows.ravel()[None, :]


@dataclass(frozen=True)
class Hyperparameters:
    lambda0: float = 1.0
    lambda1: float = 1.0
    beta: float = np.inf
    alpha: float = 1.0

    def __post_init__(self):
        if not self.lambda0 > 0 or not self.lambda1 > 0:
            raise ValueError("Gaussian priors lambda0, lambda1 must be positive")
        if not self.beta > 0:
            raise ValueError("beta must be positive (or inf for zero temperature)")
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")

    @property
    def temperature(self) -> float:
        return 0.0 if np.isinf(self.beta) else 1.0 / self.beta


def generate_linear_teacher(n_patterns: int, n0: int, seed: int, teacher=None,
                            name: str = "linear-teacher") -> Dataset:
    """Gaussian inputs labelled ``y = (1 + sign(t.x)) / 2``, ``t`` all-ones by default."""
    if n_patterns < 1 or n0 < 1:
        raise ValueError("need at least one pattern and one input coordinate")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_patterns, n0))
    t = np.ones(n0) if teacher is None else np.asarray(teacher, dtype=float)
    if t.shape != (n0,):
        raise ValueError(f"teacher must have shape ({n0},)")
    y = 0.5 * (1.0 + np.sign(x @ t))
    return Dataset(x, y, name)


def generate_patch_template(n_patterns: int, geometry: ConvGeometry, informative: int, amplitude: float,
                            offset: float, seed: int, name: str = "patch-template") -> Dataset:
    """Two-class synthetic images whose class signal sits in a few patches.

    Pixels are ``offset`` plus standard Gaussian noise. A random template of
    patch size is added with sign ``2y - 1`` to the first ``informative``
    patches of ``geometry``; labels ``y`` are 0/1 with equal probability. The
    offset plays the role of the positive mean of grayscale images.
    """
    if n_patterns < 1:
        raise ValueError("need at least one pattern")
    if not 0 <= informative <= geometry.patch_count:
        raise ValueError(f"informative patches must lie in [0, {geometry.patch_count}]")
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n_patterns).astype(float)
    x = rng.standard_normal((n_patterns, geometry.n0))
    template = rng.standard_normal(geometry.patch_size)
    idx = patch_indices(geometry)
    for k in range(informative):
        x[:, idx[k]] += amplitude * (2.0 * y - 1.0)[:, None] * template[None, :]
    return Dataset(x + offset, y, name)


def split(dataset: Dataset, n_train: int) -> tuple[Dataset, Dataset]:
    idx = np.arange(dataset.n_patterns)
    return (dataset.subset(idx[:n_train], dataset.name + "-train"),
            dataset.subset(idx[n_train:], dataset.name + "-test"))


def area_average_matrix(source: int, target: int) -> np.ndarray:
    """Row-stochastic ``(target, source)`` matrix of area-weighted 1d resampling.

    Output cell ``t`` covers ``[t*r, (t+1)*r)`` in source-pixel units,
    ``r = source / target``; each source pixel contributes its overlap length.
    """
    edges = np.arange(target + 1) * (source / target)
    lo, hi = edges[:-1, None], edges[1:, None]
    s = np.arange(source)[None, :]
    overlap = np.clip(np.minimum(hi, s + 1) - np.maximum(lo, s), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def coarse_grain(image: np.ndarray, target_side: int) -> np.ndarray:
    rows = area_average_matrix(image.shape[0], target_side)
    cols = area_average_matrix(image.shape[1], target_side)
    return rows @ image @ cols.T


def load_grayscale_images(path, target_side: int, labels_path, source_side: int | None = None,
                          channels: int = 1, label_map: dict | None = None,
                          name: str | None = None) -> Dataset:
    """Read comma-separated images (one per row) and their labels.

    Channelled rows are stored channel-major (all pixels of channel 0, then
    channel 1, ...). Images are averaged over channels, coarse-grained to
    ``target_side x target_side`` and flattened row-major. ``label_map``
    translates textual labels (e.g. ``{"cars": 0, "planes": 1}``).
    """
    path, labels_path = Path(path), Path(labels_path)
    try:
        with path.open(newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
        with labels_path.open() as fh:
            raw_labels = [line.strip() for line in fh if line.strip()]
    except OSError as exc:
        raise OSError(f"cannot read image data: {exc}") from exc
    if not rows:
        raise ValueError(f"{path}: no images")
    if len(raw_labels) != len(rows):
        raise ValueError(f"{len(rows)} images but {len(raw_labels)} labels")

    images = []
    for k, row in enumerate(rows):
        try:
            pix = np.array([float(c) for c in row])
        except ValueError as exc:
            raise ValueError(f"{path}:{k + 1}: non-numeric pixel ({exc})") from None
        side = source_side
        if side is None:
            side = int(round(np.sqrt(pix.size / channels)))
        expected = channels * side * side
        if pix.size != expected:
            raise ValueError(f"{path}:{k + 1}: row has {pix.size} values, expected {expected} "
                             f"({channels} x {side} x {side})")
        gray = pix.reshape(channels, side, side).mean(axis=0)
        images.append(coarse_grain(gray, target_side).ravel())

    labels = []
    for lab in raw_labels:
        if label_map is not None and lab in label_map:
            labels.append(float(label_map[lab]))
        else:
            try:
                labels.append(float(lab))
            except ValueError:
                raise ValueError(f"label {lab!r} is not numeric and not in label_map") from None
    return Dataset(np.array(images), np.array(labels), name or path.stem)


def save_dataset(dataset: Dataset, path, labels_path) -> None:
    np.savetxt(path, dataset.inputs, delimiter=",", fmt="%.17g")
    np.savetxt(labels_path, dataset.labels, fmt="%.17g")


def load_dataset(path, labels_path, name: str | None = None) -> Dataset:
    """Inverse of :func:`save_dataset` (no coarse-graining)."""
    x = np.loadtxt(path, delimiter=",", ndmin=2)
    y = np.loadtxt(labels_path, ndmin=1)
    return Dataset(x, y, name or Path(path).stem)
