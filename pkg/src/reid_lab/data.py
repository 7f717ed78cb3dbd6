"""Samples and splits, the confusable-identity generator, Market-style loading and augmentation."""
from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .numerics import RngStream

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
SPLITS = ("train", "query", "gallery")
DATASET_FILE_MAGIC = "# reid-lab dataset v1"


@dataclass
class Sample:
    """One observation: a feature vector or an ``H x W x C`` image in [0, 255]."""

    payload: np.ndarray
    identity: int
    camera: int = 0

    def __post_init__(self):
        self.payload = np.asarray(self.payload, dtype=np.float64)
        if self.payload.size == 0:
            raise ValueError("sample payload is empty")
        if self.identity < 0 or self.camera < 0:
            raise ValueError("identity and camera must be non-negative")
        if self.is_image and (self.payload.min() < 0 or self.payload.max() > 255):
            raise ValueError("image values must lie within [0, 255]")

    @property
    def is_image(self) -> bool:
        return self.payload.ndim == 3


@dataclass
class Dataset:
    train: list[Sample] = field(default_factory=list)
    query: list[Sample] = field(default_factory=list)
    gallery: list[Sample] = field(default_factory=list)

    def split(self, name: str) -> list[Sample]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def num_identities(self, name: str) -> int:
        return len({s.identity for s in self.split(name)})

    def labels(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        samples = self.split(name)
        ids = np.array([s.identity for s in samples], dtype=np.int64)
        cams = np.array([s.camera for s in samples], dtype=np.int64)
        return ids, cams

    def validate(self) -> None:
        if not self.train:
            raise ValueError("train split is empty")
        if not self.query or not self.gallery:
            raise ValueError("query and gallery splits must be non-empty")
        shapes = {s.payload.shape for s in self.train + self.query + self.gallery}
        if len(shapes) > 1 and not all(len(s) == 3 for s in shapes):
            raise ValueError(f"inconsistent payload shapes: {sorted(shapes)}")
        if not {s.identity for s in self.query} & {s.identity for s in self.gallery}:
            raise ValueError("query and gallery share no identity; evaluation would be vacuous")


@dataclass
class SyntheticSpec:
    """Gaussian identity clusters where a few pairs of identities nearly coincide."""

    num_identities: int = 64
    samples_per_identity: int = 12
    feature_dim: int = 32
    confusable_pairs: int = 8
    sigma_within: float = 0.35
    delta_pair: float = 1.0
    delta_far: float = 4.0
    num_cameras: int = 4
    disjoint_train_test: bool = True
    queries_per_identity: int = 1

    def validate(self) -> None:
        if self.num_identities < 2 or self.samples_per_identity < 3:
            raise ValueError("need >= 2 identities and >= 3 samples per identity")
        if self.feature_dim < 1 or self.num_cameras < 1:
            raise ValueError("feature_dim and num_cameras must be positive")
        if self.confusable_pairs < 0 or 2 * self.confusable_pairs > self.num_identities:
            raise ValueError(
                f"{self.confusable_pairs} confusable pairs need {2 * self.confusable_pairs} "
                f"distinct identities, only {self.num_identities} available"
            )
        if not self.sigma_within >= 0:
            raise ValueError("sigma_within must be >= 0")
        if not 0 < self.delta_pair < self.delta_far:
            raise ValueError("need 0 < delta_pair < delta_far")
        n_gallery = self.samples_per_identity // 2
        if not 1 <= self.queries_per_identity <= self.samples_per_identity - n_gallery:
            raise ValueError("queries_per_identity leaves no room for the gallery half")
        if self.disjoint_train_test and self.num_identities < 4:
            raise ValueError("identity-disjoint splits need at least 4 identities")


def _place_centers(spec: SyntheticSpec, rng: RngStream, max_tries: int = 10_000) -> np.ndarray:
    """Confusable pairs are exactly ``delta_pair`` apart; every other pair >= ``delta_far``."""
    d = spec.feature_dim
    # typical pairwise distance ~ 2 * delta_far, so rejection rarely triggers
    scale = 2.0 * spec.delta_far / math.sqrt(2.0 * d)
    centers: list[np.ndarray] = []

    def far_from_all(c: np.ndarray, skip: Optional[int] = None) -> bool:
        return all(np.linalg.norm(c - o) >= spec.delta_far for k, o in enumerate(centers) if k != skip)

    def draw_far() -> np.ndarray:
        for _ in range(max_tries):
            c = scale * rng.normal(d)
            if far_from_all(c):
                return c
        raise RuntimeError("could not place identity centers; increase feature_dim or lower delta_far")

    for identity in range(spec.num_identities):
        is_partner = identity % 2 == 1 and identity < 2 * spec.confusable_pairs
        if not is_partner:
            centers.append(draw_far())
            continue
        base = centers[identity - 1]
        for _ in range(max_tries):
            direction = rng.normal(d)
            norm = np.linalg.norm(direction)
            if norm == 0:
                continue
            c = base + spec.delta_pair * direction / norm
            if far_from_all(c, skip=identity - 1):
                centers.append(c)
                break
        else:
            raise RuntimeError("could not place a confusable partner")
    return np.stack(centers)


def confusable_partner(identity: int, spec: SyntheticSpec) -> Optional[int]:
    if identity >= 2 * spec.confusable_pairs:
        return None
    return identity ^ 1


def is_train_identity(identity: int) -> bool:
    # whole confusable pairs stay on one side of the split
    return (identity // 2) % 2 == 0


def generate_confusable(spec: SyntheticSpec, seed: int) -> Dataset:
    """Sample a dataset of Gaussian identity clusters.

    Identities ``(0, 1), (2, 3), ...`` up to ``2 * confusable_pairs`` form the
    confusable pairs. Cameras cycle through ``0..num_cameras-1`` per identity.
    Within an evaluated identity the first ``queries_per_identity`` samples are
    queries and the next half go to the gallery. With identity-disjoint splits,
    alternating blocks of two identities go wholly to training; otherwise the
    leftover samples of every identity are the training set.
    """
    spec.validate()
    root = RngStream(seed).substream("synthetic")
    centers = _place_centers(spec, root.substream("centers"))
    noise_rng = root.substream("noise")
    n = spec.samples_per_identity
    n_gallery = n // 2
    nq = spec.queries_per_identity
    ds = Dataset()
    for identity in range(spec.num_identities):
        cams = [(identity + j) % spec.num_cameras for j in range(n)]
        x = centers[identity] + spec.sigma_within * noise_rng.normal((n, spec.feature_dim))
        samples = [Sample(x[j], identity, cams[j]) for j in range(n)]
        if spec.disjoint_train_test and is_train_identity(identity):
            ds.train.extend(samples)
            continue
        ds.query.extend(samples[:nq])
        ds.gallery.extend(samples[nq:nq + n_gallery])
        if not spec.disjoint_train_test:
            ds.train.extend(samples[nq + n_gallery:])
    return ds


def identity_centers(spec: SyntheticSpec, seed: int) -> np.ndarray:
    """The cluster centers :func:`generate_confusable` uses for ``(spec, seed)``."""
    spec.validate()
    return _place_centers(spec, RngStream(seed).substream("synthetic").substream("centers"))


# --- columnar text export -------------------------------------------------------------


def write_dataset_file(dataset: Dataset, path) -> None:
    """One sample per line: ``identity,camera,split,f0,f1,...`` (vector payloads only)."""
    rows = []
    dim = None
    for split in SPLITS:
        for s in dataset.split(split):
            if s.payload.ndim != 1:
                raise ValueError("only vector payloads can be written to a dataset file")
            dim = s.payload.size if dim is None else dim
            if s.payload.size != dim:
                raise ValueError("inconsistent feature dimension")
            rows.append([str(s.identity), str(s.camera), split] + [repr(float(v)) for v in s.payload])
    with open(path, "w", newline="") as fh:
        fh.write(DATASET_FILE_MAGIC + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["identity", "camera", "split"] + [f"f{i}" for i in range(dim or 0)])
        writer.writerows(rows)


def read_dataset_file(path) -> Dataset:
    ds = Dataset()
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != DATASET_FILE_MAGIC:
            raise ValueError(f"{path}: not a reid-lab dataset file")
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["identity", "camera", "split"]:
            raise ValueError(f"{path}: bad header {header[:3]}")
        for lineno, row in enumerate(reader, start=3):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            split = row[2]
            if split not in SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
            payload = np.array([float(v) for v in row[3:]])
            ds.split(split).append(Sample(payload, int(row[0]), int(row[1])))
    return ds


# --- Market-1501 style directories ----------------------------------------------------

_MARKET_NAME = re.compile(r"^(-?\d+)_c(\d+)")
MARKET_SUBDIRS = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp"}


def parse_market_name(name: str) -> Optional[tuple[int, int]]:
    """``0001_c1s1_000151_01.jpg`` -> ``(1, 1)``; junk (id -1) and bad names -> None."""
    m = _MARKET_NAME.match(name)
    if m is None:
        return None
    identity, camera = int(m.group(1)), int(m.group(2))
    if identity < 0:
        return None
    return identity, camera


def load_market_dir(path, image_size: Optional[tuple[int, int]] = None) -> Dataset:
    from PIL import Image

    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    ds = Dataset()
    for split, sub in MARKET_SUBDIRS.items():
        folder = root / sub
        if not folder.is_dir():
            raise FileNotFoundError(f"missing split directory: {folder}")
        for file in sorted(folder.iterdir()):
            if file.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            m = _MARKET_NAME.match(file.name)
            if m is None:
                log.warning("skipping unparseable file name %s", file)
                continue
            parsed = parse_market_name(file.name)
            if parsed is None:
                continue
            with Image.open(file) as im:
                img = np.asarray(im.convert("RGB"), dtype=np.float64)
            if image_size is not None:
                img = resize(img, image_size)
            ds.split(split).append(Sample(img, *parsed))
        if not ds.split(split):
            raise ValueError(f"split {split!r} ({folder}) contains no usable images")
    return ds


# --- image operations -----------------------------------------------------------------


def _as_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.size == 0:
        raise ValueError(f"expected a non-empty H x W x C image, got shape {np.shape(image)}")
    return img


def _corner_coords(n_out: int, n_in: int) -> np.ndarray:
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resize(image, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with corners anchored (output corners sample input corners)."""
    img = _as_image(image)
    h_out, w_out = int(size[0]), int(size[1])
    if h_out <= 0 or w_out <= 0:
        raise ValueError(f"target size must be positive, got {size}")
    h_in, w_in = img.shape[:2]
    if (h_out, w_out) == (h_in, w_in):
        return img.copy()
    ys, xs = _corner_coords(h_out, h_in), _corner_coords(w_out, w_in)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h_in - 1)
    x1 = np.minimum(x0 + 1, w_in - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    out = top * (1 - wy) + bottom * wy
    return np.clip(out, 0.0, 255.0)


def random_flip(image, p: float, rng: RngStream) -> np.ndarray:
    if not 0 <= p <= 1:
        raise ValueError("flip probability must lie in [0, 1]")
    img = _as_image(image)
    if rng.random() < p:
        return img[:, ::-1, :].copy()
    return img.copy()


def random_erase(
    image,
    probability: float,
    rng: RngStream,
    area_range: tuple[float, float] = (0.02, 0.4),
    aspect_range: tuple[float, float] = (0.3, 1 / 0.3),
    max_attempts: int = 10,
) -> np.ndarray:
    """Fill one random rectangle with uniform noise in [0, 255].

    ``aspect_range`` bounds height/width. Rectangles that do not fit, or whose
    rounded area leaves ``area_range``, are redrawn; after ``max_attempts``
    failures the image is returned unchanged.
    """
    if not 0 <= probability <= 1:
        raise ValueError("erase probability must lie in [0, 1]")
    lo, hi = area_range
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"bad area range {area_range}")
    if not 0 < aspect_range[0] <= aspect_range[1]:
        raise ValueError(f"bad aspect range {aspect_range}")
    img = _as_image(image).copy()
    if rng.random() >= probability:
        return img
    H, W, C = img.shape
    total = H * W
    for _ in range(max_attempts):
        area = rng.uniform(lo, hi) * total
        aspect = rng.uniform(*aspect_range)
        h = int(round(math.sqrt(area * aspect)))
        w = int(round(math.sqrt(area / aspect)))
        if not (0 < h <= H and 0 < w <= W):
            continue
        if not lo <= h * w / total <= hi:
            continue
        top = int(rng.integers(0, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        img[top:top + h, left:left + w, :] = rng.uniform(0.0, 255.0, size=(h, w, C))
        return img
    return img


def normalize(image, mean: Sequence[float] = IMAGENET_MEAN, std: Sequence[float] = IMAGENET_STD) -> np.ndarray:
    """Scale to [0, 1], standardise per channel and flatten channel-major (C, H, W)."""
    img = _as_image(image)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != (img.shape[2],) or std.shape != (img.shape[2],):
        raise ValueError("mean/std need one entry per channel")
    if np.any(std <= 0):
        raise ValueError("std entries must be positive")
    out = (img / 255.0 - mean) / std
    return out.transpose(2, 0, 1).reshape(-1)


def denormalize(vector, shape: tuple[int, int, int], mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    H, W, C = shape
    chw = np.asarray(vector, dtype=np.float64).reshape(C, H, W)
    mean = np.asarray(mean, dtype=np.float64)[:, None, None]
    std = np.asarray(std, dtype=np.float64)[:, None, None]
    return ((chw * std + mean) * 255.0).transpose(1, 2, 0)


@dataclass
class AugmentConfig:
    image_size: tuple[int, int] = (64, 32)
    flip_probability: float = 0.5
    erase_probability: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.4)
    erase_aspect: tuple[float, float] = (0.3, 1 / 0.3)
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD


def prepare_inputs(samples: Sequence[Sample], aug: AugmentConfig, rng: Optional[RngStream] = None) -> np.ndarray:
    """Stack payloads into a design matrix.

    Images are resized and normalised; erase and flip run only when ``rng`` is
    given, which the trainer does for training batches alone.
    """
    if not samples:
        raise ValueError("no samples")
    if not samples[0].is_image:
        return np.stack([s.payload for s in samples])
    rows = []
    for i, s in enumerate(samples):
        img = resize(s.payload, aug.image_size)
        if rng is not None:
            sub = rng.substream(i)
            img = random_erase(img, aug.erase_probability, sub, aug.erase_area, aug.erase_aspect)
            img = random_flip(img, aug.flip_probability, sub)
        rows.append(normalize(img, aug.mean, aug.std))
    return np.stack(rows)
