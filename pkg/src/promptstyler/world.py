"""Synthetic image-side features living in the text encoder's output space.

A sample of class m is ``normalize(anchor_m + style_sigma * d_style +
gap_magnitude * d_gap + noise)`` where the anchor is the class's unit
content feature, ``d_style`` is one of a few unseen unit style directions
(assigned round-robin), ``d_gap`` is a single global offset direction and
the noise is i.i.d. Gaussian per coordinate.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from .encoder import content_features
from .sphere import l2_normalize_rows


@dataclass(frozen=True)
class WorldSpec:
    per_class_count: int = 200
    style_sigma: float = 0.6
    gap_magnitude: float = 0.4
    noise_sigma: float = 0.1
    num_unseen_styles: int = 4
    seed: int = 0
    N: int = None  # optional; checked against the class list when given

    def validate(self):
        for name in ("style_sigma", "gap_magnitude", "noise_sigma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.per_class_count < 1 or self.num_unseen_styles < 1:
            raise ValueError("per_class_count and num_unseen_styles must be positive")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class World:
    anchors: np.ndarray  # (N, C) unit content features
    style_directions: np.ndarray  # (S, C) unit
    gap_direction: np.ndarray  # (C,) unit
    class_names: tuple


@dataclass(frozen=True)
class ImageSamples:
    """Column-wise batch of image samples; labels are 1-based."""

    features: np.ndarray
    labels: np.ndarray
    style_ids: np.ndarray

    def __len__(self):
        return len(self.labels)


def _unit_directions(rng, count, dim):
    return l2_normalize_rows(rng.normal(size=(count, dim)))


def generate_world(encoder, class_names, spec):
    spec = spec.validate()
    if spec.N is not None and spec.N != len(class_names):
        raise ValueError(f"world N={spec.N} but {len(class_names)} class names given")
    anchors = content_features(encoder, class_names)
    rng = np.random.default_rng(spec.seed)
    dim = anchors.shape[1]
    styles = _unit_directions(rng, spec.num_unseen_styles, dim)
    gap = _unit_directions(rng, 1, dim)[0]
    return World(anchors, styles, gap, tuple(class_names))


def sample_image_features(world, spec, seed=None):
    """``per_class_count`` samples per class, class-major, styles round-robin."""
    spec = spec.validate()
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    n, dim = world.anchors.shape
    p = spec.per_class_count
    labels = np.repeat(np.arange(1, n + 1), p)
    style_ids = np.tile(np.arange(p) % spec.num_unseen_styles, n)
    noise = rng.normal(0.0, 1.0, size=(n * p, dim)) * spec.noise_sigma
    raw = (
        world.anchors[labels - 1]
        + spec.style_sigma * world.style_directions[style_ids]
        + spec.gap_magnitude * world.gap_direction
        + noise
    )
    return ImageSamples(l2_normalize_rows(raw), labels, style_ids)


def write_samples(samples, path):
    """Plain-text dump: one sample per line, ``label style_id f_1 ... f_C``.

    Labels are 1-based, feature values use 17 significant digits so they
    parse back to the same float64.
    """
    with open(path, "w") as fh:
        fh.write(f"# label style_id then {samples.features.shape[1]} feature values\n")
        for label, sid, feat in zip(samples.labels, samples.style_ids, samples.features):
            values = " ".join(f"{v:.17g}" for v in feat)
            fh.write(f"{int(label)} {int(sid)} {values}\n")


def read_samples(path):
    rows = np.loadtxt(path, comments="#", ndmin=2)
    return ImageSamples(rows[:, 2:].copy(), rows[:, 0].astype(np.int64), rows[:, 1].astype(np.int64))
