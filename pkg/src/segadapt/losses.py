"""Loss functions of the adversarial adaptation scheme.

Three families, each with a generator-side and a discriminator-side member:

* segmentation: masked cross-entropy between a score map and hard labels;
* global alignment: the discriminator classifies whole score maps by domain,
  the generator is rewarded for making source maps look target-like;
* semantic alignment: a 2c-way discriminator classifies class features by
  (class, domain); the generator is rewarded for moving source class-k
  features onto the target-class-k channel. The FC variant works on
  class-averaged feature vectors, the conv variant on every feature pixel.

Gradient routing is built into each function: adversarial losses freeze the
discriminator weights for their forward, discriminator losses consume
detached inputs. By default every sum is normalized to a mean over its
support (pixels or present classes); ``normalize=False`` restores raw sums,
which makes the loss weights resolution-dependent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Tensor, add, frozen, log_clamped, mul, scale, sum_all, take0
from .data import IGNORE_INDEX


def _zero_like_scalar(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def _check_labels(labels: np.ndarray, num_classes: int, spatial, what: str):
    labels = np.asarray(labels)
    if labels.shape != tuple(spatial):
        raise ValueError(f"{what}: labels {labels.shape} do not match map spatial dims {tuple(spatial)}")
    bad = (labels >= num_classes) & (labels != IGNORE_INDEX)
    if bad.any():
        raise ValueError(
            f"{what}: labels contain class ids >= {num_classes} that are not the ignore value"
        )
    return labels


def _check_domain(z) -> int:
    z = int(z)
    if z not in (0, 1):
        raise ValueError(f"domain flag must be 0 (source) or 1 (target), got {z}")
    return z


def _masked_nll(prob_map: Tensor, channel_map: np.ndarray, valid: np.ndarray, normalize: bool) -> Tensor:
    """-sum over valid pixels of log prob_map[channel_map[p], p], optionally a mean."""
    count = int(valid.sum())
    if count == 0:
        return _zero_like_scalar(prob_map.dtype)
    onehot = np.zeros(prob_map.shape, dtype=prob_map.dtype)
    ys, xs = np.nonzero(valid)
    onehot[channel_map[ys, xs], ys, xs] = 1.0
    total = sum_all(mul(log_clamped(prob_map), Tensor(onehot)))
    return scale(total, -1.0 / count if normalize else -1.0)


def segmentation_loss(score_map: Tensor, labels: np.ndarray, normalize: bool = True) -> Tensor:
    """Masked cross-entropy of a per-pixel class simplex against hard labels."""
    c = score_map.shape[0]
    labels = _check_labels(labels, c, score_map.shape[1:], "segmentation_loss")
    valid = labels != IGNORE_INDEX
    return _masked_nll(score_map, labels.astype(np.int64, copy=False), valid, normalize)


# ---------------------------------------------------------------------------
# global (score-map level) alignment
# ---------------------------------------------------------------------------

SOURCE_DOMAIN = 0
TARGET_DOMAIN = 1


def global_adversarial_loss(disc, score_map: Tensor, normalize: bool = True) -> Tensor:
    """Push a source score map toward the discriminator's target channel.

    The discriminator weights are held constant; gradients reach only the
    networks that produced ``score_map``.
    """
    with frozen(disc.parameters().values()):
        out = disc.forward(score_map)
    neg_log = scale(sum_all(log_clamped(take0(out, TARGET_DOMAIN))), -1.0)
    if normalize:
        neg_log = scale(neg_log, 1.0 / (out.shape[1] * out.shape[2]))
    return neg_log


def global_discriminator_loss(disc, score_map: Tensor, domain, normalize: bool = True) -> Tensor:
    """Train the discriminator to put ``score_map`` in its true domain channel.

    ``score_map`` is detached; gradients reach only the discriminator.
    """
    z = _check_domain(domain)
    out = disc.forward(score_map.detach())
    neg_log = scale(sum_all(log_clamped(take0(out, z))), -1.0)
    if normalize:
        neg_log = scale(neg_log, 1.0 / (out.shape[1] * out.shape[2]))
    return neg_log


# ---------------------------------------------------------------------------
# semantic (class level) alignment
# ---------------------------------------------------------------------------

@dataclass
class SemanticVectorSet:
    """Per-class feature averages; ``vectors[k]`` is meaningful iff ``present[k]``."""

    vectors: Tensor  # [c, n]
    present: np.ndarray  # bool [c]

    @property
    def present_classes(self):
        return np.nonzero(self.present)[0]


def class_average(features: Tensor, labels: np.ndarray, num_classes: int) -> SemanticVectorSet:
    """Average the feature map over each class's pixels (ignore excluded).

    Differentiable toward ``features``: class k spreads its incoming gradient
    as 1/|mask_k| over exactly the pixels labeled k.
    """
    n, h, w = features.shape
    labels = _check_labels(labels, num_classes, (h, w), "class_average")
    flat_labels = labels.reshape(-1)
    valid = flat_labels != IGNORE_INDEX
    # weights[k, p] = 1/|mask_k| on class-k pixels, 0 elsewhere
    weights = np.zeros((num_classes, h * w), dtype=features.dtype)
    idx = np.nonzero(valid)[0]
    counts = np.bincount(flat_labels[idx], minlength=num_classes).astype(features.dtype)
    present = counts > 0
    if idx.size:
        safe = np.where(counts > 0, counts, 1.0)
        weights[flat_labels[idx], idx] = 1.0
        weights /= safe[:, None]

    flat = features.data.reshape(n, h * w)
    vectors = weights @ flat.T  # [c, n]

    def vjp(g):
        return (g.T @ weights).reshape(n, h, w)

    out = autodiff._result("class_average", vectors, (features,), (vjp,))
    return SemanticVectorSet(vectors=out, present=present)


def _semantic_fc_nll(disc, vset: SemanticVectorSet, channel_offset: int, normalize: bool) -> Tensor:
    cls = vset.present_classes
    if cls.size == 0:
        return _zero_like_scalar(vset.vectors.dtype)
    total = None
    for k in cls:
        out = disc.forward(take0(vset.vectors, int(k)))
        term = scale(log_clamped(take0(out, int(k) + channel_offset)), -1.0)
        total = term if total is None else add(total, term)
    if normalize:
        total = scale(total, 1.0 / cls.size)
    return total


def semantic_adversarial_fc(disc, vset: SemanticVectorSet, normalize: bool = True) -> Tensor:
    """Push each present source class vector toward its target-class channel (k+c)."""
    with frozen(disc.parameters().values()):
        return _semantic_fc_nll(disc, vset, disc.num_classes, normalize)


def semantic_discriminator_fc(disc, vset: SemanticVectorSet, domain, normalize: bool = True) -> Tensor:
    """Train the FC discriminator to place class k of domain z on channel k + z*c."""
    z = _check_domain(domain)
    detached = SemanticVectorSet(vectors=vset.vectors.detach(), present=vset.present)
    return _semantic_fc_nll(disc, detached, z * disc.num_classes, normalize)


def semantic_adversarial_conv(disc, features: Tensor, labels: np.ndarray, normalize: bool = True) -> Tensor:
    """Per-pixel version: push each source pixel toward channel y(p) + c."""
    c = disc.num_classes
    labels = _check_labels(labels, c, features.shape[1:], "semantic_adversarial_conv")
    with frozen(disc.parameters().values()):
        out = disc.forward(features)
    valid = labels != IGNORE_INDEX
    channels = np.where(valid, labels.astype(np.int64) + c, 0)
    return _masked_nll(out, channels, valid, normalize)


def semantic_discriminator_conv(disc, features: Tensor, labels: np.ndarray, domain, normalize: bool = True) -> Tensor:
    """Train the conv discriminator to place pixel class k of domain z on channel k + z*c."""
    z = _check_domain(domain)
    c = disc.num_classes
    labels = _check_labels(labels, c, features.shape[1:], "semantic_discriminator_conv")
    out = disc.forward(features.detach())
    valid = labels != IGNORE_INDEX
    channels = np.where(valid, labels.astype(np.int64) + z * c, 0)
    return _masked_nll(out, channels, valid, normalize)
