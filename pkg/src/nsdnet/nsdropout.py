"""Per-class deterministic dropout masks.

The rule: group a training batch by class, average each hidden unit's
activation per class, do the same over a held-out (unseen-validation)
reference set, and per class drop the units whose training mean deviates
most from the reference mean.  With I units and drop fraction p, exactly
round-half-up(I*p) units are zeroed per class mask.  Masks are binary, one
row per class, persist unchanged between refreshes, and are NOT rescaled:
the same thinned network runs at training and at evaluation time.

Deviation is the absolute difference of the two class means ("farthest from
the reference average"); a signed variant (largest positive deviation) is
available behind a flag for ablation.  Ties are broken toward the lower
unit index.  A class absent from either side keeps an all-ones mask.

Evaluation needs a class identity per row to pick a mask.  Supported modes:

* ``labeled``      -- the row's true label picks the mask (label-dependent).
* ``predicted``    -- argmax of an unmasked first pass picks the mask.
* ``union``        -- one mask keeping units kept in ANY class mask.
* ``intersection`` -- one mask keeping units kept in ALL class masks.
* ``off``          -- masking disabled.

Mask trace records serialize a mask row as a hex string of its kept-bitmap:
bit i of the little-endian bit string is 1 iff unit i is kept.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import ndcore
from .nn import StandardDropoutLayer

log = logging.getLogger(__name__)

EVAL_MODES = ("labeled", "predicted", "union", "intersection", "off")


class MaskError(RuntimeError):
    """Mask machinery used out of order (no labels, no forward, ...)."""


def drop_count(units, p):
    """Number of units to drop: round-half-up of units * p."""
    return int(math.floor(units * p + 0.5))


def class_group(labels, class_count):
    """Row indices per class, in stable (original) order.

    Absent classes yield empty lists; the concatenation of all groups is a
    permutation of the batch equal to a stable argsort by label.
    """
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise ValueError(
            f"labels must be in [0,{class_count}), got "
            f"[{labels.min()},{labels.max()}]")
    return [np.flatnonzero(labels == c) for c in range(class_count)]


@dataclass
class ClassMeans:
    """Per-class, per-unit mean activations with per-class sample counts."""

    means: np.ndarray   # (C, I)
    counts: np.ndarray  # (C,), 0 marks an absent class

    @property
    def present(self):
        return self.counts > 0

    @property
    def class_count(self):
        return self.means.shape[0]

    @property
    def units(self):
        return self.means.shape[1]


def class_means(z, groups):
    """Mean activation table from a batch and its class grouping.

    Absent classes are flagged via counts == 0 and carry a zero row that no
    caller may read (build_masks treats those classes as unmaskable).
    """
    z = np.asarray(z, dtype=np.float64)
    c = len(groups)
    means = np.zeros((c, z.shape[1]))
    counts = np.zeros(c, dtype=np.int64)
    for ci, idx in enumerate(groups):
        counts[ci] = len(idx)
        if len(idx):
            means[ci] = ndcore.row_mean(z, idx)
    return ClassMeans(means=means, counts=counts)


class MaskSet:
    """Binary keep/drop rows, one per class; 1 keeps a unit, 0 drops it."""

    def __init__(self, masks, p, drop_n):
        self.masks = np.asarray(masks, dtype=np.float64)
        self.p = p
        self.drop_count = drop_n

    @classmethod
    def all_ones(cls, class_count, units, p=0.0):
        return cls(np.ones((class_count, units)), p, 0)

    @property
    def class_count(self):
        return self.masks.shape[0]

    @property
    def units(self):
        return self.masks.shape[1]

    def union_row(self):
        """Single mask keeping units kept in ANY class mask."""
        return self.masks.max(axis=0)

    def intersection_row(self):
        """Single mask keeping units kept in ALL class masks."""
        return self.masks.min(axis=0)


def build_masks(train_means, val_means, p, signed=False):
    """Per-class masks dropping the units farthest from the reference mean.

    For each class, deviation d[i] = |train[i] - val[i]| (or the signed
    difference when ``signed``), and the round-half-up(I*p) largest-d units
    are zeroed, ties toward the lower index.  Classes absent from either
    table keep an all-ones row.  Pure function: identical inputs give
    identical masks on every run.
    """
    if train_means.means.shape != val_means.means.shape:
        raise ndcore.ShapeMismatchError(
            f"mean tables differ: {train_means.means.shape} vs "
            f"{val_means.means.shape}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0,1], got {p}")
    c, units = train_means.means.shape
    drop_n = drop_count(units, p)
    masks = np.ones((c, units))
    usable = train_means.present & val_means.present
    skipped = np.flatnonzero(~usable)
    if skipped.size:
        log.warning("classes %s absent from a mean table; keeping all-ones "
                    "masks for them", skipped.tolist())
    if drop_n == 0:
        return MaskSet(masks, p, drop_n)
    for ci in range(c):
        if not usable[ci]:
            continue
        dev = train_means.means[ci] - val_means.means[ci]
        if not signed:
            dev = np.abs(dev)
        dropped = ndcore.top_k_indices(dev, drop_n)
        masks[ci, dropped] = 0.0
    return MaskSet(masks, p, drop_n)


def mask_churn(current, previous):
    """Per-class count of units whose kept/dropped state changed, plus mean."""
    if current.masks.shape != previous.masks.shape:
        raise ndcore.ShapeMismatchError(
            f"mask sets differ: {current.masks.shape} vs "
            f"{previous.masks.shape}")
    changed = (current.masks != previous.masks).sum(axis=1).astype(np.int64)
    return changed, float(changed.mean())


def encode_mask_hex(mask_row):
    """Kept-bitmap of one mask row as hex (bit i of the LE bitstring = unit i)."""
    bits = np.asarray(mask_row) != 0
    return np.packbits(bits, bitorder="little").tobytes().hex()


def decode_mask_hex(text, units):
    """Inverse of encode_mask_hex."""
    raw = np.frombuffer(bytes.fromhex(text), dtype=np.uint8)
    bits = np.unpackbits(raw, bitorder="little")[:units]
    return bits.astype(np.float64)


class NsDropoutLayer:
    """Applies the per-class deterministic masks inside a network.

    ``apply_mode`` selects how rows are matched to masks for the next
    forward pass (see module docstring); training always uses ``labeled``
    with the batch's true labels in ``row_classes``.  The mask set persists
    unchanged between refreshes.  Backward multiplies by the identical
    per-row masks with no rescaling.
    """

    def __init__(self, units, class_count, p, eval_mode="labeled",
                 signed=False):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p must be in [0,1], got {p}")
        if eval_mode not in EVAL_MODES:
            raise ValueError(f"eval_mode must be one of {EVAL_MODES}")
        dn = drop_count(units, p)
        if p > 0 and dn >= units:
            raise ValueError(
                f"p={p} would drop all {units} units "
                f"(round-half-up({units}*{p}) = {dn})")
        self.units = units
        self.class_count = class_count
        self.p = p
        self.eval_mode = eval_mode
        self.signed = signed
        self.mask_set = MaskSet.all_ones(class_count, units, p)
        self.previous_mask_set = None
        self.row_classes = None
        self.apply_mode = "labeled"
        self._row_masks = None

    def set_masks(self, mask_set):
        """Install a freshly built MaskSet, remembering the previous one."""
        if mask_set.masks.shape != (self.class_count, self.units):
            raise ndcore.ShapeMismatchError(
                f"mask set {mask_set.masks.shape} does not fit layer "
                f"({self.class_count}, {self.units})")
        self.previous_mask_set = self.mask_set
        self.mask_set = mask_set

    def refresh(self, train_reference, train_labels, val_reference,
                val_labels):
        """Rebuild masks from reference activations; returns churn vs previous.

        Both reference activation matrices must come from mask-free passes
        so the deviation measures the data, not the previous mask.
        """
        t_means = class_means(
            train_reference, class_group(train_labels, self.class_count))
        v_means = class_means(
            val_reference, class_group(val_labels, self.class_count))
        self.set_masks(
            build_masks(t_means, v_means, self.p, signed=self.signed))
        changed, mean = mask_churn(self.mask_set, self.previous_mask_set)
        return changed, mean

    def forward(self, y):
        mode = self.apply_mode
        if mode == "off" or self.p == 0.0:
            self._row_masks = None
            return y
        if mode == "labeled":
            if self.row_classes is None:
                raise MaskError("labeled masking needs row_classes")
            classes = np.asarray(self.row_classes, dtype=np.intp)
            if classes.shape[0] != y.shape[0]:
                raise MaskError(
                    f"{classes.shape[0]} row classes for {y.shape[0]} rows")
            self._row_masks = self.mask_set.masks[classes]
        elif mode == "union":
            self._row_masks = np.broadcast_to(
                self.mask_set.union_row(), y.shape)
        elif mode == "intersection":
            self._row_masks = np.broadcast_to(
                self.mask_set.intersection_row(), y.shape)
        else:
            raise MaskError(f"unknown apply mode {mode!r}")
        return y * self._row_masks

    def backward(self, dy):
        if self.apply_mode == "off" or self.p == 0.0:
            return dy
        if self._row_masks is None:
            raise MaskError("mask backward before forward")
        return dy * self._row_masks

    def __repr__(self):
        return (f"NsDropoutLayer(units={self.units}, "
                f"classes={self.class_count}, p={self.p})")


def ns_layers(network):
    return [l for l in network.layers if isinstance(l, NsDropoutLayer)]


def resolve_eval_classes(mode, labels=None, logits=None):
    """Per-row class indices used to pick masks at evaluation time.

    ``labeled`` requires labels; ``predicted`` requires the logits of an
    unmasked first pass; the remaining modes need no per-row class and
    return None.
    """
    if mode == "labeled":
        if labels is None:
            raise MaskError("labeled evaluation requires labels")
        return np.asarray(labels, dtype=np.intp)
    if mode == "predicted":
        if logits is None:
            raise MaskError("predicted evaluation requires first-pass logits")
        return np.asarray(logits).argmax(axis=1)
    if mode in ("union", "intersection", "off"):
        return None
    raise ValueError(f"unknown eval mode {mode!r}")


def forward_with_mode(network, x, mode, labels=None):
    """Evaluation forward pass under one mask-selection mode.

    Runs with standard dropout off.  ``predicted`` does two passes: an
    unmasked pass to get argmax classes, then a masked pass using them.
    """
    network.set_eval()
    layers = ns_layers(network)
    if not layers or mode == "off":
        for l in layers:
            l.apply_mode = "off"
        return network.forward(x)
    if mode == "predicted":
        for l in layers:
            l.apply_mode = "off"
        first = network.forward(x)
        classes = resolve_eval_classes("predicted", logits=first)
        for l in layers:
            l.apply_mode = "labeled"
            l.row_classes = classes
        return network.forward(x)
    if mode == "labeled":
        classes = resolve_eval_classes("labeled", labels=labels)
        for l in layers:
            l.apply_mode = "labeled"
            l.row_classes = classes
        return network.forward(x)
    if mode in ("union", "intersection"):
        for l in layers:
            l.apply_mode = mode
        return network.forward(x)
    raise ValueError(f"unknown eval mode {mode!r}")


def capture_reference(network, x):
    """Mask-free forward pass capturing the input of every mask layer.

    Standard dropout and per-class masks are both skipped, so the captured
    activations depend only on the weights; returns {layer index: matrix}.
    """
    captured = {}
    h = x
    for i, layer in enumerate(network.layers):
        if isinstance(layer, NsDropoutLayer):
            captured[i] = h
            continue
        if isinstance(layer, StandardDropoutLayer):
            continue
        h = layer.forward(h)
    return captured
