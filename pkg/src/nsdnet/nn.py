"""Feedforward network core.

Dense layers, ReLU, softmax cross-entropy, inverted dropout, SGD with
momentum / L2 decay / annealed learning rates, a finite-difference gradient
checker, and a binary checkpoint format.

Conventions baked in here:

* 64-bit floats everywhere.
* Inverted dropout: kept activations are scaled by 1/(1-drop_prob) at train
  time so the eval path is an exact identity for every regularizer.
* ReLU subgradient at exactly 0 is 0.
* Weight init is zero-mean Gaussian scaled by sqrt(2/in_units); biases 0.

Checkpoint file layout (little-endian):

    magic   4 bytes  b"NSDW"
    version u32      currently 1
    count   u32      number of dense layers
    per layer:
        in_units  u32
        out_units u32
        W         in_units*out_units float64, row-major
        b         out_units float64
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .ndcore import ShapeMismatchError

CHECKPOINT_MAGIC = b"NSDW"
CHECKPOINT_VERSION = 1


class LayerStateError(RuntimeError):
    """backward() called before forward(), or a missing mask/cache."""


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


@dataclass
class SgdConfig:
    """SGD hyperparameters; anneal multiplies the learning rate once per epoch."""

    learning_rate: float
    momentum: float = 0.9
    l2_decay: float = 0.0
    anneal: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.learning_rate) or self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be finite and > 0, "
                             f"got {self.learning_rate}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must be in [0,1], got {self.momentum}")
        if not np.isfinite(self.l2_decay) or self.l2_decay < 0:
            raise ValueError(f"l2_decay must be finite and >= 0, "
                             f"got {self.l2_decay}")
        if self.anneal is not None and not 0.0 < self.anneal <= 1.0:
            raise ValueError(f"anneal must be in (0,1], got {self.anneal}")


class DenseLayer:
    """Affine layer y = x @ W + b with momentum buffers for SGD."""

    def __init__(self, in_units, out_units, rng=None, weight_scale=None):
        self.in_units = in_units
        self.out_units = out_units
        if weight_scale is None:
            weight_scale = np.sqrt(2.0 / in_units)
        if rng is None:
            self.W = np.zeros((in_units, out_units))
        else:
            self.W = rng.normals((in_units, out_units)) * weight_scale
        self.b = np.zeros(out_units)
        self.grad_W = np.zeros_like(self.W)
        self.grad_b = np.zeros_like(self.b)
        self.vel_W = np.zeros_like(self.W)
        self.vel_b = np.zeros_like(self.b)
        self._x = None

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_units:
            raise ShapeMismatchError(
                f"dense expects (*, {self.in_units}), got {x.shape}")
        self._x = x
        return x @ self.W + self.b

    def backward(self, dy):
        if self._x is None:
            raise LayerStateError("dense backward before forward")
        self.grad_W = self._x.T @ dy
        self.grad_b = dy.sum(axis=0)
        return dy @ self.W.T

    def __repr__(self):
        return f"DenseLayer({self.in_units}->{self.out_units})"


class ReluLayer:
    def __init__(self):
        self._x = None

    def forward(self, x):
        self._x = x
        return np.maximum(0.0, x)

    def backward(self, dy):
        if self._x is None:
            raise LayerStateError("relu backward before forward")
        return dy * (self._x > 0)

    def __repr__(self):
        return "ReluLayer()"


class StandardDropoutLayer:
    """Classic per-unit Bernoulli dropout, inverted-scaling convention.

    In train mode each entry is kept with probability 1-drop_prob and scaled
    by 1/(1-drop_prob); in eval mode the layer is an exact identity.  Setting
    ``frozen`` reuses the last drawn mask, which the gradient checker needs.
    """

    def __init__(self, drop_prob, rng):
        if not 0.0 <= drop_prob < 1.0:
            raise ValueError(f"drop_prob must be in [0,1), got {drop_prob}")
        self.drop_prob = drop_prob
        self.rng = rng
        self.mode = "train"
        self.frozen = False
        self.last_mask = None

    def forward(self, x):
        if self.mode != "train" or self.drop_prob == 0.0:
            self.last_mask = None
            return x
        if not (self.frozen and self.last_mask is not None
                and self.last_mask.shape == x.shape):
            keep = self.rng.uniforms(x.shape) >= self.drop_prob
            self.last_mask = keep / (1.0 - self.drop_prob)
        return x * self.last_mask

    def backward(self, dy):
        if self.last_mask is None:
            return dy
        return dy * self.last_mask

    def __repr__(self):
        return f"StandardDropoutLayer(p={self.drop_prob})"


class Network:
    """Ordered layer stack trained with softmax cross-entropy.

    A network instance is single-threaded during train/eval: layers cache
    their forward inputs for the following backward pass.
    """

    def __init__(self, layers):
        self.layers = list(layers)

    def set_train(self):
        for layer in self.layers:
            if hasattr(layer, "mode"):
                layer.mode = "train"

    def set_eval(self):
        for layer in self.layers:
            if hasattr(layer, "mode"):
                layer.mode = "eval"

    def forward(self, x, labels=None):
        """Run the stack; labels route per-row class masks where needed."""
        if labels is not None:
            for layer in self.layers:
                if hasattr(layer, "row_classes"):
                    layer.row_classes = labels
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dlogits):
        d = dlogits
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def dense_layers(self):
        return [l for l in self.layers if isinstance(l, DenseLayer)]


def softmax_xent(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    Row max is subtracted before exponentiation, so huge logits cannot
    overflow.  Returns (loss, dlogits) with dlogits already divided by the
    batch size.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must be in [0,{c}), got range "
                         f"[{labels.min()},{labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = -np.mean(np.log(probs[rows, labels]))
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def sgd_step(network, config, lr=None):
    """One momentum-SGD update over all dense layers.

    vel <- momentum*vel - lr*(grad + l2*param);  param <- param + vel.
    Raises on non-finite gradients, naming the offending layer.
    """
    if lr is None:
        lr = config.learning_rate
    for i, layer in enumerate(network.layers):
        if not isinstance(layer, DenseLayer):
            continue
        for grad, vel, param, tag in (
                (layer.grad_W, layer.vel_W, layer.W, "W"),
                (layer.grad_b, layer.vel_b, layer.b, "b")):
            if not np.all(np.isfinite(grad)):
                raise FloatingPointError(
                    f"non-finite gradient for {tag} in layer {i} ({layer!r})")
            vel *= config.momentum
            vel -= lr * (grad + config.l2_decay * param)
            param += vel


def freeze_masks(network, frozen=True):
    """Freeze/unfreeze every stochastic or deterministic mask in the stack."""
    for layer in network.layers:
        if hasattr(layer, "frozen"):
            layer.frozen = frozen


def grad_check(network, x, labels, epsilon=1e-5, samples_per_array=40):
    """Worst relative error between analytic and central-difference gradients.

    The network must be in train mode; masks are frozen for the duration so
    both gradient routes see the same thinned network.  A deterministic,
    evenly spaced sample of entries is checked in each parameter array.  The
    relative-error denominator is floored at 1e-3 so finite-difference noise
    on near-zero gradients cannot dominate the result.
    """
    freeze_masks(network, True)
    try:
        logits = network.forward(x, labels)
        _, dlogits = softmax_xent(logits, labels)
        network.backward(dlogits)
        analytic = [(l, l.grad_W.copy(), l.grad_b.copy())
                    for l in network.dense_layers()]

        def loss_at():
            out = network.forward(x, labels)
            return softmax_xent(out, labels)[0]

        worst = 0.0
        for layer, grad_W, grad_b in analytic:
            for param, grad in ((layer.W, grad_W), (layer.b, grad_b)):
                flat = param.reshape(-1)
                n = flat.size
                count = min(n, samples_per_array)
                idx = np.unique(np.linspace(0, n - 1, count).astype(np.intp))
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + epsilon
                    lp = loss_at()
                    flat[i] = orig - epsilon
                    lm = loss_at()
                    flat[i] = orig
                    numeric = (lp - lm) / (2.0 * epsilon)
                    a = grad.reshape(-1)[i]
                    rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
                    worst = max(worst, rel)
        return worst
    finally:
        freeze_masks(network, False)


def save_checkpoint(network, path):
    """Write dense-layer parameters in the documented binary layout."""
    dense = network.dense_layers()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(dense)))
        for layer in dense:
            f.write(struct.pack("<II", layer.in_units, layer.out_units))
            f.write(np.ascontiguousarray(layer.W, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns a list of (W, b) pairs."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 12
    params = []
    for _ in range(count):
        if offset + 8 > len(raw):
            raise CheckpointError("truncated checkpoint header")
        in_units, out_units = struct.unpack_from("<II", raw, offset)
        offset += 8
        w_bytes = in_units * out_units * 8
        b_bytes = out_units * 8
        if offset + w_bytes + b_bytes > len(raw):
            raise CheckpointError("truncated checkpoint parameter data")
        W = np.frombuffer(raw, dtype="<f8", count=in_units * out_units,
                          offset=offset).reshape(in_units, out_units).copy()
        offset += w_bytes
        b = np.frombuffer(raw, dtype="<f8", count=out_units,
                          offset=offset).copy()
        offset += b_bytes
        params.append((W, b))
    if offset != len(raw):
        raise CheckpointError("trailing bytes after checkpoint data")
    return params


def restore_params(network, params):
    """Load (W, b) pairs into the network's dense layers, checking shapes."""
    dense = network.dense_layers()
    if len(dense) != len(params):
        raise CheckpointError(
            f"checkpoint has {len(params)} dense layers, network has "
            f"{len(dense)}")
    for layer, (W, b) in zip(dense, params):
        if W.shape != layer.W.shape or b.shape != layer.b.shape:
            raise CheckpointError(
                f"shape mismatch restoring {layer!r}: checkpoint {W.shape}")
        layer.W = W.copy()
        layer.b = b.copy()
