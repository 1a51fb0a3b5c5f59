"""Feedforward networks with per-class deterministic dropout masks.

Subpackages:

* ``ndcore``    -- dense matrix kernel and the seeded PRNG
* ``nn``        -- layers, loss, SGD, gradient checking, checkpoints
* ``nsdropout`` -- per-class deterministic mask construction and application
* ``datasets``  -- IDX / CIFAR-10 binary loaders, splits, subsampling, ZCA
* ``harness``   -- experiment runner (training loops, sweeps, metrics files)
"""

__version__ = "0.1.0"
