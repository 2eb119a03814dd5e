"""Empirical per-neuron standard deviations at the injection points.

A perturbation entry of magnitude 1 should move every neuron by one typical
step of its own activation distribution; the profile measured here supplies
that scale. Statistics come from unperturbed forward passes over standard
Gaussian latents, accumulated as sums and sums of squares so the reduction is
order independent for a fixed chunking.
"""

from __future__ import annotations

import numpy as np

from .network import Network, SigmaProfile, activations_at
from .tensor import Tensor

DEFAULT_SAMPLES = 256
DEFAULT_FLOOR = 1e-6
_CHUNK = 64


def calibrate(
    generator: Network,
    num_samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    floor: float = DEFAULT_FLOOR,
) -> SigmaProfile:
    """Population standard deviation of every injection-point neuron.

    Entries are clamped from below to ``floor`` so dead neurons cannot zero
    out their perturbations. Identical (generator, num_samples, seed) calls
    reproduce the profile bit for bit.
    """
    spec = generator.spec
    if spec.role != "generator":
        raise ValueError("calibrate requires a generator network")
    if num_samples < 2:
        raise ValueError(f"num_samples must be >= 2, got {num_samples}")
    if floor <= 0:
        raise ValueError(f"floor must be positive, got {floor}")
    boundaries = list(spec.injection_points)
    shapes = spec.injection_shapes()
    sums = {b: np.zeros(shapes[b], dtype=np.float64) for b in boundaries}
    sqs = {b: np.zeros(shapes[b], dtype=np.float64) for b in boundaries}

    rng = np.random.Generator(np.random.PCG64(int(seed)))
    remaining = int(num_samples)
    while remaining > 0:
        n = min(_CHUNK, remaining)
        z = rng.standard_normal((n, spec.latent_dim), dtype=np.float32)
        acts = activations_at(spec, generator.weights, Tensor(z), boundaries)
        for b in boundaries:
            a = acts[b]
            if not np.all(np.isfinite(a)):
                raise ValueError(
                    f"degenerate network: non-finite activations at boundary {b}"
                )
            sums[b] += a.sum(axis=0, dtype=np.float64)
            sqs[b] += np.square(a, dtype=np.float64).sum(axis=0)
        remaining -= n

    sigmas = {}
    for b in boundaries:
        mean = sums[b] / num_samples
        var = sqs[b] / num_samples - mean * mean
        std = np.sqrt(np.maximum(var, 0.0))
        sigmas[b] = np.maximum(std, floor).astype(np.float32)
    return SigmaProfile(sigmas, sample_count=num_samples, seed=seed)
