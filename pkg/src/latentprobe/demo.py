"""Deterministic demo networks for exercising the pipeline end to end.

The generator mirrors the DCGAN-flavoured MNIST layout: a dense stem, three
5x5 stride-2 transposed convolutions with batch norm, leaky ReLU and
(identity) dropout between them, a dense head, and a sigmoid into 28x28
pixels. Perturbations inject at the four declared boundaries: after the
dense stem and after each transposed convolution. Weights are random but
fully determined by the seed, so archives regenerate bit-identically.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .network import LayerSpec, NetworkSpec

Array = np.ndarray

GENERATOR_SEED = 71
CLASSIFIER_SEED = 72
LATENT_DIM = 128
CLASS_COUNT = 10


def _dense(rng, name, n_in, n_out, weights, gain=1.0):
    weights[f"{name}.weight"] = (
        rng.standard_normal((n_out, n_in)) * (gain / np.sqrt(n_in))
    ).astype(np.float32)
    weights[f"{name}.bias"] = (rng.standard_normal(n_out) * 0.05).astype(np.float32)
    return LayerSpec(
        "dense",
        params={"in_features": n_in, "out_features": n_out},
        weights={"weight": f"{name}.weight", "bias": f"{name}.bias"},
    )


def _conv_t(rng, name, c_in, c_out, weights, kernel=5, stride=2):
    fan = c_in * kernel * kernel
    weights[f"{name}.weight"] = (
        rng.standard_normal((c_in, c_out, kernel, kernel)) / np.sqrt(fan / (stride * stride))
    ).astype(np.float32)
    return LayerSpec(
        "conv_transpose2d",
        params={"in_channels": c_in, "out_channels": c_out, "kernel": kernel, "stride": stride},
        weights={"weight": f"{name}.weight"},
    )


def _conv(rng, name, c_in, c_out, weights, kernel=5, stride=2, padding=2):
    fan = c_in * kernel * kernel
    weights[f"{name}.weight"] = (
        rng.standard_normal((c_out, c_in, kernel, kernel)) / np.sqrt(fan)
    ).astype(np.float32)
    weights[f"{name}.bias"] = (rng.standard_normal(c_out) * 0.05).astype(np.float32)
    return LayerSpec(
        "conv2d",
        params={
            "in_channels": c_in,
            "out_channels": c_out,
            "kernel": kernel,
            "stride": stride,
            "padding": padding,
        },
        weights={"weight": f"{name}.weight", "bias": f"{name}.bias"},
    )


def _batchnorm(rng, name, c, weights):
    weights[f"{name}.mean"] = (rng.standard_normal(c) * 0.1).astype(np.float32)
    weights[f"{name}.var"] = (0.5 + rng.random(c)).astype(np.float32)
    weights[f"{name}.gamma"] = (0.5 + rng.random(c)).astype(np.float32)
    weights[f"{name}.beta"] = (rng.standard_normal(c) * 0.1).astype(np.float32)
    return LayerSpec(
        "batchnorm",
        params={"num_features": c, "eps": 1e-5},
        weights={
            "mean": f"{name}.mean",
            "var": f"{name}.var",
            "gamma": f"{name}.gamma",
            "beta": f"{name}.beta",
        },
    )


def _act(fn):
    return LayerSpec("activation", params={"fn": fn})


def demo_generator(seed: int = GENERATOR_SEED) -> tuple[NetworkSpec, dict[str, Array]]:
    rng = np.random.Generator(np.random.PCG64(seed))
    weights: dict[str, Array] = {}
    layers = [
        _dense(rng, "stem", LATENT_DIM, 64, weights),
        # injection boundary 1: (64,)
        _act("relu"),
        LayerSpec("reshape", params={"shape": [64, 1, 1]}),
        _conv_t(rng, "up1", 64, 32, weights),
        # injection boundary 4: (32, 5, 5)
        _batchnorm(rng, "bn1", 32, weights),
        _act("leaky_relu"),
        LayerSpec("dropout_identity", params={"p": 0.35}),
        _conv_t(rng, "up2", 32, 8, weights),
        # injection boundary 8: (8, 13, 13)
        _batchnorm(rng, "bn2", 8, weights),
        _act("leaky_relu"),
        LayerSpec("dropout_identity", params={"p": 0.35}),
        _conv_t(rng, "up3", 8, 4, weights),
        # injection boundary 12: (4, 29, 29)
        _batchnorm(rng, "bn3", 4, weights),
        _act("leaky_relu"),
        LayerSpec("dropout_identity", params={"p": 0.35}),
        LayerSpec("reshape", params={"shape": [4 * 29 * 29]}),
        # gain spreads the sigmoid inputs so images span most of [0, 1]
        _dense(rng, "head", 4 * 29 * 29, 784, weights, gain=3.0),
        _act("sigmoid"),
        LayerSpec("reshape", params={"shape": [1, 28, 28]}),
    ]
    spec = NetworkSpec(
        role="generator",
        input_shape=(LATENT_DIM,),
        layers=tuple(layers),
        injection_points=(1, 4, 8, 12),
        latent_dim=LATENT_DIM,
    )
    return spec, weights


def demo_classifier(seed: int = CLASSIFIER_SEED) -> tuple[NetworkSpec, dict[str, Array]]:
    rng = np.random.Generator(np.random.PCG64(seed))
    weights: dict[str, Array] = {}
    layers = [
        _conv(rng, "c1", 1, 8, weights),
        _act("leaky_relu"),
        _conv(rng, "c2", 8, 16, weights),
        _act("leaky_relu"),
        LayerSpec("reshape", params={"shape": [16 * 7 * 7]}),
        _dense(rng, "out", 16 * 7 * 7, CLASS_COUNT, weights),
    ]
    spec = NetworkSpec(
        role="classifier",
        input_shape=(1, 28, 28),
        layers=tuple(layers),
        injection_points=(),
        class_count=CLASS_COUNT,
    )
    return spec, weights


def write_demo_archives(out_dir: str | Path) -> tuple[Path, Path]:
    """Save the demo generator and classifier archives into ``out_dir``."""
    from .archive import save_archive

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen_path = out / "generator.lprobe"
    clf_path = out / "classifier.lprobe"
    gspec, gweights = demo_generator()
    cspec, cweights = demo_classifier()
    save_archive(gen_path, gspec, gweights)
    save_archive(clf_path, cspec, cweights)
    return gen_path, clf_path
