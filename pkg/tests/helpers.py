"""Shared test oracles: finite differences, float64 reference ops, toy nets.

The gradient oracle is central finite differences evaluated through an
independent float64 re-implementation of each operation (scipy correlation
for convolutions, plain numpy elsewhere), so the probe never inherits the
engine's float32 rounding or its algorithms.
"""

from __future__ import annotations

import numpy as np
from scipy import signal

from latentprobe import Tensor, backward
from latentprobe import tensor as T
from latentprobe.network import LayerSpec, NetworkSpec

# Tolerance policy for all gradient checks: central differences with
# h = 1e-3, relative tolerance 1e-3, absolute floor 1e-5, and at least 95%
# of up to 100 sampled coordinates in agreement.
FD_H = 1e-3
FD_REL = 1e-3
FD_ABS = 1e-5
FD_MIN_PASS = 0.95
FD_COORDS = 100


# ---------------------------------------------------------------------------
# Float64 reference operations


def ref_dense(x, w, b):
    return x @ w.T + b


def ref_conv2d(x, k, stride, padding):
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    n, ci, _, _ = xp.shape
    co = k.shape[0]
    rows = []
    for b in range(n):
        chans = []
        for o in range(co):
            acc = None
            for c in range(ci):
                r = signal.correlate2d(xp[b, c], k[o, c].astype(np.float64), mode="valid")
                acc = r if acc is None else acc + r
            chans.append(acc[::sh, ::sw])
        rows.append(np.stack(chans))
    return np.stack(rows)


def ref_conv_transpose2d(x, k, stride, padding):
    sh, sw = stride
    ph, pw = padding
    n, co, h, w = x.shape
    _, ci, kh, kw = k.shape
    H = (h - 1) * sh + kh
    W = (w - 1) * sw + kw
    out = np.zeros((n, ci, H, W), dtype=np.float64)
    k64 = k.astype(np.float64)
    x64 = x.astype(np.float64)
    for a in range(h):
        for b in range(w):
            out[:, :, a * sh : a * sh + kh, b * sw : b * sw + kw] += np.einsum(
                "no,ocij->ncij", x64[:, :, a, b], k64
            )
    return out[:, :, ph : H - ph, pw : W - pw]


def ref_activation(kind, x):
    x = x.astype(np.float64)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        return np.where(x >= 0, x, 0.2 * x)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if kind == "tanh":
        return np.tanh(x)
    raise ValueError(kind)


def ref_batchnorm(x, mean, var, gamma, beta, eps):
    view = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    x = x.astype(np.float64)
    return gamma.reshape(view) * (x - mean.reshape(view)) / np.sqrt(
        var.reshape(view) + eps
    ) + beta.reshape(view)


def ref_upsample_nearest(x, f):
    return np.repeat(np.repeat(x.astype(np.float64), f, axis=2), f, axis=3)


# ---------------------------------------------------------------------------
# Finite-difference checking


def central_difference(fn, arrays, wrt, flat_index, h=FD_H):
    plus = [a.copy() for a in arrays]
    minus = [a.copy() for a in arrays]
    plus[wrt] = plus[wrt].astype(np.float64)
    minus[wrt] = minus[wrt].astype(np.float64)
    plus[wrt].flat[flat_index] += h
    minus[wrt].flat[flat_index] -= h
    return (float(fn(plus)) - float(fn(minus))) / (2.0 * h)


def fd_agrees(analytic, numeric, rel=FD_REL, floor=FD_ABS):
    gap = abs(float(analytic) - float(numeric))
    return gap <= max(floor, rel * max(abs(float(analytic)), abs(float(numeric))))


def sample_coords(size, num_coords, rng):
    if size <= num_coords:
        return np.arange(size)
    return rng.choice(size, size=num_coords, replace=False)


def gradcheck(build_out, ref_out, arrays, wrt, rng=None, min_pass=FD_MIN_PASS):
    """Engine analytic gradient vs finite differences of the float64 reference.

    ``build_out(tensors) -> Tensor`` runs the engine op; ``ref_out(arrays) ->
    float64 ndarray`` is the independent reference. The scalar probed by
    finite differences is a fixed-coefficient weighted sum of the output.
    Also asserts the two forwards agree to float32 accuracy.
    """
    rng = rng or np.random.default_rng(0)
    tensors = [Tensor(a) for a in arrays]
    tensors[wrt].requires_grad = True
    out = build_out(tensors)
    ref = ref_out([a.astype(np.float64) for a in arrays])
    assert out.data.shape == ref.shape, f"forward shapes differ: {out.data.shape} vs {ref.shape}"
    np.testing.assert_allclose(out.data, ref, rtol=1e-4, atol=1e-5)

    coeffs = np.random.default_rng(12345).standard_normal(out.data.size)
    loss = T.tsum(T.mul(T.reshape(out, (out.size,)), Tensor(coeffs.astype(np.float32))))
    grad = backward(loss, [tensors[wrt]])[tensors[wrt]]

    def probe(arrs):
        return float(ref_out(arrs).reshape(-1) @ coeffs)

    coords = sample_coords(arrays[wrt].size, FD_COORDS, rng)
    hits = 0
    for c in coords:
        numeric = central_difference(probe, arrays, wrt, int(c))
        if fd_agrees(grad.flat[int(c)], numeric):
            hits += 1
    frac = hits / len(coords)
    assert frac >= min_pass, f"only {hits}/{len(coords)} coordinates agree"
    return frac


# ---------------------------------------------------------------------------
# Float64 reference interpreter for whole networks


def ref_apply_layer(layer, act, weights):
    p = layer.params
    w = layer.weights
    kind = layer.kind
    if kind == "dense":
        return ref_dense(act, weights[w["weight"]], weights[w["bias"]])
    if kind == "conv2d":
        out = ref_conv2d(
            act,
            weights[w["weight"]],
            _pair(p.get("stride", 1)),
            _pair(p.get("padding", 0)),
        )
        if "bias" in w:
            out = out + weights[w["bias"]].reshape(1, -1, 1, 1)
        return out
    if kind == "conv_transpose2d":
        out = ref_conv_transpose2d(
            act,
            weights[w["weight"]],
            _pair(p.get("stride", 1)),
            _pair(p.get("padding", 0)),
        )
        if "bias" in w:
            out = out + weights[w["bias"]].reshape(1, -1, 1, 1)
        return out
    if kind == "batchnorm":
        return ref_batchnorm(
            act,
            weights[w["mean"]],
            weights[w["var"]],
            weights[w["gamma"]],
            weights[w["beta"]],
            p.get("eps", 1e-5),
        )
    if kind == "activation":
        return ref_activation(p["fn"], act)
    if kind == "reshape":
        return act.reshape(act.shape[0], *p["shape"])
    if kind == "upsample_nearest":
        return ref_upsample_nearest(act, p["factor"])
    if kind == "dropout_identity":
        return act
    raise ValueError(kind)


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def ref_network_forward(spec, weight_arrays, x, perts=None, sigma=None):
    """Float64 forward with perturbation injection, independent of the engine."""
    weights64 = {k: np.asarray(v, dtype=np.float64) for k, v in weight_arrays.items()}
    act = np.asarray(x, dtype=np.float64)
    for boundary in range(len(spec.layers) + 1):
        if perts is not None and boundary in perts:
            delta = np.asarray(perts[boundary], dtype=np.float64)
            if sigma is not None:
                delta = delta * np.asarray(sigma[boundary], dtype=np.float64)
            act = act + delta[None]
        if boundary < len(spec.layers):
            act = ref_apply_layer(spec.layers[boundary], act, weights64)
    return act


def ref_cw_margin(output_vec, t):
    v = np.asarray(output_vec, dtype=np.float64).reshape(-1)
    return float(np.max(v) - v[t])


# ---------------------------------------------------------------------------
# Small networks used across test modules


def two_class_linear_classifier(w: np.ndarray) -> tuple[NetworkSpec, dict]:
    """Classifier whose output is w @ x for a [classes, dim] weight matrix."""
    classes, dim = w.shape
    spec = NetworkSpec(
        role="classifier",
        input_shape=(dim,),
        layers=(
            LayerSpec(
                "dense",
                params={"in_features": dim, "out_features": classes},
                weights={"weight": "fc.weight", "bias": "fc.bias"},
            ),
        ),
        injection_points=(),
        class_count=classes,
    )
    weights = {
        "fc.weight": np.asarray(w, dtype=np.float32),
        "fc.bias": np.zeros(classes, dtype=np.float32),
    }
    return spec, weights


def identity_generator(dim: int, injection_points=(0,)) -> tuple[NetworkSpec, dict]:
    """Generator that passes its latent straight through one identity layer."""
    spec = NetworkSpec(
        role="generator",
        input_shape=(dim,),
        layers=(LayerSpec("dropout_identity"),),
        injection_points=tuple(injection_points),
        latent_dim=dim,
    )
    return spec, {}
