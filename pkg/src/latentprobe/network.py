"""Generators and classifiers as ordered layer stacks with injection points.

A network is a flat sequence of layers; the boundaries between layers are
numbered 0 (the network input) through ``len(layers)`` (the output). A subset
of boundaries is declared as injection points, where a perturbation tensor,
scaled per neuron by an empirical standard-deviation profile, is added to the
activations before the next layer consumes them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

Array = np.ndarray

LAYER_KINDS = (
    "dense",
    "conv2d",
    "conv_transpose2d",
    "batchnorm",
    "activation",
    "reshape",
    "upsample_nearest",
    "dropout_identity",
)


@dataclass(frozen=True)
class LayerSpec:
    """One layer: a kind plus its geometry and the names of its weights."""

    kind: str
    params: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)  # role -> tensor name

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": self.params, "weights": self.weights}

    @classmethod
    def from_json(cls, obj: Mapping) -> "LayerSpec":
        return cls(
            kind=obj["kind"],
            params=dict(obj.get("params", {})),
            weights=dict(obj.get("weights", {})),
        )


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layers, the input shape, and the declared injection points.

    ``input_shape`` excludes the batch axis. For generators ``latent_dim``
    matches a 1-d input; classifiers instead declare ``class_count``.
    """

    role: str  # "generator" | "classifier"
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    injection_points: tuple[int, ...]
    latent_dim: int | None = None
    class_count: int | None = None

    def __post_init__(self):
        if self.role not in ("generator", "classifier"):
            raise ValueError(f"role must be generator or classifier, got {self.role!r}")
        pts = self.injection_points
        if any(b < 0 or b > len(self.layers) for b in pts):
            raise ValueError(f"injection point out of range: {pts}")
        if list(pts) != sorted(set(pts)):
            raise ValueError(f"injection points must be strictly increasing: {pts}")
        if self.role == "generator":
            if self.latent_dim is None:
                raise ValueError("generator spec requires latent_dim")
            if self.input_shape != (self.latent_dim,):
                raise ValueError(
                    f"generator input shape {self.input_shape} does not match "
                    f"latent_dim {self.latent_dim}"
                )
        elif self.class_count is None or self.class_count < 2:
            raise ValueError("classifier spec requires class_count >= 2")

    def boundary_shapes(self) -> list[tuple[int, ...]]:
        """Activation shape (without batch axis) at every boundary 0..n."""
        shapes = [tuple(self.input_shape)]
        cur = tuple(self.input_shape)
        for idx, layer in enumerate(self.layers):
            cur = _output_shape(layer, cur, idx)
            shapes.append(cur)
        return shapes

    def injection_shapes(self) -> dict[int, tuple[int, ...]]:
        shapes = self.boundary_shapes()
        return {b: shapes[b] for b in self.injection_points}

    def output_shape(self) -> tuple[int, ...]:
        return self.boundary_shapes()[-1]

    def weight_names(self) -> list[str]:
        names = []
        for layer in self.layers:
            names.extend(layer.weights.values())
        return names

    def to_json(self) -> dict:
        obj = {
            "role": self.role,
            "input_shape": list(self.input_shape),
            "layers": [l.to_json() for l in self.layers],
            "injection_points": list(self.injection_points),
        }
        if self.latent_dim is not None:
            obj["latent_dim"] = self.latent_dim
        if self.class_count is not None:
            obj["class_count"] = self.class_count
        return obj

    @classmethod
    def from_json(cls, obj: Mapping) -> "NetworkSpec":
        return cls(
            role=obj["role"],
            input_shape=tuple(obj["input_shape"]),
            layers=tuple(LayerSpec.from_json(l) for l in obj["layers"]),
            injection_points=tuple(obj["injection_points"]),
            latent_dim=obj.get("latent_dim"),
            class_count=obj.get("class_count"),
        )


def _output_shape(layer: LayerSpec, in_shape: tuple[int, ...], idx: int) -> tuple[int, ...]:
    p = layer.params
    kind = layer.kind
    if kind == "dense":
        if in_shape != (p["in_features"],):
            raise ShapeError(
                f"layer {idx} (dense): expects ({p['in_features']},), gets {in_shape}"
            )
        return (p["out_features"],)
    if kind == "conv2d":
        c, h, w = _expect_chw(in_shape, idx, kind)
        if c != p["in_channels"]:
            raise ShapeError(f"layer {idx} (conv2d): {p['in_channels']} channels expected, got {c}")
        kh, kw = _khkw(p)
        s, pad = p.get("stride", 1), p.get("padding", 0)
        sh, sw = _as_pair(s)
        ph, pw = _as_pair(pad)
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"layer {idx} (conv2d): geometry collapses to {oh}x{ow}")
        return (p["out_channels"], oh, ow)
    if kind == "conv_transpose2d":
        c, h, w = _expect_chw(in_shape, idx, kind)
        if c != p["in_channels"]:
            raise ShapeError(
                f"layer {idx} (conv_transpose2d): {p['in_channels']} channels expected, got {c}"
            )
        kh, kw = _khkw(p)
        sh, sw = _as_pair(p.get("stride", 1))
        ph, pw = _as_pair(p.get("padding", 0))
        oh = (h - 1) * sh + kh - 2 * ph
        ow = (w - 1) * sw + kw - 2 * pw
        if oh < 1 or ow < 1:
            raise ShapeError(f"layer {idx} (conv_transpose2d): geometry collapses to {oh}x{ow}")
        return (p["out_channels"], oh, ow)
    if kind == "batchnorm":
        if len(in_shape) not in (1, 3) or in_shape[0] != p["num_features"]:
            raise ShapeError(
                f"layer {idx} (batchnorm): {p['num_features']} features expected, got {in_shape}"
            )
        return in_shape
    if kind == "activation":
        if p.get("fn") not in T.ACTIVATIONS:
            raise ValueError(f"layer {idx} (activation): unknown fn {p.get('fn')!r}")
        return in_shape
    if kind == "reshape":
        target = tuple(int(v) for v in p["shape"])
        if math.prod(target) != math.prod(in_shape):
            raise ShapeError(f"layer {idx} (reshape): {in_shape} -> {target} changes size")
        return target
    if kind == "upsample_nearest":
        c, h, w = _expect_chw(in_shape, idx, kind)
        f = int(p["factor"])
        return (c, h * f, w * f)
    if kind == "dropout_identity":
        return in_shape
    raise ValueError(f"unknown layer kind {kind!r}")


def _expect_chw(shape, idx, kind):
    if len(shape) != 3:
        raise ShapeError(f"layer {idx} ({kind}): expected (c,h,w) input, got {shape}")
    return shape


def _khkw(p) -> tuple[int, int]:
    return _as_pair(p["kernel"])


def _as_pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def expected_weight_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    """Shape every named weight must have, per the layer geometry."""
    out: dict[str, tuple[int, ...]] = {}
    for idx, layer in enumerate(spec.layers):
        p, w = layer.params, layer.weights
        if layer.kind == "dense":
            out[w["weight"]] = (p["out_features"], p["in_features"])
            out[w["bias"]] = (p["out_features"],)
        elif layer.kind == "conv2d":
            kh, kw = _khkw(p)
            out[w["weight"]] = (p["out_channels"], p["in_channels"], kh, kw)
            if "bias" in w:
                out[w["bias"]] = (p["out_channels"],)
        elif layer.kind == "conv_transpose2d":
            kh, kw = _khkw(p)
            out[w["weight"]] = (p["in_channels"], p["out_channels"], kh, kw)
            if "bias" in w:
                out[w["bias"]] = (p["out_channels"],)
        elif layer.kind == "batchnorm":
            for role in ("mean", "var", "gamma", "beta"):
                out[w[role]] = (p["num_features"],)
    return out


def validate_weights(spec: NetworkSpec, weights: Mapping[str, Array]) -> None:
    for idx, layer in enumerate(spec.layers):
        for role, name in layer.weights.items():
            if name not in weights:
                raise ShapeError(f"layer {idx} ({layer.kind}): missing weight {name!r}")
    expected = expected_weight_shapes(spec)
    for name, shape in expected.items():
        got = tuple(weights[name].shape)
        if got != shape:
            layer = _layer_of(spec, name)
            raise ShapeError(
                f"weight {name!r} of layer {layer} has shape {got}, expected {shape}"
            )
    # Walking the shapes end to end surfaces any inter-layer disagreement.
    spec.boundary_shapes()


def _layer_of(spec: NetworkSpec, weight_name: str) -> int:
    for idx, layer in enumerate(spec.layers):
        if weight_name in layer.weights.values():
            return idx
    return -1


class PerturbationSet:
    """Per-injection-point perturbation tensors with an activity mask.

    Tensors at masked-out boundaries are pinned to zero; ``flat_norm`` is the
    Euclidean norm of the concatenated active tensors.
    """

    def __init__(
        self,
        shapes: Mapping[int, tuple[int, ...]],
        active: Sequence[int] | None = None,
    ):
        self.shapes = {int(b): tuple(s) for b, s in shapes.items()}
        boundaries = sorted(self.shapes)
        self.active = tuple(sorted(self.shapes if active is None else (int(b) for b in active)))
        unknown = set(self.active) - set(boundaries)
        if unknown:
            raise ValueError(f"active mask names unknown boundaries {sorted(unknown)}")
        self.tensors: dict[int, Tensor] = {
            b: Tensor(np.zeros(self.shapes[b], dtype=np.float32), requires_grad=b in self.active)
            for b in boundaries
        }

    @classmethod
    def for_network(cls, spec: NetworkSpec, active: Sequence[int] | None = None) -> "PerturbationSet":
        return cls(spec.injection_shapes(), active)

    def __contains__(self, boundary: int) -> bool:
        return boundary in self.tensors

    def tensor(self, boundary: int) -> Tensor:
        return self.tensors[boundary]

    def active_tensors(self) -> list[Tensor]:
        return [self.tensors[b] for b in self.active]

    def set_values(self, values: Mapping[int, Array]) -> None:
        for b, v in values.items():
            if b not in self.active:
                raise ValueError(f"boundary {b} is masked out")
            arr = np.asarray(v, dtype=np.float32)
            if arr.shape != self.shapes[b]:
                raise ShapeError(f"boundary {b}: shape {arr.shape} != {self.shapes[b]}")
            self.tensors[b].data = np.ascontiguousarray(arr)

    def zero_(self) -> None:
        for b in self.active:
            self.tensors[b].data = np.zeros(self.shapes[b], dtype=np.float32)

    def flat_norm(self) -> float:
        total = 0.0
        for b in self.active:
            d = self.tensors[b].data
            total += float(np.dot(d.reshape(-1).astype(np.float64), d.reshape(-1).astype(np.float64)))
        return math.sqrt(total)

    def flatten_active(self) -> Array:
        if not self.active:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([self.tensors[b].data.reshape(-1) for b in self.active])


class SigmaProfile:
    """Per-injection-point tensors of empirical activation standard deviations."""

    def __init__(self, sigmas: Mapping[int, Array], sample_count: int = 0, seed: int = 0):
        self.sigmas = {
            int(b): np.ascontiguousarray(np.asarray(s, dtype=np.float32))
            for b, s in sigmas.items()
        }
        self.sample_count = int(sample_count)
        self.seed = int(seed)

    def __getitem__(self, boundary: int) -> Array:
        return self.sigmas[boundary]

    def boundaries(self) -> list[int]:
        return sorted(self.sigmas)

    @classmethod
    def ones_for(cls, spec: NetworkSpec) -> "SigmaProfile":
        return cls(
            {b: np.ones(s, dtype=np.float32) for b, s in spec.injection_shapes().items()}
        )

    def validate_against(self, spec: NetworkSpec) -> None:
        shapes = spec.injection_shapes()
        if sorted(self.sigmas) != sorted(shapes):
            raise ShapeError(
                f"sigma boundaries {sorted(self.sigmas)} != injection points {sorted(shapes)}"
            )
        for b, s in shapes.items():
            if tuple(self.sigmas[b].shape) != s:
                raise ShapeError(f"sigma at boundary {b} has shape {self.sigmas[b].shape}, expected {s}")
            if np.any(self.sigmas[b] <= 0):
                raise ValueError(f"sigma at boundary {b} has nonpositive entries")


def _apply_layer(layer: LayerSpec, x: Tensor, weights: Mapping[str, Tensor]) -> Tensor:
    p = layer.params
    kind = layer.kind
    if kind == "dense":
        return T.dense(x, weights[layer.weights["weight"]], weights[layer.weights["bias"]])
    if kind == "conv2d":
        y = T.conv2d(
            x,
            weights[layer.weights["weight"]],
            stride=p.get("stride", 1),
            padding=p.get("padding", 0),
        )
        if "bias" in layer.weights:
            y = T.channel_bias(y, weights[layer.weights["bias"]])
        return y
    if kind == "conv_transpose2d":
        y = T.conv_transpose2d(
            x,
            weights[layer.weights["weight"]],
            stride=p.get("stride", 1),
            padding=p.get("padding", 0),
        )
        if "bias" in layer.weights:
            y = T.channel_bias(y, weights[layer.weights["bias"]])
        return y
    if kind == "batchnorm":
        w = layer.weights
        return T.batchnorm_inference(
            x,
            weights[w["mean"]],
            weights[w["var"]],
            weights[w["gamma"]],
            weights[w["beta"]],
            eps=p.get("eps", 1e-5),
        )
    if kind == "activation":
        return T.activation(p["fn"], x)
    if kind == "reshape":
        batch = x.shape[0]
        return T.reshape(x, (batch, *p["shape"]))
    if kind == "upsample_nearest":
        return T.upsample_nearest(x, p["factor"])
    if kind == "dropout_identity":
        return x
    raise ValueError(f"unknown layer kind {kind!r}")


def forward(
    spec: NetworkSpec,
    weights: Mapping[str, Tensor],
    x: Tensor,
    perts: PerturbationSet | None = None,
    sigma: SigmaProfile | None = None,
) -> Tensor:
    """Run the network, adding ``p_b * sigma_b`` at each injection boundary.

    Perturbation buffers that are entirely zero are skipped, which keeps the
    unperturbed pass bit-identical to a plain forward run.
    """
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(
            f"input shape {tuple(x.shape[1:])} does not match spec {spec.input_shape}"
        )
    if perts is not None:
        missing = set(perts.tensors) - set(spec.injection_points)
        if missing:
            raise ShapeError(f"perturbations at non-injection boundaries {sorted(missing)}")
    act = x
    for boundary in range(len(spec.layers) + 1):
        if perts is not None and boundary in perts.tensors:
            act = _inject(act, perts, sigma, boundary)
        if boundary < len(spec.layers):
            act = _apply_layer(spec.layers[boundary], act, weights)
    return act


def _inject(act: Tensor, perts: PerturbationSet, sigma: SigmaProfile | None, boundary: int) -> Tensor:
    p = perts.tensor(boundary)
    if tuple(p.shape) != tuple(act.shape[1:]):
        raise ShapeError(
            f"perturbation at boundary {boundary} has shape {p.shape}, "
            f"activation is {tuple(act.shape[1:])}"
        )
    if not p.requires_grad and not np.any(p.data):
        return act
    if sigma is not None:
        scale = Tensor(sigma[boundary])
        scaled = T.mul(p, scale)
    else:
        scaled = p
    batched = T.reshape(scaled, (1, *scaled.shape))
    if act.shape[0] != 1:
        raise ShapeError("perturbed forward passes run with batch size 1")
    return T.add(act, batched)


def plain_forward(spec: NetworkSpec, weights: Mapping[str, Tensor], x: Tensor) -> Tensor:
    """Forward pass with no perturbation machinery at all."""
    act = x
    for layer in spec.layers:
        act = _apply_layer(layer, act, weights)
    return act


def predict(spec: NetworkSpec, weights: Mapping[str, Tensor], image: Tensor) -> tuple[int, Array]:
    """Classifier label and raw output vector; ties go to the lowest index."""
    if spec.role != "classifier":
        raise ValueError("predict requires a classifier spec")
    out = plain_forward(spec, weights, image)
    vec = out.data.reshape(-1)
    if vec.size != spec.class_count:
        raise ShapeError(
            f"classifier emitted {vec.size} values for {spec.class_count} classes"
        )
    return int(np.argmax(vec)), vec


def activations_at(
    spec: NetworkSpec,
    weights: Mapping[str, Tensor],
    x: Tensor,
    boundaries: Sequence[int],
) -> dict[int, Array]:
    """Unperturbed activations (with batch axis) at the given boundaries."""
    wanted = set(int(b) for b in boundaries)
    out: dict[int, Array] = {}
    act = x
    for boundary in range(len(spec.layers) + 1):
        if boundary in wanted:
            out[boundary] = act.data
        if boundary < len(spec.layers):
            act = _apply_layer(spec.layers[boundary], act, weights)
    return out


def weights_to_tensors(weights: Mapping[str, Array]) -> dict[str, Tensor]:
    return {name: Tensor(v) for name, v in weights.items()}


@dataclass
class Network:
    """A loaded network: spec, weight tensors, and an optional sigma profile."""

    spec: NetworkSpec
    weights: dict[str, Tensor]
    sigma: SigmaProfile | None = None

    def forward(
        self,
        x: Tensor,
        perts: PerturbationSet | None = None,
        sigma: SigmaProfile | None = None,
    ) -> Tensor:
        return forward(self.spec, self.weights, x, perts, sigma if sigma is not None else self.sigma)

    def predict(self, image: Tensor) -> tuple[int, Array]:
        return predict(self.spec, self.weights, image)

    def perturbation_set(self, active: Sequence[int] | None = None) -> PerturbationSet:
        return PerturbationSet.for_network(self.spec, active)
