"""Minimal-magnitude perturbation search by norm-constrained gradient descent.

The loss is the targeted max-minus-target margin on the classifier output; it
hits zero exactly when the target class attains the maximum. Optimization
runs Adam on the raw perturbation tensors, projects them back inside the
current Euclidean-norm ball after every step, and relaxes the ball radius
each step until the classifier flips or the budget runs out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .network import Network, PerturbationSet, SigmaProfile, forward
from .tensor import Tensor

Array = np.ndarray

STATUS_SKIPPED = "skipped_misclassified"
STATUS_SUCCESS = "success"
STATUS_EXHAUSTED = "exhausted"


@dataclass(frozen=True)
class AttackConfig:
    """Optimizer and constraint-schedule settings for one attack campaign."""

    learning_rate: float = 0.03
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    initial_bound: float = 1.0
    bound_multiplier: float = 1.03
    bound_increment: float = 0.1
    max_steps: int = 2000
    layer_subset: tuple[int, ...] | None = None  # None = all injection points
    max_bound: float | None = None

    def __post_init__(self):
        if self.initial_bound <= 0:
            raise ValueError(f"initial_bound must be > 0, got {self.initial_bound}")
        if self.bound_multiplier < 1:
            raise ValueError(f"bound_multiplier must be >= 1, got {self.bound_multiplier}")
        if self.bound_increment < 0:
            raise ValueError(f"bound_increment must be >= 0, got {self.bound_increment}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")

    def to_json(self) -> dict:
        obj = asdict(self)
        if self.layer_subset is not None:
            obj["layer_subset"] = list(self.layer_subset)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "AttackConfig":
        kwargs = dict(obj)
        if kwargs.get("layer_subset") is not None:
            kwargs["layer_subset"] = tuple(kwargs["layer_subset"])
        return cls(**kwargs)


MNIST_PROFILE = AttackConfig(
    learning_rate=0.004,
    initial_bound=0.1,
    bound_multiplier=1.0,
    bound_increment=0.001,
)


@dataclass
class AttackRecord:
    """Outcome of one (y, z, t) tuple under one layer subset."""

    tuple_id: int
    y: int
    t: int
    status: str
    steps_taken: int
    layer_subset: str
    seed: int
    success_magnitude: float | None = None
    diagnostic: str | None = None
    classifier: str | None = None

    def to_json(self) -> dict:
        obj = {
            "tuple_id": self.tuple_id,
            "y": self.y,
            "t": self.t,
            "status": self.status,
            "steps_taken": self.steps_taken,
            "layer_subset": self.layer_subset,
            "seed": self.seed,
        }
        if self.success_magnitude is not None:
            obj["success_magnitude"] = self.success_magnitude
        if self.diagnostic is not None:
            obj["diagnostic"] = self.diagnostic
        if self.classifier is not None:
            obj["classifier"] = self.classifier
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "AttackRecord":
        return cls(
            tuple_id=int(obj["tuple_id"]),
            y=int(obj["y"]),
            t=int(obj["t"]),
            status=obj["status"],
            steps_taken=int(obj["steps_taken"]),
            layer_subset=obj["layer_subset"],
            seed=int(obj["seed"]),
            success_magnitude=obj.get("success_magnitude"),
            diagnostic=obj.get("diagnostic"),
            classifier=obj.get("classifier"),
        )


def cw_loss(output: Tensor, t: int) -> Tensor:
    """Margin ``max_j out_j - out_t``; zero exactly when t attains the max."""
    flat = T.reshape(output, (output.size,))
    if not 0 <= int(t) < flat.size:
        raise ValueError(f"target {t} out of range for {flat.size} classes")
    return T.sub(T.reduce_max(flat), T.element(flat, int(t)))


def relax_bound(bound: float, config: AttackConfig) -> float:
    return bound * config.bound_multiplier + config.bound_increment


def project_norm(perts: PerturbationSet, bound: float) -> None:
    """Rescale the active tensors in place so ``flat_norm`` <= bound.

    The scale factor is computed in float64; when float32 rounding of the
    scaled values leaves the norm a hair above the bound, retries shrink by
    one extra ulp until the constraint holds as measured by ``flat_norm``.
    """
    if bound <= 0:
        raise ValueError(f"bound must be > 0, got {bound}")
    for attempt in range(8):
        norm = perts.flat_norm()
        if norm <= bound:
            return
        scale = (bound / norm) * (1.0 - attempt * 1.2e-7)
        for b in perts.active:
            d = perts.tensors[b].data
            perts.tensors[b].data = (d.astype(np.float64) * scale).astype(np.float32)
    raise RuntimeError("projection failed to settle inside the bound")


class Adam:
    """Adam with bias correction over a list of same-keyed gradient maps."""

    def __init__(self, perts: PerturbationSet, config: AttackConfig):
        self.perts = perts
        self.lr = config.learning_rate
        self.b1 = config.adam_beta1
        self.b2 = config.adam_beta2
        self.eps = config.adam_eps
        self.t = 0
        self.m = {b: np.zeros(perts.shapes[b], dtype=np.float32) for b in perts.active}
        self.v = {b: np.zeros(perts.shapes[b], dtype=np.float32) for b in perts.active}

    def step(self, grads: dict[int, Array]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for b in self.perts.active:
            g = grads[b]
            self.m[b] = self.b1 * self.m[b] + (1.0 - self.b1) * g
            self.v[b] = self.b2 * self.v[b] + (1.0 - self.b2) * np.square(g)
            mhat = self.m[b] / c1
            vhat = self.v[b] / c2
            p = self.perts.tensors[b]
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def attack(
    generator: Network,
    classifier: Network,
    sigma: SigmaProfile,
    z: Array,
    y: int,
    t: int,
    config: AttackConfig,
    tuple_id: int = 0,
    seed: int = 0,
    subset_name: str | None = None,
    on_step=None,
    capture: dict | None = None,
) -> AttackRecord:
    """Search for the smallest perturbation that flips the prediction to t.

    Skips the tuple when the classifier does not predict y on the clean
    image. Otherwise each iteration checks for success, then takes one Adam
    step on the margin loss, projects back inside the current bound, and
    relaxes the bound. The recorded magnitude is the flat norm of the raw
    perturbation tensors at the first success.
    """
    if t == y:
        raise ValueError("target label must differ from intended label")
    if subset_name is None:
        subset_name = _subset_name(config.layer_subset, generator.spec.injection_points)
    z32 = np.asarray(z, dtype=np.float32).reshape(1, -1)

    clean = forward(generator.spec, generator.weights, Tensor(z32))
    pred, _ = classifier.predict(_as_image(clean, classifier))
    if pred != y:
        return AttackRecord(
            tuple_id=tuple_id,
            y=y,
            t=t,
            status=STATUS_SKIPPED,
            steps_taken=0,
            layer_subset=subset_name,
            seed=seed,
        )

    active = config.layer_subset
    perts = generator.perturbation_set(active)
    missing = [b for b in perts.active if b not in sigma.sigmas]
    if missing:
        raise ValueError(f"sigma profile lacks boundaries {missing}")
    opt = Adam(perts, config)
    bound = config.initial_bound

    for steps_taken in range(config.max_steps + 1):
        zt = Tensor(z32)
        out = forward(generator.spec, generator.weights, zt, perts, sigma)
        logits = classifier_forward(classifier, out)
        label = int(np.argmax(logits.data.reshape(-1)))
        if label == t:
            magnitude = perts.flat_norm()
            if steps_taken == 0 or magnitude <= 0:
                raise AssertionError(
                    "zero-perturbation success contradicts the initial prediction check"
                )
            if capture is not None:
                capture["perturbations"] = {
                    b: perts.tensors[b].data.copy() for b in perts.active
                }
                capture["unperturbed_image"] = clean.data.copy()
                capture["perturbed_image"] = out.data.copy()
            return AttackRecord(
                tuple_id=tuple_id,
                y=y,
                t=t,
                status=STATUS_SUCCESS,
                steps_taken=steps_taken,
                layer_subset=subset_name,
                seed=seed,
                success_magnitude=magnitude,
            )
        if steps_taken == config.max_steps:
            break
        loss = cw_loss(logits, t)
        if not math.isfinite(loss.item()):
            return _exhausted(tuple_id, y, t, steps_taken, subset_name, seed, "non-finite loss")
        grad_map = T.backward(loss, perts.active_tensors())
        grads = {b: grad_map[perts.tensors[b]] for b in perts.active}
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            return _exhausted(
                tuple_id, y, t, steps_taken, subset_name, seed, "non-finite gradients"
            )
        opt.step(grads)
        project_norm(perts, bound)
        if on_step is not None:
            on_step(steps_taken + 1, bound, perts)
        bound = relax_bound(bound, config)
        if config.max_bound is not None and bound > config.max_bound:
            return _exhausted(
                tuple_id, y, t, steps_taken + 1, subset_name, seed, "bound limit reached"
            )
    return _exhausted(tuple_id, y, t, config.max_steps, subset_name, seed, None)


def _exhausted(tuple_id, y, t, steps, subset_name, seed, diagnostic) -> AttackRecord:
    return AttackRecord(
        tuple_id=tuple_id,
        y=y,
        t=t,
        status=STATUS_EXHAUSTED,
        steps_taken=steps,
        layer_subset=subset_name,
        seed=seed,
        diagnostic=diagnostic,
    )


def _subset_name(subset: tuple[int, ...] | None, all_points: tuple[int, ...]) -> str:
    if subset is None or tuple(subset) == tuple(all_points):
        return "all"
    return ",".join(str(b) for b in subset)


def _as_image(generated: Tensor, classifier: Network) -> Tensor:
    """Match the generator output to the classifier input shape."""
    want = classifier.spec.input_shape
    if tuple(generated.shape[1:]) == tuple(want):
        return generated
    if generated.size == math.prod(want) * generated.shape[0]:
        return T.reshape(generated, (generated.shape[0], *want))
    raise T.ShapeError(
        f"generator output {tuple(generated.shape[1:])} does not fit classifier input {want}"
    )


def classifier_forward(classifier: Network, image: Tensor) -> Tensor:
    return forward(classifier.spec, classifier.weights, _as_image(image, classifier))


def sample_tuples(
    label_space: int,
    count: int,
    seed: int,
    latent_dim: int,
) -> list[tuple[int, Array, int]]:
    """Deterministic (y, z, t) tuples: Gaussian z, uniform labels, t != y.

    The same (label_space, count, seed, latent_dim) always yields the same
    list, so one tuple set can be replayed across classifiers and subsets.
    """
    if label_space < 2:
        raise ValueError(f"label_space must be >= 2, got {label_space}")
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    out = []
    for _ in range(int(count)):
        z = rng.standard_normal(latent_dim, dtype=np.float32)
        y = int(rng.integers(0, label_space))
        t = int((y + 1 + rng.integers(0, label_space - 1)) % label_space)
        out.append((y, z, t))
    return out
