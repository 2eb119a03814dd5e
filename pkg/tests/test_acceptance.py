"""Acceptance suite: one test per release criterion, each printing PASS/FAIL.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines. Tolerances are pinned here and nowhere else.
"""

import contextlib
import itertools
import time

import numpy as np
import pytest

import helpers
from latentprobe import (
    AttackConfig,
    MNIST_PROFILE,
    PerturbationSet,
    Tensor,
    attack,
    backward,
    calibrate,
    cw_loss,
    project_norm,
    relax_bound,
    sample_tuples,
)
from latentprobe import tensor as T
from latentprobe.analysis import (
    OUTCOME_CLASS_CHANGED,
    OUTCOME_SUCCESS,
    build_curve,
    mean_magnitude_table,
    threshold_tradeoff,
)
from latentprobe.demo import demo_classifier, demo_generator
from latentprobe.labeling import (
    CHOICES,
    decide_outcome,
)
from latentprobe.network import (
    Network,
    NetworkSpec,
    SigmaProfile,
    forward,
    weights_to_tensors,
)
from latentprobe.search import STATUS_SUCCESS

from test_analysis import brute_force_curve, random_record_set
from test_labeling import oracle_outcome


@contextlib.contextmanager
def criterion(name):
    try:
        yield
    except Exception:
        print(f"ACCEPTANCE {name}: FAIL")
        raise
    print(f"ACCEPTANCE {name}: PASS")


@pytest.fixture(scope="module")
def demo_setup():
    gspec, gweights = demo_generator()
    cspec, cweights = demo_classifier()
    gen = Network(gspec, weights_to_tensors(gweights))
    clf = Network(cspec, weights_to_tensors(cweights))
    sigma = calibrate(gen, num_samples=256, seed=5)
    return gen, gweights, clf, cweights, sigma


def test_gradcheck_every_op_and_composite(demo_setup):
    """Layer ops and the full composite d(loss)/dp vs central differences."""
    started = time.monotonic()
    with criterion("gradcheck suite"):
        rng = np.random.default_rng(100)

        def arrs(*shape, scale=1.0):
            return (rng.standard_normal(shape) * scale).astype(np.float32)

        cases = []
        for op, ref in [
            (T.add, lambda a: a[0] + a[1]),
            (T.sub, lambda a: a[0] - a[1]),
            (T.mul, lambda a: a[0] * a[1]),
            (T.maximum, lambda a: np.maximum(a[0], a[1])),
        ]:
            for wrt in (0, 1):
                cases.append(
                    (lambda ts, op=op: op(ts[0], ts[1]), ref, [arrs(12, 10), arrs(12, 10)], wrt)
                )
        dense_arrays = [arrs(12, 16, scale=0.5), arrs(12, 16), arrs(12)]
        for wrt in range(3):
            cases.append(
                (lambda ts: T.dense(ts[0], ts[1], ts[2]),
                 lambda a: helpers.ref_dense(a[0], a[1], a[2]), dense_arrays, wrt)
            )
        conv_arrays = [arrs(1, 3, 8, 8, scale=0.5), arrs(4, 3, 3, 3)]
        for wrt in (0, 1):
            cases.append(
                (lambda ts: T.conv2d(ts[0], ts[1], stride=2, padding=1),
                 lambda a: helpers.ref_conv2d(a[0], a[1], (2, 2), (1, 1)), conv_arrays, wrt)
            )
        tconv_arrays = [arrs(1, 4, 5, 5, scale=0.5), arrs(4, 3, 5, 5)]
        for wrt in (0, 1):
            cases.append(
                (lambda ts: T.conv_transpose2d(ts[0], ts[1], stride=2, padding=0),
                 lambda a: helpers.ref_conv_transpose2d(a[0], a[1], (2, 2), (0, 0)),
                 tconv_arrays, wrt)
            )
        for kind in ("relu", "leaky_relu", "sigmoid", "tanh"):
            cases.append(
                (lambda ts, k=kind: T.activation(k, ts[0]),
                 lambda a, k=kind: helpers.ref_activation(k, a[0]), [arrs(11, 13)], 0)
            )
        bn_arrays = [arrs(2, 6, 5, 5), arrs(6), (rng.random(6) + 0.5).astype(np.float32),
                     arrs(6), arrs(6)]
        for wrt in range(5):
            cases.append(
                (lambda ts: T.batchnorm_inference(ts[0], ts[1], ts[2], ts[3], ts[4], eps=1e-5),
                 lambda a: helpers.ref_batchnorm(a[0], a[1], a[2], a[3], a[4], 1e-5),
                 bn_arrays, wrt)
            )
        cases.append(
            (lambda ts: T.reshape(ts[0], (15, 8)),
             lambda a: a[0].reshape(15, 8).astype(np.float64), [arrs(3, 5, 8)], 0)
        )
        cases.append(
            (lambda ts: T.upsample_nearest(ts[0], 2),
             lambda a: helpers.ref_upsample_nearest(a[0], 2), [arrs(1, 3, 6, 6)], 0)
        )
        cases.append(
            (lambda ts: T.channel_bias(ts[0], ts[1]),
             lambda a: a[0].astype(np.float64) + a[1].reshape(1, -1, 1, 1),
             [arrs(2, 4, 5, 5), arrs(4)], 1)
        )
        for build, ref, arrays, wrt in cases:
            helpers.gradcheck(build, ref, arrays, wrt, rng=rng)

        _composite_gradcheck(demo_setup, rng)
    elapsed = time.monotonic() - started
    print(f"  gradcheck wall time: {elapsed:.1f}s")
    assert elapsed < 120.0


def _composite_gradcheck(demo_setup, rng):
    """d(cw margin)/dp through the demo generator + classifier, 100 coords."""
    gen, gweights, clf, cweights, sigma = demo_setup
    z = rng.standard_normal((1, 128)).astype(np.float32)
    target = 3

    perts = gen.perturbation_set()
    start = {
        b: (rng.standard_normal(perts.shapes[b]) * 0.05).astype(np.float32)
        for b in perts.active
    }
    perts.set_values(start)
    img = forward(gen.spec, gen.weights, Tensor(z), perts, sigma)
    from latentprobe.search import classifier_forward

    logits = classifier_forward(clf, img)
    loss = cw_loss(logits, target)
    grads = backward(loss, perts.active_tensors())

    def ref_loss(pert_arrays):
        img64 = helpers.ref_network_forward(gen.spec, gweights, z, pert_arrays, sigma.sigmas)
        flat = img64.reshape(1, -1).reshape(1, 1, 28, 28)
        out64 = helpers.ref_network_forward(clf.spec, cweights, flat)
        return helpers.ref_cw_margin(out64, target)

    sizes = {b: int(np.prod(perts.shapes[b])) for b in perts.active}
    total = sum(sizes.values())
    flat_choice = rng.choice(total, size=100, replace=False)
    agreed = 0
    for flat_idx in flat_choice:
        remaining = int(flat_idx)
        for b in perts.active:
            if remaining < sizes[b]:
                break
            remaining -= sizes[b]
        plus = {k: v.copy() for k, v in start.items()}
        minus = {k: v.copy() for k, v in start.items()}
        plus[b].flat[remaining] += helpers.FD_H
        minus[b].flat[remaining] -= helpers.FD_H
        numeric = (ref_loss(plus) - ref_loss(minus)) / (2 * helpers.FD_H)
        analytic = grads[perts.tensor(b)].flat[remaining]
        if helpers.fd_agrees(analytic, numeric):
            agreed += 1
    assert agreed >= 95, f"composite gradcheck: {agreed}/100 coordinates agree"


def test_schedule_exactness():
    """Float64 bound iteration hits the published schedule values."""
    with criterion("schedule exactness"):
        imagenet = AttackConfig()
        b1 = relax_bound(1.0, imagenet)
        b2 = relax_bound(b1, imagenet)
        assert abs(b1 - 1.13) <= 1e-12
        assert abs(b2 - 1.2639) <= 1e-12
        b = 0.1
        for _ in range(10):
            b = relax_bound(b, MNIST_PROFILE)
        assert abs(b - 0.110) <= 1e-12


def test_cw_loss_bitwise_oracle():
    """10,000 random vectors: engine loss == brute-force max-minus-target."""
    with criterion("cw loss oracle"):
        rng = np.random.default_rng(200)
        for _ in range(10000):
            n = int(rng.integers(2, 16))
            v = rng.standard_normal(n).astype(np.float32)
            t = int(rng.integers(0, n))
            mx = v[0]
            for x in v[1:]:
                if x > mx:
                    mx = x
            expected = float(np.float32(mx) - np.float32(v[t]))
            got = cw_loss(Tensor(v), t).item()
            assert got == expected
            assert got >= 0.0
            assert (got == 0.0) == bool(v[t] == mx)


def test_projection_property():
    """10,000 randomized sets: post-projection norm <= bound + 1e-6."""
    with criterion("projection property"):
        rng = np.random.default_rng(300)
        for _ in range(10000):
            k = int(rng.integers(1, 4))
            shapes = {b: (int(rng.integers(1, 12)),) for b in range(k + 1)}
            active = tuple(b for b in shapes if rng.random() < 0.8) or (0,)
            perts = PerturbationSet(shapes, active=active)
            perts.set_values(
                {
                    b: (rng.standard_normal(shapes[b]) * 10 ** rng.uniform(-2, 2)).astype(
                        np.float32
                    )
                    for b in active
                }
            )
            bound = float(10 ** rng.uniform(-3, 3))
            project_norm(perts, bound)
            assert perts.flat_norm() <= bound + 1e-6
            for b in shapes:
                if b not in active:
                    assert not np.any(perts.tensor(b).data)


def test_sigma_scaling_exactness(demo_setup):
    """Unit perturbation moves the boundary activation by exactly sigma."""
    with criterion("sigma-scaling exactness"):
        gen, gweights, _, _, sigma = demo_setup
        rng = np.random.default_rng(400)
        z = rng.standard_normal((1, 128)).astype(np.float32)
        for boundary in gen.spec.injection_points:
            # run the generator only up to this boundary, so its activation
            # is the network output and the continuation is the identity
            prefix = NetworkSpec(
                role="generator",
                input_shape=gen.spec.input_shape,
                layers=gen.spec.layers[:boundary],
                injection_points=(boundary,),
                latent_dim=gen.spec.latent_dim,
            )
            base = forward(prefix, gen.weights, Tensor(z))
            shape = prefix.injection_shapes()[boundary]
            size = int(np.prod(shape))
            for j in rng.choice(size, size=min(size, 25), replace=False):
                perts = PerturbationSet.for_network(prefix)
                delta = np.zeros(shape, dtype=np.float32)
                delta.flat[j] = 1.0
                perts.set_values({boundary: delta})
                prof = SigmaProfile({boundary: sigma[boundary]})
                out = forward(prefix, gen.weights, Tensor(z), perts, prof)
                expected = base.data.copy()
                expected.reshape(-1)[j] = (
                    expected.reshape(-1)[j] + np.float32(1.0) * sigma[boundary].flat[j]
                )
                assert out.data.tobytes() == expected.tobytes()


@pytest.fixture(scope="module")
def campaign(demo_setup):
    """50-tuple targeted campaign over all injection points."""
    gen, _, clf, _, sigma = demo_setup
    config = AttackConfig()  # lr 0.03, betas 0.9/0.999, bound 1.0 * 1.03 + 0.1
    tuples = sample_tuples(10, 50, seed=1234, latent_dim=128)
    records = []
    started = time.monotonic()
    for i, (y_sampled, z, t_sampled) in enumerate(tuples):
        pred, _ = clf.predict(gen.forward(Tensor(z.reshape(1, -1))))
        offset = (t_sampled - y_sampled - 1) % 10
        t = (pred + 1 + offset) % 10
        records.append(
            attack(gen, clf, sigma, z, pred, t, config, tuple_id=i, seed=1234)
        )
    return records, tuples, time.monotonic() - started


def test_fixture_attack_success_rate(campaign):
    """>= 90% of 50 tuples succeed within 2000 steps in under 10 minutes."""
    with criterion("fixture attack success"):
        records, _, elapsed = campaign
        wins = [r for r in records if r.status == STATUS_SUCCESS]
        assert len(records) == 50
        assert all(r.steps_taken <= 2000 for r in wins)
        assert len(wins) >= 45, f"only {len(wins)}/50 succeeded"
        assert elapsed < 600.0, f"campaign took {elapsed:.0f}s"
        print(f"  success {len(wins)}/50 in {elapsed:.1f}s")


def test_linear_case_optimality():
    """Recorded magnitude within one relaxation step of the closed form."""
    with criterion("linear-case optimality"):
        from test_search import linear_setup

        gen, clf, sigma, z = linear_setup()
        config = AttackConfig(
            learning_rate=0.05,
            initial_bound=0.5,
            bound_multiplier=1.0,
            bound_increment=0.02,
            max_steps=2000,
        )
        record = attack(gen, clf, sigma, z, y=0, t=1, config=config)
        assert record.status == STATUS_SUCCESS
        optimal = 2.0  # |u.z| / |u| for u = w_t - w_y, z as in the setup
        assert record.success_magnitude >= optimal - 1e-3
        assert record.success_magnitude <= optimal + config.bound_increment + 1e-3


def test_curve_and_table_oracle():
    """1,000 randomized record sets against brute-force recounts."""
    with criterion("curve/table oracle"):
        rng = np.random.default_rng(500)
        plateau_checked = 0
        for _ in range(1000):
            records, disp = random_record_set(rng)
            try:
                series = build_curve(records, disp)
            except ValueError:
                denom, _ = brute_force_curve(records, disp, [])
                assert denom == 0
                continue
            denom, props = brute_force_curve(records, disp, series.grid)
            assert series.denominator == denom
            assert series.proportion == pytest.approx(props)
            assert all(b >= a for a, b in zip(series.proportion, series.proportion[1:]))
            changed = [
                r for r in records
                if r.status == STATUS_SUCCESS and disp.get(r.tuple_id) == OUTCOME_CLASS_CHANGED
            ]
            if changed and series.proportion:
                assert series.proportion[-1] < 1.0
                plateau_checked += 1

            table = mean_magnitude_table(records, disp)
            for (clf_name, subset), value in table.items():
                mags = [
                    r.success_magnitude
                    for r in records
                    if r.status == STATUS_SUCCESS
                    and disp.get(r.tuple_id) == OUTCOME_SUCCESS
                    and (r.classifier or "") == clf_name
                    and r.layer_subset == subset
                ]
                if mags:
                    assert value == pytest.approx(sum(mags) / len(mags))
                else:
                    assert value is None

            grid = sorted(float(b) for b in rng.uniform(0, 40, size=5))
            rows = threshold_tradeoff(records, disp, grid)
            for bound, good, bad in rows:
                g = sum(
                    1 for r in records
                    if r.status == STATUS_SUCCESS and disp.get(r.tuple_id) == OUTCOME_SUCCESS
                    and r.success_magnitude <= bound
                )
                c = sum(
                    1 for r in records
                    if r.status == STATUS_SUCCESS
                    and disp.get(r.tuple_id) == OUTCOME_CLASS_CHANGED
                    and r.success_magnitude <= bound
                )
                assert (good, bad) == (g, c)
        assert plateau_checked > 100


def test_vote_aggregation_exhaustive():
    """All 4^5 stage-1 panels and every consequent stage-2 combination."""
    with criterion("vote aggregation oracle"):
        combos = 0
        for stage1 in itertools.product(CHOICES, repeat=5):
            keep = sum(1 for c in stage1 if c == 1)
            if keep < 3:
                assert decide_outcome(stage1, None) == oracle_outcome(stage1, ())
                combos += 1
                continue
            for stage2 in itertools.product(CHOICES, repeat=keep):
                assert decide_outcome(stage1, stage2) == oracle_outcome(stage1, stage2)
                combos += 1
        assert combos > 4**5


def test_replay_determinism(campaign, demo_setup):
    """Re-running a success tuple reproduces the record bit for bit."""
    with criterion("replay determinism"):
        gen, _, clf, _, sigma = demo_setup
        records, tuples, _ = campaign
        config = AttackConfig()
        wins = [r for r in records if r.status == STATUS_SUCCESS]
        assert wins
        for record in wins[:5]:
            y_sampled, z, t_sampled = tuples[record.tuple_id]
            replayed = attack(
                gen, clf, sigma, z, record.y, record.t, config,
                tuple_id=record.tuple_id, seed=record.seed,
            )
            assert replayed.status == record.status
            assert replayed.steps_taken == record.steps_taken
            assert replayed.success_magnitude == record.success_magnitude
