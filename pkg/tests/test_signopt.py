import math

import numpy as np
import pytest

from helpers import BlackBoxShim, random_linear_oracle
from sparsevid.errors import (DirectionUnusable, InitializationFailure,
                              InputRejected)
from sparsevid.oracle import linear_boundary_distance
from sparsevid.policy import build_policy, build_value
from sparsevid.saliency import SpatialParams, init_spatial_mask
from sparsevid.signopt import (AttackConfig, Direction, attack,
                               boundary_distance, estimate_gradient,
                               init_direction, probe_sign)

SHAPE = (2, 6, 6, 2)
DIM = int(np.prod(SHAPE))


def adversarial_setup(seed, weight_scale=0.15):
    """Linear oracle and a direction with a known small positive crossing."""
    rng = np.random.default_rng(seed)
    x = np.full(SHAPE, 0.5)
    while True:
        oracle = random_linear_oracle(rng, SHAPE, 2, weight_scale=weight_scale,
                                      bias_scale=0.1)
        from_label = oracle.query(x).label
        oracle.counter = type(oracle.counter)()  # fresh counter
        d = rng.normal(size=SHAPE)
        d /= np.linalg.norm(d)
        lam = linear_boundary_distance(oracle, x, d, from_label, lam_max=0.4)
        if lam is not None and lam > 0.02:
            return oracle, x, d, from_label, lam


class TestBoundaryDistance:
    def test_matches_closed_form(self):
        for seed in range(8):
            oracle, x, d, from_label, lam = adversarial_setup(seed)
            got, queries = boundary_distance(
                oracle, x, Direction(d), "untargeted", from_label,
                tol=1e-4, seed=0.05, growth=2.0)
            assert abs(got - lam) / lam <= 1e-3
            assert queries == oracle.counter.count

    def test_midpoint_boundary_construction(self):
        # one-hot score gap: boundary exactly halfway to a known point
        w = np.zeros((2, *SHAPE))
        w[1].flat[0] = 1.0
        oracle = random_linear_oracle(np.random.default_rng(0), SHAPE, 2)
        oracle.weights[...] = w
        oracle.biases[...] = np.array([0.6, 0.0])
        oracle._w_flat = oracle.weights.reshape(2, -1)
        x = np.zeros(SHAPE)
        mate = np.zeros(SHAPE)
        mate.flat[0] = 1.2  # score 1.2 > 0.6: adversarial, boundary at 0.6
        d = mate - x
        dist = float(np.linalg.norm(d))
        got, _ = boundary_distance(oracle, x, Direction(d), "untargeted", 0,
                                   tol=1e-5, known_hi=dist)
        assert got == pytest.approx(dist / 2, rel=1e-4)

    def test_halving_tolerance_adds_exactly_one_query(self):
        oracle, x, d, from_label, _ = adversarial_setup(3)
        counts = []
        for tol in (1e-2, 5e-3, 2.5e-3):
            _, queries = boundary_distance(
                oracle, x, Direction(d), "untargeted", from_label,
                tol=tol, known_hi=0.5)
            counts.append(queries)
        assert counts[1] == counts[0] + 1
        assert counts[2] == counts[1] + 1

    def test_unusable_direction_raises(self):
        w = np.zeros((2, *SHAPE))
        w[0].flat[0] = 1.0
        oracle = random_linear_oracle(np.random.default_rng(1), SHAPE, 2)
        oracle.weights[...] = w
        oracle.biases[...] = np.array([1.0, 0.0])
        oracle._w_flat = oracle.weights.reshape(2, -1)
        x = np.full(SHAPE, 0.5)
        d = np.zeros(SHAPE)
        d.flat[1] = 1.0  # orthogonal to every score difference
        with pytest.raises(DirectionUnusable):
            boundary_distance(oracle, x, Direction(d), "untargeted", 0,
                              seed=0.01, growth=2.0, growth_limit=12)

    def test_requires_bracket_or_seed(self):
        oracle, x, d, from_label, _ = adversarial_setup(4)
        with pytest.raises(InputRejected):
            boundary_distance(oracle, x, Direction(d), "untargeted", from_label)


class TestProbeSign:
    def closed_form_sign(self, oracle, x, theta, from_label, u, eps):
        g0 = linear_boundary_distance(oracle, x, theta / np.linalg.norm(theta),
                                      from_label, lam_max=None)
        pert = theta + eps * u
        g1 = linear_boundary_distance(oracle, x, pert / np.linalg.norm(pert),
                                      from_label, lam_max=None)
        if g1 is None:
            return 1
        return -1 if g1 < g0 else 1

    def test_agrees_with_closed_form(self):
        oracle, x, d, from_label, lam = adversarial_setup(5)
        rng = np.random.default_rng(6)
        agree = 0
        trials = 300
        for _ in range(trials):
            u = rng.standard_normal(SHAPE)
            got = probe_sign(oracle, x, Direction(d), lam, u, 1e-3,
                             "untargeted", from_label)
            want = self.closed_form_sign(oracle, x, d, from_label, u, 1e-3)
            agree += got == want
        assert agree / trials >= 0.99

    def test_negated_probe_flips_sign(self):
        oracle, x, d, from_label, lam = adversarial_setup(7)
        rng = np.random.default_rng(8)
        flips = 0
        for _ in range(50):
            u = rng.standard_normal(SHAPE)
            a = probe_sign(oracle, x, Direction(d), lam, u, 1e-3,
                           "untargeted", from_label)
            b = probe_sign(oracle, x, Direction(d), lam, -u, 1e-3,
                           "untargeted", from_label)
            flips += a != b
        assert flips >= 45  # ties are possible but rare

    def test_single_query(self):
        oracle, x, d, from_label, lam = adversarial_setup(9)
        before = oracle.counter.count
        probe_sign(oracle, x, Direction(d), lam,
                   np.random.default_rng(0).standard_normal(SHAPE), 1e-3,
                   "untargeted", from_label)
        assert oracle.counter.count == before + 1


class TestEstimateGradient:
    def test_single_probe_returns_signed_probe(self):
        oracle, x, d, from_label, lam = adversarial_setup(10)
        cfg = AttackConfig(grad_samples=1)
        rng_a = np.random.default_rng(11)
        ghat, queries = estimate_gradient(oracle, x, Direction(d), lam, cfg,
                                          rng_a, from_label)
        rng_b = np.random.default_rng(11)
        u = rng_b.standard_normal(SHAPE)
        assert queries == 1
        assert np.array_equal(ghat, u) or np.array_equal(ghat, -u)

    def test_masked_probes_stay_in_subspace(self):
        oracle, x, d, from_label, lam = adversarial_setup(12)
        mask = np.zeros(SHAPE)
        mask[0] = 1.0
        cfg = AttackConfig(grad_samples=5)
        ghat, _ = estimate_gradient(oracle, x, Direction(d), lam, cfg,
                                    np.random.default_rng(13), from_label,
                                    mask=mask)
        assert not ghat[1:].any()

    def test_gradient_correlates_with_true_normal(self):
        # 2-class linear oracle: grad of the distance points along w0-w1
        rng = np.random.default_rng(14)
        oracle, x, d, from_label, lam = adversarial_setup(14)
        w_gap = (oracle.weights[1 - from_label] - oracle.weights[from_label])
        cfg = AttackConfig(grad_samples=100)
        ghat, _ = estimate_gradient(oracle, x, Direction(d), lam, cfg, rng,
                                    from_label)
        # moving toward the other class's weight gradient shrinks the distance,
        # so the sign-estimate must anti-correlate with it
        cos = (ghat.ravel() @ w_gap.ravel()) / (
            np.linalg.norm(ghat) * np.linalg.norm(w_gap))
        assert cos < -0.2


class TestInitDirection:
    def build_candidates(self, oracle, x, from_label, rng, n=5):
        cands = []
        for _ in range(n):
            mate = np.clip(x + rng.normal(scale=0.5, size=SHAPE), 0, 1)
            cands.append((mate, np.ones(SHAPE)))
        return cands

    def test_single_valid_candidate_is_returned(self):
        oracle, x, d, from_label, lam = adversarial_setup(15)
        mate = np.clip(x + 0.45 * d / np.abs(d).max(), 0, 1)
        if oracle.query(mate).label == from_label:
            pytest.skip("constructed candidate not adversarial for this seed")
        direction, mask, dist, queries = init_direction(
            oracle, x, [(mate, np.ones(SHAPE))], "untargeted", from_label)
        np.testing.assert_allclose(
            direction.unit(), (mate - x) / np.linalg.norm(mate - x), atol=1e-12)

    def test_exhaustive_sweep_finds_minimum(self):
        oracle, x, d, from_label, lam = adversarial_setup(16)
        rng = np.random.default_rng(17)
        cands = self.build_candidates(oracle, x, from_label, rng, n=8)
        cfg = AttackConfig(mode="untargeted", select_by="map", search_tol=1e-4)
        try:
            direction, mask, dist, _ = init_direction(
                oracle, x, cands, "untargeted", from_label, cfg=cfg)
        except InitializationFailure:
            pytest.skip("no valid candidates for this seed")
        # exhaustive re-evaluation with the same rule
        from sparsevid.signopt import perturbation_map
        best = math.inf
        for mate, m in cands:
            diff = (mate - x) * m
            if oracle.query(np.clip(x + diff, 0, 1)).label == from_label:
                continue
            dd = Direction(diff)
            dist_i, _ = boundary_distance(oracle, x, dd, "untargeted",
                                          from_label, tol=1e-4,
                                          known_hi=float(np.linalg.norm(diff)))
            best = min(best, perturbation_map(x, dist_i, dd.unit()))
        got_score = perturbation_map(x, dist, direction.unit())
        assert got_score == pytest.approx(best, rel=1e-6)

    def test_no_valid_candidate_raises(self):
        oracle, x, d, from_label, lam = adversarial_setup(18)
        mate = x.copy()  # zero difference: never adversarial
        with pytest.raises(InitializationFailure):
            init_direction(oracle, x, [(mate, np.ones(SHAPE))], "untargeted",
                           from_label)
        with pytest.raises(InitializationFailure):
            init_direction(oracle, x, [], "untargeted", from_label)


def smoke_attack_setup(seed=20):
    rng = np.random.default_rng(seed)
    x = np.full(SHAPE, 0.5)
    while True:
        oracle = random_linear_oracle(rng, SHAPE, 2, weight_scale=0.12,
                                      bias_scale=0.05)
        label = oracle.query(x).label
        oracle.counter = type(oracle.counter)()
        pool = []
        for _ in range(30):
            mate = np.clip(x + rng.normal(scale=0.3, size=SHAPE), 0, 1)
            if oracle.query(mate).label != label:
                pool.append(mate)
        oracle.counter = type(oracle.counter)()
        if len(pool) >= 6:
            return oracle, x, label, np.asarray(pool)


class TestAttack:
    def test_untargeted_attack_succeeds_and_accounts_queries(self):
        oracle, x, label, pool = smoke_attack_setup()
        shim = BlackBoxShim(oracle)
        cfg = AttackConfig(mode="untargeted", num_candidates=4,
                           max_iterations=10, grad_samples=5, map_bound=1e-9,
                           query_budget=5000, mask_mode="dense")
        result = attack(shim, x, pool, cfg, label,
                        rng=np.random.default_rng(21))
        assert result.success
        assert oracle.query(result.x_adv).label != label
        # attack-reported queries equal the shim-counted invocations
        assert result.queries == shim.calls[0]
        assert result.queries == (result.queries_finetune + result.queries_init
                                  + result.queries_descent + result.queries_verify)

    def test_mask_closure_spatial_mode(self):
        oracle, x, label, pool = smoke_attack_setup(22)
        cfg = AttackConfig(mode="untargeted", num_candidates=4,
                           max_iterations=6, grad_samples=5, map_bound=1e-9,
                           query_budget=4000, mask_mode="spatial", phi=0.4,
                           scales=(1,))
        result = attack(oracle, x, pool, cfg, label,
                        rng=np.random.default_rng(23))
        assert result.success
        delta = result.x_adv - x
        assert not delta[result.mask == 0].any()
        assert result.sparsity > 0.0

    def test_dense_mask_has_zero_sparsity(self):
        oracle, x, label, pool = smoke_attack_setup(24)
        cfg = AttackConfig(mode="untargeted", num_candidates=3,
                           max_iterations=3, grad_samples=4, map_bound=1e-9,
                           query_budget=3000, mask_mode="dense")
        result = attack(oracle, x, pool, cfg, label,
                        rng=np.random.default_rng(25))
        assert result.sparsity == 0.0
        assert result.mask.all()

    def test_zero_step_size_keeps_distance_flat(self):
        oracle, x, label, pool = smoke_attack_setup(26)
        cfg = AttackConfig(mode="untargeted", num_candidates=3,
                           max_iterations=5, grad_samples=3, map_bound=1e-9,
                           query_budget=3000, mask_mode="dense",
                           step_size=1e-300, backtrack_halvings=0)
        result = attack(oracle, x, pool, cfg, label,
                        rng=np.random.default_rng(27))
        distances = [row["distance"] for row in result.trace]
        base = distances[0]
        for d in distances[1:]:
            assert d <= base * (1 + 1e-9)
            assert d >= base * (1 - 3 * cfg.search_tol)

    def test_best_distance_is_non_increasing(self):
        oracle, x, label, pool = smoke_attack_setup(28)
        cfg = AttackConfig(mode="untargeted", num_candidates=4,
                           max_iterations=12, grad_samples=5, map_bound=1e-9,
                           query_budget=6000, mask_mode="dense")
        result = attack(oracle, x, pool, cfg, label,
                        rng=np.random.default_rng(29))
        distances = [row["distance"] for row in result.trace]
        assert all(b <= a + 1e-12 for a, b in zip(distances, distances[1:]))

    def test_rl_mode_with_uniform_policy(self):
        oracle, x, label, pool = smoke_attack_setup(30)
        rng = np.random.default_rng(31)
        policy = build_policy(*SHAPE, rng)
        cfg = AttackConfig(mode="untargeted", num_candidates=4,
                           max_iterations=4, grad_samples=4, map_bound=1e-9,
                           query_budget=4000, mask_mode="rl", phi=0.5,
                           scales=(1,))
        result = attack(oracle, x, pool, cfg, label, policy=policy,
                        rng=np.random.default_rng(32))
        assert result.success
        delta = result.x_adv - x
        assert not delta[result.mask == 0].any()

    def test_empty_pool_reports_failure(self):
        oracle, x, label, pool = smoke_attack_setup(33)
        cfg = AttackConfig(mode="untargeted", num_candidates=3,
                           mask_mode="dense")
        result = attack(oracle, x, np.empty((0, *SHAPE)), cfg, label,
                        rng=np.random.default_rng(34))
        assert not result.success
        assert result.stop_reason == "empty candidate pool"
