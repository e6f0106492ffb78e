import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesseldiff.autodiff import Tape, Tensor
from vesseldiff.edgediff import (DEGREE_SMOOTH, EdgeNoiseModel, EdgeProbBatch,
                                 PosteriorError, degree_loss, degree_loss_batch,
                                 edge_ce_loss_given, edge_marginal_from_graphs,
                                 edge_posterior, forward_noise_edges, one_hot,
                                 sample_edges)
from vesseldiff.graphs import SpatialGraph, validate
from vesseldiff.schedule import NoiseSchedule
from vesseldiff.selfcheck import posterior_bayes_oracle, random_schedule

from conftest import make_graph


def schedule_with(alphas):
    alphas = np.asarray(alphas, dtype=np.float64)
    return NoiseSchedule(T=len(alphas), alphas=alphas,
                         alpha_bars=np.concatenate([[1.0], np.cumprod(alphas)]),
                         family="test")


class TestTransitionMatrices:
    def test_identity_at_alpha_one(self):
        noise = EdgeNoiseModel(m=np.array([0.5, 0.3, 0.2]),
                               schedule=schedule_with([1.0, 0.5]))
        assert np.allclose(noise.build_transition(1), np.eye(3), atol=0)

    def test_marginal_rows_at_alpha_zero(self):
        m = np.array([0.5, 0.3, 0.2])
        noise = EdgeNoiseModel(m=m, schedule=schedule_with([0.0, 0.5]))
        assert np.allclose(noise.build_transition(1),
                           np.broadcast_to(m, (3, 3)), atol=0)

    def test_hand_computed_mixture_row(self):
        m = np.array([0.5, 0.3, 0.2])
        noise = EdgeNoiseModel(m=m, schedule=schedule_with([0.6]))
        q = noise.build_transition(1)
        assert np.allclose(q[0], [0.8, 0.12, 0.08], atol=1e-15)
        assert np.allclose(q.sum(axis=1), 1.0, atol=1e-12)

    def test_cumulative_identity_at_zero(self):
        noise = EdgeNoiseModel(m=np.array([0.7, 0.3]),
                               schedule=schedule_with([0.9, 0.8]))
        assert np.array_equal(noise.build_cumulative(0), np.eye(2))

    def test_cumulative_reaches_marginal(self, rng):
        m = rng.dirichlet(np.ones(4))
        sched = schedule_with(np.full(40, 0.8))  # abar_40 ~ 1.3e-4
        noise = EdgeNoiseModel(m=m, schedule=sched)
        rows = noise.build_cumulative(40)
        tv = 0.5 * np.abs(rows - m).sum(axis=1).max()
        assert tv < 1e-3

    def test_cumulative_matches_explicit_product(self, rng):
        sched = random_schedule(7, rng)
        m = rng.dirichlet(np.ones(4))
        noise = EdgeNoiseModel(m=m, schedule=sched)
        prod = np.eye(4)
        for t in range(1, 8):
            prod = prod @ noise.build_transition(t)
        assert np.abs(prod - noise.build_cumulative(7)).max() < 1e-10

    @given(st.integers(2, 14), st.integers(1, 30), st.integers(0, 10 ** 6))
    @settings(max_examples=60, deadline=None)
    def test_cumulative_closed_form_property(self, c, t, seed):
        rng = np.random.default_rng(seed)
        sched = random_schedule(t, rng)
        noise = EdgeNoiseModel(m=rng.dirichlet(np.ones(c)), schedule=sched)
        prod = np.eye(c)
        for s in range(1, t + 1):
            prod = prod @ noise.build_transition(s)
        closed = noise.build_cumulative(t)
        assert np.abs(prod - closed).max() < 1e-9
        assert np.abs(closed.sum(axis=1) - 1.0).max() < 1e-12

    def test_marginal_validation(self):
        with pytest.raises(ValueError):
            EdgeNoiseModel(m=np.array([0.5, 0.6]), schedule=schedule_with([0.5]))


class TestForwardNoise:
    def test_low_noise_step_rarely_flips(self):
        rng = np.random.default_rng(5)
        n = 50  # 1225 pairs
        m = np.array([0.7, 0.1, 0.1, 0.1])
        sched = schedule_with([0.995] + [0.5] * 9)
        noise = EdgeNoiseModel(m=m, schedule=sched)
        edges = np.zeros((n, n), dtype=np.int64)
        iu = np.triu_indices(n, k=1)
        labels = rng.integers(0, 4, size=iu[0].size)
        edges[iu] = labels
        edges[(iu[1], iu[0])] = labels
        corrupted = forward_noise_edges(edges, 1, noise, rng)
        flip_rate = (corrupted[iu] != edges[iu]).mean()
        assert flip_rate < 0.03

    def test_terminal_step_matches_marginal(self):
        rng = np.random.default_rng(6)
        m = np.array([0.6, 0.2, 0.15, 0.05])
        noise = EdgeNoiseModel(m=m, schedule=schedule_with(np.full(30, 0.7)))
        n = 80
        edges = np.zeros((n, n), dtype=np.int64)  # all background
        corrupted = forward_noise_edges(edges, 30, noise, rng)
        iu = np.triu_indices(n, k=1)
        counts = np.bincount(corrupted[iu], minlength=4)
        total = iu[0].size
        for c in range(4):
            sigma = math.sqrt(m[c] * (1 - m[c]) / total)
            assert abs(counts[c] / total - m[c]) < 3 * sigma + 1e-9

    def test_symmetry_and_background_diagonal(self, rng):
        noise = EdgeNoiseModel(m=np.array([0.5, 0.5]),
                               schedule=schedule_with([0.3, 0.3]))
        edges = np.zeros((7, 7), dtype=np.int64)
        out = forward_noise_edges(edges, 2, noise, rng)
        assert np.array_equal(out, out.T)
        assert np.all(np.diag(out) == 0)


class FixedLogitsModel:
    """Edge-denoiser stub returning preset logits."""

    def __init__(self, logits, num_classes):
        self.logits = np.asarray(logits, dtype=np.float64)
        class _Cfg:
            pass
        self.cfg = _Cfg()
        self.cfg.num_classes = num_classes

    def forward(self, params, e_t, coords, t, mask):
        return Tensor(self.logits)

    def predict_logits(self, e_t, coords, t, mask):
        b, n = mask.shape
        return np.broadcast_to(self.logits, (b, n, n, self.cfg.num_classes)).copy()


class TestCrossEntropy:
    def _setup(self):
        g = make_graph(np.zeros((3, 3)), [(0, 1, 1), (1, 2, 2)], 3)
        coords = np.zeros((1, 3, 3))
        mask = np.ones((1, 3), dtype=bool)
        return g, coords, mask

    def test_perfect_predictor_near_zero(self):
        g, coords, mask = self._setup()
        onehot = one_hot(g.edges, 3)
        logits = np.log(np.maximum(onehot, 1e-12))
        model = FixedLogitsModel(logits[None], 3)
        loss = edge_ce_loss_given(model, {}, g.edges[None], g.edges[None],
                                  coords, np.array([1]), mask)
        assert loss.item() < 1e-9

    def test_uniform_predictor_is_log_c(self):
        g, coords, mask = self._setup()
        model = FixedLogitsModel(np.zeros((1, 3, 3, 3)), 3)
        loss = edge_ce_loss_given(model, {}, g.edges[None], g.edges[None],
                                  coords, np.array([1]), mask)
        assert abs(loss.item() - math.log(3)) < 1e-12

    def test_sum_reduction_scales_by_pair_count(self):
        g, coords, mask = self._setup()
        model = FixedLogitsModel(np.zeros((1, 3, 3, 3)), 3)
        total = edge_ce_loss_given(model, {}, g.edges[None], g.edges[None],
                                   coords, np.array([1]), mask, reduction="sum")
        assert abs(total.item() - 3 * math.log(3)) < 1e-12


class TestDegreeLoss:
    def test_identical_prediction_is_zero(self, rng):
        g = make_graph(np.zeros((4, 3)), [(0, 1, 1), (1, 2, 1), (2, 3, 1)], 3)
        probs = one_hot(g.edges, 3)[None]
        batch = EdgeProbBatch(probs, np.ones((1, 4), dtype=bool))
        loss = degree_loss(batch, g.edges[None], temperature=1.0, rng=rng, hard=True)
        assert loss.item() < 1e-6

    def test_contrasting_point_masses(self, rng):
        # target: all background (degrees 0); prediction: full class-1 clique
        # on 4 nodes (degrees 3). Smoothed KL is ln(1/eps)-scale.
        n = 4
        target = np.zeros((1, n, n), dtype=np.int64)
        clique = np.ones((n, n), dtype=np.int64) - np.eye(n, dtype=np.int64)
        probs = one_hot(clique, 3)[None]
        batch = EdgeProbBatch(probs, np.ones((1, n), dtype=bool))
        loss = degree_loss(batch, target, temperature=1.0, rng=rng, hard=True)
        assert loss.item() > 1.0
        # same scale as the closed form for two smoothed point masses
        k_bins = 10
        eps = DEGREE_SMOOTH
        expect = ((1 + eps) / (1 + k_bins * eps)) * math.log((1 + eps) / eps)
        assert loss.item() > 0.5 * expect

    def test_gradient_reaches_logits(self, rng):
        n = 5
        tape = Tape()
        logits = tape.leaf(rng.normal(size=(1, n, n, 3)))
        target = np.zeros((1, n, n), dtype=np.int64)
        target[0, 0, 1] = target[0, 1, 0] = 1
        loss = degree_loss_batch(logits, target, np.ones((1, n), dtype=bool),
                                 temperature=1.0, rng=rng, hard=True)
        tape.backward(loss)
        assert np.abs(logits.grad).max() > 0.0

    def test_temperature_validation(self, rng):
        with pytest.raises(ValueError, match="temperature"):
            degree_loss_batch(Tensor(np.zeros((1, 3, 3, 2))),
                              np.zeros((1, 3, 3), dtype=np.int64),
                              np.ones((1, 3), dtype=bool), temperature=0.0,
                              rng=rng)

    def test_hard_forward_matches_exact_histogram_kl(self, rng):
        # With hard sampling the forward value must equal the plain histogram
        # KL computed from the sampled integer degrees.
        n, c = 6, 3
        logits_val = rng.normal(size=(1, n, n, c)) * 3
        noise = rng.gumbel(size=(1, n, n, c))
        target = np.zeros((1, n, n), dtype=np.int64)
        target[0, 0, 1] = target[0, 1, 0] = 2
        loss = degree_loss_batch(Tensor(logits_val), target,
                                 np.ones((1, n), dtype=bool), 1.0,
                                 noise=noise, hard=True)
        # oracle: replicate the sampled hard edges then histogram directly
        pert = (logits_val + noise) / 1.0
        hard_cls = pert.argmax(axis=-1)
        iu = np.triu_indices(n, k=1)
        sym = np.zeros((n, n), dtype=np.int64)
        sym[iu] = hard_cls[0][iu]
        sym[(iu[1], iu[0])] = hard_cls[0][iu]
        deg_pred = (sym != 0).sum(axis=1)
        deg_tgt = (target[0] != 0).sum(axis=1)
        eps = DEGREE_SMOOTH
        bins = 10
        h_pred = np.bincount(np.minimum(deg_pred, 9), minlength=bins) / n
        h_tgt = np.bincount(np.minimum(deg_tgt, 9), minlength=bins) / n
        sp = (h_pred + eps) / (1 + bins * eps)
        st_ = (h_tgt + eps) / (1 + bins * eps)
        want = float(np.sum(st_ * (np.log(st_) - np.log(sp))))
        assert abs(loss.item() - want) < 1e-9


class TestPosterior:
    def test_matches_bayes_enumeration(self, rng):
        for _ in range(200):
            c = int(rng.integers(2, 5))
            sched = random_schedule(12, rng)
            noise = EdgeNoiseModel(m=rng.dirichlet(np.ones(c)), schedule=sched)
            t = int(rng.integers(1, 13))
            obs = int(rng.integers(c))
            e0_hat = rng.dirichlet(np.ones(c))
            got = edge_posterior(one_hot(np.array(obs), c), e0_hat, t, noise)
            want = posterior_bayes_oracle(obs, e0_hat, t, list(noise.Q))
            assert np.abs(got - want).max() < 1e-10
            assert abs(got.sum() - 1.0) < 1e-9

    def test_first_step_uses_identity_cumulative(self, rng):
        c = 4
        noise = EdgeNoiseModel(m=rng.dirichlet(np.ones(c)),
                               schedule=random_schedule(5, rng))
        obs = 2
        e0_hat = rng.dirichlet(np.ones(c))
        got = edge_posterior(one_hot(np.array(obs), c), e0_hat, 1, noise)
        num = noise.build_transition(1).T[obs] * e0_hat
        assert np.allclose(got, num / num.sum(), atol=1e-12)

    def test_point_mass_with_identity_transition(self):
        # With alpha = 1 the chain never moves, so any prediction that puts
        # mass on the observed class collapses onto it.
        sched = schedule_with([1.0, 1.0])
        noise = EdgeNoiseModel(m=np.array([0.5, 0.3, 0.2]), schedule=sched)
        got = edge_posterior(one_hot(np.array(2), 3), one_hot(np.array(2), 3),
                             1, noise)
        assert np.array_equal(got, one_hot(np.array(2), 3))
        got = edge_posterior(one_hot(np.array(2), 3),
                             np.array([0.3, 0.3, 0.4]), 2, noise)
        assert np.array_equal(got, one_hot(np.array(2), 3))

    def test_zero_normalizer_raises(self):
        sched = schedule_with([1.0])
        noise = EdgeNoiseModel(m=np.array([0.5, 0.5]), schedule=sched)
        # identity transition and a prediction with zero mass on the observed
        # class gives an impossible pair
        with pytest.raises(PosteriorError, match="zero posterior normalizer"):
            edge_posterior(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 1, noise)


class TestSampleEdges:
    def test_single_node_graph(self, rng):
        noise = EdgeNoiseModel(m=np.array([0.9, 0.1]),
                               schedule=schedule_with([0.5] * 3))
        model = FixedLogitsModel(np.zeros((1, 1, 1, 2)), 2)
        edges = sample_edges(model, np.zeros((1, 3)), noise, rng)
        assert edges.shape == (1, 1)
        g = SpatialGraph(coords=np.zeros((1, 3)), edges=edges, num_classes=2)
        assert validate(g) == []

    def test_background_oracle_clears_graph(self, rng):
        c = 3
        sched = schedule_with(np.linspace(0.95, 0.2, 40))
        noise = EdgeNoiseModel(m=np.array([0.5, 0.3, 0.2]), schedule=sched)
        onehot_bg = np.zeros((1, 6, 6, c))
        onehot_bg[..., 0] = 1.0
        logits = np.log(np.maximum(onehot_bg, 1e-12))
        model = FixedLogitsModel(logits, c)
        edges = sample_edges(model, rng.uniform(size=(6, 3)), noise, rng)
        assert edges.sum() == 0

    def test_validity_and_determinism(self, rng):
        c = 4
        sched = schedule_with(np.linspace(0.99, 0.3, 12))
        noise = EdgeNoiseModel(m=np.array([0.4, 0.3, 0.2, 0.1]), schedule=sched)
        logits = np.zeros((1, 5, 5, c))
        model = FixedLogitsModel(logits, c)
        coords = np.random.default_rng(0).uniform(size=(5, 3))
        e1 = sample_edges(model, coords, noise, np.random.default_rng(9))
        e2 = sample_edges(model, coords, noise, np.random.default_rng(9))
        assert np.array_equal(e1, e2)
        g = SpatialGraph(coords=coords, edges=e1, num_classes=c)
        assert validate(g) == []


def test_total_loss_is_exact_sum_of_parts(rng):
    from vesseldiff.edgediff import edge_total_loss_given
    from vesseldiff.selfcheck import tiny_edge_model
    from vesseldiff.edgediff import corrupt_edge_batch

    c, n = 3, 5
    model = tiny_edge_model(np.random.default_rng(0), c)
    sched = schedule_with(np.linspace(0.95, 0.4, 6))
    noise = EdgeNoiseModel(m=np.array([0.6, 0.25, 0.15]), schedule=sched)
    edges0 = make_graph(np.zeros((n, 3)),
                        [(0, 1, 1), (1, 2, 2), (2, 3, 1)], c).edges[None]
    mask = np.ones((1, n), dtype=bool)
    t = np.array([4])
    e_t = corrupt_edge_batch(edges0, mask, t, noise, rng)
    coords = rng.uniform(-1, 1, (1, n, 3))
    gnoise = rng.gumbel(size=(1, n, n, c))
    w = 0.7
    total = edge_total_loss_given(model, model.store.bind(None), edges0, e_t,
                                  coords, t, mask, gumbel_noise=gnoise,
                                  degree_weight=w).item()
    ce = edge_ce_loss_given(model, model.store.bind(None), edges0, e_t,
                            coords, t, mask).item()
    logits = model.predict_logits(one_hot(e_t, c), coords, t,
                                  mask.astype(np.float64))
    deg = degree_loss_batch(Tensor(logits), edges0, mask, 1.0,
                            noise=gnoise, hard=True).item()
    assert total == ce + w * deg


def test_edge_marginal_counts_background(rng):
    g1 = make_graph(np.zeros((3, 3)), [(0, 1, 1)], 3)   # 3 pairs, 1 edge
    g2 = make_graph(np.zeros((2, 3)), [], 3)            # 1 pair, 0 edges
    m = edge_marginal_from_graphs([g1, g2], 3)
    assert np.allclose(m, [3 / 4, 1 / 4, 0.0])
    assert abs(m.sum() - 1.0) < 1e-12


def test_edge_prob_batch_mirrors_upper_triangle(rng):
    probs = np.zeros((1, 3, 3, 2))
    probs[..., 0] = 1.0
    probs[0, 0, 1] = [0.2, 0.8]
    probs[0, 1, 0] = [0.9, 0.1]  # inconsistent lower triangle gets overwritten
    b = EdgeProbBatch(probs, np.ones((1, 3), dtype=bool))
    assert np.allclose(b.probs[0, 1, 0], [0.2, 0.8])
