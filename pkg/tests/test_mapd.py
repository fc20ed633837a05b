import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from mapdkit.mapd import (
    AutoEncoder,
    DecisionSample,
    DistanceMatrix,
    ae_loss,
    decode,
    distance_matrix,
    encode,
    hellinger_categorical,
    kl_to_standard_normal,
    mean_loss,
    pad_to_common,
    pairwise_policy_distance,
    train_autoencoder,
    w2_diag_gaussian,
    wasserstein_1d_categorical,
)
from mapdkit.numerics import LatentGaussian, Mlp, softmax


def ot_w2(mp, sp, mq, sq, n, rng):
    """Empirical W2 between sample clouds via an exact assignment solve."""
    x = mp + sp * rng.standard_normal((n, len(mp)))
    y = mq + sq * rng.standard_normal((n, len(mq)))
    cost = cdist(x, y, "sqeuclidean")
    r, c = linear_sum_assignment(cost)
    return float(np.sqrt(cost[r, c].mean()))


def kl_quad(mu, sigma):
    def integrand(x):
        logp = -0.5 * ((x - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * np.log(2 * np.pi)
        logq = -0.5 * x * x - 0.5 * np.log(2 * np.pi)
        return np.exp(logp) * (logp - logq)
    return integrate.quad(integrand, mu - 30 * sigma, mu + 30 * sigma, epsabs=1e-13, epsrel=1e-12, limit=200)[0]


def random_policies(rng, n, m, a):
    return softmax(rng.normal(scale=2.0, size=(n, m, a)))


def test_pad_to_common():
    assert pad_to_common([1, 2], 4).tolist() == [1, 2, 0, 0]
    assert pad_to_common([1, 2, 3], 3).tolist() == [1, 2, 3]
    p = pad_to_common([0.5, 0.5], 5)
    assert p.tolist() == [0.5, 0.5, 0, 0, 0] and p.sum() == 1.0
    with pytest.raises(ValueError):
        pad_to_common([1, 2, 3], 2)


def test_categorical_baselines():
    a, b, c = np.eye(5)[0], np.eye(5)[3], np.eye(5)[4]
    assert wasserstein_1d_categorical(a, b) == 3
    assert wasserstein_1d_categorical(b, c) == 1
    assert wasserstein_1d_categorical(a, a) == 0
    assert hellinger_categorical(a, b) == 1
    assert hellinger_categorical(b, c) == 1
    assert hellinger_categorical(c, c) == 0
    with pytest.raises(ValueError):
        wasserstein_1d_categorical([0.5, 0.6], [1.0, 0.0])
    with pytest.raises(ValueError):
        hellinger_categorical([1.0, 0.0], [1.0, 0.0, 0.0])


def test_w1_depends_on_action_labels():
    a, b = np.eye(5)[0], np.eye(5)[3]
    perm = [0, 3, 1, 2, 4]
    # moving action 3 next to action 0 changes W1 but not Hellinger
    assert wasserstein_1d_categorical(a[perm], b[perm]) == 1
    assert hellinger_categorical(a[perm], b[perm]) == 1


def test_kl_examples():
    assert kl_to_standard_normal(LatentGaussian([0.0], [0.0])) == 0.0
    assert kl_to_standard_normal(LatentGaussian([1.0], [0.0])) == pytest.approx(0.5, abs=1e-15)
    g = LatentGaussian.from_std([0.0], [2.0])
    assert kl_to_standard_normal(g) == pytest.approx(0.5 * (4 - 1 - 2 * np.log(2)), abs=1e-15)
    assert kl_to_standard_normal(g) == pytest.approx(0.80685, abs=1e-5)
    assert kl_to_standard_normal(g) == pytest.approx(kl_quad(0.0, 2.0), abs=1e-9)


def test_w2_examples_against_ot():
    rng = np.random.default_rng(0)
    p = LatentGaussian([3.0, 4.0])
    q = LatentGaussian([0.0, 0.0])
    assert w2_diag_gaussian(p, q) == 5.0
    assert ot_w2(p.mean, p.std, q.mean, q.std, 2000, rng) == pytest.approx(5.0, rel=0.03)
    p, q = LatentGaussian.from_std([0.0], [1.0]), LatentGaussian.from_std([0.0], [3.0])
    assert w2_diag_gaussian(p, q) == pytest.approx(2.0, abs=1e-15)
    assert ot_w2(p.mean, p.std, q.mean, q.std, 2000, rng) == pytest.approx(2.0, rel=0.03)
    assert w2_diag_gaussian(p, p) == 0.0
    with pytest.raises(ValueError):
        w2_diag_gaussian(LatentGaussian([0.0]), LatentGaussian([0.0, 0.0]))


def test_w2_batched_and_symmetric():
    rng = np.random.default_rng(1)
    p = LatentGaussian(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
    q = LatentGaussian(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
    w = w2_diag_gaussian(p, q)
    assert w.shape == (4,)
    assert np.array_equal(w, w2_diag_gaussian(q, p))


def test_zero_encoder_gives_prior_and_zero_decoder_uniform():
    ae = AutoEncoder.create(5, 3, np.random.default_rng(0), latent_dim=4, hidden=(8,))
    ae.encoder = Mlp.zeros(ae.encoder.sizes)
    ae.decoder = Mlp.zeros(ae.decoder.sizes)
    lat = encode(ae, np.eye(5)[2], [0.1, 0.2, 0.3])
    assert np.array_equal(lat.mean, np.zeros(4)) and np.array_equal(lat.std, np.ones(4))
    assert np.allclose(decode(ae, np.ones(4), [0.1, 0.2, 0.3]), 0.2)


def test_encode_deterministic_and_checks_dims():
    ae = AutoEncoder.create(5, 3, np.random.default_rng(0))
    d, o = softmax(np.arange(5.0)), np.array([0.1, -0.2, 0.3])
    a, b = encode(ae, d, o), encode(ae, d, o)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.log_std, b.log_std)
    with pytest.raises(ValueError):
        encode(ae, np.ones(4) / 4, o)


def test_decode_is_distribution():
    rng = np.random.default_rng(2)
    ae = AutoEncoder.create(5, 3, rng)
    out = decode(ae, rng.normal(size=(20, 8)) * 5, rng.normal(size=(20, 3)))
    assert np.all(out >= 0) and np.allclose(out.sum(-1), 1.0, atol=1e-9)


def test_loss_zero_at_perfect_reconstruction_and_prior():
    ae = AutoEncoder.create(3, 2, np.random.default_rng(0), latent_dim=2, hidden=(4,))
    ae.encoder = Mlp.zeros(ae.encoder.sizes)
    ae.decoder = Mlp.zeros(ae.decoder.sizes)
    loss, _, _, parts = ae_loss(ae, np.ones(3) / 3, [0.5, 0.5], noise=np.zeros((1, 2)))
    assert loss == 0.0 and parts["kl"] == 0.0


def test_loss_kl_part_matches_closed_form():
    ae = AutoEncoder.create(3, 2, np.random.default_rng(0), latent_dim=1, hidden=(4,))
    ae.encoder = Mlp.zeros(ae.encoder.sizes)
    ae.encoder.biases[-1][:] = [1.0, 0.0]  # posterior N(1, 1)
    _, _, _, parts = ae_loss(ae, np.ones(3) / 3, [0.5, 0.5], noise=np.zeros((1, 1)))
    assert parts["kl"] == pytest.approx(0.5, abs=1e-15)
    assert parts["kl"] == pytest.approx(kl_quad(1.0, 1.0), abs=1e-9)


@pytest.mark.parametrize("head", ["categorical", "gaussian"])
def test_ae_loss_gradient_finite_differences(head):
    rng = np.random.default_rng(3)
    ae = AutoEncoder.create(4, 3, rng, latent_dim=2, hidden=(5,), head=head, feature_dim=2)
    dist = softmax(rng.normal(size=(6, 4)))
    obs = rng.normal(size=(6, 3))
    target = None if head == "categorical" else rng.normal(size=(6, 2))
    noise = rng.standard_normal((6, 2))
    _, ge, gd, _ = ae_loss(ae, dist, obs, target, noise=noise)
    h = 1e-6
    for net, grad in ((ae.encoder, ge), (ae.decoder, gd)):
        flat = net.get_flat()
        for k in range(flat.size):
            vals = []
            for sign in (1, -1):
                p = flat.copy()
                p[k] += sign * h
                net.set_flat(p)
                vals.append(ae_loss(ae, dist, obs, target, noise=noise)[0])
            net.set_flat(flat)
            num = (vals[0] - vals[1]) / (2 * h)
            assert abs(grad[k] - num) <= 1e-4 * max(abs(num), 1e-4)


def test_ae_loss_needs_noise_source():
    ae = AutoEncoder.create(3, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        ae_loss(ae, np.ones(3) / 3, [0.0, 0.0])


def decision_set(rng, n=15, m=100, a=5, d=6):
    obs = rng.normal(size=(m, d))
    return obs, random_policies(rng, n, m, a)


def test_training_reduces_loss_and_is_deterministic():
    obs, dists = decision_set(np.random.default_rng(4), n=5, m=40)
    data = (np.tile(obs, (5, 1)), dists.reshape(-1, 5))
    a = train_autoencoder(data, np.random.default_rng(7), epochs=30)
    b = train_autoencoder(data, np.random.default_rng(7), epochs=30)
    assert a.loss_history[-1] < a.loss_history[0]
    assert np.array_equal(a.encoder.get_flat(), b.encoder.get_flat())
    assert np.array_equal(a.decoder.get_flat(), b.decoder.get_flat())


def test_training_loss_decreases_on_most_seeds():
    decreased = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        obs, dists = decision_set(rng, n=3, m=20, d=4)
        ae = train_autoencoder((np.tile(obs, (3, 1)), dists.reshape(-1, 5)), rng, epochs=200, hidden=(16, 16))
        decreased += ae.loss_history[-1] < ae.loss_history[0]
    assert decreased >= 19


def test_training_1500_samples_under_a_minute():
    rng = np.random.default_rng(5)
    obs, dists = decision_set(rng, n=15, m=100, d=39)
    samples = [DecisionSample(i, obs[s], dists[i, s], s) for s in range(100) for i in range(15)]
    t0 = time.perf_counter()
    train_autoencoder(samples, rng)
    assert time.perf_counter() - t0 < 60


def test_memorized_sample_has_low_loss():
    rng = np.random.default_rng(6)
    obs, dists = decision_set(rng, n=4, m=25, d=4)
    o, d = np.tile(obs, (4, 1)), dists.reshape(-1, 5)
    o2 = np.concatenate([o, np.repeat(o[:1], 100, axis=0)])
    d2 = np.concatenate([d, np.repeat(d[:1], 100, axis=0)])
    ae = train_autoencoder((o2, d2), rng, epochs=60)
    one = mean_loss(ae, o[:1], d[:1])
    assert one < mean_loss(ae, o, d)


def test_heldout_reconstruction_within_training_spread():
    rng = np.random.default_rng(8)
    obs, dists = decision_set(rng, n=4, m=60, d=4)
    o, d = np.tile(obs, (4, 1)), dists.reshape(-1, 5)
    ae = train_autoencoder((o[:200], d[:200]), rng, epochs=100)
    train_losses = [mean_loss(ae, o[k:k + 1], d[k:k + 1], rng=np.random.default_rng(k)) for k in range(200)]
    held = mean_loss(ae, o[200:], d[200:])
    assert held < np.mean(train_losses) + 3 * np.std(train_losses)


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        train_autoencoder([], np.random.default_rng(0))


def trained(rng, n=5, m=30, a=5, d=4, epochs=20):
    obs, dists = decision_set(rng, n=n, m=m, a=a, d=d)
    ae = train_autoencoder((np.tile(obs, (n, 1)), dists.reshape(-1, a)), rng, epochs=epochs, hidden=(16, 16))
    return ae, obs, dists


def test_pairwise_distance_basics():
    rng = np.random.default_rng(9)
    ae, obs, dists = trained(rng)
    assert pairwise_policy_distance(ae, 2, 2, obs, dists) == 0.0
    twin = dists.copy()
    twin[1] = twin[0]
    assert pairwise_policy_distance(ae, 0, 1, obs, twin) <= 1e-9
    assert pairwise_policy_distance(ae, 0, 3, obs, dists) > 0
    dm = distance_matrix(ae, obs, dists)
    assert dm.values[0, 3] == pytest.approx(pairwise_policy_distance(ae, 0, 3, obs, dists), abs=1e-12)
    with pytest.raises(ValueError):
        pairwise_policy_distance(ae, 0, 1, np.zeros((0, 4)), dists)


def test_distance_matrix_from_callables():
    rng = np.random.default_rng(10)
    ae, obs, _ = trained(rng)
    w = rng.normal(size=(4, 5))
    pols = [lambda o: softmax(o @ w), lambda o: softmax(o @ w), lambda o: softmax(-o @ w)]
    dm = distance_matrix(ae, obs, pols)
    assert dm.values.shape == (3, 3)
    assert dm.values[0, 1] == 0.0 and dm.values[0, 2] > 0
    assert dm.metric_violations() == []


def test_two_identical_agents_zero_matrix():
    rng = np.random.default_rng(11)
    ae, obs, dists = trained(rng)
    dm = distance_matrix(ae, obs, np.stack([dists[0], dists[0]]))
    assert np.array_equal(dm.values, np.zeros((2, 2)))


def test_metric_violations_detects_bad_matrices():
    assert DistanceMatrix(np.array([[0, 1], [2, 0.0]]), [0, 1]).metric_violations() == ["not symmetric"]
    bad = np.array([[0, 1, 5], [1, 0, 1], [5, 1, 0.0]])
    assert "triangle" in DistanceMatrix(bad, [0, 1, 2]).metric_violations()[0]
    with pytest.raises(ValueError):
        DistanceMatrix(np.zeros((2, 3)), [0, 1])


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(3, 20), st.integers(2, 6), st.integers(0, 2**31))
def test_distance_matrix_metric_properties(n, m, a, seed):
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(m, 3))
    dists = random_policies(rng, n, m, a)
    ae = train_autoencoder((np.tile(obs, (n, 1)), dists.reshape(-1, a)), rng, epochs=3, hidden=(8,))
    d = distance_matrix(ae, obs, dists).values
    assert np.array_equal(d, d.T)
    assert np.all(d >= 0) and np.all(np.diag(d) == 0)
    assert np.all(d[:, None, :] <= d[:, :, None] + d[None, :, :] + 1e-6)


def test_distances_invariant_to_action_relabeling():
    rng = np.random.default_rng(12)
    n, m, a = 4, 30, 5
    obs, dists = decision_set(rng, n=n, m=m, a=a, d=3)
    perm = np.array([3, 0, 4, 1, 2])
    base = AutoEncoder.create(a, 3, np.random.default_rng(0), hidden=(16,))
    relabeled = base.copy()
    # same network up to the relabeling of its action inputs and outputs
    relabeled.encoder.weights[0] = np.concatenate([base.encoder.weights[0][:a][perm], base.encoder.weights[0][a:]])
    relabeled.decoder.weights[-1] = base.decoder.weights[-1][:, perm]
    relabeled.decoder.biases[-1] = base.decoder.biases[-1][perm]
    o = np.tile(obs, (n, 1))
    ae1 = train_autoencoder((o, dists.reshape(-1, a)), np.random.default_rng(1), epochs=10, ae=base)
    ae2 = train_autoencoder((o, dists[..., perm].reshape(-1, a)), np.random.default_rng(1), epochs=10, ae=relabeled)
    d1 = distance_matrix(ae1, obs, dists).values
    d2 = distance_matrix(ae2, obs, dists[..., perm]).values
    assert np.allclose(d1, d2, atol=1e-9)
