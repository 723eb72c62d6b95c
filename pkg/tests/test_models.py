import numpy as np
import pytest

from hyperfed import models, net

from conftest import rel_err


CLIENT_TABLE = [
    ("conv2d", dict(in_channels=3, out_channels=16, kernel=5)),
    ("relu", {}),
    ("maxpool2d", dict(pool=2)),
    ("conv2d", dict(in_channels=16, out_channels=32, kernel=5)),
    ("relu", {}),
    ("maxpool2d", dict(pool=2)),
    ("flatten", {}),
    ("dense", dict(in_features=800, out_features=120)),
    ("relu", {}),
    ("dense", dict(in_features=120, out_features=84)),
    ("relu", {}),
    ("dense", dict(in_features=84, out_features=10)),
    ("softmax_output", {}),
]


def assert_layers(spec, table):
    assert len(spec.layers) == len(table)
    for layer, (kind, fields) in zip(spec.layers, table):
        assert layer.kind == kind
        for name, value in fields.items():
            assert getattr(layer, name) == value, (kind, name)


class TestClientModel:
    def test_golden_layer_table(self):
        assert_layers(models.build_client_model(10), CLIENT_TABLE)

    def test_param_count_c10(self):
        assert net.param_count(models.build_client_model(10)) == 121_182

    def test_final_layer_scales_with_classes(self):
        spec = models.build_client_model(100)
        assert spec.layers[-2].in_features == 84
        assert spec.layers[-2].out_features == 100
        assert spec.output_dim == 100

    def test_flatten_dim_after_pools(self):
        spec = models.build_client_model(10)
        dense0 = next(l for l in spec.layers if l.kind == "dense")
        assert dense0.in_features == 800  # 32 -> 28 -> 14 -> 10 -> 5, 32*5*5


class TestEmbeddingNet:
    def test_conv_variant_channels_and_output(self):
        spec = models.build_embedding_net(models.EMBED_CONV, C=10, l=25)
        assert spec.input_shape == (13, 32, 32)
        assert spec.layers[0].in_channels == 13
        assert spec.layers[-1].kind == "dense"  # no output nonlinearity
        assert spec.layers[-1].out_features == 25
        assert spec.output_dim == 25

    def test_linear_variant_param_count(self):
        spec = models.build_embedding_net(models.EMBED_LINEAR, C=100, l=25)
        assert net.param_count(spec) == 100 * 25 + 25

    def test_recommended_descriptor_dim(self):
        assert models.descriptor_dim_for(100) == 25

    def test_conv_variant_matches_client_trunk(self):
        embed = models.build_embedding_net(models.EMBED_CONV, C=10, l=25)
        kinds = [l.kind for l in embed.layers]
        assert kinds == [l.kind for l in models.build_client_model(10).layers[:-1]]


class TestHypernetwork:
    def test_medium_matches_golden_table(self):
        spec = models.build_hypernetwork(models.HyperConfig(l=25, D=121_182, hidden_layers=3))
        denses = [l for l in spec.layers if l.kind == "dense"]
        assert [(d.in_features, d.out_features) for d in denses] == [
            (25, 100), (100, 100), (100, 100), (100, 100), (100, 121_182)]
        assert spec.layers[-1].kind == "dense"  # final layer has no nonlinearity

    def test_small_single_hidden_block(self):
        spec = models.build_hypernetwork(
            models.HyperConfig(l=25, D=50, hidden_layers=models.HYPER_SIZE_LAYERS["S"]))
        denses = [l for l in spec.layers if l.kind == "dense"]
        assert [(d.in_features, d.out_features) for d in denses] == [(25, 100), (100, 100), (100, 50)]

    def test_at_least_100x_client_size(self):
        D = 121_182
        spec = models.build_hypernetwork(models.HyperConfig(l=25, D=D, hidden_layers=3))
        assert net.param_count(spec) >= 100 * D


class TestDescriptor:
    @pytest.fixture
    def setup(self, rng):
        C, l = 4, 3
        embed = models.build_embedding_net(models.EMBED_CONV, C=C, l=l)
        eta_v = net.init_params(embed, rng)
        x = rng.normal(size=(6, 3, 32, 32)).astype(np.float32)
        y = rng.integers(0, C, size=6)
        return C, embed, eta_v, x, y

    def test_single_example_is_its_embedding(self, setup):
        C, embed, eta_v, x, y = setup
        v = models.compute_descriptor(x[:1], y[:1], eta_v, embed, models.EMBED_CONV, C)
        direct = net.forward(embed, eta_v, models.embedding_inputs(x[:1], y[:1], models.EMBED_CONV, C))
        assert np.allclose(v, direct[0])

    def test_duplicated_batch_same_descriptor(self, setup):
        C, embed, eta_v, x, y = setup
        v1 = models.compute_descriptor(x, y, eta_v, embed, models.EMBED_CONV, C)
        v2 = models.compute_descriptor(np.concatenate([x, x]), np.concatenate([y, y]),
                                       eta_v, embed, models.EMBED_CONV, C)
        assert np.allclose(v1, v2, atol=1e-6)

    def test_permutation_invariance(self, setup, rng):
        C, embed, eta_v, x, y = setup
        perm = rng.permutation(len(y))
        v1 = models.compute_descriptor(x, y, eta_v, embed, models.EMBED_CONV, C)
        v2 = models.compute_descriptor(x[perm], y[perm], eta_v, embed, models.EMBED_CONV, C)
        assert np.max(np.abs(v1 - v2)) <= 1e-6

    def test_empty_batch_rejected(self, setup):
        C, embed, eta_v, x, y = setup
        with pytest.raises(ValueError, match="nonempty"):
            models.compute_descriptor(x[:0], y[:0], eta_v, embed, models.EMBED_CONV, C)

    def test_linear_kind_uses_label_frequencies(self, rng):
        C, l = 5, 2
        embed = models.build_embedding_net(models.EMBED_LINEAR, C=C, l=l)
        eta_v = net.init_params(embed, rng)
        y = np.array([0, 0, 3])
        v = models.compute_descriptor(None, y, eta_v, embed, models.EMBED_LINEAR, C)
        w, b = net.unflatten_params(embed, eta_v)[0]
        freq = np.array([2 / 3, 0, 0, 1 / 3, 0], dtype=np.float32)
        assert np.allclose(v, freq @ w + b, atol=1e-6)


class TestUnlabeledDescriptor:
    def test_matches_zero_label_channels(self, rng):
        C = 3
        embed = models.build_embedding_net(models.EMBED_CONV, C=C, l=4)
        eta_v = net.init_params(embed, rng)
        x = rng.normal(size=(5, 3, 32, 32)).astype(np.float32)
        v_unl = models.compute_descriptor_unlabeled(x, eta_v, embed, models.EMBED_CONV, C)
        inputs = models.with_label_channels(x, None, C)
        v_direct = net.forward(embed, eta_v, inputs).mean(axis=0)
        assert np.array_equal(v_unl, v_direct)

    def test_deterministic(self, rng):
        C = 3
        embed = models.build_embedding_net(models.EMBED_CONV, C=C, l=4)
        eta_v = net.init_params(embed, rng)
        x = rng.normal(size=(2, 3, 32, 32)).astype(np.float32)
        a = models.compute_descriptor_unlabeled(x, eta_v, embed, models.EMBED_CONV, C)
        b = models.compute_descriptor_unlabeled(x, eta_v, embed, models.EMBED_CONV, C)
        assert np.array_equal(a, b)

    def test_linear_kind_unsupported(self, rng):
        embed = models.build_embedding_net(models.EMBED_LINEAR, C=3, l=2)
        eta_v = net.init_params(embed, rng)
        with pytest.raises(models.UnsupportedEmbeddingError):
            models.compute_descriptor_unlabeled(np.zeros((1, 3, 32, 32), dtype=np.float32),
                                                eta_v, embed, models.EMBED_LINEAR, 3)


class TestGeneratePersonalModel:
    def test_zero_hypernetwork_gives_zero_model(self):
        hyper = models.build_hypernetwork(models.HyperConfig(l=3, D=20, hidden_layers=1))
        theta = models.generate_personal_model(np.ones(3, dtype=np.float32),
                                               np.zeros(net.param_count(hyper), dtype=np.float32), hyper)
        assert theta.shape == (20,)
        assert not theta.any()

    def test_equal_descriptors_equal_models(self, rng):
        hyper = models.build_hypernetwork(models.HyperConfig(l=3, D=20, hidden_layers=1))
        eta_h = net.init_params(hyper, rng)
        v = rng.normal(size=3).astype(np.float32)
        t1 = models.generate_personal_model(v, eta_h, hyper)
        t2 = models.generate_personal_model(v.copy(), eta_h, hyper)
        assert np.array_equal(t1, t2)

    def test_output_length_matches_client_param_count(self, rng):
        for C in (2, 10, 31):
            client = models.build_client_model(C)
            D = net.param_count(client)
            hyper = models.build_hypernetwork(models.HyperConfig(l=4, D=D, hidden_layers=1))
            eta_h = models.init_hyper_params(hyper, client, rng)
            theta = models.generate_personal_model(np.zeros(4, dtype=np.float32), eta_h, hyper)
            assert theta.shape == (D,)

    def test_dimension_mismatch(self, rng):
        hyper = models.build_hypernetwork(models.HyperConfig(l=3, D=20, hidden_layers=1))
        eta_h = net.init_params(hyper, rng)
        with pytest.raises(net.ShapeError):
            models.generate_personal_model(np.zeros(5, dtype=np.float32), eta_h, hyper)

    def test_damped_init_outputs_near_client_init(self, rng):
        client = models.build_client_model(3)
        hyper = models.build_hypernetwork(models.HyperConfig(l=2, D=net.param_count(client),
                                                             hidden_layers=1))
        eta_h = models.init_hyper_params(hyper, client, rng)
        _, bias = net.unflatten_params(hyper, eta_h)[-1]
        theta = models.generate_personal_model(np.zeros(2, dtype=np.float32), eta_h, hyper)
        # zero descriptor still passes relu activations; output stays near the bias
        assert rel_err(theta, bias) < 0.2


class TestDescriptorBackprop:
    def test_vjp_matches_finite_differences(self, rng):
        C, l = 3, 2
        embed = net.NetworkSpec(
            layers=(net.conv2d(3 + C, 2, 3), net.relu(), net.maxpool2d(2), net.flatten(),
                    net.dense(2 * 3 * 3, l)),
            input_shape=(3 + C, 8, 8))
        eta_v = net.init_params(embed, rng, dtype=np.float64)
        x = rng.normal(size=(4, 3, 8, 8))
        y = rng.integers(0, C, size=4)
        delta_v = rng.normal(size=l)
        grad = models.descriptor_backprop(delta_v, x, y, eta_v, embed, models.EMBED_CONV, C)

        def loss(p):
            v = models.compute_descriptor(x, y, p, embed, models.EMBED_CONV, C)
            return float(v @ delta_v)

        fd = np.zeros_like(eta_v)
        step = 1e-6
        for i in range(len(eta_v)):
            eta_v[i] += step
            hi = loss(eta_v)
            eta_v[i] -= 2 * step
            lo = loss(eta_v)
            eta_v[i] += step
            fd[i] = (hi - lo) / (2 * step)
        assert rel_err(grad, fd) <= 1e-6
