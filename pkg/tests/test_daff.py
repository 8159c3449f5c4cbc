import numpy as np
import pytest

from dhvt.daff import daff_forward, daff_init, grid_to_tokens, squeeze_excite, tokens_to_grid
from dhvt.numerics import ConfigError, Initializer, ParamStore, ShapeError, Tensor

import reference
from conftest import fd_check, perturb


def make(rng, dim=8, norm="bn", **flags):
    ps = ParamStore()
    p = daff_init(ps, "ffn", dim, Initializer(0, "f64"), mlp_ratio=2, se_ratio=4, norm=norm, **flags)
    perturb(ps, rng)
    for name, t in ps.buffers():
        t.data = rng.uniform(0.5, 1.5, t.shape) if name.endswith("var") else 0.3 * rng.standard_normal(t.shape)
    return ps, p


@pytest.fixture
def tokens(rng):
    return rng.standard_normal((2, 1 + 16, 8))


class TestGrid:
    def test_row_major_round_trip(self, rng):
        x = rng.standard_normal((2, 9, 4))
        g = tokens_to_grid(Tensor(x)).data
        np.testing.assert_array_equal(g[:, :, 1, 2], x[:, 5])
        np.testing.assert_array_equal(grid_to_tokens(Tensor(g)).data, x)

    def test_non_square(self):
        with pytest.raises(ShapeError, match="square"):
            tokens_to_grid(Tensor(np.zeros((1, 8, 4))))


class TestDaffForward:
    @pytest.mark.parametrize("train", [True, False])
    @pytest.mark.parametrize("flags", [{}, {"agg_on_all_tokens": True}, {"disable_dw_shortcut": True}])
    def test_matches_reference(self, rng, tokens, train, flags):
        ps, p = make(rng, **flags)
        got = daff_forward(p, Tensor(tokens), train=train, update_stats=False).data
        ref = reference.daff(ps, "ffn", tokens, train=train, **flags)
        assert got.shape == tokens.shape
        assert np.abs(got - ref).max() <= 1e-10

    def test_layernorm_policy(self, rng, tokens):
        ps, p = make(rng, norm="ln")
        got = daff_forward(p, Tensor(tokens), train=True).data
        assert np.abs(got - reference.daff(ps, "ffn", tokens)).max() <= 1e-10

    def test_class_token_scaled_channelwise(self, rng, tokens):
        # the weight depends only on patch tokens, so the class output is linear in the class input
        _, p = make(rng)
        a = daff_forward(p, Tensor(tokens), train=False).data
        t2 = tokens.copy()
        t2[:, 0] *= 3.0
        b = daff_forward(p, Tensor(t2), train=False).data
        np.testing.assert_allclose(b[:, 0], 3.0 * a[:, 0], rtol=1e-13, atol=1e-14)
        np.testing.assert_array_equal(b[:, 1:], a[:, 1:])

    def test_class_weight_matches_se_of_patch_output(self, rng, tokens):
        _, p = make(rng)
        out = daff_forward(p, Tensor(tokens), train=False).data
        grid = tokens_to_grid(Tensor(out[:, 1:]))
        w = squeeze_excite(p, grid).data[:, 0]
        np.testing.assert_allclose(out[:, 0], tokens[:, 0] * w, atol=1e-13)

    def test_no_sigmoid_weight_can_exceed_one(self, rng, tokens):
        _, p = make(rng)
        w = squeeze_excite(p, tokens_to_grid(Tensor(tokens[:, 1:]))).data
        assert (w < 0).any() or (w > 1).any()

    def test_patch_locality_eval(self, rng, tokens):
        # 1x1 / dw3x3 / 1x1 in eval mode: a patch change moves only its 3x3 neighbourhood
        _, p = make(rng)
        a = daff_forward(p, Tensor(tokens), train=False).data
        t2 = tokens.copy()
        t2[:, 1 + 0] += 1.0                                   # grid cell (0, 0)
        b = daff_forward(p, Tensor(t2), train=False).data
        moved = np.abs(b[:, 1:] - a[:, 1:]).max(axis=(0, 2)).reshape(4, 4)
        assert set(zip(*np.nonzero(moved))) == {(0, 0), (0, 1), (1, 0), (1, 1)}

    def test_patch_permutation_changes_output(self, rng, tokens):
        # the convolutions make DAFF position-aware, unlike a token-wise MLP
        _, p = make(rng)
        perm = np.concatenate([[0], 1 + rng.permutation(16)])
        a = daff_forward(p, Tensor(tokens), train=False).data
        b = daff_forward(p, Tensor(tokens[:, perm]), train=False).data
        assert np.abs(b[:, 1:] - a[:, perm[1:]]).max() > 1e-6

    def test_needs_class_and_patches(self, rng):
        _, p = make(rng)
        with pytest.raises(ValueError):
            daff_forward(p, Tensor(np.zeros((1, 1, 8))), train=False)

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            daff_init(ParamStore(), "f", 6, Initializer(0), se_ratio=4)
        with pytest.raises(ConfigError):
            daff_init(ParamStore(), "f", 8, Initializer(0), mlp_ratio=0.3)

    def test_gradient_wrt_tokens(self, rng):
        _, p = make(rng, dim=4)
        fd_check(lambda x: daff_forward(p, x, train=True, update_stats=False), rng.standard_normal((2, 5, 4)))
