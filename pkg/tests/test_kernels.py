"""Compiled and numpy kernel backends must agree."""

import numpy as np
import pytest

from dhvt.numerics import _kernels_py, kernels

pytestmark = pytest.mark.skipif(kernels.compiled is None, reason="compiled kernels not built")

SHAPES = [(2, 3, 9, 9, 3, 2), (1, 4, 6, 7, 3, 1), (3, 2, 5, 5, 1, 1), (2, 5, 10, 10, 2, 2)]


@pytest.fixture(params=[np.float32, np.float64], ids=["f32", "f64"])
def dtype(request):
    return request.param


class TestBackendEquivalence:
    @pytest.mark.parametrize("b,c,hp,wp,k,s", SHAPES)
    def test_im2col_col2im_bitwise(self, rng, dtype, b, c, hp, wp, k, s):
        xp = rng.standard_normal((b, c, hp, wp)).astype(dtype)
        ho, wo = (hp - k) // s + 1, (wp - k) // s + 1
        a = _kernels_py.im2col(xp, k, k, s, ho, wo)
        np.testing.assert_array_equal(a, kernels.compiled.im2col(xp, k, k, s, ho, wo))
        back_py = _kernels_py.col2im(a, c, hp, wp, k, k, s, ho, wo)
        np.testing.assert_array_equal(back_py, kernels.compiled.col2im(a, c, hp, wp, k, k, s, ho, wo))

    @pytest.mark.parametrize("b,c,hp,wp,k,s", SHAPES)
    def test_depthwise(self, rng, dtype, b, c, hp, wp, k, s):
        xp = rng.standard_normal((b, c, hp, wp)).astype(dtype)
        w = rng.standard_normal((c, 1, k, k)).astype(dtype)
        ho, wo = (hp - k) // s + 1, (wp - k) // s + 1
        g = rng.standard_normal((b, c, ho, wo)).astype(dtype)
        np.testing.assert_array_equal(_kernels_py.dwconv_forward(xp, w, s, ho, wo),
                                      kernels.compiled.dwconv_forward(xp, w, s, ho, wo))
        gx_p, gw_p = _kernels_py.dwconv_backward(g, xp, w, s)
        gx_c, gw_c = kernels.compiled.dwconv_backward(g, xp, w, s)
        np.testing.assert_array_equal(gx_p, gx_c)
        # the kernel gradient is a reduction whose order differs between backends
        tol = 1e-5 if dtype == np.float32 else 1e-12
        np.testing.assert_allclose(gw_p, gw_c, rtol=tol, atol=tol * np.abs(gw_p).max())
        assert gw_c.dtype == dtype


class TestSelection:
    def test_use_switches_backend(self):
        prev = kernels.BACKEND
        try:
            kernels.use("python")
            assert kernels.BACKEND == "python"
            kernels.use("compiled")
            assert kernels.BACKEND == "compiled"
        finally:
            kernels.use(prev)

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            kernels.use("fortran")

    def test_model_forward_same_under_both(self, rng):
        from dhvt import build_model, micro_config, model_forward
        from dhvt.numerics import Tensor

        cfg = micro_config()
        ps = build_model(cfg, seed=0, dtype="f64")
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        prev = kernels.BACKEND
        try:
            outs = []
            for name in ("python", "compiled"):
                kernels.use(name)
                outs.append(model_forward(ps, cfg, x, train=False).data)
        finally:
            kernels.use(prev)
        np.testing.assert_allclose(outs[0], outs[1], atol=1e-12)
