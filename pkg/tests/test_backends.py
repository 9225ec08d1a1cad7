"""Parity between the compiled kernel extension and the NumPy fallback."""

import numpy as np
import pytest

from infotraj import _pykernels, backend


@pytest.fixture(scope="module")
def fast():
    if "fast" not in backend.available_backends():
        pytest.skip("compiled extension not built")
    from infotraj import _ckernels

    return _ckernels


@pytest.fixture(scope="module")
def instances():
    rng = np.random.default_rng(0)
    out = []
    for _ in range(20):
        n = int(rng.integers(1, 40))
        m = int(rng.integers(1, 15))
        d = int(rng.integers(1, 8))
        X = np.ascontiguousarray(rng.normal(size=(n, d)))
        Q = np.ascontiguousarray(rng.normal(size=(m, d)))
        inv_ls = np.ascontiguousarray(rng.uniform(0.3, 2.0, size=d))
        sf2 = float(rng.uniform(0.5, 3.0))
        alpha = np.ascontiguousarray(rng.normal(size=n))
        out.append((X, Q, inv_ls, sf2, alpha))
    return out


class TestParity:
    def test_se_gram(self, fast, instances):
        for X, _, inv_ls, sf2, _ in instances:
            a = fast.se_gram(X, inv_ls, sf2, 0.1)
            b = _pykernels.se_gram(X, inv_ls, sf2, 0.1)
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)

    def test_se_cross(self, fast, instances):
        for X, Q, inv_ls, sf2, _ in instances:
            a = fast.se_cross(Q, X, inv_ls, sf2)
            b = _pykernels.se_cross(Q, X, inv_ls, sf2)
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)

    def test_se_vec_and_mean(self, fast, instances):
        for X, Q, inv_ls, sf2, alpha in instances:
            q = Q[0]
            np.testing.assert_allclose(
                fast.se_vec(X, q, inv_ls, sf2),
                _pykernels.se_vec(X, q, inv_ls, sf2),
                rtol=1e-12,
            )
            assert fast.mean_one(X, q, inv_ls, sf2, alpha) == pytest.approx(
                _pykernels.mean_one(X, q, inv_ls, sf2, alpha), rel=1e-12
            )

    def test_mean_quad(self, fast, instances):
        rng = np.random.default_rng(1)
        for X, Q, inv_ls, sf2, alpha in instances:
            M = rng.normal(size=(X.shape[0], X.shape[0]))
            kinv = np.ascontiguousarray(M @ M.T)
            m_f, q_f = fast.mean_quad_one(X, Q[0], inv_ls, sf2, alpha, kinv)
            m_p, q_p = _pykernels.mean_quad_one(X, Q[0], inv_ls, sf2, alpha, kinv)
            assert m_f == pytest.approx(m_p, rel=1e-12, abs=1e-14)
            assert q_f == pytest.approx(q_p, rel=1e-10, abs=1e-12)

    def test_mean_multi(self, fast, instances):
        rng = np.random.default_rng(2)
        for X, Q, inv_ls, sf2, alpha in instances:
            C = 3
            ls_stack = np.ascontiguousarray(
                rng.uniform(0.3, 2.0, size=(C, X.shape[1]))
            )
            sf2s = rng.uniform(0.5, 2.0, size=C)
            alphas = np.ascontiguousarray(rng.normal(size=(C, X.shape[0])))
            a = fast.mean_multi(X, Q[0], ls_stack, sf2s, alphas)
            b = _pykernels.mean_multi(X, Q[0], ls_stack, sf2s, alphas)
            np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-13)


class TestSelection:
    def test_reports_selected_backend(self):
        assert backend.name in ("fast", "pure")
        assert "pure" in backend.available_backends()

    def test_forced_pure_selection(self):
        import importlib
        import os

        os.environ["INFOTRAJ_BACKEND"] = "pure"
        try:
            import infotraj.backend as b

            importlib.reload(b)
            assert b.name == "pure"
        finally:
            os.environ.pop("INFOTRAJ_BACKEND")
            importlib.reload(backend)

    def test_strict_fp_profile_selects_pure(self):
        import importlib
        import os

        os.environ["INFOTRAJ_FP_PROFILE"] = "strict"
        try:
            import infotraj.backend as b

            importlib.reload(b)
            assert b.name == "pure"
        finally:
            os.environ.pop("INFOTRAJ_FP_PROFILE")
            importlib.reload(backend)
