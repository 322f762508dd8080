"""Tests for separated kernels and their convolution operators."""

import numpy as np
import pytest
from scipy.special import erf

from mwchem.greenop import SeparatedKernel, _ss_blocks_1d, apply, build_kernel
from mwchem.mra import MRAConfig, MultiwaveletBasis, add, evaluate, inner, multiply, project

L = 16.0
BOX_DIAG = 2.0 * np.sqrt(3.0) * L + 5.0


@pytest.fixture(scope="module")
def cfg():
    return MRAConfig(k=7, eps=1e-5, L=L, initial_depth=2)


@pytest.fixture(scope="module")
def poisson():
    return build_kernel(0.0, 1e-6, 1e-4, BOX_DIAG)


@pytest.fixture(scope="module")
def rho(cfg):
    alpha = 1.0
    return project(lambda x, y, z: (alpha / np.pi) ** 1.5 * np.exp(-alpha * (x * x + y * y + z * z)),
                   cfg, d=3)


def kernel_error(kern):
    rs = np.geomspace(kern.r_lo, kern.r_hi, 220)
    target = kern.target(rs)
    floor = np.maximum(target, 1e-14 * target[0])
    return float(np.max(np.abs(kern.value(rs) - target) / floor))


class TestKernel:
    def test_poisson_accuracy(self, poisson):
        assert kernel_error(poisson) <= 1e-6

    def test_bsh_value_at_one(self):
        kern = build_kernel(1.0, 1e-6, 1e-4, BOX_DIAG)
        want = np.exp(-1.0) / (4.0 * np.pi)
        assert abs(kern.value(1.0) - want) / want <= 1e-6

    def test_terms_positive(self, poisson):
        assert np.all(poisson.coeffs > 0)
        assert np.all(poisson.exponents > 0)

    def test_wider_range_never_fewer_terms(self):
        k1 = build_kernel(0.0, 1e-5, 1e-3, 50.0)
        k2 = build_kernel(0.0, 1e-5, 1e-3, 100.0)
        assert len(k2) >= len(k1)

    def test_more_terms_lower_error(self):
        errs = [build_kernel(0.0, eps, 1e-3, 50.0).achieved_error for eps in (1e-4, 1e-6, 1e-8)]
        assert errs[0] >= errs[1] >= errs[2]

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            build_kernel(-1.0)
        with pytest.raises(ValueError):
            build_kernel(0.0, r_lo=1.0, r_hi=0.5)

    def test_unreachable_accuracy_reports(self):
        with pytest.raises(RuntimeError, match="achieved"):
            build_kernel(0.0, 1e-13, 1e-9, 1e6, max_terms=20)


class TestBlocks:
    def test_against_brute_force(self):
        basis = MultiwaveletBasis.get(7)
        t_gl, w_gl = np.polynomial.legendre.leggauss(300)
        x = (t_gl + 1) / 2
        w = w_gl / 2
        vi = basis.scaling_values(x)
        c, h = 1.3, 0.7
        for omega in (0.4, 30.0, 400.0):
            for delta in (0, 1):
                blk = _ss_blocks_1d(basis, c, omega / h ** 2, h, np.array([delta]))[0]
                g = np.exp(-omega * (x[:, None] - x[None, :] + delta) ** 2)
                ref = c * h * np.einsum("iq,qp,jp->ij", vi * w, g, vi * w)
                assert np.abs(blk - ref).max() <= 1e-10

    def test_two_scale_consistency(self, poisson):
        # the scaling corner of the assembled level block equals the directly
        # computed coarse block
        basis = MultiwaveletBasis.get(7)
        term = len(poisson) // 2
        c, a = float(poisson.coeffs[term]), float(poisson.exponents[term])
        for level in (1, 2):
            deltas, blocks, _, _ = poisson._level_bands(term, level, basis, L, 1e-13)
            h = 2.0 * L * 2.0 ** (-level)
            for i, dd in enumerate(deltas[:3]):
                direct = _ss_blocks_1d(basis, 1.0, a, h, np.array([dd]))[0]
                assert np.abs(blocks[i][:7, :7] - direct).max() <= 1e-11


class TestApply:
    def test_poisson_of_gaussian(self, poisson, rho, cfg):
        v = apply(poisson, rho)
        for r in (0.5, 1.0, 2.0):
            want = erf(r) / r
            assert abs(evaluate(v, (r, 0.0, 0.0)) - want) <= 10 * cfg.eps

    def test_bsh_roundtrip(self, cfg):
        a, kap = 1.3, 0.9
        g = project(lambda x, y, z: np.exp(-a * (x * x + y * y + z * z)), cfg, d=3)
        h = project(lambda x, y, z: (6 * a - 4 * a * a * (x * x + y * y + z * z) + kap * kap)
                    * np.exp(-a * (x * x + y * y + z * z)), cfg, d=3)
        kern = build_kernel(kap, 1e-6, 1e-4, BOX_DIAG)
        back = apply(kern, h)
        assert add(back, g, 1.0, -1.0).norm() <= 10 * (cfg.eps + kern.eps_k)

    def test_linearity(self, poisson, rho):
        v1 = apply(poisson, rho).scaled(2.5)
        v2 = apply(poisson, rho.scaled(2.5))
        assert add(v1, v2, 1.0, -1.0).norm() <= 1e-10 * max(1.0, v1.norm())

    def test_positivity_on_nonnegative_input(self, poisson, rho):
        v = apply(poisson, rho)
        rng = np.random.default_rng(7)
        pts = rng.uniform(-10, 10, size=(50, 3))
        vals = np.array([evaluate(v, p) for p in pts])
        assert np.all(vals > -1e-8)

    def test_self_interaction_symmetry(self, poisson, rho, cfg):
        g = project(lambda x, y, z: np.exp(-0.7 * ((x - 0.5) ** 2 + y * y + z * z)), cfg, d=3)
        s1 = inner(g, apply(poisson, rho))
        s2 = inner(rho, apply(poisson, g))
        assert abs(s1 - s2) <= 10 * cfg.eps * max(1.0, abs(s1))

    def test_domain_coverage_checked(self, rho):
        small = build_kernel(0.0, 1e-5, 1e-3, 10.0)
        with pytest.raises(ValueError, match="diagonal"):
            apply(small, rho)

    def test_requires_3d(self, poisson):
        cfg1 = MRAConfig(k=7, eps=1e-5, L=4.0, initial_depth=1)
        f1 = project(lambda x: np.exp(-x * x), cfg1, d=1)
        with pytest.raises(ValueError, match="3D"):
            apply(poisson, f1)

    def test_gaussian_kernel_closed_form(self, cfg):
        alpha, a = 3.0, 2.0
        f = project(lambda x, y, z: (alpha / np.pi) ** 1.5 * np.exp(-alpha * (x * x + y * y + z * z)),
                    cfg, d=3)
        kern = SeparatedKernel(kappa=1.0, eps_k=1e-12, r_lo=1e-4, r_hi=BOX_DIAG,
                               coeffs=np.array([1.0]), exponents=np.array([a]),
                               achieved_error=0.0)
        v = apply(kern, f)
        lam = a * alpha / (a + alpha)
        amp = (alpha / (a + alpha)) ** 1.5
        for r in (0.0, 0.5, 1.0):
            assert abs(evaluate(v, (r, 0.0, 0.0)) - amp * np.exp(-lam * r * r)) <= 1e-5
