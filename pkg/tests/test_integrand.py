import numpy as np
import pytest

from wulffstab import (EllipticIntegrand, IntegrandError, EllipticityError,
                       quasi_uniform_directions, random_directions)

A24 = np.diag([1.0, 4.0])
A124 = np.diag([1.0, 2.0, 4.0])


def test_euclidean_values():
    I = EllipticIntegrand.euclidean(2)
    assert I.F([3.0, 4.0]) == pytest.approx(5.0)
    I3 = EllipticIntegrand.euclidean(3)
    assert I3.F0([0.0, 0.0, 2.0]) == pytest.approx(2.0)
    assert np.allclose(I3.grad_F([0.0, 1.0, 0.0]), [0.0, 1.0, 0.0])
    assert np.allclose(I3.hess_halfF2([0.3, -0.4, 1.0]), np.eye(3))


def test_ellipsoidal_closed_forms():
    I = EllipticIntegrand.ellipsoidal(A24)
    assert I.F([0.0, 1.0]) == pytest.approx(2.0)
    assert I.F([1.0, 1.0]) == pytest.approx(np.sqrt(5.0))
    assert I.F0([0.0, 1.0]) == pytest.approx(0.5)
    assert np.allclose(I.grad_F([0.0, 1.0]), [0.0, 2.0])
    assert np.allclose(I.hess_halfF2([1.0, 2.0]), A24)


def test_zero_and_invalid_arguments():
    I = EllipticIntegrand.euclidean(2)
    assert I.F([0.0, 0.0]) == 0.0
    with pytest.raises(IntegrandError):
        I.grad_F([0.0, 0.0])
    with pytest.raises(IntegrandError):
        I.hess_halfF2([0.0, 0.0])
    with pytest.raises(IntegrandError):
        I.F([np.nan, 1.0])
    with pytest.raises(IntegrandError):
        EllipticIntegrand.ellipsoidal(np.diag([1.0, -1.0]))


@pytest.fixture(scope="module")
def integrands():
    return {
        "euclidean": EllipticIntegrand.euclidean(3),
        "ellipsoidal": EllipticIntegrand.ellipsoidal(A124),
        "perturbed": EllipticIntegrand.perturbed(A124, eps=0.05, profile=1),
    }


@pytest.mark.parametrize("kind", ["euclidean", "ellipsoidal", "perturbed"])
def test_homogeneity(integrands, kind):
    I = integrands[kind]
    z = random_directions(200, I.dim, seed=3)
    Fz = I.F(z)
    for lam in (0.5, 2.0, 10.0):
        assert np.max(np.abs(I.F(lam * z) - lam * Fz) / (lam * Fz)) < 1e-12


@pytest.mark.parametrize("kind,tol", [("euclidean", 1e-10),
                                      ("ellipsoidal", 1e-10),
                                      ("perturbed", 1e-8)])
def test_euler_identity(integrands, kind, tol):
    I = integrands[kind]
    z = random_directions(300, I.dim, seed=5) * np.linspace(0.5, 3.0, 300)[:, None]
    g = I.grad_F(z)
    resid = np.abs(np.einsum("ni,ni->n", g, z) - I.F(z)) / I.F(z)
    assert np.max(resid) < tol


@pytest.mark.parametrize("kind,tol", [("euclidean", 1e-12),
                                      ("ellipsoidal", 1e-12),
                                      ("perturbed", 1e-6)])
def test_gauge_duality(integrands, kind, tol):
    # grad_F0(grad_F(z)) = z / F(z)
    I = integrands[kind]
    z = random_directions(60, I.dim, seed=7)
    lhs = I.grad_F0(I.grad_F(z))
    rhs = z / I.F(z)[:, None]
    assert np.max(np.linalg.norm(lhs - rhs, axis=1)) < tol


@pytest.mark.parametrize("kind,tol", [("euclidean", 1e-12),
                                      ("ellipsoidal", 1e-12),
                                      ("perturbed", 2e-6)])
def test_dual_hessian_product_is_identity(integrands, kind, tol):
    I = integrands[kind]
    z = random_directions(40, I.dim, seed=9)
    H = I.hess_halfF2(z)
    Hq = I._hess_q_independent(I.grad_F(z))
    prod = np.einsum("nij,njk->nik", Hq, H)
    assert np.max(np.abs(prod - np.eye(I.dim))) < tol


def test_gbar_matches_dual_quadratic_form():
    I = EllipticIntegrand.ellipsoidal(A124)
    z = random_directions(20, 3, seed=1)
    gb = I.gbar(z)
    assert np.allclose(gb, np.linalg.inv(A124))


@pytest.mark.parametrize("kind", ["euclidean", "ellipsoidal", "perturbed"])
def test_gradient_norm_bracketed_by_sphere_extremes(integrands, kind):
    I = integrands[kind]
    z = random_directions(500, I.dim, seed=13)
    gn = np.linalg.norm(I.grad_F(z), axis=1)
    assert np.min(gn) >= I.mF - 1e-7
    assert np.max(gn) <= I.MF + 1e-7


def test_sphere_extremes_ellipsoidal():
    I = EllipticIntegrand.ellipsoidal(A24)
    assert I.mF == pytest.approx(1.0, abs=1e-9)
    assert I.MF == pytest.approx(2.0, abs=1e-9)


def test_wulff_radial_on_gauge_sphere():
    I = EllipticIntegrand.ellipsoidal(A124)
    dirs = quasi_uniform_directions(128, 3)
    pts = I.wulff_radial(dirs)[:, None] * dirs
    assert np.max(np.abs(I.F0(pts) - 1.0)) < 1e-12


def test_validate_reports():
    rep = EllipticIntegrand.euclidean(3).validate(100, seed=0)
    assert rep.ok and rep.mF == pytest.approx(1.0) and rep.MF == pytest.approx(1.0)
    rep = EllipticIntegrand.ellipsoidal(A24).validate(100, seed=0)
    assert rep.ok and rep.mF == pytest.approx(1.0, abs=1e-8) \
        and rep.MF == pytest.approx(2.0, abs=1e-8)
    d = rep.to_dict()
    assert set(d) >= {"euler_max", "duality_max", "matrix_identity_max", "ok"}


def test_ellipticity_breaks_at_large_eps():
    # scan upward until convexity of 0.5 F^2 fails
    broke_at = None
    for eps in (0.2, 0.4, 0.8, 1.6, 3.2):
        try:
            EllipticIntegrand.perturbed(np.eye(2), eps=eps, profile=1)
        except EllipticityError:
            broke_at = eps
            break
    assert broke_at is not None
    # with the construction check disabled, validate flags it instead
    I = EllipticIntegrand.perturbed(np.eye(2), eps=broke_at, profile=1,
                                    check_ellipticity=False)
    rep = I.validate(200, seed=2)
    assert not rep.ok and rep.eigen_min <= 0.0


def test_validate_requires_enough_directions():
    with pytest.raises(IntegrandError):
        EllipticIntegrand.euclidean(2).validate(5)
