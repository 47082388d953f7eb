import numpy as np
import pytest

from sdss.surrogates import (
    ConditionReport,
    KernelKind,
    SurrogateSpec,
    TauKind,
    audit_conditions,
    gamma_eval_grad,
    phi_dis,
    phi_eval,
    psi_star_oracle,
    trans_embed,
)
from sdss.surrogates import _eta_gumbel, _eta_logistic, _kernel_phi_quad


TAU_KINDS = ["tanh", "algebraic_ratio", "abs_ratio", "arctan", "logistic_cdf"]

# Reference eta values computed with adaptive quadrature on the z-line
# (independent of the Gauss-Legendre engine and of the closed forms).
ETA_CASES = [(1.0, 2.0), (0.0, 0.0), (-0.7, 1.3), (3.0, 3.0), (-2.0, -2.0),
             (5.0, -1.0), (0.0005, -0.0003), (2.0, 2.0004)]
ETA_REF = {
    "logistic": [0.583793301756756, 0.333333333333333, 0.335127893422269,
                 0.814496766151965, 0.092184763353635, 0.337121606410715,
                 0.333349992166395, 0.681189488623393],
    "gumbel": [0.701886229778268, 0.333333333333333, 0.311224997888161,
               0.929437151324130, 0.025391886205834, 0.268924982959087,
               0.333361093702268, 0.825003212766341],
    "gaussian": [0.728751015300469, 0.333333333333333, 0.295081692387900,
                 0.968795477961829, 0.023066382685118, 0.239749766700355,
                 0.333361521217645, 0.865800081621606],
}


# ---------------------------------------------------------------- tau links

@pytest.mark.parametrize("kind", TAU_KINDS)
def test_tau_invariants(kind):
    tau = TauKind(kind)
    assert float(tau.value(0.0)) == pytest.approx(0.5, abs=1e-12)
    assert float(tau.value(1e6)) == pytest.approx(1.0, abs=1e-6)
    assert float(tau.value(-1e6)) == pytest.approx(0.0, abs=1e-6)
    xs = np.linspace(-15, 15, 301)
    assert (np.diff(tau.value(xs)) > 0).all()


@pytest.mark.parametrize("kind", TAU_KINDS)
def test_tau_deriv_matches_fd(kind):
    tau = TauKind(kind, scale=1.7)
    xs = np.linspace(-8, 8, 81)
    h = 1e-6
    fd = (tau.value(xs + h) - tau.value(xs - h)) / (2 * h)
    assert np.abs(tau.deriv(xs) - fd).max() < 2e-6


def test_tau_unnormalized_doubles_scale():
    tau = TauKind("tanh", normalized=False)
    assert tau.effective_scale == 2.0
    assert float(tau.value(0.0)) == pytest.approx(1.0)
    assert float(tau.value(50.0)) == pytest.approx(2.0)


def test_tau_custom_with_fd_derivative():
    tau = TauKind("custom", fn=lambda x: np.where(x > 0, 1 - 0.5 * np.exp(-x), 0.5 * np.exp(x)))
    assert float(tau.value(0.0)) == pytest.approx(0.5)
    assert float(tau.deriv(0.3)) == pytest.approx(0.5 * np.exp(-0.3), abs=1e-5)


# ------------------------------------------------------------ product route

def test_product_gamma_worked_example():
    # k=3, unnormalized tanh link, zero scores, observed treatment 1:
    # both margins sit at tau(0)=1 with tau'(0)=1, so the value is 1 and
    # the product rule puts +1 on each coordinate.
    spec = SurrogateSpec("product", 3, tau=TauKind("tanh", normalized=False))
    val, grad = gamma_eval_grad(spec, np.zeros(2), 1)
    assert val == pytest.approx(1.0, abs=1e-12)
    assert grad == pytest.approx(np.array([1.0, 1.0]), abs=1e-12)


def test_product_gamma_frozen_values():
    spec = SurrogateSpec("product", 3, tau=TauKind("tanh"))
    g = np.array([0.5, -0.2])
    expected = {1: 0.293382828784872, 2: 0.053200946180940, 3: 0.480257595221045}
    for a, ref in expected.items():
        val, _ = gamma_eval_grad(spec, g, a)
        assert val == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("kind", TAU_KINDS)
@pytest.mark.parametrize("k", [2, 3, 4])
def test_product_gamma_grad_matches_fd(kind, k):
    spec = SurrogateSpec("product", k, tau=TauKind(kind))
    rng = np.random.default_rng(7 * k)
    h = 1e-5
    for _ in range(25):
        g = rng.standard_normal(k - 1) * 2.0
        a = int(rng.integers(1, k + 1))
        _, grad = gamma_eval_grad(spec, g, a)
        for d in range(k - 1):
            gp, gm = g.copy(), g.copy()
            gp[d] += h
            gm[d] -= h
            vp, _ = gamma_eval_grad(spec, gp, a)
            vm, _ = gamma_eval_grad(spec, gm, a)
            assert grad[d] == pytest.approx((vp - vm) / (2 * h), abs=1e-6)


def test_product_batch_matches_single():
    spec = SurrogateSpec("product", 3, tau=TauKind("arctan"))
    rng = np.random.default_rng(5)
    g = rng.standard_normal((40, 2))
    a = rng.integers(1, 4, size=40)
    vals, grads = gamma_eval_grad(spec, g, a)
    for i in range(40):
        v, gr = gamma_eval_grad(spec, g[i], int(a[i]))
        assert vals[i] == pytest.approx(v, abs=1e-14)
        assert grads[i] == pytest.approx(gr, abs=1e-14)


# ------------------------------------------------------------- kernel route

@pytest.mark.parametrize("kern", ["logistic", "gumbel", "gaussian"])
def test_kernel_phi_matches_reference(kern):
    spec = SurrogateSpec("kernel", 3, kernel=KernelKind(kern))
    tol = 1e-12 if kern in ("logistic", "gumbel") else 1e-5
    for (a, b), ref in zip(ETA_CASES, ETA_REF[kern]):
        x = np.array([0.0, -a, -b])
        assert phi_eval(spec, x, 1) == pytest.approx(ref, abs=tol)


@pytest.mark.parametrize("kern", ["logistic", "gumbel"])
def test_kernel_closed_vs_quadrature(kern):
    # dual route: the closed two-margin form against the generic
    # probability-transform quadrature; the bound is set by the quadrature,
    # whose edge nodes under-resolve the integrand's boundary layer once a
    # margin exceeds ~8
    spec = SurrogateSpec("kernel", 3, kernel=KernelKind(kern))
    rng = np.random.default_rng(11)
    x = rng.standard_normal((200, 3)) * 2.0
    for j in (1, 2, 3):
        closed = phi_eval(spec, x, j)
        quad, _ = _kernel_phi_quad(spec, x, np.full(200, j - 1), False)
        assert np.abs(closed - quad).max() < 2e-5


def test_logistic_eta_branch_continuity():
    # crossing the near-diagonal expansion band must not jump
    for s in (-5.0, -0.5, 0.0, 0.7, 2.0, 4.0, 12.0, 40.0):
        inside = float(_eta_logistic(np.array(s + 4.9e-4), np.array(s - 4.9e-4)))
        outside = float(_eta_logistic(np.array(s + 5.1e-4), np.array(s - 5.1e-4)))
        assert abs(inside - outside) < 1e-7


def test_logistic_eta_extremes():
    assert float(_eta_logistic(np.array(-400.0), np.array(1.0))) == 0.0
    assert float(_eta_logistic(np.array(45.0), np.array(44.999))) == pytest.approx(1.0, abs=1e-12)
    assert float(_eta_logistic(np.array(0.0), np.array(0.0))) == pytest.approx(1 / 3, abs=1e-15)
    # symmetry
    rng = np.random.default_rng(3)
    a = rng.standard_normal(50) * 4
    b = rng.standard_normal(50) * 4
    assert np.abs(_eta_logistic(a, b) - _eta_logistic(b, a)).max() < 1e-13


def test_gumbel_eta_origin_and_symmetry():
    assert float(_eta_gumbel(np.array(0.0), np.array(0.0))) == pytest.approx(1 / 3, abs=1e-15)
    rng = np.random.default_rng(4)
    a = rng.standard_normal(50) * 4
    b = rng.standard_normal(50) * 4
    assert np.abs(_eta_gumbel(a, b) - _eta_gumbel(b, a)).max() < 1e-14


@pytest.mark.parametrize("kern,k", [("gumbel", 3), ("logistic", 3), ("gaussian", 3),
                                    ("logistic", 4), ("gaussian", 2)])
def test_kernel_gamma_grad_matches_fd(kern, k):
    spec = SurrogateSpec("kernel", k, kernel=KernelKind(kern))
    rng = np.random.default_rng(13 + k)
    h = 1e-5
    for _ in range(12):
        g = rng.standard_normal(k - 1) * 2.0
        a = int(rng.integers(1, k + 1))
        _, grad = gamma_eval_grad(spec, g, a)
        for d in range(k - 1):
            gp, gm = g.copy(), g.copy()
            gp[d] += h
            gm[d] -= h
            vp, _ = gamma_eval_grad(spec, gp, a)
            vm, _ = gamma_eval_grad(spec, gm, a)
            assert grad[d] == pytest.approx((vp - vm) / (2 * h), abs=2e-6)


def test_custom_kernel_quantile_inversion():
    # triangular kernel on [-1, 1]
    def cdf(z):
        z = np.clip(z, -1.0, 1.0)
        return np.where(z < 0, 0.5 * (1 + z) ** 2, 1 - 0.5 * (1 - z) ** 2)

    def pdf(z):
        return np.where(np.abs(z) <= 1, 1 - np.abs(z), 0.0)

    kern = KernelKind("custom", pdf=pdf, cdf=cdf)
    u = np.linspace(0.01, 0.99, 41)
    z = kern.quantile(u)
    assert np.abs(kern.cdf_eval(z) - u).max() < 1e-10
    spec = SurrogateSpec("kernel", 3, kernel=kern)
    assert phi_eval(spec, np.zeros(3), 2) == pytest.approx(1 / 3, abs=1e-9)


# -------------------------------------------------- template/full identity

@pytest.mark.parametrize("spec", [
    SurrogateSpec("product", 3, tau=TauKind("tanh")),
    SurrogateSpec("product", 4, tau=TauKind("abs_ratio")),
    SurrogateSpec("kernel", 3, kernel=KernelKind("gumbel")),
    SurrogateSpec("kernel", 3, kernel=KernelKind("logistic")),
], ids=["prod-tanh", "prod-abs4", "kern-gumbel", "kern-logistic"])
def test_gamma_equals_phi_on_embedding(spec):
    rng = np.random.default_rng(21)
    g = rng.standard_normal((30, spec.k - 1)) * 3.0
    x = trans_embed(g)
    # the logistic gradient path evaluates by quadrature while phi_eval is
    # closed form, so that pairing is bounded by quadrature accuracy
    tol = 2e-5 if (spec.template == "kernel" and spec.kernel.kind == "logistic") else 1e-12
    for a in range(1, spec.k + 1):
        vals, _ = gamma_eval_grad(spec, g, np.full(30, a))
        direct = phi_eval(spec, x, a)
        assert np.abs(vals - direct).max() < tol


def test_trans_embed_shape_and_sign():
    out = trans_embed(np.array([-3.0, 1.0]))
    assert out == pytest.approx(np.array([0.0, 3.0, -1.0]))


# -------------------------------------------------------- envelope oracle

def test_psi_star_product_tanh():
    spec = SurrogateSpec("product", 3, tau=TauKind("tanh"))
    for p in ([1.0, 0.0, 0.0], [0.2, 0.5, 0.3], [1 / 3, 1 / 3, 1 / 3]):
        est = psi_star_oracle(spec, np.array(p))
        assert est == pytest.approx(max(p), abs=1e-4)


def test_psi_star_scales_with_envelope():
    spec = SurrogateSpec("product", 2, tau=TauKind("tanh", scale=3.0, normalized=False))
    est = psi_star_oracle(spec, np.array([0.7, 0.3]))
    assert est == pytest.approx(spec.c_phi * 0.7, abs=1e-3)


def test_psi_star_kernel():
    spec = SurrogateSpec("kernel", 3, kernel=KernelKind("gumbel"), scale=2.0)
    est = psi_star_oracle(spec, np.array([0.1, 0.8, 0.1]))
    assert est == pytest.approx(2.0 * 0.8, abs=1e-3)


def test_psi_star_never_exceeds_envelope():
    rng = np.random.default_rng(2)
    spec = SurrogateSpec("product", 3, tau=TauKind("logistic_cdf"))
    for _ in range(5):
        p = rng.dirichlet(np.ones(3))
        est = psi_star_oracle(spec, p)
        assert est <= spec.c_phi * p.max() + 1e-9


def test_psi_star_accepts_raw_hard_loss():
    # for the hard zero-one loss the envelope is exactly max(p), even for
    # unnormalized weight vectors
    assert psi_star_oracle(phi_dis, np.array([3.0, 1.0, 2.0])) == 3.0
    assert psi_star_oracle(phi_dis, np.zeros(3)) == 0.0


def test_psi_star_zero_weights():
    spec = SurrogateSpec("product", 3, tau=TauKind("tanh"))
    assert psi_star_oracle(spec, np.zeros(3)) == 0.0


def test_phi_dis_pred_rule():
    assert phi_dis(np.array([1.0, 3.0, 3.0]), 3) == 1.0
    assert phi_dis(np.array([1.0, 3.0, 3.0]), 2) == 0.0
    assert phi_dis(np.array([0.0, 0.0]), 2) == 1.0
    batch = phi_dis(np.array([[5.0, -1.0, 2.0], [0.0, 0.0, 0.0]]), 1)
    assert batch.tolist() == [1.0, 0.0]


# ------------------------------------------------- structural invariants

WELLFORMED = [
    SurrogateSpec("product", 2, tau=TauKind("tanh")),
    SurrogateSpec("product", 3, tau=TauKind("algebraic_ratio")),
    SurrogateSpec("product", 3, tau=TauKind("abs_ratio")),
    SurrogateSpec("product", 3, tau=TauKind("arctan")),
    SurrogateSpec("product", 3, tau=TauKind("logistic_cdf")),
    SurrogateSpec("kernel", 3, kernel=KernelKind("gaussian")),
    SurrogateSpec("kernel", 3, kernel=KernelKind("logistic")),
    SurrogateSpec("kernel", 3, kernel=KernelKind("gumbel")),
]
WELLFORMED_IDS = ["tanh2", "alg3", "abs3", "atan3", "lcdf3", "kgauss", "klogis", "kgumb"]


@pytest.mark.parametrize("spec", WELLFORMED, ids=WELLFORMED_IDS)
def test_structural_invariants(spec):
    """Nonnegativity, envelope bound, shift invariance, permutation
    equivariance, and rank alignment on random scores."""
    rng = np.random.default_rng(7)
    k = spec.k
    X = rng.standard_normal((60, k)) * rng.choice([0.3, 1.0, 3.0, 10.0], size=(60, 1))
    vals = np.stack([phi_eval(spec, X, j) for j in range(1, k + 1)], axis=1)
    assert (vals >= 0.0).all()
    assert (vals <= spec.c_phi + 1e-9).all()
    # rank alignment: a clearly larger coordinate never scores lower
    for i in range(60):
        for a in range(k):
            for b in range(k):
                if X[i, a] - X[i, b] > 0.05:
                    assert vals[i, b] <= vals[i, a] + 1e-9
    # shift invariance and permutation equivariance
    sub = X[:20]
    for c in (-4.2, 1.7):
        for j in range(1, k + 1):
            assert np.abs(phi_eval(spec, sub + c, j) - phi_eval(spec, sub, j)).max() < 1e-9
    perm = rng.permutation(k)
    inv = np.argsort(perm)
    for j in range(1, k + 1):
        lhs = phi_eval(spec, sub[:, perm], int(inv[j - 1]) + 1)
        assert np.abs(lhs - phi_eval(spec, sub, j)).max() < 1e-9


# ---------------------------------------------------------------- audits

@pytest.mark.parametrize("spec", WELLFORMED, ids=WELLFORMED_IDS)
def test_audit_passes_for_wellformed(spec):
    report = audit_conditions(spec, p_samples=40, x_samples=80, tol=1e-3, seed=0)
    assert isinstance(report, ConditionReport)
    assert report.all_pass, "\n".join(report.lines())
    assert report.N1_margin > 0.0
    assert report.J_empirical >= report.J_reference - 1e-9


def test_audit_j_matches_known_constants():
    prod = audit_conditions(
        SurrogateSpec("product", 3, tau=TauKind("tanh")),
        p_samples=5, x_samples=40, tol=1e-3, seed=1,
    )
    assert prod.J_reference == pytest.approx(0.25, abs=1e-12)
    assert prod.J_empirical == pytest.approx(0.25, abs=1e-9)  # attained at 0
    kern = audit_conditions(
        SurrogateSpec("kernel", 3, kernel=KernelKind("gumbel")),
        p_samples=5, x_samples=40, tol=1e-3, seed=1,
    )
    assert kern.J_reference == pytest.approx(1 / 3, abs=1e-12)
    assert kern.J_empirical == pytest.approx(1 / 3, abs=1e-9)
    assert kern.symmetry_dev < 1e-8


def test_audit_flags_decreasing_link():
    broken = TauKind("custom", fn=lambda x: 1.0 - 0.5 * (1 + np.tanh(x)),
                     dfn=lambda x: -0.5 / np.cosh(x) ** 2)
    spec = SurrogateSpec("product", 3, tau=broken)
    report = audit_conditions(spec, p_samples=10, x_samples=30, tol=1e-3, seed=1)
    assert not report.all_pass
    # a decreasing link rewards the *smallest* coordinate: the constrained
    # sup ties the free one (margin <= 0) and the limit flips to the loser
    assert not report.N1_pass or not report.N3_pass


def test_audit_shifted_loss_fails_n2():
    base = SurrogateSpec("product", 3, tau=TauKind("tanh"))

    def shifted(X, j):
        return phi_eval(base, X, j) + 0.5

    report = audit_conditions(
        shifted, k=3, c_phi=base.c_phi, p_samples=15, x_samples=20, tol=1e-3, seed=3
    )
    assert not report.N2_pass
    # the deviation is 0.5 * sum(p), which grows with the sampled radii
    assert report.N2_max_abs_dev > 0.25


def test_audit_raw_callable_requires_metadata():
    with pytest.raises(ValueError):
        audit_conditions(phi_dis, p_samples=2, x_samples=2)


def test_audit_report_fields_and_json():
    import json

    spec = SurrogateSpec("product", 2, tau=TauKind("tanh"))
    report = audit_conditions(spec, p_samples=8, x_samples=16, tol=1e-3, seed=0)
    lines = report.lines()
    assert lines[0].startswith("audit product/tanh")
    for name in ("N1_margin", "N2_max_abs_dev", "N3_limit_dev", "J_empirical",
                 "symmetry_dev"):
        assert any(name in ln for ln in lines)
    blob = json.dumps(report.to_json())
    round_trip = json.loads(blob)
    assert round_trip["p_samples"] == 8
    assert round_trip["x_samples"] == 16
    assert round_trip["N1_pass"] is True
    # deviations are reported nonnegative
    for key in ("N2_max_abs_dev", "N3_limit_dev", "symmetry_dev"):
        assert round_trip[key] >= 0.0


# ----------------------------------------------------------- spec plumbing

def test_spec_validation_errors():
    with pytest.raises(ValueError):
        SurrogateSpec("product", 3)
    with pytest.raises(ValueError):
        SurrogateSpec("kernel", 3)
    with pytest.raises(ValueError):
        SurrogateSpec("product", 1, tau=TauKind("tanh"))
    with pytest.raises(ValueError):
        TauKind("nope")
    with pytest.raises(ValueError):
        KernelKind("nope")


def test_envelope_constants():
    assert SurrogateSpec("product", 3, tau=TauKind("tanh")).c_phi == pytest.approx(1.0)
    assert SurrogateSpec("product", 3, tau=TauKind("tanh", normalized=False)).c_phi == pytest.approx(4.0)
    assert SurrogateSpec("kernel", 3, kernel=KernelKind("gumbel"), scale=2.5).c_phi == 2.5
    assert SurrogateSpec("product", 4, tau=TauKind("tanh")).origin_value == pytest.approx(0.125)
    assert SurrogateSpec("kernel", 3, kernel=KernelKind("logistic")).origin_value == pytest.approx(1 / 3)


def test_phi_eval_rejects_bad_treatment():
    spec = SurrogateSpec("product", 3, tau=TauKind("tanh"))
    with pytest.raises(ValueError):
        phi_eval(spec, np.zeros(3), 0)
    with pytest.raises(ValueError):
        phi_eval(spec, np.zeros(3), 4)
