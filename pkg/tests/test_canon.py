import numpy as np
import pytest

from w2t import canon
from w2t.errors import (
    DegenerateDimensions,
    NonFiniteInput,
    RankMismatch,
    ResampleBudgetExhausted,
    ShapeMismatch,
    TooLargeForOracle,
)
from w2t.interchange import FactorPair


def random_pair(rng, d_out, d_in, r, dtype=np.float32):
    return FactorPair(
        rng.standard_normal((d_out, r)).astype(dtype),
        rng.standard_normal((r, d_in)).astype(dtype),
    )


def test_rank_one_axis_aligned():
    fp = FactorPair(np.array([[1.0], [0.0]]), np.array([[2.0, 0.0]]))
    cu = canon.canonize(fp)
    np.testing.assert_allclose(cu.sigma, [2.0], atol=1e-12)
    np.testing.assert_allclose(cu.U, [[1.0], [0.0]], atol=1e-12)
    np.testing.assert_allclose(cu.V, [[1.0], [0.0]], atol=1e-12)


def test_zero_update_trailing_zeros():
    fp = FactorPair(np.array([[2.0, 0.0], [0.0, 0.0]]), np.zeros((2, 2)))
    cu = canon.canonize(fp)
    np.testing.assert_allclose(cu.sigma, [0.0, 0.0], atol=1e-12)
    gram = cu.U.T @ cu.U
    np.testing.assert_allclose(gram, np.eye(2), atol=1e-12)


def test_canonize_matches_dense_oracle_seeded():
    rng = np.random.default_rng(42)
    fp = random_pair(rng, 64, 48, 4)
    fast = canon.canonize(fp)
    direct = canon.dense_svd_oracle(fp)
    rel = np.abs(fast.sigma - direct.sigma) / direct.sigma[0]
    assert rel.max() <= 1e-5


# update-gap floors reflect the r-dimensional projection trick, whose
# cancellation noise sits near sqrt(eps_f64) relative
@pytest.mark.parametrize(
    "dtype,sigma_tol,update_tol", [(np.float32, 1e-5, 1e-4), (np.float64, 1e-10, 1e-7)]
)
def test_oracle_equivalence_small_instances(dtype, sigma_tol, update_tol):
    rng = np.random.default_rng(7)
    for _ in range(60):
        d_out = int(rng.integers(2, 40))
        d_in = int(rng.integers(2, 40))
        r = int(rng.integers(1, min(d_out, d_in) + 1))
        fp = random_pair(rng, d_out, d_in, r, dtype)
        rep = canon.compare_canonical(canon.canonize(fp), canon.dense_svd_oracle(fp), fp)
        assert rep.sigma_gap <= sigma_tol
        assert rep.update_gap <= update_tol


def test_canonical_invariants_hold():
    rng = np.random.default_rng(8)
    for _ in range(20):
        fp = random_pair(rng, 30, 25, 5, np.float64)
        cu = canon.canonize(fp)
        cu.check_invariants()
        assert canon.reconstruction_gap(cu, fp) <= 1e-7


def test_reconstruction_gap_float32():
    rng = np.random.default_rng(9)
    for _ in range(20):
        fp = random_pair(rng, 80, 60, 8, np.float32)
        cu = canon.canonize(fp)
        assert canon.reconstruction_gap(cu, fp) <= 1e-5


def test_gram_relation():
    # eigenvalues of M^T M equal the squared dense-oracle singular values
    rng = np.random.default_rng(10)
    for _ in range(20):
        fp = random_pair(rng, 24, 20, 4, np.float64)
        M = canon.core_matrix(fp)
        eig = np.sort(np.linalg.eigvalsh(M.T @ M))[::-1]
        s2 = canon.dense_svd_oracle(fp).sigma ** 2
        rel = np.abs(eig - s2) / s2[0]
        assert rel.max() <= 1e-4


def test_convention_idempotent():
    rng = np.random.default_rng(11)
    fp = random_pair(rng, 16, 12, 4, np.float64)
    cu = canon.canonize(fp)
    U2, s2, V2 = canon.apply_convention(cu.U, cu.sigma, cu.V)
    np.testing.assert_array_equal(U2, cu.U)
    np.testing.assert_array_equal(s2, cu.sigma)
    np.testing.assert_array_equal(V2, cu.V)


def test_convention_breaks_exact_ties_deterministically():
    # two exactly equal singular values: ordering must be reproducible
    U = np.eye(4)[:, :2]
    V = np.eye(5)[:, :2]
    s = np.array([1.0, 1.0])
    U1, s1, V1 = canon.apply_convention(U[:, ::-1], s, V[:, ::-1])
    U2, s2, V2 = canon.apply_convention(U, s, V)
    np.testing.assert_array_equal(U1, U2)
    np.testing.assert_array_equal(V1, V2)


def test_determinism_same_bytes():
    rng = np.random.default_rng(12)
    fp = random_pair(rng, 40, 30, 6)
    a = canon.canonize(fp)
    b = canon.canonize(fp)
    assert a.U.tobytes() == b.U.tobytes()
    assert a.sigma.tobytes() == b.sigma.tobytes()
    assert a.V.tobytes() == b.V.tobytes()


def test_validation_errors():
    with pytest.raises(NonFiniteInput):
        canon.canonize((np.array([[np.inf], [1.0]]), np.ones((1, 2))))
    with pytest.raises(DegenerateDimensions):
        canon.canonize((np.ones((1, 2)), np.ones((2, 4))))
    with pytest.raises(ShapeMismatch):
        canon.canonize((np.ones((3, 2)), np.ones((3, 4))))


def test_oracle_guard():
    B = np.zeros((8192, 2), dtype=np.float32)
    A = np.zeros((2, 8192), dtype=np.float32)
    B[0, 0] = 1.0
    A[0, 0] = 1.0
    with pytest.raises(TooLargeForOracle):
        canon.dense_svd_oracle((B, A))


def test_compare_identity():
    rng = np.random.default_rng(13)
    fp = random_pair(rng, 20, 18, 3)
    cu = canon.canonize(fp)
    rep = canon.compare_canonical(cu, cu, fp)
    assert rep.sigma_gap == 0.0
    assert rep.update_gap == 0.0
    assert rep.u_subspace_cos == 1.0
    assert rep.v_subspace_cos == 1.0


def test_compare_sign_pair_flip():
    rng = np.random.default_rng(14)
    fp = random_pair(rng, 20, 18, 3, np.float64)
    cu = canon.canonize(fp)
    flipped = canon.CanonicalUpdate(cu.U.copy(), cu.sigma.copy(), cu.V.copy())
    flipped.U[:, 1] *= -1
    flipped.V[:, 1] *= -1
    rep = canon.compare_canonical(cu, flipped, fp)
    assert rep.update_gap <= 1e-12
    assert rep.u_subspace_cos >= 1 - 1e-12
    assert rep.v_subspace_cos >= 1 - 1e-12


def test_compare_shape_mismatch():
    rng = np.random.default_rng(15)
    fp = random_pair(rng, 20, 18, 3)
    other = canon.canonize(random_pair(rng, 10, 18, 3))
    with pytest.raises(ShapeMismatch):
        canon.compare_canonical(canon.canonize(fp), other, fp)


def test_sample_gl_identity_at_zero():
    rng = np.random.default_rng(16)
    t = canon.sample_gl(8, 0.0, rng)
    np.testing.assert_array_equal(t.G, np.eye(8))


def test_sample_gl_conditioning():
    rng = np.random.default_rng(17)
    t = canon.sample_gl(8, 1.0, rng)
    # condition number via the dense SVD route
    svals = np.linalg.svd(t.G, compute_uv=False)
    assert svals[-1] > 0
    assert svals[0] / svals[-1] <= 1e4


def test_sample_gl_resample_budget():
    class AdversarialRng:
        def standard_normal(self, size):
            return np.ones(size)  # rank-1 E; I + alpha*E is near-singular for huge alpha

    with pytest.raises(ResampleBudgetExhausted):
        canon.sample_gl(8, 1e9, AdversarialRng())


def test_apply_gl_identity_bitwise():
    rng = np.random.default_rng(18)
    fp = random_pair(rng, 12, 10, 4)
    out = canon.apply_gl(fp, canon.GlTransform(np.eye(4), 0.0))
    assert out.B.tobytes() == fp.B.tobytes()
    assert out.A.tobytes() == fp.A.tobytes()


def test_apply_gl_scalar():
    rng = np.random.default_rng(19)
    fp = random_pair(rng, 12, 10, 4)
    out = canon.apply_gl(fp, canon.GlTransform(2.0 * np.eye(4), 0.0))
    np.testing.assert_allclose(out.B, 2.0 * fp.B, rtol=1e-6)
    np.testing.assert_allclose(out.A, 0.5 * fp.A, rtol=1e-6)
    s0 = canon.canonize(fp).sigma
    s1 = canon.canonize(out).sigma
    assert (np.abs(s0 - s1) / s0[0]).max() <= 1e-5


def test_apply_gl_rank_mismatch():
    rng = np.random.default_rng(20)
    fp = random_pair(rng, 12, 10, 4)
    with pytest.raises(RankMismatch):
        canon.apply_gl(fp, canon.GlTransform(np.eye(3), 0.0))


@pytest.mark.parametrize("alpha", [0.01, 0.1, 0.5, 1.0])
def test_gl_invariance_float32(alpha):
    rng = np.random.default_rng(21)
    for _ in range(5):
        fp = random_pair(rng, 64, 48, 8, np.float32)
        t = canon.sample_gl(8, alpha, rng)
        fp2 = canon.apply_gl(fp, t)
        a = canon.canonize(fp)
        b = canon.canonize(fp2)
        assert np.all(np.diff(a.sigma) <= 0) and np.all(np.diff(b.sigma) <= 0)
        rep = canon.compare_canonical(a, b, fp)
        assert rep.sigma_gap <= 1e-4
        assert rep.u_subspace_cos >= 0.999
        assert rep.v_subspace_cos >= 0.999


def test_bench_zero_trials():
    assert canon.bench_equivalence([(16, 16)], r=8, trials=0, seed=1) == []


def test_bench_small_dims_well_formed():
    reports = canon.bench_equivalence([(16, 16), (32, 24)], r=4, trials=3, seed=2)
    assert len(reports) == 2
    for rep in reports:
        assert rep.sigma_gap >= 0
        assert 0 <= rep.u_subspace_cos <= 1
        assert rep.time_qr_ms > 0 and rep.time_direct_ms > 0
        assert rep.speedup == pytest.approx(rep.time_direct_ms / rep.time_qr_ms)
        assert rep.trials == 3


def test_bench_deterministic_gaps():
    a = canon.bench_equivalence([(24, 24)], r=4, trials=3, seed=5)[0]
    b = canon.bench_equivalence([(24, 24)], r=4, trials=3, seed=5)[0]
    assert a.sigma_gap == b.sigma_gap
    assert a.update_gap == b.update_gap
