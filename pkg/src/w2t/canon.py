"""Canonical rank-wise singular decomposition of LoRA updates.

The update induced by a factor pair, delta_W = B @ A, admits an exact
r-slot SVD. That decomposition depends only on the product, so every
reparameterized pair (B G, G^-1 A) with invertible G maps to the same
(U, sigma, V) once a deterministic sign and ordering convention is
applied. `canonize` computes it directly from the stored factors via
thin QR of B and A^T plus an SVD of the r x r core M = R_B @ R_A^T,
never materializing the d_out x d_in product; `dense_svd_oracle` is the
reference route that does materialize it, kept for tests and benchmarks.

Internal accumulation is float64 for the QR path regardless of payload
dtype; outputs are rounded back to the payload dtype. The dense oracle
runs at payload precision so that benchmark timings and gap magnitudes
reflect the direct route as it would actually be run on stored files.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateDimensions,
    NonFiniteInput,
    RankMismatch,
    ResampleBudgetExhausted,
    ShapeMismatch,
    TooLargeForOracle,
)
from .interchange import FactorPair

ORACLE_MAX_ENTRIES = 2**24
GL_CONDITION_LIMIT = 1e4
GL_RESAMPLE_BUDGET = 64


@dataclass
class CanonicalUpdate:
    """(U, sigma, V) with orthonormal columns, sigma non-negative non-increasing."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return self.sigma.shape[0]

    def check_invariants(self, atol: float | None = None) -> None:
        """Assert orthonormality, ordering and the sign convention; test helper."""
        r = self.rank
        if atol is None:
            atol = 1e-5 if self.U.dtype == np.float32 else 1e-10
        for Mat in (self.U, self.V):
            gram = Mat.astype(np.float64).T @ Mat.astype(np.float64)
            if np.abs(gram - np.eye(r)).max() > atol:
                raise AssertionError("columns are not orthonormal within tolerance")
        if np.any(self.sigma < 0) or np.any(np.diff(self.sigma) > 0):
            raise AssertionError("sigma must be non-negative and non-increasing")
        for k in range(r):
            col = self.U[:, k]
            j = int(np.argmax(np.abs(col)))
            if col[j] < 0:
                raise AssertionError(f"sign convention violated in column {k}")


@dataclass
class GlTransform:
    """Invertible r x r reparameterization with its sampling strength."""

    G: np.ndarray
    alpha: float


@dataclass
class EquivReport:
    """Agreement and timing between the QR-based path and the dense oracle."""

    sigma_gap: float
    update_gap: float
    u_subspace_cos: float
    v_subspace_cos: float
    time_direct_ms: float = 0.0
    time_qr_ms: float = 0.0
    speedup: float = float("nan")
    d_out: int = 0
    d_in: int = 0
    r: int = 0
    trials: int = 0


def _as_factors(fp) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(fp, FactorPair):
        B, A = fp.B, fp.A
    else:
        B, A = fp
        B = np.asarray(B)
        A = np.asarray(A)
    if B.ndim != 2 or A.ndim != 2 or B.shape[1] != A.shape[0]:
        raise ShapeMismatch(f"incompatible factor shapes {B.shape} x {A.shape}")
    if not (np.isfinite(B).all() and np.isfinite(A).all()):
        raise NonFiniteInput("factors contain NaN or Inf")
    r = B.shape[1]
    if r < 1 or B.shape[0] < r or A.shape[1] < r:
        raise DegenerateDimensions(
            f"need d_out >= r and d_in >= r, got {B.shape[0]} x {A.shape[1]} with r={r}"
        )
    return B, A


def apply_convention(U, sigma, V):
    """Fix signs and ordering so the decomposition is a pure function of the update.

    Per column the entry of U with largest magnitude (first index on
    ties) is made non-negative, negating the matching V column with it.
    Columns are then sorted by descending sigma; exact sigma ties are
    broken lexicographically by the sign-fixed U column. Applying the
    convention twice equals applying it once.
    """
    U = np.array(U, copy=True)
    V = np.array(V, copy=True)
    sigma = np.array(sigma, copy=True)
    r = sigma.shape[0]
    j = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[j, np.arange(r)])
    signs[signs == 0] = 1.0
    U *= signs
    V *= signs
    order = np.argsort(-sigma, kind="stable")
    s_sorted = sigma[order]
    if np.any(s_sorted[1:] == s_sorted[:-1]):
        order = sorted(range(r), key=lambda k: (-sigma[k],) + tuple(U[:, k]))
    return U[:, order], sigma[order], V[:, order]


def core_matrix(fp) -> np.ndarray:
    """The r x r core M = R_B @ R_A^T whose SVD carries the singular structure."""
    B, A = _as_factors(fp)
    _, Rb = np.linalg.qr(B.astype(np.float64, copy=False), mode="reduced")
    _, Ra = np.linalg.qr(A.T.astype(np.float64, copy=False), mode="reduced")
    return Rb @ Ra.T


def canonize(fp) -> CanonicalUpdate:
    """Canonical decomposition straight from the factors.

    Cost is O((d_out + d_in) r^2 + r^3): thin QR of B and A^T, SVD of the
    r x r core, then lifting U = Q_B @ Uhat and V = Q_A @ Vhat.
    """
    B, A = _as_factors(fp)
    dtype = np.result_type(B.dtype, A.dtype)
    if dtype not in (np.float32, np.float64):
        dtype = np.float64
    B64 = B.astype(np.float64, copy=False)
    A64 = A.astype(np.float64, copy=False)
    Qb, Rb = np.linalg.qr(B64, mode="reduced")
    Qa, Ra = np.linalg.qr(A64.T, mode="reduced")
    M = Rb @ Ra.T
    Uh, s, Vh = np.linalg.svd(M)
    U = Qb @ Uh
    V = Qa @ Vh.T
    U, s, V = apply_convention(U, s, V)
    return CanonicalUpdate(U.astype(dtype), s.astype(dtype), V.astype(dtype))


def dense_svd_oracle(fp) -> CanonicalUpdate:
    """Reference decomposition: materialize the update and run a full SVD.

    Runs at payload precision and is the comparison target for tests and
    benchmarks; refuses products above ORACLE_MAX_ENTRIES entries.
    """
    B, A = _as_factors(fp)
    if B.shape[0] * A.shape[1] > ORACLE_MAX_ENTRIES:
        raise TooLargeForOracle(
            f"{B.shape[0]} x {A.shape[1]} exceeds the {ORACLE_MAX_ENTRIES}-entry guard"
        )
    r = B.shape[1]
    dW = B @ A
    U, s, Vh = np.linalg.svd(dW, full_matrices=False)
    U, s, V = U[:, :r], s[:r], Vh[:r].T
    U, s, V = apply_convention(U, s, V)
    dtype = dW.dtype
    return CanonicalUpdate(U.astype(dtype), s.astype(dtype), V.astype(dtype))


def rank_tolerance(sigma, d_out: int, d_in: int, dtype) -> float:
    """Threshold below which a singular value counts as zero."""
    eps = np.finfo(np.dtype(dtype)).eps
    top = float(sigma[0]) if len(sigma) else 0.0
    return eps * top * max(d_out, d_in)


def lowrank_frobenius(X, s, Y) -> float:
    """Frobenius norm of X @ diag(s) @ Y^T using only r-dimensional Grams."""
    X = X.astype(np.float64, copy=False)
    Y = Y.astype(np.float64, copy=False)
    s = np.asarray(s, dtype=np.float64)
    Gx = X.T @ X
    Gy = Y.T @ Y
    val = s @ (Gx * Gy) @ s
    return float(np.sqrt(max(val, 0.0)))


def lowrank_diff_frobenius(X1, s1, Y1, X2, s2, Y2) -> float:
    """Frobenius norm of X1 diag(s1) Y1^T - X2 diag(s2) Y2^T without forming it."""
    P = np.concatenate([X1, X2], axis=1).astype(np.float64, copy=False)
    Q = np.concatenate([Y1, Y2], axis=1).astype(np.float64, copy=False)
    c = np.concatenate([np.asarray(s1, dtype=np.float64), -np.asarray(s2, dtype=np.float64)])
    Gp = P.T @ P
    Gq = Q.T @ Q
    val = c @ (Gp * Gq) @ c
    return float(np.sqrt(max(val, 0.0)))


def reconstruction_gap(cu: CanonicalUpdate, fp) -> float:
    """Relative error || U Sigma V^T - B A ||_F / || B A ||_F, all in r-dim projections."""
    B, A = _as_factors(fp)
    ones = np.ones(B.shape[1])
    denom = max(lowrank_frobenius(B, ones, A.T), np.finfo(np.float64).tiny)
    num = lowrank_diff_frobenius(cu.U, cu.sigma, cu.V, B, ones, A.T)
    return num / denom


def subspace_min_cosine(Ua, Ub) -> float:
    """Smallest principal-angle cosine between the column spans."""
    if Ua.shape[1] == 0 and Ub.shape[1] == 0:
        return 1.0
    if Ua.shape[1] == 0 or Ub.shape[1] == 0:
        return 0.0
    cross = Ua.astype(np.float64, copy=False).T @ Ub.astype(np.float64, copy=False)
    svals = np.linalg.svd(cross, compute_uv=False)
    k = min(Ua.shape[1], Ub.shape[1])
    return float(np.clip(svals[:k].min(), 0.0, 1.0))


def compare_canonical(a: CanonicalUpdate, b: CanonicalUpdate, fp) -> EquivReport:
    """Gap and subspace-cosine metrics between two decompositions of the same pair."""
    if a.U.shape != b.U.shape or a.V.shape != b.V.shape:
        raise ShapeMismatch(
            f"decompositions disagree on shape: {a.U.shape}/{a.V.shape} "
            f"vs {b.U.shape}/{b.V.shape}"
        )
    B, A = _as_factors(fp)
    sa = a.sigma.astype(np.float64)
    sb = b.sigma.astype(np.float64)
    eps = np.finfo(np.float64).tiny
    sigma_gap = float(np.abs(sa - sb).max() / max(sa[0], eps))

    identical = (
        a.U.tobytes() == b.U.tobytes()
        and a.sigma.tobytes() == b.sigma.tobytes()
        and a.V.tobytes() == b.V.tobytes()
    )
    if identical:
        return EquivReport(
            sigma_gap=0.0, update_gap=0.0, u_subspace_cos=1.0, v_subspace_cos=1.0,
            d_out=B.shape[0], d_in=A.shape[1], r=B.shape[1],
        )

    ones = np.ones(B.shape[1])
    denom = max(lowrank_frobenius(B, ones, A.T), eps)
    update_gap = lowrank_diff_frobenius(a.U, sa, a.V, b.U, sb, b.V) / denom

    tol_a = rank_tolerance(sa, B.shape[0], A.shape[1], a.U.dtype)
    tol_b = rank_tolerance(sb, B.shape[0], A.shape[1], b.U.dtype)
    keep_a = sa > tol_a
    keep_b = sb > tol_b
    u_cos = subspace_min_cosine(a.U[:, keep_a], b.U[:, keep_b])
    v_cos = subspace_min_cosine(a.V[:, keep_a], b.V[:, keep_b])
    return EquivReport(
        sigma_gap=sigma_gap,
        update_gap=update_gap,
        u_subspace_cos=u_cos,
        v_subspace_cos=v_cos,
        d_out=B.shape[0],
        d_in=A.shape[1],
        r=B.shape[1],
    )


def sample_gl(r: int, alpha: float, rng) -> GlTransform:
    """Draw G = I + alpha * E with E entries iid N(0, 1/r).

    Resamples until the condition number is at most GL_CONDITION_LIMIT;
    alpha = 0 returns the identity exactly.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if alpha == 0:
        return GlTransform(G=np.eye(r), alpha=0.0)
    for _ in range(GL_RESAMPLE_BUDGET):
        E = rng.standard_normal((r, r)) / np.sqrt(r)
        G = np.eye(r) + alpha * E
        if np.linalg.cond(G) <= GL_CONDITION_LIMIT:
            return GlTransform(G=G, alpha=float(alpha))
    raise ResampleBudgetExhausted(
        f"no well-conditioned G within {GL_RESAMPLE_BUDGET} draws at alpha={alpha}"
    )


def apply_gl(fp, t: GlTransform) -> FactorPair:
    """Reparameterize (B, A) -> (B G, G^-1 A); the induced update is unchanged."""
    B, A = _as_factors(fp)
    r = B.shape[1]
    if t.G.shape != (r, r):
        raise RankMismatch(f"transform is {t.G.shape}, factors have rank {r}")
    G = t.G.astype(np.float64, copy=False)
    Bp = B.astype(np.float64, copy=False) @ G
    Ap = np.linalg.solve(G, A.astype(np.float64, copy=False))
    return FactorPair(Bp.astype(B.dtype), Ap.astype(A.dtype))


def bench_equivalence(dims, r: int, trials: int, seed: int, dtype=np.float32) -> list[EquivReport]:
    """Run both decomposition routes on seeded random pairs for each (d_out, d_in).

    Per dim: per-pair median gaps, mean of per-pair minimum subspace
    cosines, median wall-clock per route, and the speedup ratio of the
    medians. Timing samples are pinned to one BLAS thread.
    """
    from .runtime import blas_threads

    if trials == 0:
        return []
    reports = []
    for d_out, d_in in dims:
        rng = np.random.default_rng([seed, d_out, d_in])
        sig, upd, ucos, vcos, t_qr, t_direct = [], [], [], [], [], []
        with blas_threads(1):
            for _ in range(trials):
                fp = FactorPair(
                    rng.standard_normal((d_out, r)).astype(dtype),
                    rng.standard_normal((r, d_in)).astype(dtype),
                )
                t0 = time.perf_counter()
                fast = canonize(fp)
                t1 = time.perf_counter()
                direct = dense_svd_oracle(fp)
                t2 = time.perf_counter()
                rep = compare_canonical(fast, direct, fp)
                sig.append(rep.sigma_gap)
                upd.append(rep.update_gap)
                ucos.append(rep.u_subspace_cos)
                vcos.append(rep.v_subspace_cos)
                t_qr.append(t1 - t0)
                t_direct.append(t2 - t1)
        med_qr = float(np.median(t_qr)) * 1e3
        med_direct = float(np.median(t_direct)) * 1e3
        reports.append(
            EquivReport(
                sigma_gap=float(np.median(sig)),
                update_gap=float(np.median(upd)),
                u_subspace_cos=float(np.mean(ucos)),
                v_subspace_cos=float(np.mean(vcos)),
                time_direct_ms=med_direct,
                time_qr_ms=med_qr,
                speedup=med_direct / med_qr if med_qr > 0 else float("nan"),
                d_out=d_out,
                d_in=d_in,
                r=r,
                trials=trials,
            )
        )
    return reports
