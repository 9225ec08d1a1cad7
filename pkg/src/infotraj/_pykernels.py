"""Pure NumPy implementations of the squared-exponential kernel hot ops.

Mirrors the compiled `_ckernels` extension one to one; `backend` picks
whichever is available (or forced). All arrays are float64, C-contiguous.
"""

import numpy as np


def se_gram(X, inv_ls, sf2, diag_add):
    """Symmetric SE Gram matrix of X (n,d), with `diag_add` added on the diagonal."""
    S = X * inv_ls
    d2 = np.sum(S * S, axis=1)
    sq = d2[:, None] + d2[None, :] - 2.0 * (S @ S.T)
    np.maximum(sq, 0.0, out=sq)
    K = sf2 * np.exp(-0.5 * sq)
    np.fill_diagonal(K, sf2 + diag_add)
    return K


def se_cross(A, B, inv_ls, sf2):
    """Cross-covariance matrix between rows of A (na,d) and B (nb,d)."""
    SA = A * inv_ls
    SB = B * inv_ls
    sq = (
        np.sum(SA * SA, axis=1)[:, None]
        + np.sum(SB * SB, axis=1)[None, :]
        - 2.0 * (SA @ SB.T)
    )
    np.maximum(sq, 0.0, out=sq)
    return sf2 * np.exp(-0.5 * sq)


def se_vec(X, q, inv_ls, sf2):
    """Covariance vector k(X, q) for a single query q (d,)."""
    diff = (X - q) * inv_ls
    return sf2 * np.exp(-0.5 * np.sum(diff * diff, axis=1))


def mean_one(X, q, inv_ls, sf2, alpha):
    """Posterior mean k(q,X) @ alpha for a single query."""
    return float(se_vec(X, q, inv_ls, sf2) @ alpha)


def mean_quad_one(X, q, inv_ls, sf2, alpha, kinv):
    """Posterior mean and the variance-reduction quadratic form k' Kinv k."""
    k = se_vec(X, q, inv_ls, sf2)
    return float(k @ alpha), float(k @ (kinv @ k))


def mean_multi(X, q, inv_ls_stack, sf2s, alphas):
    """Posterior means of C channels sharing the training inputs X.

    inv_ls_stack is (C, d), sf2s (C,), alphas (C, n); returns (C,).
    """
    diff = X - q
    sq = np.einsum("nd,cd->cn", diff * diff, inv_ls_stack * inv_ls_stack)
    K = np.exp(-0.5 * sq)
    return sf2s * np.einsum("cn,cn->c", K, alphas)
