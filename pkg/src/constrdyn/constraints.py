"""Structural penalties on the Jacobian of a learned vector field.

* ``hamiltonian_constraint``: ||J^T A - A^T J||_F^2, zero exactly when
  J^-1 A is symmetric, i.e. when A is the Jacobian of a Hamiltonian field.
* ``transformed_hamiltonian_constraint``: the same penalty on the latent
  Jacobian of a coupling-transformed model.
* ``dissipative_constraint``: sum_i max(0, Re(lambda_i) - a_i)^2 over the
  eigenvalues of A, differentiated analytically through left/right
  eigenvectors.

All penalties accept a single ``(n, n)`` matrix or a batch ``(..., n, n)``.
Given an autodiff Var they return a Var; given an array they return plain
values.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .models import symplectic_matrix

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is optional
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn

__all__ = [
    "CONSTRAINT_KINDS",
    "ConstraintSpec",
    "EigenResult",
    "EigenConvergenceError",
    "hamiltonian_constraint",
    "transformed_hamiltonian_constraint",
    "eig_nonsymmetric",
    "dissipative_constraint",
    "hamiltonian_spectrum_check",
]

log = logging.getLogger(__name__)

CONSTRAINT_KINDS = ("none", "hamiltonian", "transformed_hamiltonian", "dissipative")
ILL_CONDITIONED = 1e-8


@dataclass
class ConstraintSpec:
    kind: str = "none"
    weight: float = 0.0
    bounds: list = field(default=None)

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise ValueError(f"unknown constraint {self.kind!r}; choose from {CONSTRAINT_KINDS}")
        self.weight = float(self.weight)
        if not self.weight >= 0:
            raise ValueError("constraint weight must be >= 0")
        if self.bounds is not None:
            self.bounds = [float(a) for a in self.bounds]

    def bounds_for(self, n):
        if self.bounds is None:
            return np.zeros(n)
        if len(self.bounds) != n:
            raise ValueError(f"need {n} eigenvalue bounds, got {len(self.bounds)}")
        return np.asarray(self.bounds)

    def penalty(self, jac):
        """Per-sample penalty of the matching kind on a Jacobian batch."""
        if self.kind in ("hamiltonian", "transformed_hamiltonian"):
            return hamiltonian_constraint(jac)
        if self.kind == "dissipative":
            return dissipative_constraint(jac, self.bounds_for(ad.as_var(jac).shape[-1]))
        raise ValueError("the 'none' constraint has no penalty")

    def to_dict(self):
        return {"kind": self.kind, "weight": self.weight, "bounds": self.bounds}


def _returns_like(inp, out: ad.Var):
    if isinstance(inp, ad.Var):
        return out
    v = out.value
    return float(v) if v.ndim == 0 else v


def hamiltonian_constraint(jac):
    """Squared Frobenius norm of J^T A - A^T J."""
    A = ad.as_var(jac)
    n = A.shape[-1]
    if A.ndim < 2 or A.shape[-2] != n:
        raise ValueError(f"Jacobian must be square, got shape {A.shape}")
    J = symplectic_matrix(n)
    resid = ad.matmul(J.T, A) - ad.matmul(ad.swapaxes(A, -1, -2), J)
    return _returns_like(jac, ad.vsum(ad.square(resid), axis=(-2, -1)))


def transformed_hamiltonian_constraint(model, s, tensors=None):
    """Hamiltonian penalty on the latent-space Jacobian d f_z / dz at z = g(s)."""
    if model.kind != "transformed_node":
        raise ValueError("transformed_hamiltonian_constraint needs a transformed_node model")
    plain = tensors is None
    tensors = model.bind() if plain else tensors
    _, jac = model.value_and_constraint_jacobian(tensors, s)
    out = hamiltonian_constraint(jac)
    return _returns_like(None, out) if plain else out


# --- nonsymmetric eigensolver -----------------------------------------------------


class EigenConvergenceError(RuntimeError):
    pass


@dataclass
class EigenResult:
    eigenvalues: np.ndarray  # complex (n,)
    right_vectors: np.ndarray  # complex (n, n), column k pairs with eigenvalue k
    left_vectors: np.ndarray  # complex (n, n), u_k^H A = lambda_k u_k^H
    ill_conditioned: np.ndarray  # bool (n,), |u_k^H v_k| below threshold

    @property
    def real(self):
        return self.eigenvalues.real

    @property
    def imag(self):
        return self.eigenvalues.imag


@njit(cache=True)
def _schur_kernel(A, max_sweeps):
    n = A.shape[0]
    T = A.astype(np.complex128)
    Z = np.eye(n).astype(np.complex128)
    eps = 2.220446049250313e-16
    norm_a = 0.0
    for i in range(n):
        for j in range(n):
            norm_a += abs(T[i, j]) ** 2
    norm_a = np.sqrt(norm_a)

    # Householder reduction to upper Hessenberg form: T <- P T P, Z <- Z P
    v = np.zeros(n, dtype=np.complex128)
    for k in range(n - 2):
        alpha = 0.0
        for i in range(k + 1, n):
            alpha += abs(T[i, k]) ** 2
        alpha = np.sqrt(alpha)
        if alpha == 0.0:
            continue
        x0 = T[k + 1, k]
        phase = x0 / abs(x0) if abs(x0) > 0.0 else 1.0 + 0.0j
        for i in range(n):
            v[i] = 0.0
        for i in range(k + 1, n):
            v[i] = T[i, k]
        v[k + 1] += phase * alpha
        vn = 0.0
        for i in range(k + 1, n):
            vn += abs(v[i]) ** 2
        vn = np.sqrt(vn)
        for i in range(k + 1, n):
            v[i] /= vn
        for j in range(n):
            s = 0.0j
            for i in range(k + 1, n):
                s += np.conj(v[i]) * T[i, j]
            for i in range(k + 1, n):
                T[i, j] -= 2.0 * v[i] * s
        for i in range(n):
            s = 0.0j
            for j in range(k + 1, n):
                s += T[i, j] * v[j]
            for j in range(k + 1, n):
                T[i, j] -= 2.0 * s * np.conj(v[j])
        for i in range(n):
            s = 0.0j
            for j in range(k + 1, n):
                s += Z[i, j] * v[j]
            for j in range(k + 1, n):
                Z[i, j] -= 2.0 * s * np.conj(v[j])
        for i in range(k + 2, n):
            T[i, k] = 0.0

    # shifted QR sweeps (implicit single shift, Givens bulge chase)
    hi = n - 1
    its = 0
    total = 0
    while hi > 0:
        l = hi
        while l > 0:
            scale = abs(T[l - 1, l - 1]) + abs(T[l, l])
            if scale == 0.0:
                scale = norm_a
            if abs(T[l, l - 1]) <= eps * scale:
                T[l, l - 1] = 0.0
                break
            l -= 1
        if l == hi:
            hi -= 1
            its = 0
            continue
        its += 1
        total += 1
        if total > max_sweeps:
            return T, Z, False
        if its % 11 == 10:
            mu = T[hi, hi] + abs(T[hi, hi - 1])
        else:
            a = T[hi - 1, hi - 1]
            b = T[hi - 1, hi]
            c = T[hi, hi - 1]
            d = T[hi, hi]
            half = 0.5 * (a + d)
            disc = np.sqrt(0.25 * (a - d) ** 2 + b * c)
            mu1 = half + disc
            mu2 = half - disc
            mu = mu1 if abs(mu1 - d) < abs(mu2 - d) else mu2
        for k in range(l, hi):
            if k == l:
                x = T[l, l] - mu
                y = T[l + 1, l]
                start = l
            else:
                x = T[k, k - 1]
                y = T[k + 1, k - 1]
                start = k - 1
            r = np.sqrt(abs(x) ** 2 + abs(y) ** 2)
            if r == 0.0:
                cr = 1.0
                sn = 0.0j
            elif abs(x) == 0.0:
                cr = 0.0
                sn = 1.0 + 0.0j
            else:
                cr = abs(x) / r
                sn = (x / abs(x)) * np.conj(y) / r
            for j in range(start, n):
                t1 = T[k, j]
                t2 = T[k + 1, j]
                T[k, j] = cr * t1 + sn * t2
                T[k + 1, j] = -np.conj(sn) * t1 + cr * t2
            if k > l:
                T[k + 1, k - 1] = 0.0
            top = min(k + 3, hi + 1)
            for i in range(top):
                t1 = T[i, k]
                t2 = T[i, k + 1]
                T[i, k] = cr * t1 + np.conj(sn) * t2
                T[i, k + 1] = -sn * t1 + cr * t2
            for i in range(n):
                t1 = Z[i, k]
                t2 = Z[i, k + 1]
                Z[i, k] = cr * t1 + np.conj(sn) * t2
                Z[i, k + 1] = -sn * t1 + cr * t2
    return T, Z, True


@njit(cache=True)
def _triangular_eigvecs(T, Z):
    n = T.shape[0]
    eps = 2.220446049250313e-16
    norm_t = 0.0
    for i in range(n):
        for j in range(i, n):
            norm_t += abs(T[i, j]) ** 2
    small = eps * max(np.sqrt(norm_t), 1e-300)
    Y = np.zeros((n, n), dtype=np.complex128)
    X = np.zeros((n, n), dtype=np.complex128)
    for k in range(n):
        lam = T[k, k]
        Y[k, k] = 1.0
        for i in range(k - 1, -1, -1):
            s = 0.0j
            for j in range(i + 1, k + 1):
                s += T[i, j] * Y[j, k]
            d = T[i, i] - lam
            if abs(d) < small:
                d = small
            Y[i, k] = -s / d
        X[k, k] = 1.0
        for i in range(k + 1, n):
            s = 0.0j
            for j in range(k, i):
                s += np.conj(T[j, i]) * X[j, k]
            d = np.conj(T[i, i]) - np.conj(lam)
            if abs(d) < small:
                d = small
            X[i, k] = -s / d
    V = Z @ Y
    U = Z @ X
    for k in range(n):
        nv = 0.0
        nu = 0.0
        for i in range(n):
            nv += abs(V[i, k]) ** 2
            nu += abs(U[i, k]) ** 2
        nv = np.sqrt(nv)
        nu = np.sqrt(nu)
        for i in range(n):
            V[i, k] /= nv
            U[i, k] /= nu
    return V, U


def eig_nonsymmetric(A) -> EigenResult:
    """Eigenvalues with unit right and left eigenvectors of a general square matrix.

    Hessenberg reduction followed by shifted QR to complex Schur form;
    eigenvectors by back-substitution on the Schur factor and on its
    conjugate transpose.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"need a square matrix, got shape {A.shape}")
    n = A.shape[0]
    if n > 64:
        raise ValueError("eig_nonsymmetric supports n <= 64")
    if not np.isfinite(A).all():
        raise ValueError("matrix has non-finite entries")
    if n == 0:
        empty = np.zeros((0, 0), dtype=complex)
        return EigenResult(np.zeros(0, dtype=complex), empty, empty, np.zeros(0, dtype=bool))
    T, Z, ok = _schur_kernel(np.ascontiguousarray(A), 30 * n)
    if not ok:
        raise EigenConvergenceError(f"QR iteration did not converge for a {n}x{n} matrix")
    V, U = _triangular_eigvecs(T, Z)
    overlap = np.abs(np.einsum("ik,ik->k", U.conj(), V))
    return EigenResult(np.diag(T).copy(), V, U, overlap < ILL_CONDITIONED)


def _sorted_order(lam):
    # descending real part, then descending imaginary part
    return np.lexsort((-lam.imag, -lam.real))


def _dissipative_single(A, bounds):
    res = eig_nonsymmetric(A)
    order = _sorted_order(res.eigenvalues)
    lam = res.eigenvalues[order]
    excess = np.maximum(0.0, lam.real - bounds)
    value = float(np.sum(excess ** 2))
    grad = np.zeros_like(A)
    for pos, k in enumerate(order):
        if excess[pos] <= 0.0 or res.ill_conditioned[k]:
            continue
        u, v = res.left_vectors[:, k], res.right_vectors[:, k]
        dlam = np.outer(u.conj(), v) / (u.conj() @ v)
        grad += 2.0 * excess[pos] * dlam.real
    return value, grad


def dissipative_constraint(jac, bounds=None):
    """sum_i max(0, Re(lambda_i) - a_i)^2 with eigenvalues sorted by descending real part.

    Gradients use d lambda / dA_ij = conj(u_i) v_j / (u^H v).  Ill-conditioned
    eigenvalues contribute to the value but not the gradient; a matrix whose
    QR iteration fails contributes nothing (with a logged warning).
    """
    A = ad.as_var(jac)
    n = A.shape[-1]
    if A.ndim < 2 or A.shape[-2] != n:
        raise ValueError(f"Jacobian must be square, got shape {A.shape}")
    bounds = np.zeros(n) if bounds is None else np.asarray(bounds, dtype=np.float64)
    if bounds.shape != (n,):
        raise ValueError(f"need {n} eigenvalue bounds, got shape {bounds.shape}")
    batch = A.shape[:-2]
    flat = A.value.reshape(-1, n, n)
    values = np.zeros(flat.shape[0])
    grads = np.zeros_like(flat)
    for b in range(flat.shape[0]):
        try:
            values[b], grads[b] = _dissipative_single(flat[b], bounds)
        except EigenConvergenceError as exc:
            log.warning("skipping dissipative penalty for one sample: %s", exc)
    grads = grads.reshape(A.shape)
    out = ad.custom(values.reshape(batch), (A,), lambda g: (np.asarray(g)[..., None, None] * grads,))
    return _returns_like(jac, out)


def hamiltonian_spectrum_check(B) -> float:
    """max |Re lambda(J B)| for symmetric positive definite ``B``."""
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise ValueError("B must be square")
    if not np.allclose(B, B.T, rtol=0, atol=1e-12 * max(1.0, np.abs(B).max())):
        raise ValueError("B must be symmetric")
    try:
        np.linalg.cholesky(B)
    except np.linalg.LinAlgError:
        raise ValueError("B is not positive definite") from None
    res = eig_nonsymmetric(symplectic_matrix(B.shape[0]) @ B)
    return float(np.max(np.abs(res.eigenvalues.real)))
