"""Yeoh stored energy, its incompressible variant and the linearized quadratic forms.

The energy is W(F) = c1 (|F|^2 - 3) + c2 (...)^2 + c3 (...)^3, homogeneous in x.
Its Hessian at the identity is stored in a 6x6 Mandel layout. Because the Yeoh
stress at the identity is the hydrostatic pressure DW(I) = 2 c1 I (nonzero),
the quadratic form that governs volume-preserving paths picks up a curvature
term from the det F = 1 manifold: along F(h) = I + hH + h^2 K with
det F(h) = 1 one has h^-2 W(F(h)) -> (1/2) H : D2W(I) : H + 2 c1 tr K and
tr K = tr(H^2)/2 is forced by the constraint. quadratic_form_QI implements
that manifold form; elastic_tensor stores the plain Hessian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MaterialError(Exception):
    """Inconsistent material data (failed self-check)."""


DET_TOL = 1e-9

# Mandel component order (11, 22, 33, 23, 13, 12); shears carry sqrt(2).
_MANDEL_IDX = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))
_SQRT2 = np.sqrt(2.0)


def sym_to_mandel(e):
    e = np.asarray(e, dtype=float)
    v = np.empty(6)
    for k, (i, j) in enumerate(_MANDEL_IDX):
        v[k] = e[i, j] if i == j else _SQRT2 * e[i, j]
    return v


def mandel_to_sym(v):
    v = np.asarray(v, dtype=float)
    e = np.zeros((3, 3))
    for k, (i, j) in enumerate(_MANDEL_IDX):
        if i == j:
            e[i, j] = v[k]
        else:
            e[i, j] = e[j, i] = v[k] / _SQRT2
    return e


@dataclass(frozen=True)
class MaterialModel:
    """Homogeneous Yeoh material with an incompressibility penalty weight."""

    c1: float
    c2: float
    c3: float
    penalty_kappa: float = 100.0
    elastic_tensor: np.ndarray = field(default=None, repr=False)      # 6x6, D2W(I)
    pressure: float = field(default=0.0)                              # tr DW(I) / 3

    def __post_init__(self):
        if self.c1 <= 0.0:
            raise MaterialError("c1 must be positive")
        if self.c2 < 0.0 or self.c3 < 0.0:
            raise MaterialError("c2, c3 must be nonnegative")
        m = np.zeros(6)
        m[:3] = 1.0
        c6 = 2.0 * self.c1 * np.eye(6) + 8.0 * self.c2 * np.outer(m, m)
        object.__setattr__(self, "elastic_tensor", c6)
        object.__setattr__(self, "pressure", 2.0 * self.c1)

    @property
    def incompressible_tensor(self):
        """Mandel matrix of the manifold-restricted quadratic form (see module docstring)."""
        return self.elastic_tensor + self.pressure * np.eye(6)


def yeoh_material(c1, c2=0.0, c3=0.0, penalty_kappa=100.0):
    return MaterialModel(c1=float(c1), c2=float(c2), c3=float(c3),
                         penalty_kappa=float(penalty_kappa))


def _g_from_deviation(d):
    """|I + D|^2 - 3 evaluated without cancellation, batched over leading axes."""
    d = np.asarray(d, dtype=float)
    tr = np.trace(d, axis1=-2, axis2=-1)
    return 2.0 * tr + (d * d).sum(axis=(-2, -1))


def yeoh_energy(f, m):
    """Stored energy W(F); exact polynomial in |F|^2 - 3."""
    f = np.asarray(f, dtype=float)
    g = (f * f).sum(axis=(-2, -1)) - 3.0
    return m.c1 * g + m.c2 * g**2 + m.c3 * g**3


def yeoh_energy_from_deviation(d, m):
    """W(I + D) computed stably for small D (batched)."""
    g = _g_from_deviation(d)
    return m.c1 * g + m.c2 * g**2 + m.c3 * g**3


def yeoh_stress(f, m):
    """First derivative DW(F) = 2 (c1 + 2 c2 g + 3 c3 g^2) F."""
    f = np.asarray(f, dtype=float)
    g = (f * f).sum(axis=(-2, -1)) - 3.0
    w1 = m.c1 + 2.0 * m.c2 * g + 3.0 * m.c3 * g**2
    return 2.0 * w1[..., None, None] * f if f.ndim > 2 else 2.0 * w1 * f


def det_minus_one_from_deviation(d):
    """det(I + D) - 1 via the exact expansion tr D + m2(D) + det D (batched)."""
    d = np.asarray(d, dtype=float)
    tr = np.trace(d, axis1=-2, axis2=-1)
    tr2 = np.trace(d @ d if d.ndim == 2 else np.einsum("...ij,...jk->...ik", d, d),
                   axis1=-2, axis2=-1)
    return tr + 0.5 * (tr**2 - tr2) + np.linalg.det(d)


def cofactor(f):
    """Cofactor matrix, d det / d F, batched; exact polynomial (no inverse)."""
    f = np.asarray(f, dtype=float)
    c = np.empty_like(f)
    c[..., 0, :] = np.cross(f[..., 1, :], f[..., 2, :])
    c[..., 1, :] = np.cross(f[..., 2, :], f[..., 0, :])
    c[..., 2, :] = np.cross(f[..., 0, :], f[..., 1, :])
    return c


def incompressible_energy(f, m, mode="strict"):
    """W^I(F): W on the det F = 1 set.

    strict mode returns W(F) when |det F - 1| <= 1e-9 and +inf otherwise
    (the typed infeasible result); penalized mode returns
    W(F) + penalty_kappa (det F - 1)^2 for use inside solvers.
    """
    f = np.asarray(f, dtype=float)
    det = np.linalg.det(f)
    w = yeoh_energy(f, m)
    if mode == "strict":
        return np.where(np.abs(det - 1.0) <= DET_TOL, w, np.inf) if w.ndim else (
            float(w) if abs(det - 1.0) <= DET_TOL else np.inf)
    if mode == "penalized":
        return w + m.penalty_kappa * (det - 1.0) ** 2
    raise ValueError(f"unknown mode {mode!r}")


def _hessian_quadratic(h, m):
    """(1/2) H : D2W(I) : H for a general (not necessarily symmetric) H."""
    h = np.asarray(h, dtype=float)
    return m.c1 * (h * h).sum() + 4.0 * m.c2 * np.trace(h) ** 2


def elastic_tensor(m, fd_step=1e-4, rtol=1e-6):
    """Return the 6x6 Mandel matrix of D2W(I) after a finite-difference check.

    The check runs central differences of t -> W(I + tH) on symmetric
    trace-free probes (the linear term of W drops out of the central
    difference, so the plain Hessian is what the differences see).
    """
    probes = [
        np.diag([1.0, -1.0, 0.0]),
        np.diag([1.0, 1.0, -2.0]) / np.sqrt(3.0),
        np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
        np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
        np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]),
    ]
    eye = np.eye(3)
    for hmat in probes:
        w_plus = yeoh_energy(eye + fd_step * hmat, m)
        w_minus = yeoh_energy(eye - fd_step * hmat, m)
        fd = (w_plus + w_minus) / fd_step**2  # W(I) = 0
        analytic = 2.0 * _hessian_quadratic(hmat, m)
        if abs(fd - analytic) > rtol * max(abs(analytic), 1.0):
            raise MaterialError(
                f"elastic tensor self-check failed: fd={fd:.9e} analytic={analytic:.9e}")
    return m.elastic_tensor


def qi_bilinear(e1, e2, m):
    """Bilinear form of the incompressible quadratic: Q^I(E) = qi_bilinear(E, E, m)."""
    v1, v2 = sym_to_mandel(e1), sym_to_mandel(e2)
    return 0.5 * float(v1 @ m.incompressible_tensor @ v2)


def quadratic_form_QI(e, m, trace_tol=DET_TOL):
    """Incompressible quadratic form on strains; +inf off the trace-free set.

    For Yeoh this equals 2 c1 |E|^2 on trace-free E, matching the limit of
    h^-2 W along exactly volume-preserving paths (see module docstring).
    """
    e = np.asarray(e, dtype=float)
    if abs(np.trace(e)) > trace_tol:
        return np.inf
    return qi_bilinear(e, e, m)


def solve_volume_correction(h, step):
    """Scalar k with det(I + step*H + step^2*k*I) = 1, by Newton iteration."""
    h = np.asarray(h, dtype=float)
    k = float(np.trace(h @ h)) / 6.0
    for _ in range(8):
        d = step * h + step**2 * k * np.eye(3)
        r = det_minus_one_from_deviation(d)
        slope = step**2 * float(np.trace(cofactor(np.eye(3) + d)))
        k -= r / slope
        if abs(r) < 1e-30 + 1e-16 * step**2:
            break
    return k


def verify_taylor_remainder(m, probes=None, h_values=(1e-1, 1e-2, 1e-3, 1e-4)):
    """Empirical expansion modulus along exactly volume-preserving paths.

    For each probe H (trace-free) and each h, solves the second-order
    correction K = k I with det(I + hH + h^2 K) = 1 and tabulates
      sup_probes |h^-2 W(I + hH + h^2 K) - Q^I(sym H)| / |H|^2.
    Returns {h: remainder}; no explicit modulus is assumed, the table is data.
    """
    if probes is None:
        rng = np.random.default_rng(7)
        probes = []
        for _ in range(8):
            a = rng.standard_normal((3, 3))
            a -= np.trace(a) / 3.0 * np.eye(3)
            probes.append(a / np.linalg.norm(a))
    table = {}
    for step in h_values:
        worst = 0.0
        for hmat in probes:
            hmat = np.asarray(hmat, dtype=float)
            norm2 = float((hmat * hmat).sum())
            if norm2 == 0.0:
                continue
            k = solve_volume_correction(hmat, step)
            d = step * hmat + step**2 * k * np.eye(3)
            w = yeoh_energy_from_deviation(d, m)
            target = quadratic_form_QI(0.5 * (hmat + hmat.T), m)
            worst = max(worst, abs(w / step**2 - target) / norm2)
        table[step] = worst
    return table


def distance_to_rotations(f):
    """Euclidean distance d(F, SO(3)) via singular values."""
    u, s, vt = np.linalg.svd(np.asarray(f, dtype=float))
    if np.linalg.det(u @ vt) < 0:
        s = s.copy()
        s[-1] = -s[-1]
    return float(np.sqrt(((s - 1.0) ** 2).sum()))
