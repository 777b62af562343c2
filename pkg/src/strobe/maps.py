"""Polynomial displacement spaces for space-time domain mappings.

The search space is a tensorized Legendre basis with boundary-vanishing
bubble factors: the x-displacement vanishes on x in {0,L} and the
t-displacement on t in {0,T}, so id + phi maps each edge of the
rectangle into itself. Bijectivity is enforced through an integral
surrogate penalizing Jacobian determinants outside [eps, 1/eps].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial import legendre as npleg
from numpy.polynomial.polynomial import Polynomial

from .refelem import gauss_legendre_2d

_EXP_CLAMP = 700.0


@dataclass(frozen=True)
class BijectivityParams:
    """Surrogate-constraint constants: contraction bound, sharpness, budget."""

    eps: float = 0.1
    c_exp: float = 0.0025
    delta: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ValueError("eps must lie in (0,1)")
        if self.c_exp <= 0 or self.delta <= 0:
            raise ValueError("c_exp and delta must be positive")

    def zero_map_floor(self, area: float) -> float:
        """Surrogate value of the identity map on a domain of given area."""
        a = np.exp(min((self.eps - 1.0) / self.c_exp, _EXP_CLAMP))
        b = np.exp(min((1.0 - 1.0 / self.eps) / self.c_exp, _EXP_CLAMP))
        return float(area * (a + b))

    def validate_for_area(self, area: float) -> None:
        if self.delta < self.zero_map_floor(area):
            raise ValueError("delta too small: the zero map must be admissible")


def default_bijectivity_params(L: float, T: float) -> BijectivityParams:
    """Constants used throughout: eps=0.1, C_exp=0.025*eps, delta=|Omega|."""
    eps = 0.1
    params = BijectivityParams(eps=eps, c_exp=0.025 * eps, delta=L * T)
    params.validate_for_area(L * T)
    return params


@dataclass(frozen=True)
class MapTabulation:
    """Basis values and first derivatives at a fixed point set.

    Matrices are (n_pts, Mbar**2) blocks; block 1 feeds the first
    displacement component, block 2 the second.
    """

    points: np.ndarray
    V1: np.ndarray
    D1x: np.ndarray
    D1t: np.ndarray
    V2: np.ndarray
    D2x: np.ndarray
    D2t: np.ndarray


class MapSpace:
    """Tensorized Legendre displacement space of dimension 2*Mbar**2."""

    def __init__(self, L: float, T: float, Mbar: int):
        if Mbar < 1:
            raise ValueError("Mbar must be >= 1")
        self.L = float(L)
        self.T = float(T)
        self.Mbar = int(Mbar)
        self.M_hf = 2 * Mbar * Mbar
        # normalized shifted Legendre factors and the bubble-weighted ones
        self._leg_x = [_norm_legendre(i, self.L) for i in range(Mbar)]
        self._leg_t = [_norm_legendre(i, self.T) for i in range(Mbar)]
        bub_x = Polynomial([0.0, 1.0 / self.L, -1.0 / self.L**2])   # x(L-x)/L^2
        bub_t = Polynomial([0.0, 1.0 / self.T, -1.0 / self.T**2])
        self._bleg_x = [(ell * bub_x) for ell in self._leg_x]
        self._bleg_t = [(ell * bub_t) for ell in self._leg_t]

    def _eval_factors(self, polys, x, order=0):
        cols = [p.deriv(order)(x) if order else p(x) for p in polys]
        return np.stack(cols, axis=-1)

    def tabulate(self, points: np.ndarray) -> MapTabulation:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        x, t = pts[:, 0], pts[:, 1]
        A = self._eval_factors(self._bleg_x, x)          # bubble * ell_i(x/L)
        dA = self._eval_factors(self._bleg_x, x, 1)
        B = self._eval_factors(self._leg_t, t)
        dB = self._eval_factors(self._leg_t, t, 1)
        C = self._eval_factors(self._leg_x, x)
        dC = self._eval_factors(self._leg_x, x, 1)
        E = self._eval_factors(self._bleg_t, t)          # bubble * ell_i'(t/T)
        dE = self._eval_factors(self._bleg_t, t, 1)
        n = pts.shape[0]
        m2 = self.Mbar * self.Mbar
        # block index m = i + i'*Mbar: x factor index i, t factor index i'
        V1 = np.einsum("qi,qj->qij", A, B).reshape(n, m2)
        D1x = np.einsum("qi,qj->qij", dA, B).reshape(n, m2)
        D1t = np.einsum("qi,qj->qij", A, dB).reshape(n, m2)
        V2 = np.einsum("qi,qj->qij", C, E).reshape(n, m2)
        D2x = np.einsum("qi,qj->qij", dC, E).reshape(n, m2)
        D2t = np.einsum("qi,qj->qij", C, dE).reshape(n, m2)
        return MapTabulation(points=pts, V1=V1, D1x=D1x, D1t=D1t,
                             V2=V2, D2x=D2x, D2t=D2t)

    def displacement_values(self, tab: MapTabulation, a: np.ndarray) -> np.ndarray:
        a1, a2 = self.split(a)
        return np.stack([tab.V1 @ a1, tab.V2 @ a2], axis=-1)

    def jacobians(self, tab: MapTabulation, a: np.ndarray):
        """G = I + grad(phi) and g = det G at tabulated points."""
        a1, a2 = self.split(a)
        n = tab.points.shape[0]
        G = np.empty((n, 2, 2))
        G[:, 0, 0] = 1.0 + tab.D1x @ a1
        G[:, 0, 1] = tab.D1t @ a1
        G[:, 1, 0] = tab.D2x @ a2
        G[:, 1, 1] = 1.0 + tab.D2t @ a2
        g = G[:, 0, 0] * G[:, 1, 1] - G[:, 0, 1] * G[:, 1, 0]
        return G, g

    def jacobian_derivative(self, tab: MapTabulation, a: np.ndarray) -> np.ndarray:
        """d(det G)/da at tabulated points, (n_pts, M_hf)."""
        G, _ = self.jacobians(tab, a)
        m2 = self.Mbar * self.Mbar
        out = np.empty((tab.points.shape[0], self.M_hf))
        # det = G00*G11 - G01*G10; block 1 moves G00, G01; block 2 G10, G11
        out[:, :m2] = G[:, 1, 1, None] * tab.D1x - G[:, 1, 0, None] * tab.D1t
        out[:, m2:] = G[:, 0, 0, None] * tab.D2t - G[:, 0, 1, None] * tab.D2x
        return out

    def split(self, a: np.ndarray):
        a = np.asarray(a, dtype=float)
        if a.shape[-1] != self.M_hf:
            raise ValueError(f"expected {self.M_hf} coefficients, got {a.shape[-1]}")
        m2 = self.Mbar * self.Mbar
        return a[..., :m2], a[..., m2:]

    @cached_property
    def _surrogate_grid(self):
        # dedicated structured quad grid, decoupled from any DG mesh
        ncell, npt = 12, 6
        pts_list, w_list = [], []
        base_pts, base_w = gauss_legendre_2d(npt, npt, self.L / ncell, self.T / ncell)
        for i in range(ncell):
            for j in range(ncell):
                shift = np.array([i * self.L / ncell, j * self.T / ncell])
                pts_list.append(base_pts + shift)
                w_list.append(base_w)
        pts = np.vstack(pts_list)
        w = np.concatenate(w_list)
        return pts, w, self.tabulate(pts)

    def bijectivity_functional(self, a: np.ndarray, params: BijectivityParams) -> float:
        pts, w, tab = self._surrogate_grid
        _, g = self.jacobians(tab, a)
        lo = np.exp(np.minimum((params.eps - g) / params.c_exp, _EXP_CLAMP))
        hi = np.exp(np.minimum((g - 1.0 / params.eps) / params.c_exp, _EXP_CLAMP))
        return float(np.dot(w, lo + hi))

    def bijectivity_gradient(self, a: np.ndarray, params: BijectivityParams) -> np.ndarray:
        pts, w, tab = self._surrogate_grid
        _, g = self.jacobians(tab, a)
        e_lo = (params.eps - g) / params.c_exp
        e_hi = (g - 1.0 / params.eps) / params.c_exp
        # derivative of the clamped exponentials: zero once saturated
        lo = np.where(e_lo < _EXP_CLAMP, np.exp(np.minimum(e_lo, _EXP_CLAMP)), 0.0)
        hi = np.where(e_hi < _EXP_CLAMP, np.exp(np.minimum(e_hi, _EXP_CLAMP)), 0.0)
        dg = self.jacobian_derivative(tab, a)
        coeff = w * (hi - lo) / params.c_exp
        return coeff @ dg

    def min_determinant(self, a: np.ndarray, n_sample: int = 60) -> float:
        """Jacobian determinant minimum over a dense sample grid (diagnostic)."""
        xs = np.linspace(0.0, self.L, n_sample)
        ts = np.linspace(0.0, self.T, n_sample)
        X, Tt = np.meshgrid(xs, ts, indexing="ij")
        tab = self.tabulate(np.stack([X.ravel(), Tt.ravel()], axis=-1))
        _, g = self.jacobians(tab, a)
        return float(g.min())

    def h2_penalty_matrix(self) -> np.ndarray:
        """Gram matrix of the H2 seminorm on the basis, (M_hf, M_hf) PSD."""
        n1d = self.Mbar + 3
        Ix = _factor_gram(self._bleg_x, self.L, n1d)
        It = _factor_gram(self._leg_t, self.T, n1d)
        Jx = _factor_gram(self._leg_x, self.L, n1d)
        Jt = _factor_gram(self._bleg_t, self.T, n1d)
        A1 = _separable_h2_block(Ix, It)
        A2 = _separable_h2_block_swapped(Jx, Jt)
        m2 = self.Mbar * self.Mbar
        A = np.zeros((self.M_hf, self.M_hf))
        A[:m2, :m2] = A1
        A[m2:, m2:] = A2
        return 0.5 * (A + A.T)


@dataclass
class Displacement:
    """Displacement field phi as coefficients over a MapSpace basis."""

    space: MapSpace
    a: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        if self.a.shape != (self.space.M_hf,):
            raise ValueError("coefficient length must match the map space")
        if not np.all(np.isfinite(self.a)):
            raise ValueError("coefficients must be finite")

    @classmethod
    def zero(cls, space: MapSpace) -> "Displacement":
        return cls(space, np.zeros(space.M_hf))

    @classmethod
    def from_reduced(cls, space: MapSpace, basis: np.ndarray, a_red: np.ndarray):
        """Lift reduced coefficients through a (M_hf, M) basis matrix."""
        return cls(space, basis @ np.asarray(a_red, dtype=float))

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        tab = self.space.tabulate(points)
        return self.space.displacement_values(tab, self.a)

    def map_points(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_2d(points) + self.evaluate(points)


def map_jacobian(phi: Displacement, X: np.ndarray):
    """Jacobian matrix G = I + grad(phi) and determinant g at points X."""
    tab = phi.space.tabulate(X)
    G, g = phi.space.jacobians(tab, phi.a)
    if np.ndim(X) == 1:
        return G[0], float(g[0])
    return G, g


def bijectivity_functional(phi: Displacement, params: BijectivityParams) -> float:
    return phi.space.bijectivity_functional(phi.a, params)


def h2_penalty_matrix(space: MapSpace) -> np.ndarray:
    return space.h2_penalty_matrix()


def star_inner_product(phi1: Displacement, phi2: Displacement) -> float:
    """Coefficient Euclidean inner product over the full basis."""
    if phi1.space is not phi2.space and (
        phi1.space.L != phi2.space.L
        or phi1.space.T != phi2.space.T
        or phi1.space.Mbar != phi2.space.Mbar
    ):
        raise ValueError("displacements live in different map spaces")
    return float(np.dot(phi1.a, phi2.a))


def _norm_legendre(i: int, length: float):
    """i-th Legendre polynomial on (0,length), unit L2(0,1) norm in y=x/length."""
    coef = np.zeros(i + 1)
    coef[i] = 1.0
    leg = npleg.Legendre(coef, domain=[0.0, length])
    return np.sqrt(2 * i + 1) * leg.convert(kind=Polynomial)


def _factor_gram(polys, length: float, n1d: int) -> dict[tuple[int, int], np.ndarray]:
    """1D Gram matrices of (derivative order a, order b) factor pairs."""
    from scipy.special import roots_legendre

    x, w = roots_legendre(2 * n1d)
    x = 0.5 * (x + 1.0) * length
    w = 0.5 * w * length
    vals = {}
    for order in range(3):
        vals[order] = np.stack([p.deriv(order)(x) for p in polys], axis=-1)
    grams = {}
    for a in range(3):
        for b in range(3):
            grams[(a, b)] = vals[a].T @ (w[:, None] * vals[b])
    return grams


def _separable_h2_block(Gx, Gt) -> np.ndarray:
    """H2 Gram of products u_i(x) w_j(t): dxx + 2 dxt + dtt terms."""
    A = (
        np.einsum("ij,kl->ikjl", Gx[(2, 2)], Gt[(0, 0)])
        + 2.0 * np.einsum("ij,kl->ikjl", Gx[(1, 1)], Gt[(1, 1)])
        + np.einsum("ij,kl->ikjl", Gx[(0, 0)], Gt[(2, 2)])
    )
    m = Gx[(0, 0)].shape[0] * Gt[(0, 0)].shape[0]
    return A.reshape(m, m)


def _separable_h2_block_swapped(Gx, Gt) -> np.ndarray:
    return _separable_h2_block(Gx, Gt)
