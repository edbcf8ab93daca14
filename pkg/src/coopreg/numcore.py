"""Shared numerical kernels.

Kronecker/vec algebra, quadrature over sampled grid functions, Sylvester and
Riccati solvers, pole placement and diagonal fundamental matrices.  Everything
here is a pure function on numpy arrays; the domain objects passed in only
need ``grid``/``values``/``breakpoints`` attributes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla


class DimensionMismatch(ValueError):
    pass


class SpectraOverlap(ValueError):
    pass


class NotStabilizable(ValueError):
    pass


class NoStabilizingSolution(RuntimeError):
    pass


class Uncontrollable(ValueError):
    """Raised when a pair (F, B) fails the PBH test.

    Carries the offending eigenvalue when one is known.
    """

    def __init__(self, message, eigenvalue=None):
        super().__init__(message)
        self.eigenvalue = eigenvalue


# ---------------------------------------------------------------------------
# Kronecker / vec algebra
# ---------------------------------------------------------------------------

def kron(a, b):
    """Kronecker product of two matrices."""
    a = np.atleast_2d(np.asarray(a))
    b = np.atleast_2d(np.asarray(b))
    return np.kron(a, b)


def vec(a):
    """Stack the columns of ``a`` into one vector."""
    a = np.atleast_2d(np.asarray(a))
    return a.reshape(-1, order="F")


def unvec(v, rows, cols):
    """Inverse of :func:`vec` for a ``rows`` x ``cols`` matrix."""
    v = np.asarray(v).reshape(-1)
    if v.size != rows * cols:
        raise DimensionMismatch(
            f"cannot reshape vector of length {v.size} into {rows}x{cols}"
        )
    return v.reshape(rows, cols, order="F")


# ---------------------------------------------------------------------------
# Triangle-domain kernels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelFunction:
    """Matrix-valued function on the triangle ``0 <= zeta <= z <= 1``.

    ``values[a, b]`` is the matrix sample at ``(z_a, zeta_b)``; entries with
    ``zeta_b > z_a`` are kept at zero and never read.  ``discontinuities``
    holds, per z-row, the zeta abscissae of jump lines; bilinear evaluation
    never interpolates across one.
    """

    grid: np.ndarray
    values: np.ndarray  # (M, M, p, q)
    discontinuities: tuple = ()

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 2:
            values = values[:, :, None, None]
        if values.shape[0] != grid.size or values.shape[1] != grid.size:
            raise DimensionMismatch("kernel sample block must be M x M x p x q")
        if not np.all(np.isfinite(values[np.tril_indices(grid.size)])):
            raise ValueError("kernel samples on the triangle must be finite")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape[2:]

    def eval(self, z, zeta):
        """Bilinear evaluation at a single triangle point."""
        return self.eval_many(np.atleast_1d(z), np.atleast_1d(zeta))[0]

    def eval_many(self, z, zeta):
        """Vectorised bilinear evaluation at points ``(z[i], zeta[i])``.

        Cells cut by the diagonal fall back to barycentric interpolation on
        the three in-domain corners; points are clipped to the closed
        triangle first.
        """
        g = self.grid
        M = g.size
        h = g[1] - g[0]
        z = np.clip(np.asarray(z, dtype=float), 0.0, 1.0)
        zeta = np.minimum(np.clip(np.asarray(zeta, dtype=float), 0.0, 1.0), z)
        ia = np.minimum((z / h).astype(int), M - 2)
        ib = np.minimum((zeta / h).astype(int), M - 2)
        # never place the cell so that its lower-left corner leaves the triangle
        ib = np.minimum(ib, ia)
        tz = (z - g[ia]) / h
        tc = (zeta - g[ib]) / h
        v = self.values
        out = np.zeros(z.shape + v.shape[2:], dtype=v.dtype)
        diagcell = ib == ia
        sq = ~diagcell
        if np.any(sq):
            a, b, s, t = ia[sq], ib[sq], tz[sq], tc[sq]
            s = s[(...,) + (None,) * (v.ndim - 2)]
            t = t[(...,) + (None,) * (v.ndim - 2)]
            out[sq] = ((1 - s) * (1 - t) * v[a, b] + s * (1 - t) * v[a + 1, b]
                       + (1 - s) * t * v[a, b + 1] + s * t * v[a + 1, b + 1])
        if np.any(diagcell):
            # corners (a,a), (a+1,a), (a+1,a+1); barycentric in (tz, tc)
            a, s, t = ia[diagcell], tz[diagcell], tc[diagcell]
            t = np.minimum(t, s)
            w2 = s - t
            w1 = 1 - s
            w3 = t
            w1 = w1[(...,) + (None,) * (v.ndim - 2)]
            w2 = w2[(...,) + (None,) * (v.ndim - 2)]
            w3 = w3[(...,) + (None,) * (v.ndim - 2)]
            out[diagcell] = w1 * v[a, a] + w2 * v[a + 1, a] + w3 * v[a + 1, a + 1]
        return out


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------

def _eval_gridfunction(f, x, side="+"):
    """Piecewise-linear evaluation honouring breakpoints (duck-typed)."""
    if hasattr(f, "eval"):
        return f.eval(x, side=side)
    raise TypeError("integrate expects an object with .eval(x, side=...)")


def integrate(f, a=0.0, b=1.0):
    """Composite trapezoid of a sampled grid function over ``[a, b]``.

    Splits at stored breakpoints so no panel straddles a discontinuity;
    exact for the piecewise-linear representation, O(h^2) on smooth data.
    """
    if not (0.0 <= a <= b <= 1.0):
        raise ValueError("integration interval must satisfy 0 <= a <= b <= 1")
    grid = np.asarray(f.grid, dtype=float)
    pts = [a, b]
    pts.extend(g for g in grid if a < g < b)
    pts.extend(c for c in getattr(f, "breakpoints", ()) if a < c < b)
    pts = np.unique(np.asarray(pts, dtype=float))
    total = None
    for lo, hi in zip(pts[:-1], pts[1:]):
        if hi <= lo:
            continue
        fl = _eval_gridfunction(f, lo, side="+")
        fr = _eval_gridfunction(f, hi, side="-")
        panel = 0.5 * (hi - lo) * (fl + fr)
        total = panel if total is None else total + panel
    if total is None:
        total = 0.0 * _eval_gridfunction(f, a, side="+")
    return total


def trapezoid_matrix(values, grid, axis=0):
    """Trapezoid rule along ``axis`` of a sample stack on ``grid``."""
    return np.trapezoid(values, x=grid, axis=axis)


def cumulative_trapezoid(values, grid):
    """Cumulative trapezoid along the leading axis, starting at zero."""
    values = np.asarray(values, dtype=float)
    dg = np.diff(grid)
    pad = [(1, 0)] + [(0, 0)] * (values.ndim - 1)
    panels = 0.5 * (values[1:] + values[:-1]) * dg.reshape(
        (-1,) + (1,) * (values.ndim - 1)
    )
    return np.pad(np.cumsum(panels, axis=0), pad)


def cumulative_integral4(values, grid):
    """Fourth-order cumulative integral along the leading axis.

    Per-cell interpolatory rules on four neighbouring samples (Adams-type
    stencils at the ends).  Needs a uniform grid with at least four points;
    shorter inputs fall back to the trapezoid rule.
    """
    values = np.asarray(values, dtype=float)
    m = values.shape[0]
    if m < 4:
        return cumulative_trapezoid(values, grid)
    h = grid[1] - grid[0]
    cells = np.empty_like(values[1:])
    cells[0] = 9 * values[0] + 19 * values[1] - 5 * values[2] + values[3]
    cells[1:-1] = (-values[:-3] + 13 * values[1:-2]
                   + 13 * values[2:-1] - values[3:])
    cells[-1] = (values[-4] - 5 * values[-3] + 19 * values[-2]
                 + 9 * values[-1])
    pad = [(1, 0)] + [(0, 0)] * (values.ndim - 1)
    return np.pad(np.cumsum(cells * (h / 24.0), axis=0), pad)


def cumulative_weights4(grid):
    """Weight matrix W with (W f)[i] = 4th-order integral of f over [0, z_i]."""
    m = len(grid)
    return cumulative_integral4(np.eye(m), grid)


def span_weights4(num_nodes, h):
    """Closed 4th-order composite weights over ``num_nodes`` uniform nodes.

    Falls back to trapezoid / Simpson rules on spans too short for the
    four-point cell stencils.
    """
    n = num_nodes
    if n < 2:
        return np.zeros(max(n, 0))
    if n == 2:
        return np.array([0.5, 0.5]) * h
    if n == 3:
        return np.array([1.0, 4.0, 1.0]) * (h / 3.0)
    w = np.zeros(n)
    w[:4] += np.array([9.0, 19.0, -5.0, 1.0]) / 24.0
    for k in range(1, n - 2):
        w[k - 1 : k + 3] += np.array([-1.0, 13.0, 13.0, -1.0]) / 24.0
    w[-4:] += np.array([1.0, -5.0, 19.0, 9.0]) / 24.0
    return w * h


def derivative4(values, grid):
    """Fourth-order first derivative along the leading axis (uniform grid).

    Five-point central stencil inside, one-sided stencils at the ends; falls
    back to ``np.gradient`` when fewer than five samples are given.
    """
    values = np.asarray(values, dtype=float)
    m = values.shape[0]
    if m < 5:
        return np.gradient(values, grid, axis=0)
    h = grid[1] - grid[0]
    out = np.empty_like(values)
    out[2:-2] = (values[:-4] - 8 * values[1:-3]
                 + 8 * values[3:-1] - values[4:]) / (12 * h)
    out[0] = (-25 * values[0] + 48 * values[1] - 36 * values[2]
              + 16 * values[3] - 3 * values[4]) / (12 * h)
    out[1] = (-3 * values[0] - 10 * values[1] + 18 * values[2]
              - 6 * values[3] + values[4]) / (12 * h)
    out[-2] = (3 * values[-1] + 10 * values[-2] - 18 * values[-3]
               + 6 * values[-4] - values[-5]) / (12 * h)
    out[-1] = (25 * values[-1] - 48 * values[-2] + 36 * values[-3]
               - 16 * values[-4] + 3 * values[-5]) / (12 * h)
    return out


def derivative6(values, grid):
    """Sixth-order first derivative along the leading axis (uniform grid).

    Seven-point central stencil inside; the three rows nearest each edge
    reuse the fourth-order result since callers mask them out anyway.
    Falls back to ``derivative4`` when fewer than seven samples are given.
    """
    values = np.asarray(values, dtype=float)
    m = values.shape[0]
    if m < 7:
        return derivative4(values, grid)
    h = grid[1] - grid[0]
    out = derivative4(values, grid)
    out[3:-3] = (-values[:-6] + 9 * values[1:-5] - 45 * values[2:-4]
                 + 45 * values[4:-2] - 9 * values[5:-1] + values[6:]) / (60 * h)
    return out


# ---------------------------------------------------------------------------
# Matrix-equation solvers
# ---------------------------------------------------------------------------

def solve_sylvester(a, b, c):
    """Solve ``A X - X B = C`` by vectorisation.

    Sizes in this package stay below ~50x50, so the dense Kronecker system
    is the simplest route that meets the residual contract.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    c = np.atleast_2d(np.asarray(c, dtype=float))
    n, m = a.shape[0], b.shape[0]
    if c.shape != (n, m):
        raise DimensionMismatch(f"C must be {n}x{m}, got {c.shape}")
    ea = np.linalg.eigvals(a)
    eb = np.linalg.eigvals(b)
    gap = np.min(np.abs(ea[:, None] - eb[None, :]))
    scale = max(1.0, np.max(np.abs(ea)), np.max(np.abs(eb)))
    if gap < 1e-12 * scale:
        raise SpectraOverlap(
            f"spectra of A and B overlap (min eigenvalue gap {gap:.2e})"
        )
    lhs = np.kron(np.eye(m), a) - np.kron(b.T, np.eye(n))
    x = unvec(np.linalg.solve(lhs, vec(c)), n, m)
    resid = np.max(np.abs(a @ x - x @ b - c))
    if resid > 1e-10 * (1.0 + np.max(np.abs(c))):
        raise np.linalg.LinAlgError(
            f"Sylvester residual {resid:.2e} above contract"
        )
    return x


def are_residual(s, be, kappa, a_weight, p):
    """Residual of ``S'P + PS - 2k P Be Be' P + aI``."""
    g = 2.0 * kappa * (be @ be.T)
    return s.T @ p + p @ s - p @ g @ p + a_weight * np.eye(s.shape[0])


def solve_are(s, be, kappa, a_weight):
    """Stabilising solution of ``S'P + PS - 2k P Be Be' P + aI = 0``.

    Stable invariant subspace of the Hamiltonian via an ordered real Schur
    form, then Newton refinement.  The contract is the residual bound
    ``1e-8 * a``, positive definiteness and a Hurwitz closed loop.
    """
    s = np.atleast_2d(np.asarray(s, dtype=float))
    be = np.asarray(be, dtype=float)
    if be.ndim == 1:
        be = be[:, None]
    n = s.shape[0]
    if kappa <= 0 or a_weight <= 0:
        raise ValueError("kappa and a must be positive")
    g = 2.0 * kappa * (be @ be.T)
    if not _is_stabilizable(s, be):
        raise NotStabilizable("(S, Be) is not stabilizable")
    ham = np.block([[s, -g], [-a_weight * np.eye(n), -s.T]])
    t, z, sdim = sla.schur(ham, output="real", sort="lhp")
    if sdim != n:
        raise NoStabilizingSolution(
            f"Hamiltonian has {sdim} strictly stable eigenvalues, expected {n}"
        )
    x1 = z[:n, :n]
    x2 = z[n:, :n]
    if np.linalg.cond(x1) > 1e12:
        raise NoStabilizingSolution("stable subspace is vertical; no solution")
    p = x2 @ np.linalg.inv(x1)
    p = 0.5 * (p + p.T)
    # Newton steps: linearised equation is a Lyapunov equation in the update
    for _ in range(10):
        res = are_residual(s, be, kappa, a_weight, p)
        if np.max(np.abs(res)) <= 1e-14 * max(1.0, a_weight):
            break
        acl = s - g @ p
        dp = sla.solve_continuous_lyapunov(acl.T, -res)
        p = 0.5 * ((p + dp) + (p + dp).T)
    res = np.max(np.abs(are_residual(s, be, kappa, a_weight, p)))
    if res > 1e-8 * a_weight:
        raise NoStabilizingSolution(f"ARE residual {res:.2e} above contract")
    if np.min(np.linalg.eigvalsh(p)) <= 0:
        raise NoStabilizingSolution("ARE solution is not positive definite")
    if np.max(np.linalg.eigvals(s - g @ p).real) >= 0:
        raise NoStabilizingSolution("closed loop is not Hurwitz")
    return p


def controllability_matrix(f, b):
    f = np.atleast_2d(np.asarray(f, dtype=float))
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    blocks = [b]
    for _ in range(f.shape[0] - 1):
        blocks.append(f @ blocks[-1])
    return np.hstack(blocks)


def pbh_uncontrollable_modes(f, b, tol=1e-9):
    """Eigenvalues of ``f`` failing the PBH rank test."""
    f = np.atleast_2d(np.asarray(f, dtype=float))
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    n = f.shape[0]
    bad = []
    scale = max(1.0, np.max(np.abs(f)), np.max(np.abs(b)))
    for mu in np.linalg.eigvals(f):
        m = np.hstack([f - mu * np.eye(n), b.astype(complex)])
        if np.linalg.matrix_rank(m, tol=tol * scale) < n:
            bad.append(mu)
    return bad


def _is_stabilizable(f, b, tol=1e-9):
    return all(mu.real < 0 for mu in pbh_uncontrollable_modes(f, b, tol=tol))


def _ackermann(f, b, desired):
    n = f.shape[0]
    ctrb = controllability_matrix(f, b)
    coeffs = np.atleast_1d(np.poly(desired))
    if np.max(np.abs(coeffs.imag)) > 1e-9 * max(1.0, np.max(np.abs(coeffs))):
        raise ValueError("desired poles must be closed under conjugation")
    coeffs = coeffs.real
    pf = np.zeros_like(f)
    for c in coeffs:
        pf = pf @ f + c * np.eye(n)
    en = np.zeros(n)
    en[-1] = 1.0
    return (np.linalg.solve(ctrb.T, en) @ pf)[None, :]


def place_poles(f, b, desired, rng_seed=0):
    """Gain ``K`` with ``sigma(F - B K)`` equal to ``desired``.

    Single-input uses Ackermann's formula; several inputs are reduced to one
    through a random (seeded) cyclicity combination, retried if the combined
    pair is badly conditioned.
    """
    f = np.atleast_2d(np.asarray(f, dtype=float))
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    n, m = b.shape
    desired = np.asarray(desired, dtype=complex)
    if desired.size != n:
        raise DimensionMismatch("need as many poles as states")
    bad = pbh_uncontrollable_modes(f, b)
    if bad:
        raise Uncontrollable(f"(F, B) uncontrollable at {bad[0]:.4g}", bad[0])
    if m == 1:
        k = _ackermann(f, b[:, 0], desired)
    else:
        rng = np.random.default_rng(rng_seed)
        k = None
        for _ in range(50):
            q = rng.standard_normal(m)
            k0 = 0.1 * rng.standard_normal((m, n))
            fc = f - b @ k0
            bc = b @ q
            ctrb = controllability_matrix(fc, bc)
            if np.linalg.cond(ctrb) < 1e9:
                k = k0 + np.outer(q, _ackermann(fc, bc, desired)[0])
                break
        if k is None:
            raise Uncontrollable("no cyclic combination found for (F, B)")
    # repeated target poles are defective, so comparing eigenvalues directly
    # loses half the digits; the characteristic polynomial is well behaved
    achieved = np.poly(f - b @ k)
    want = np.real_if_close(np.poly(desired))
    err = np.max(np.abs(achieved - want))
    if err > 1e-8 * max(1.0, np.max(np.abs(want))):
        raise np.linalg.LinAlgError(
            f"pole placement error {err:.2e} above contract"
        )
    return k


# ---------------------------------------------------------------------------
# Diagonal fundamental matrix
# ---------------------------------------------------------------------------

def fundamental_phi(lam, z, zeta, s):
    """Diagonal transport fundamental matrix.

    Entry ``k`` is ``exp(s * int_zeta^z d(eta) / lambda_k(eta))`` with the
    integral taken by trapezoid on the sample grid of ``lam`` (a diagonal
    matrix grid function).
    """
    grid = np.asarray(lam.grid, dtype=float)
    diag = np.einsum("mkk->mk", np.asarray(lam.values, dtype=float))
    if np.any(np.abs(diag) < 1e-14):
        raise ValueError("transport velocities must not vanish")
    cum = cumulative_trapezoid(1.0 / diag, grid)  # (M, n)
    ipz = np.array([np.interp(z, grid, cum[:, k]) for k in range(diag.shape[1])])
    ipc = np.array([np.interp(zeta, grid, cum[:, k]) for k in range(diag.shape[1])])
    return np.diag(np.exp(s * (ipz - ipc)))
