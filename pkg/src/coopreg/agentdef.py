"""Agent models: sampled grid functions, the transport PIDE-ODE class,
delay-system embeddings and the heavy-rope wave model.

All spatial data lives on a uniform grid over [0, 1] as matrix samples;
jump discontinuities are tracked as explicit breakpoints so that neither
evaluation nor quadrature ever interpolates across one.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass

import numpy as np

from . import numcore
from .numcore import KernelFunction, pbh_uncontrollable_modes

DEFAULT_GRID_M = 101


class VelocityOrdering(ValueError):
    pass


class VelocitySignChange(ValueError):
    pass


class NonzeroDiagonalA(ValueError):
    pass


class EqualVelocityCoupling(ValueError):
    pass


class UncontrollableODE(ValueError):
    pass


class DelayOrdering(ValueError):
    pass


# ---------------------------------------------------------------------------
# Expression grammar for spatially varying config entries
# ---------------------------------------------------------------------------

_ALLOWED_CALLS = {"sqrt": np.sqrt, "exp": np.exp}
_ALLOWED_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Constant, ast.Name, ast.Call,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.USub, ast.UAdd, ast.Load,
)


def eval_expression(text, z):
    """Evaluate an arithmetic expression in the variable ``z``.

    Supports +, -, *, /, sqrt, exp and numeric literals; everything else is
    rejected.  ``z`` may be a scalar or an array.
    """
    tree = ast.parse(text, mode="eval")
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ValueError(f"disallowed element {type(node).__name__!r} in {text!r}")
        if isinstance(node, ast.Name) and node.id not in ("z",) and \
                node.id not in _ALLOWED_CALLS:
            raise ValueError(f"unknown name {node.id!r} in {text!r}")
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _ALLOWED_CALLS:
                raise ValueError(f"unknown function call in {text!r}")

    def _ev(node):
        if isinstance(node, ast.Expression):
            return _ev(node.body)
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return z
        if isinstance(node, ast.UnaryOp):
            val = _ev(node.operand)
            return -val if isinstance(node.op, ast.USub) else +val
        if isinstance(node, ast.BinOp):
            lhs, rhs = _ev(node.left), _ev(node.right)
            if isinstance(node.op, ast.Add):
                return lhs + rhs
            if isinstance(node.op, ast.Sub):
                return lhs - rhs
            if isinstance(node.op, ast.Mult):
                return lhs * rhs
            return lhs / rhs
        if isinstance(node, ast.Call):
            return _ALLOWED_CALLS[node.func.id](_ev(node.args[0]))
        raise AssertionError
    return _ev(tree)


# ---------------------------------------------------------------------------
# GridFunction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridFunction:
    """Matrix-valued function sampled on a uniform grid over [0, 1].

    Evaluation is piecewise linear between samples.  Cells that contain a
    breakpoint are not interpolated; the sample on the requested side is
    used instead (a sample placed exactly on a breakpoint carries the
    right-sided limit).
    """

    grid: np.ndarray
    values: np.ndarray          # (M, p, q)
    breakpoints: tuple = ()

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None, None]
        elif values.ndim == 2:
            values = values[:, :, None]
        if grid.size < 2:
            raise ValueError("grid needs at least two points")
        h = grid[1] - grid[0]
        if not np.allclose(np.diff(grid), h, rtol=0, atol=1e-12):
            raise ValueError("grid must be uniformly spaced")
        if not (abs(grid[0]) < 1e-12 and abs(grid[-1] - 1.0) < 1e-12):
            raise ValueError("grid must span [0, 1]")
        if values.shape[0] != grid.size:
            raise ValueError("one matrix sample per grid point required")
        if not np.all(np.isfinite(values)):
            raise ValueError("grid function samples must be finite")
        bps = tuple(sorted(float(b) for b in self.breakpoints))
        if any(not 0.0 <= b <= 1.0 for b in bps):
            raise ValueError("breakpoints must lie in [0, 1]")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "breakpoints", bps)

    # -- constructors -----------------------------------------------------
    @staticmethod
    def from_constant(mat, m=DEFAULT_GRID_M):
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        grid = np.linspace(0.0, 1.0, m)
        return GridFunction(grid, np.broadcast_to(mat, (m,) + mat.shape).copy())

    @staticmethod
    def from_callable(fn, m=DEFAULT_GRID_M, breakpoints=()):
        grid = np.linspace(0.0, 1.0, m)
        values = np.stack([np.atleast_2d(np.asarray(fn(z), dtype=float)) for z in grid])
        return GridFunction(grid, values, breakpoints)

    @staticmethod
    def zeros(rows, cols, m=DEFAULT_GRID_M):
        return GridFunction(np.linspace(0.0, 1.0, m), np.zeros((m, rows, cols)))

    # -- basic queries ----------------------------------------------------
    @property
    def m(self):
        return self.grid.size

    @property
    def shape(self):
        return self.values.shape[1:]

    def is_zero(self, tol=0.0):
        return np.all(np.abs(self.values) <= tol)

    # -- evaluation --------------------------------------------------------
    def eval(self, x, side="+"):
        return self.eval_many(np.atleast_1d(float(x)), side=side)[0]

    def eval_many(self, xs, side="+"):
        xs = np.clip(np.asarray(xs, dtype=float), 0.0, 1.0)
        g = self.grid
        h = g[1] - g[0]
        idx = np.minimum((xs / h).astype(int), g.size - 2)
        t = (xs - g[idx]) / h
        v = self.values
        tt = t[(...,) + (None,) * (v.ndim - 1)]
        out = (1 - tt) * v[idx] + tt * v[idx + 1]
        on_node = np.abs(xs - g[np.minimum(np.rint(xs / h).astype(int), g.size - 1)]) < 1e-12
        node_idx = np.minimum(np.rint(xs / h).astype(int), g.size - 1)
        if np.any(on_node):
            out[on_node] = v[node_idx[on_node]]
        for b in self.breakpoints:
            cell = np.nonzero((g[idx] < b) & (b <= g[idx + 1] + 1e-15) & ~on_node)[0]
            if cell.size:
                left = xs[cell] < b
                out[cell[left]] = v[idx[cell[left]]]
                out[cell[~left]] = v[idx[cell[~left]] + 1]
            if side == "-":
                # left-sided limit exactly on the jump
                at = np.nonzero(np.abs(xs - b) < 1e-12)[0]
                if at.size:
                    k = np.maximum(np.searchsorted(g, b - 1e-12) - 1, 0)
                    out[at] = v[k]
        return out

    # -- algebra helpers ----------------------------------------------------
    def map(self, fn):
        return GridFunction(self.grid, fn(self.values), self.breakpoints)

    def __add__(self, other):
        if isinstance(other, GridFunction):
            if other.m != self.m:
                raise ValueError("grid functions must share a grid")
            bps = tuple(sorted(set(self.breakpoints) | set(other.breakpoints)))
            return GridFunction(self.grid, self.values + other.values, bps)
        return self.map(lambda v: v + other)

    def __mul__(self, scalar):
        return self.map(lambda v: v * scalar)

    __rmul__ = __mul__


# ---------------------------------------------------------------------------
# Output operator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OutputOperatorSpec:
    """Boundary, pointwise and distributed output terms plus the ODE part.

    The pointwise terms stay symbolic as ``(z_k, C_k)`` pairs; they are
    applied by interpolation at ``z_k`` rather than being sampled into the
    density, which would corrupt quadrature.
    """

    C_x0: np.ndarray                    # n_out x n
    C_x1: np.ndarray                    # n_out x n
    C_w: np.ndarray                     # n_out x n_w
    C_xd: GridFunction | None = None    # n_out x n density
    pointwise: tuple = ()               # ((z_k, C_k), ...), z_k in (0, 1)

    def __post_init__(self):
        object.__setattr__(self, "C_x0", np.atleast_2d(np.asarray(self.C_x0, dtype=float)))
        object.__setattr__(self, "C_x1", np.atleast_2d(np.asarray(self.C_x1, dtype=float)))
        object.__setattr__(self, "C_w", np.atleast_2d(np.asarray(self.C_w, dtype=float)))
        pw = tuple((float(z), np.atleast_2d(np.asarray(ck, dtype=float)))
                   for z, ck in self.pointwise)
        if any(not 0.0 < z < 1.0 for z, _ in pw):
            raise ValueError("pointwise output abscissae must be strictly interior")
        object.__setattr__(self, "pointwise", pw)

    @property
    def n_out(self):
        return self.C_x0.shape[0]

    def is_state_free(self, tol=0.0):
        zero = (np.all(np.abs(self.C_x0) <= tol) and np.all(np.abs(self.C_x1) <= tol)
                and not self.pointwise)
        return zero and (self.C_xd is None or self.C_xd.is_zero(tol))

    def apply(self, h):
        """Apply the spatial output operator to a grid function ``h``."""
        out = self.C_x0 @ h.eval(0.0) + self.C_x1 @ h.eval(1.0)
        for zk, ck in self.pointwise:
            out = out + ck @ h.eval(zk)
        if self.C_xd is not None and not self.C_xd.is_zero():
            prod = GridFunction(
                h.grid,
                np.einsum("mij,mjk->mik", self.C_xd.values, h.values),
                tuple(sorted(set(self.C_xd.breakpoints) | set(h.breakpoints))),
            )
            out = out + numcore.integrate(prod)
        return out


# ---------------------------------------------------------------------------
# Agent classes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AgentClass:
    """Nominal transport PIDE-ODE agent of one group."""

    n_minus: int
    n_plus: int
    Lambda: GridFunction            # n x n diagonal
    A: GridFunction                 # n x n, zero diagonal
    A0: GridFunction                # n x n_minus
    C: GridFunction                 # n x n_w
    F: KernelFunction               # n x n on the triangle
    Q0: np.ndarray                  # n_plus x n_minus
    Q1: np.ndarray                  # n_minus x n_plus
    F_w: np.ndarray                 # n_w x n_w
    B_w: np.ndarray                 # n_w x n_minus
    C0: np.ndarray                  # n_plus x n_w
    output: OutputOperatorSpec

    @property
    def n(self):
        return self.n_minus + self.n_plus

    @property
    def n_w(self):
        return self.F_w.shape[0]

    @property
    def E_minus(self):
        e = np.zeros((self.n, self.n_minus))
        e[:self.n_minus] = np.eye(self.n_minus)
        return e

    @property
    def E_plus(self):
        e = np.zeros((self.n, self.n_plus))
        e[self.n_minus:] = np.eye(self.n_plus)
        return e

    @property
    def grid(self):
        return self.Lambda.grid

    def lambda_diag(self):
        """Velocity samples, shape (M, n)."""
        return np.einsum("mkk->mk", self.Lambda.values)


@dataclass(frozen=True)
class UncertainAgent:
    """One follower: perturbed physics plus its disturbance channels."""

    group_index: int
    nominal: AgentClass
    perturbed: AgentClass
    G: GridFunction                  # n x q in-domain disturbance input
    G0: np.ndarray                   # n_plus x q
    G1: np.ndarray                   # n_minus x q
    G_w: np.ndarray                  # n_w x q
    G_y: np.ndarray                  # n_out x q
    disturbance_S: np.ndarray        # generator of the agent's disturbance model
    disturbance_P: np.ndarray
    delta_shift: np.ndarray          # constant output offset (formation slot)

    @property
    def q(self):
        return self.G_w.shape[1]


def _diag_samples(gf):
    return np.einsum("mkk->mk", gf.values)


def validate_agent_class(n_minus, n_plus, Lambda, Q0, Q1, F_w, B_w, C0,
                         output, A=None, A0=None, C=None, F=None):
    """Build an :class:`AgentClass`, enforcing every structural invariant."""
    n = n_minus + n_plus
    m = Lambda.m
    if Lambda.shape != (n, n):
        raise ValueError(f"Lambda must be {n}x{n}")
    offdiag = Lambda.values - np.einsum(
        "mk,kl->mkl", _diag_samples(Lambda), np.eye(n))
    if np.max(np.abs(offdiag)) > 0:
        raise ValueError("Lambda must be diagonal")
    lam = _diag_samples(Lambda)  # (M, n)
    if np.any(lam[:, :n_minus] <= 0) or np.any(lam[:, n_minus:] >= 0):
        raise VelocitySignChange(
            f"velocities must be {n_minus} positive then {n_plus} negative "
            "at every grid point"
        )
    if np.any(np.diff(lam, axis=1) > 1e-12):
        raise VelocityOrdering("velocities must be sorted in descending order")
    for j in range(n - 1):
        gap = lam[:, j] - lam[:, j + 1]
        if gap.min() <= 1e-12 and gap.max() > 1e-12:
            raise VelocityOrdering(
                f"velocities {j + 1} and {j + 2} cross: equal somewhere but "
                "not everywhere"
            )

    nw = np.asarray(F_w).shape[0]
    A = A if A is not None else GridFunction.zeros(n, n, m)
    A0 = A0 if A0 is not None else GridFunction.zeros(n, n_minus, m)
    C = C if C is not None else GridFunction.zeros(n, nw, m)
    if F is None:
        F = KernelFunction(Lambda.grid, np.zeros((m, m, n, n)))
    if np.max(np.abs(_diag_samples(A))) > 0:
        raise NonzeroDiagonalA("the local coupling matrix must have zero diagonal")
    for p in range(n):
        for r in range(p + 1, n):
            if np.max(np.abs(lam[:, p] - lam[:, r])) <= 1e-12:
                if np.max(np.abs(A.values[:, p, r])) > 0 or \
                        np.max(np.abs(A.values[:, r, p])) > 0:
                    raise EqualVelocityCoupling(
                        f"states {p + 1} and {r + 1} share a velocity, so "
                        "their local coupling must vanish"
                    )
    F_w = np.atleast_2d(np.asarray(F_w, dtype=float))
    B_w = np.asarray(B_w, dtype=float).reshape(nw, n_minus)
    if pbh_uncontrollable_modes(F_w, B_w):
        raise UncontrollableODE("(F_w, B_w) must be controllable")
    Q0 = np.asarray(Q0, dtype=float).reshape(n_plus, n_minus)
    Q1 = np.asarray(Q1, dtype=float).reshape(n_minus, n_plus)
    C0 = np.asarray(C0, dtype=float).reshape(n_plus, nw)
    return AgentClass(n_minus=n_minus, n_plus=n_plus, Lambda=Lambda, A=A,
                      A0=A0, C=C, F=F, Q0=Q0, Q1=Q1, F_w=F_w, B_w=B_w, C0=C0,
                      output=output)


def from_delay_ode(F_w, B_w, C0, input_delays, output_delays, m=DEFAULT_GRID_M):
    """Embed an ODE with input/output delays as a transport cascade.

    Each delayed channel becomes one transport state with velocity equal to
    the reciprocal delay; the output is the boundary trace of the outgoing
    states.
    """
    din = np.asarray(input_delays, dtype=float)
    dout = np.asarray(output_delays, dtype=float)
    if np.any(din <= 0) or np.any(np.diff(din) < 0):
        raise DelayOrdering("input delays must be positive and ascending")
    if np.any(dout <= 0) or np.any(np.diff(dout) > 0):
        raise DelayOrdering("output delays must be positive and descending")
    n_minus, n_plus = din.size, dout.size
    n = n_minus + n_plus
    vel = np.concatenate([1.0 / din, -1.0 / dout])
    Lambda = GridFunction.from_constant(np.diag(vel), m)
    nw = np.asarray(F_w).shape[0]
    out = OutputOperatorSpec(
        C_x0=np.zeros((n_plus, n)),
        C_x1=np.hstack([np.zeros((n_plus, n_minus)), np.eye(n_plus)]),
        C_w=np.zeros((n_plus, nw)),
    )
    return validate_agent_class(
        n_minus=n_minus, n_plus=n_plus, Lambda=Lambda,
        Q0=np.zeros((n_plus, n_minus)), Q1=np.zeros((n_minus, n_plus)),
        F_w=F_w, B_w=B_w, C0=C0, output=out,
    )


@dataclass(frozen=True)
class RopeStateMap:
    """Pointwise map between wave variables and transport variables.

    ``to_transport`` maps ``(dv/dz, dv/dt)`` at height ``z`` to the transport
    state; ``from_transport`` inverts it.  ``input_scale`` converts a force
    command at the suspension point into the transport boundary input.
    """

    eps: GridFunction           # 1 x 1 wave speed profile
    weight: GridFunction        # 1 x 1 integrating factor
    input_scale: float

    def to_transport(self, z, dvdz, dvdt):
        e = float(self.eps.eval(z)[0, 0])
        w = float(self.weight.eval(z)[0, 0])
        t = np.array([[e, 1.0], [-e, 1.0]])
        return w * (t @ np.asarray([dvdz, dvdt], dtype=float))

    def from_transport(self, z, x):
        e = float(self.eps.eval(z)[0, 0])
        w = float(self.weight.eval(z)[0, 0])
        tinv = np.array([[1.0, -1.0], [e, e]]) / (2.0 * e)
        return (tinv @ np.asarray(x, dtype=float)) / w


def rope_agent(l, m, rho, g=9.81, grid_m=DEFAULT_GRID_M):
    """Heavy rope with a load, in transport coordinates.

    The wave equation ``rho v_tt = (tau(s) v_s)_s`` with tension
    ``tau(s) = m g + rho g s``, Neumann actuation at the suspension point and
    the load's force balance at the free end maps to a 2x2 heterodirectional
    system coupled to the load ODE.
    """
    if min(l, m, rho, g) <= 0:
        raise ValueError("rope parameters must be positive")
    grid = np.linspace(0.0, 1.0, grid_m)

    def eps(z):
        return np.sqrt(g * (m + rho * l * z) / (l ** 2 * rho))

    eps0 = float(eps(0.0))
    Lambda = GridFunction(grid, np.stack([np.diag([e, -e]) for e in eps(grid)]))
    a_vals = np.stack([
        g / (4.0 * l * e) * np.array([[0.0, -1.0], [1.0, 0.0]]) for e in eps(grid)
    ])
    A = GridFunction(grid, a_vals)
    F_w = np.array([[0.0, 1.0], [0.0, -g / (l * eps0)]])
    B_w = np.array([[0.0], [g / (l * eps0)]])
    out = OutputOperatorSpec(
        C_x0=np.zeros((1, 2)), C_x1=np.zeros((1, 2)), C_w=np.array([[1.0, 0.0]]),
    )
    agent = validate_agent_class(
        n_minus=1, n_plus=1, Lambda=Lambda, A=A,
        Q0=np.array([[-1.0]]), Q1=np.array([[1.0]]),
        F_w=F_w, B_w=B_w, C0=np.array([[0.0, 2.0]]), output=out,
    )

    # integrating factor of the wave-to-transport map and the input scaling
    rate = g / l / (2.0 * eps(grid)) ** 2
    cum = numcore.cumulative_trapezoid(rate, grid)
    weight = GridFunction(grid, np.exp(cum)[:, None, None])
    full = numcore.cumulative_trapezoid(g / (2.0 * l) / eps(grid) ** 2, grid)[-1]
    state_map = RopeStateMap(
        eps=GridFunction(grid, eps(grid)[:, None, None]),
        weight=weight,
        input_scale=float(2.0 * l * eps(1.0) * np.exp(full)),
    )
    return agent, state_map


def rope_uncertain_agent(group_index, nominal, l, m, rho, g=9.81,
                         delta_shift=0.0, grid_m=DEFAULT_GRID_M):
    """Follower with perturbed rope physics and a load-level disturbance."""
    perturbed, _ = rope_agent(l, m, rho, g, grid_m=grid_m)
    return UncertainAgent(
        group_index=group_index, nominal=nominal, perturbed=perturbed,
        G=GridFunction.zeros(2, 1, perturbed.grid.size),
        G0=np.zeros((1, 1)), G1=np.zeros((1, 1)),
        G_w=np.array([[0.0], [1.0]]), G_y=np.zeros((1, 1)),
        disturbance_S=np.zeros((1, 1)), disturbance_P=np.ones((1, 1)),
        delta_shift=np.atleast_1d(np.asarray(delta_shift, dtype=float)),
    )
