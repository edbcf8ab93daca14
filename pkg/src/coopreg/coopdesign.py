"""Cooperative regulator layer for one agent group.

The reference/disturbance generator is duplicated once per regulated output
channel.  A pair of decoupling matrices (Pi_x, Pi_w) maps the transformed
agent onto those copies, after which a single gain stabilizes every copy
across the group through an algebraic Riccati equation whose coupling
weight is limited by the eigenvalues of the group's graph block.

The decoupling two-point problem is solved chain by chain: each generalized
left-eigenvector row of the generator reduces the matrix problem to a scalar
transport equation along z whose solution is explicit through the diagonal
fundamental factor; the rows are mixed back with the inverse eigenvector
matrix.  An independent transfer-matrix route (numerator rank test and a
gain identity) cross-checks the result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import numcore
from .agentdef import AgentClass, GridFunction, OutputOperatorSpec
from .localdesign import LocalDesign, transform_apply
from .sigmodel import InternalModelSpec, jordan_chains, jordan_structure

# relative backward-error gate shared by all decoupling residuals
GATE_REL = 1e-6


class SingularM1(RuntimeError):
    """Boundary propagation matrix of the decoupling recursion is singular."""


class SpectrumHit(ValueError):
    """Transfer evaluation point coincides with a boundary-ODE eigenvalue."""


class TransmissionZero(RuntimeError):
    """Numerator loses rank on the generator spectrum."""


class KappaTooLarge(ValueError):
    """Coupling weight exceeds the least real part of the graph block."""


class NotHurwitz(RuntimeError):
    """Aggregated regulator error dynamics have an unstable eigenvalue."""


# ---------------------------------------------------------------------------
# Small helpers
# ---------------------------------------------------------------------------

def _cum4c(values, grid):
    """Complex-safe fourth-order cumulative integral along the leading axis."""
    values = np.asarray(values)
    if np.iscomplexobj(values):
        return (numcore.cumulative_integral4(values.real, grid)
                + 1j * numcore.cumulative_integral4(values.imag, grid))
    return numcore.cumulative_integral4(values, grid)


def _adjugate(a):
    """Adjugate via explicit cofactors; meant for small ODE dimensions."""
    a = np.atleast_2d(a)
    n = a.shape[0]
    if n == 1:
        return np.ones((1, 1), dtype=a.dtype)
    adj = np.empty_like(a)
    idx = np.arange(n)
    for r in range(n):
        for c in range(n):
            minor = a[np.ix_(idx != r, idx != c)]
            adj[c, r] = (-1) ** (r + c) * np.linalg.det(minor)
    return adj


def _apply_output(spec: OutputOperatorSpec, table, grid):
    """Spatial output operator applied to a (possibly complex) sample stack."""
    m = grid.size
    h = grid[1] - grid[0]
    out = spec.C_x0 @ table[0] + spec.C_x1 @ table[-1]
    for zk, ck in spec.pointwise:
        i = min(int(zk / h), m - 2)
        t = (zk - grid[i]) / h
        out = out + ck @ ((1.0 - t) * table[i] + t * table[i + 1])
    if spec.C_xd is not None and not spec.C_xd.is_zero():
        w = numcore.span_weights4(m, h)
        out = out + np.einsum("b,bij,bjk->ik", w, spec.C_xd.values, table)
    return out


def _boundary_propagation(lam, prim, a0t, w_full, mu, n_minus):
    """Propagation matrix of the z=0 condition for one generator eigenvalue.

    Lower triangular because the slow-channel coupling produced by the
    backstepping stage is strictly lower triangular; its diagonal carries
    pure transport factors and only vanishes in degenerate geometries.
    """
    decay = np.exp(-mu * prim)                      # (m, n)
    psi_z1 = lam[-1] / lam * decay / decay[-1]      # diagonal of Psi(z, 1)
    m1 = (np.diag(psi_z1[0, :n_minus] * lam[0, :n_minus])
          - np.einsum("b,bk,bkj->kj", w_full, psi_z1[:, :n_minus],
                      a0t[:, :n_minus, :]))
    scale = max(1.0, float(np.max(np.abs(m1))))
    if np.min(np.abs(np.diag(m1))) <= 1e-12 * scale:
        raise SingularM1(
            f"boundary propagation matrix singular at eigenvalue {mu:.6g}")
    return m1, decay, psi_z1


# ---------------------------------------------------------------------------
# Transfer-matrix route
# ---------------------------------------------------------------------------

def transport_factor(agent: AgentClass, a0_tilde: GridFunction, s):
    """Boundary-to-domain factor M(z, s) of the transformed agent.

    Returns an (M, n, n_minus) stack; complex when ``s`` is complex.
    """
    grid = agent.grid
    lam = agent.lambda_diag()
    prim = numcore.cumulative_integral4(1.0 / lam, grid)
    mix0 = agent.E_minus + agent.E_plus @ agent.Q0
    phi0 = np.exp(s * prim)
    integrand = np.exp(-s * prim)[:, :, None] * a0_tilde.values / lam[:, :, None]
    cum = _cum4c(integrand, grid)
    return phi0[:, :, None] * (mix0[None, :, :] - cum)


def numerator(agent: AgentClass, local: LocalDesign, s):
    """Numerator of the agent transfer matrix at the complex point ``s``.

    Polynomial in ``s``: the strictly proper ODE part enters through the
    adjugate, the spatial part is scaled by the characteristic polynomial
    of the transformed boundary ODE.
    """
    table = transport_factor(agent, local.A0_tilde, s)
    f_t = local.F_w_tilde
    shifted = s * np.eye(f_t.shape[0]) - f_t
    return (_apply_output(local.C_x_tilde, table, agent.grid)
            * np.linalg.det(shifted)
            + local.C_w_tilde @ _adjugate(shifted) @ agent.B_w)


def denominator(agent: AgentClass, local: LocalDesign, s, tol=1e-9):
    """Boundary-relation matrix D(s) of the agent transfer at the point ``s``.

    D(s) maps the transformed in-domain boundary trace at z = 0 to the raw
    actuation signal, assembled from the z = 1 boundary condition with the
    state transformation undone under the integrals.  The input-output
    transfer of the agent is

        F(s) = numerator(s) @ inv(det(s I - F_w_tilde) * D(s)),

    the characteristic polynomial of the transformed boundary ODE appearing
    once because the numerator clears both the adjugate fraction and the
    resolvent hidden inside D.  Rank statements about ``numerator`` alone are
    unaffected: det * D is invertible away from spectra, so zeros of F are
    zeros of N.

    Raises :class:`SpectrumHit` when ``s`` is within ``tol`` (relative) of an
    eigenvalue of the transformed boundary ODE, where the resolvent inside
    D(s) blows up.
    """
    f_t = local.F_w_tilde
    eig = np.linalg.eigvals(f_t)
    scale = max(1.0, float(np.max(np.abs(eig))))
    if np.min(np.abs(s - eig)) < tol * scale:
        raise SpectrumHit(
            f"evaluation point {s} lies in the boundary-ODE spectrum")
    grid = agent.grid
    m = grid.size
    h = grid[1] - grid[0]
    table = transport_factor(agent, local.A0_tilde, s)

    # undo the state transformation on M(., s), row by row over z
    w4 = np.zeros((m, m))
    for a in range(1, m):
        w4[a, : a + 1] = numcore.span_weights4(a + 1, h)
    undone = table + np.einsum(
        "ab,abij,bjk->aik", w4, local.K_I.values, table)

    em_t = agent.E_minus.T
    ep_t = agent.E_plus.T
    shifted = s * np.eye(f_t.shape[0]) - f_t
    mid = ((em_t - agent.Q1 @ ep_t) @ local.Sigma.eval(1.0)
           @ np.linalg.solve(shifted, agent.B_w))
    w_full = numcore.span_weights4(m, h)
    tail = np.einsum("b,ij,bjk,bkl->il", w_full, em_t,
                     local.K.values[-1], undone)
    return em_t @ table[-1] + mid - agent.Q1 @ ep_t @ undone[-1] + tail


@dataclass(frozen=True)
class RankReport:
    """Numerator rank at one generator eigenvalue."""

    mu: complex
    rank: int
    needed: int
    smallest_sv: float

    def line(self):
        status = "ok" if self.rank >= self.needed else "DEFICIENT"
        return (f"numerator rank at mu = {self.mu:.6g}: {self.rank}"
                f" (needed {self.needed}, smallest sv {self.smallest_sv:.3e})"
                f" {status}")


def transmission_rank(agent: AgentClass, local: LocalDesign,
                      ims: InternalModelSpec, tol=1e-8):
    """Numerator rank on the generator spectrum; abort when deficient."""
    reports = []
    for mu, _ in jordan_structure(ims.S):
        n_mu = numerator(agent, local, mu)
        sv = np.linalg.svd(n_mu, compute_uv=False)
        top = float(sv[0]) if sv.size else 0.0
        rank = int(np.sum(sv > tol * max(1.0, top)))
        reports.append(RankReport(
            mu=complex(mu), rank=rank, needed=ims.n_minus_bar,
            smallest_sv=float(sv[-1]) if sv.size else 0.0))
    bad = [r for r in reports if r.rank < r.needed]
    if bad:
        raise TransmissionZero(bad[0].line())
    return reports


# ---------------------------------------------------------------------------
# Decoupling matrices
# ---------------------------------------------------------------------------

def solve_pi(agent: AgentClass, local: LocalDesign, ims: InternalModelSpec):
    """Decoupling matrices of one group and their equation residuals.

    Returns ``(Pi_x, Pi_w, residuals)`` with Pi_x a grid function of shape
    (n_vbar, n) and Pi_w an (n_vbar, n_w) matrix.  Raises when the recursion
    hits a singular propagation matrix, overlapping spectra, or when a
    residual exceeds the gate.
    """
    grid = agent.grid
    m = grid.size
    h = grid[1] - grid[0]
    n, n_minus, n_w = agent.n, agent.n_minus, agent.n_w
    lam = agent.lambda_diag()
    prim = numcore.cumulative_integral4(1.0 / lam, grid)
    a0t = local.A0_tilde.values
    f_t = local.F_w_tilde
    ct = local.C_x_tilde
    ctw = local.C_w_tilde
    nbar = ims.n_minus_bar
    if ct.n_out != nbar:
        raise numcore.DimensionMismatch(
            f"output operator has {ct.n_out} rows,"
            f" internal model expects {nbar}")
    b_y = ims.b_y[:, 0]
    mix0 = agent.E_plus @ agent.Q0 + agent.E_minus
    w_full = numcore.span_weights4(m, h)
    dens = None if ct.C_xd is None else ct.C_xd.values

    eig_ft = np.linalg.eigvals(f_t)
    scale_ft = max(1.0, float(np.max(np.abs(eig_ft))))
    chains = jordan_chains(ims.S, side="left")
    for mu, _ in chains:
        if np.min(np.abs(mu - eig_ft)) < 1e-9 * max(scale_ft, abs(mu)):
            raise numcore.SpectraOverlap(
                f"generator eigenvalue {mu:.4g} lies in the"
                " boundary-ODE spectrum")

    v_mat = np.array([nu for _, vecs in chains for nu in vecs])

    blocks_x, blocks_w = [], []
    for j in range(nbar):
        rows_x = np.zeros((ims.n_v, m, n), dtype=complex)
        rows_w = np.zeros((ims.n_v, n_w), dtype=complex)
        r = 0
        for mu, vecs in chains:
            m1, decay, psi_z1 = _boundary_propagation(
                lam, prim, a0t, w_full, mu, n_minus)
            shifted_t = (mu * np.eye(n_w) - f_t).T
            prev_w = np.zeros(n_w, dtype=complex)
            prev_x = np.zeros((m, n), dtype=complex)
            for nu in vecs:
                s_by = complex(nu @ b_y)
                pi_w_l = -np.linalg.solve(shifted_t, s_by * ctw[j] + prev_w)

                c0 = -prev_x / lam
                if dens is not None:
                    c0 = c0 - s_by * dens[:, j, :] / lam
                # integral from the far boundary, factored through the
                # diagonal fundamental matrix
                gaux = _cum4c(c0 * lam / decay, grid)
                c2 = (gaux - gaux[-1]) * decay / lam
                c2[:, n_minus:] += (s_by * ct.C_x1[j, n_minus:]
                                    * decay[:, n_minus:]
                                    / decay[-1, n_minus:]
                                    / lam[:, n_minus:])
                for zk, ck in ct.pointwise:
                    # a pointwise output acts like a boundary term left of it
                    dk = np.array([np.interp(zk, grid, decay[:, k])
                                   for k in range(n)])
                    mask = grid < zk
                    c2[mask] += s_by * ck[j] * decay[mask] / dk / lam[mask]

                c1 = pi_w_l @ agent.B_w - s_by * (ct.C_x0[j] @ mix0)
                c3 = (c1 - (c2[0] * lam[0]) @ mix0
                      + np.einsum("b,bk,bkj->j", w_full, c2, a0t))
                q = solve_triangular(m1.T, c3, lower=False)
                pi_l = c2.copy()
                pi_l[:, :n_minus] += q * psi_z1[:, :n_minus]

                rows_x[r] = pi_l
                rows_w[r] = pi_w_l
                r += 1
                prev_w = pi_w_l
                prev_x = pi_l
        blocks_x.append(np.linalg.solve(
            v_mat, rows_x.reshape(ims.n_v, m * n)).reshape(ims.n_v, m, n))
        blocks_w.append(np.linalg.solve(v_mat, rows_w))

    stack_x = np.concatenate(blocks_x, axis=0)      # (n_vbar, m, n)
    stack_w = np.concatenate(blocks_w, axis=0)
    drift = max(float(np.max(np.abs(stack_x.imag))),
                float(np.max(np.abs(stack_w.imag))))
    scale = max(1.0, float(np.max(np.abs(stack_x.real))),
                float(np.max(np.abs(stack_w.real))))
    if drift > 1e-8 * scale:
        raise RuntimeError(
            f"decoupling solution keeps an imaginary part of {drift:.2e};"
            " generator eigenvalues are inconsistent under conjugation")

    bps = set() if ct.C_xd is None else set(ct.C_xd.breakpoints)
    bps |= {zk for zk, _ in ct.pointwise}
    pi_x = GridFunction(
        grid, np.ascontiguousarray(np.transpose(stack_x.real, (1, 0, 2))),
        tuple(sorted(bps)))
    pi_w = stack_w.real

    res = decoupling_residuals(agent, local, ims, pi_x, pi_w)
    worst = max(res.values())
    if worst > GATE_REL:
        raise RuntimeError(
            f"decoupling residual {worst:.2e} above gate {GATE_REL:.0e}"
            f" ({res})")
    return pi_x, pi_w, res


def decoupling_residuals(agent: AgentClass, local: LocalDesign,
                         ims: InternalModelSpec, pi_x: GridFunction, pi_w):
    """Relative backward-error residuals of the four decoupling relations."""
    grid = agent.grid
    m = grid.size
    h = grid[1] - grid[0]
    lam_mat = agent.Lambda.values
    pix = pi_x.values                              # (m, n_vbar, n)
    s_t, b_t = ims.S_tilde, ims.B_tilde_y
    ct = local.C_x_tilde
    mix0 = agent.E_plus @ agent.Q0 + agent.E_minus

    def rel(res, *terms):
        scale = max(1.0, *(float(np.max(np.abs(t))) for t in terms))
        return float(np.max(np.abs(res))) / scale

    prod = np.einsum("mvj,mjk->mvk", pix, lam_mat)
    t1 = numcore.derivative6(prod, grid)
    t2 = np.einsum("vu,muk->mvk", s_t, pix)
    if ct.C_xd is None:
        t3 = np.zeros_like(t2)
    else:
        t3 = np.einsum("vo,mok->mvk", b_t, ct.C_xd.values)
    # derivative stencils are meaningless across kinks and at the edge rows
    mask = np.ones(m, dtype=bool)
    mask[:3] = mask[-3:] = False
    for b in pi_x.breakpoints:
        mask &= np.abs(grid - b) > 3.5 * h
    r_ode = rel((t1 + t2 + t3)[mask], t1[mask], t2[mask], t3[mask])

    t1 = s_t @ pi_w
    t2 = pi_w @ local.F_w_tilde
    t3 = b_t @ local.C_w_tilde
    r_syl = rel(t1 - t2 + t3, t1, t2, t3)

    w_full = numcore.span_weights4(m, h)
    t1 = pix[0] @ lam_mat[0] @ mix0
    t2 = np.einsum("b,bvk,bkj->vj", w_full, pix, local.A0_tilde.values)
    t3 = pi_w @ agent.B_w
    t4 = b_t @ ct.C_x0 @ mix0
    r_bc0 = rel(t1 - t2 - t3 + t4, t1, t2, t3, t4)

    t1 = pix[-1] @ lam_mat[-1] @ agent.E_plus
    t2 = b_t @ ct.C_x1 @ agent.E_plus
    r_bc1 = rel(t1 - t2, t1, t2)

    return {"ode": r_ode, "sylvester": r_syl, "bc0": r_bc0, "bc1": r_bc1}


def compute_be(agent: AgentClass, local: LocalDesign,
               ims: InternalModelSpec, pi_x: GridFunction):
    """Input matrix of the decoupled internal-model copies."""
    lam1 = agent.Lambda.eval(1.0)
    return ((pi_x.eval(1.0) @ lam1 - ims.B_tilde_y @ local.C_x_tilde.C_x1)
            @ agent.E_minus)


def gain_identity_residual(agent: AgentClass, local: LocalDesign,
                           ims: InternalModelSpec, b_e):
    """Cross-check of the gain input matrix against the numerator route.

    For every eigenvector row of the generator and every output channel the
    two independently computed quantities must agree.  Both sides carry the
    characteristic polynomial of the transformed boundary ODE so that the
    comparison stays polynomial in the eigenvalue.
    """
    grid = agent.grid
    m = grid.size
    h = grid[1] - grid[0]
    n_minus, n_w = agent.n_minus, agent.n_w
    lam = agent.lambda_diag()
    prim = numcore.cumulative_integral4(1.0 / lam, grid)
    w_full = numcore.span_weights4(m, h)
    a0t = local.A0_tilde.values
    lam1m = agent.E_minus.T @ agent.Lambda.eval(1.0) @ agent.E_minus
    b_y = ims.b_y[:, 0]
    n_v = ims.n_v

    worst = 0.0
    for mu, vecs in jordan_chains(ims.S, side="left"):
        nu = vecs[0]
        n_mu = numerator(agent, local, mu)
        m1, _, _ = _boundary_propagation(lam, prim, a0t, w_full, mu, n_minus)
        det = np.linalg.det(mu * np.eye(n_w) - local.F_w_tilde)
        for j in range(ims.n_minus_bar):
            lhs = (nu @ b_e[j * n_v:(j + 1) * n_v, :]) * det
            rhs = -(nu @ b_y) * (
                solve_triangular(m1.T, n_mu[j], lower=False) @ lam1m)
            scale = max(1.0, float(np.max(np.abs(lhs))),
                        float(np.max(np.abs(rhs))))
            worst = max(worst, float(np.max(np.abs(lhs - rhs))) / scale)
    return worst


# ---------------------------------------------------------------------------
# Simultaneous gain and assembled gains
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GainResult:
    """Riccati-based gain for all internal-model copies of one group."""

    K_vbar: np.ndarray
    P: np.ndarray
    kappa: float
    a: float
    F_e: np.ndarray
    spectrum: np.ndarray


def simultaneous_gain(ims: InternalModelSpec, b_e, h_ii, a_weight,
                      kappa=None):
    """One gain stabilizing all internal-model copies of a group.

    ``kappa`` defaults to the least real part of the graph block spectrum,
    the largest admissible value.
    """
    h_ii = np.atleast_2d(np.asarray(h_ii, dtype=float))
    eig_h = np.linalg.eigvals(h_ii)
    least = float(np.min(eig_h.real))
    if least <= 0.0:
        raise ValueError(
            "graph block must have eigenvalues with positive real part")
    if kappa is None:
        kappa = least
    kappa = float(kappa)
    if kappa <= 0.0:
        raise ValueError("kappa must be positive")
    if kappa > least + 1e-12:
        raise KappaTooLarge(
            f"kappa = {kappa:.6g} exceeds the least real part"
            f" {least:.6g} of the graph block spectrum")

    bad = numcore.pbh_uncontrollable_modes(ims.S_tilde, b_e)
    if bad:
        raise numcore.Uncontrollable(
            f"stacked generator uncontrollable at {bad[0]:.4g}", bad[0])
    p = numcore.solve_are(ims.S_tilde, b_e, kappa, a_weight)
    k_vbar = b_e.T @ p
    f_e = (np.kron(np.eye(h_ii.shape[0]), ims.S_tilde)
           - np.kron(h_ii, b_e @ k_vbar))
    spectrum = np.linalg.eigvals(f_e)
    top = float(np.max(spectrum.real))
    if top >= -1e-6:
        raise NotHurwitz(
            f"aggregated regulator spectrum reaches Re = {top:.2e}")
    return GainResult(K_vbar=k_vbar, P=p, kappa=kappa, a=float(a_weight),
                      F_e=f_e, spectrum=spectrum)


def cooperative_gains(local: LocalDesign, pi_x: GridFunction, pi_w):
    """Feedback gains acting on the original agent state and boundary ODE."""
    grid = pi_x.grid
    m = grid.size
    h = grid[1] - grid[0]
    pix = pi_x.values
    kv = local.K.values
    gx = -pix.copy()
    for b in range(m):
        w = numcore.span_weights4(m - b, h)
        gx[b] += np.einsum("a,avj,ajk->vk", w, pix[b:], kv[b:, b])
    decoupled = transform_apply(local.K, local.Sigma)
    w_full = numcore.span_weights4(m, h)
    gw = -pi_w + np.einsum("b,bvj,bjk->vk", w_full, pix, decoupled.values)
    return GridFunction(grid, gx, pi_x.breakpoints), gw


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoopDesign:
    """Everything the cooperative layer contributes for one group."""

    Pi_x: GridFunction
    Pi_w: np.ndarray
    B_e: np.ndarray
    P: np.ndarray
    K_vbar: np.ndarray
    kappa: float
    a: float
    K_c_x: GridFunction
    K_c_w: np.ndarray
    F_e: np.ndarray
    F_e_spectrum: np.ndarray
    pi_residuals: dict
    rank_report: tuple
    identity_residual: float


def design_coop(agent: AgentClass, local: LocalDesign,
                ims: InternalModelSpec, h_ii, a_weight, kappa=None):
    """Run the complete cooperative design for one agent group."""
    pi_x, pi_w, residuals = solve_pi(agent, local, ims)
    b_e = compute_be(agent, local, ims, pi_x)
    report = transmission_rank(agent, local, ims)
    gain = simultaneous_gain(ims, b_e, h_ii, a_weight, kappa=kappa)
    k_c_x, k_c_w = cooperative_gains(local, pi_x, pi_w)
    ident = gain_identity_residual(agent, local, ims, b_e)
    if ident > GATE_REL:
        raise RuntimeError(
            f"gain identity residual {ident:.2e} above gate {GATE_REL:.0e}")
    return CoopDesign(
        Pi_x=pi_x, Pi_w=pi_w, B_e=b_e, P=gain.P, K_vbar=gain.K_vbar,
        kappa=gain.kappa, a=gain.a, K_c_x=k_c_x, K_c_w=k_c_w,
        F_e=gain.F_e, F_e_spectrum=gain.spectrum,
        pi_residuals=residuals, rank_report=tuple(report),
        identity_residual=float(ident),
    )
