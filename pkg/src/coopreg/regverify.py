"""Closed-loop verification for the networked regulator.

Certifies that the gains designed from nominal models still regulate the
(possibly perturbed) follower network.  Three independent checks:

* a transmission-zero rank test on the aggregated numerator,
* a constructive solve of the steady-state equations driven by the
  exogenous signal generator, gated by residuals of all six equations,
* an eigenvalue certificate for the space-discretized closed loop.

Every follower is first re-expressed in the coordinates induced by its own
perturbed physics; only the transformation is recomputed, the deployed
feedback gains stay those of the nominal design.
"""

from dataclasses import dataclass

import numpy as np

from . import numcore
from .agentdef import AgentClass, GridFunction, UncertainAgent
from .coopdesign import (GATE_REL, CoopDesign, SpectrumHit, _adjugate,
                         _apply_output, _cum4c, numerator, transport_factor)
from .localdesign import LocalDesign, design_local, transform_apply
from .netgraph import NetworkTopology
from .sigmodel import InternalModelSpec, jordan_chains


class SingularSystem(RuntimeError):
    """The boundary/numerator block system lost rank.

    Under the standing stability assumption this cannot happen, so a
    singular solve points at an unstable closed loop or broken inputs.
    """


@dataclass(frozen=True)
class SignalHookup:
    """How the joint signal generator drives references and disturbances.

    ``P_r`` selects the reference, ``P_d[i]`` the i-th follower's
    disturbance, and ``P_shift[i]`` the constant output offset that encodes
    the follower's formation slot.  All rows act on the same generator
    state.
    """

    S: np.ndarray
    P_r: np.ndarray
    P_d: tuple
    P_shift: tuple

    @property
    def n_v(self):
        return self.S.shape[0]


@dataclass(frozen=True)
class TransformedFollower:
    """One follower in the coordinates of its own physics.

    ``bar`` holds the transformation recomputed from the perturbed
    parameters (with the nominal boundary-ODE gain); ``local``/``coop``
    are the nominal designs whose gains the controller actually applies.
    The ``g_*`` blocks are the generator-driven forcing rows of the
    transformed representation.
    """

    agent: AgentClass
    bar: LocalDesign
    group: int
    local: LocalDesign
    coop: CoopDesign
    g_pde: np.ndarray                 # (M, n, n_v)
    g_bc0: np.ndarray                 # n_plus x n_v
    g_bc1: np.ndarray                 # n_minus x n_v
    g_w: np.ndarray                   # n_w x n_v
    g_y: np.ndarray                   # n_out x n_v


@dataclass(frozen=True)
class AggregatedClosedLoop:
    """All followers plus the couplings that tie them together."""

    followers: tuple
    topology: NetworkTopology
    ims: InternalModelSpec
    hookup: SignalHookup
    K_w_under: np.ndarray             # boundary rows x stacked ODE states
    K_vbar_under: np.ndarray          # boundary rows x stacked model copies

    @property
    def grid(self):
        return self.followers[0].agent.grid

    def offsets(self, sizes):
        steps = np.concatenate([[0], np.cumsum(sizes)])
        return [slice(int(steps[a]), int(steps[a + 1]))
                for a in range(len(sizes))]

    @property
    def minus_slices(self):
        return self.offsets([f.agent.n_minus for f in self.followers])

    @property
    def w_slices(self):
        return self.offsets([f.agent.n_w for f in self.followers])

    @property
    def out_slices(self):
        return self.offsets([f.agent.output.n_out for f in self.followers])

    @property
    def vbar_slices(self):
        n_vbar = self.ims.n_vbar
        return self.offsets([n_vbar] * len(self.followers))

    @property
    def n_minus_total(self):
        return sum(f.agent.n_minus for f in self.followers)


def _quad_weights(grid):
    m = grid.size
    h = grid[1] - grid[0]
    w4 = np.zeros((m, m))
    for a in range(1, m):
        w4[a, : a + 1] = numcore.span_weights4(a + 1, h)
    return w4, numcore.span_weights4(m, h)


def assemble_uncertain_transformed(agents, local_designs, coop_designs,
                                   topology, ims, hookup, bars=None,
                                   tol_sigma=1e-9, tol_kernel=1e-3):
    """Re-derive the transformed network representation for given physics.

    ``agents`` lists one :class:`UncertainAgent` per follower in topology
    order; ``local_designs``/``coop_designs`` are the per-group nominal
    designs.  ``bars`` can inject precomputed transformations (used to
    avoid re-solving when the perturbation is zero).
    """
    followers = []
    n = topology.n_followers
    if len(agents) != n:
        raise numcore.DimensionMismatch(
            f"{len(agents)} agents for {n} followers")
    grid = agents[0].perturbed.grid
    for idx, ua in enumerate(agents):
        g = ua.group_index
        if not 0 <= g < topology.n_groups:
            raise numcore.DimensionMismatch(f"agent {idx}: no group {g}")
        sl = topology.group_slice(g)
        if not sl.start <= idx < sl.stop:
            raise numcore.DimensionMismatch(
                f"agent {idx} claims group {g} but sits outside its "
                f"follower block {sl.start}:{sl.stop}")
        agent = ua.perturbed
        if agent.grid.size != grid.size:
            raise numcore.DimensionMismatch("followers must share one grid")
        if agent.output.n_out != ims.n_minus_bar:
            raise numcore.DimensionMismatch(
                f"agent {idx} has {agent.output.n_out} error channels but "
                f"the internal model copies {ims.n_minus_bar}")
        local = local_designs[g]
        if bars is not None and bars[idx] is not None:
            bar = bars[idx]
        else:
            bar = design_local(agent, K_w=local.K_w, tol_sigma=tol_sigma,
                               tol_kernel=tol_kernel)

        # generator-driven forcing of the transformed representation
        p_d = np.asarray(hookup.P_d[idx], dtype=float)
        minus_w = GridFunction(grid, ua.G.values - np.einsum(
            "mik,kq->miq", bar.Sigma.values, ua.G_w))
        g_dom = transform_apply(bar.K, minus_w, sign=-1.0).values
        lam0 = np.diag(agent.lambda_diag()[0])
        g_dom = g_dom + np.einsum(
            "mij,jq->miq", bar.K.values[:, 0],
            lam0 @ agent.E_plus @ ua.G0)
        followers.append(TransformedFollower(
            agent=agent, bar=bar, group=g, local=local, coop=coop_designs[g],
            g_pde=np.einsum("miq,qv->miv", g_dom, p_d),
            g_bc0=ua.G0 @ p_d,
            g_bc1=ua.G1 @ p_d,
            g_w=ua.G_w @ p_d,
            g_y=ua.G_y @ p_d + np.asarray(hookup.P_shift[idx], dtype=float)
                - np.asarray(hookup.P_r, dtype=float),
        ))

    followers = tuple(followers)
    _, w_full = _quad_weights(grid)
    h_mat = topology.H

    minus_sizes = [f.agent.n_minus for f in followers]
    w_sizes = [f.agent.n_w for f in followers]
    steps_m = np.concatenate([[0], np.cumsum(minus_sizes)])
    steps_w = np.concatenate([[0], np.cumsum(w_sizes)])
    k_w_under = np.zeros((int(steps_m[-1]), int(steps_w[-1])))
    k_vbar_under = np.zeros((int(steps_m[-1]), len(followers) * ims.n_vbar))

    lumped_w = []                      # per follower: its outbound w-gain
    for fol in followers:
        lumped_w.append(fol.coop.K_c_w + np.einsum(
            "b,bij,bjk->ik", w_full, fol.coop.K_c_x.values,
            fol.bar.Sigma.values))
    for a, fa in enumerate(followers):
        ra = slice(int(steps_m[a]), int(steps_m[a + 1]))
        ep_t, em_t = fa.agent.E_plus.T, fa.agent.E_minus.T
        sig1 = fa.bar.Sigma.eval(1.0)
        k_vbar_under[ra, a * ims.n_vbar:(a + 1) * ims.n_vbar] = fa.coop.K_vbar
        for b, fb in enumerate(followers):
            cb = slice(int(steps_w[b]), int(steps_w[b + 1]))
            block = h_mat[a, b] * fa.coop.K_vbar @ lumped_w[b]
            if a == b:
                block = block + (fa.agent.Q1 @ ep_t - em_t) @ sig1 \
                    - np.einsum("b,bij,bjk->ik", w_full,
                                fa.local.K_l_x.values, fa.bar.Sigma.values) \
                    - fa.local.K_l_1 @ ep_t @ sig1 - fa.local.K_l_w
            k_w_under[ra, cb] = block

    return AggregatedClosedLoop(
        followers=followers, topology=topology, ims=ims, hookup=hookup,
        K_w_under=k_w_under, K_vbar_under=k_vbar_under)


# ---------------------------------------------------------------------------
# Aggregated operators on per-follower value tables
# ---------------------------------------------------------------------------

def undo_transform(acl, tables):
    """Per follower, undo the state transformation on an (M, n, c) table."""
    w4, _ = _quad_weights(acl.grid)
    return [table + np.einsum("ab,abij,bjk->aik", w4, fol.bar.K_I.values,
                              table)
            for fol, table in zip(acl.followers, tables)]


def boundary_feedback(acl, tables, undone=None):
    """State part of the actuated boundary relation, one row block each.

    Combines the transformation residue of every follower with the raw
    state feedback the controller applies, including the network-coupled
    lumped signals.  ``tables`` holds one (M, n, c) array per follower.
    """
    _, w_full = _quad_weights(acl.grid)
    if undone is None:
        undone = undo_transform(acl, tables)
    lumped = [np.einsum("b,bij,bjk->ik", w_full, fol.coop.K_c_x.values, und)
              for fol, und in zip(acl.followers, undone)]
    h_mat = acl.topology.H
    rows = []
    for a, fol in enumerate(acl.followers):
        und = undone[a]
        ep_t, em_t = fol.agent.E_plus.T, fol.agent.E_minus.T
        row = fol.agent.Q1 @ ep_t @ und[-1] \
            - np.einsum("b,ij,bjk,bkc->ic", w_full, em_t,
                        fol.bar.K.values[-1], und) \
            - np.einsum("b,bij,bjc->ic", w_full, fol.local.K_l_x.values, und) \
            - fol.local.K_l_1 @ ep_t @ und[-1]
        for b in range(len(acl.followers)):
            if h_mat[a, b] != 0.0:
                row = row + h_mat[a, b] * fol.coop.K_vbar @ lumped[b]
        rows.append(row)
    return rows


def tracking_output(acl, tables):
    """Per follower, the output operator applied to an (M, n, c) table."""
    return [_apply_output(fol.bar.C_x_tilde, table, acl.grid)
            for fol, table in zip(acl.followers, tables)]


def _resolvent_w(acl, s, rhs_blocks):
    """Per follower, (sI - transformed boundary ODE)^{-1} applied blockwise."""
    out = []
    for fol, rhs in zip(acl.followers, rhs_blocks):
        f_t = fol.bar.F_w_tilde
        out.append(np.linalg.solve(s * np.eye(f_t.shape[0]) - f_t, rhs))
    return out


def _spectrum_guard(acl, s, tol=1e-9):
    for idx, fol in enumerate(acl.followers):
        eig = np.linalg.eigvals(fol.bar.F_w_tilde)
        scale = max(1.0, float(np.max(np.abs(eig))))
        if np.min(np.abs(s - eig)) < tol * scale:
            raise SpectrumHit(
                f"evaluation point {s} hits the boundary-ODE spectrum of "
                f"follower {idx}")


# ---------------------------------------------------------------------------
# Transmission-zero test
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AggregateRank:
    """Rank report of the aggregated numerator at one generator eigenvalue."""

    mu: complex
    rank: int
    needed: int
    smallest_sv: float
    per_follower: tuple
    deficient: tuple

    @property
    def ok(self):
        return self.rank >= self.needed

    def line(self):
        state = "full" if self.ok else f"DEFICIENT {self.deficient}"
        return (f"aggregated numerator at mu={self.mu:.6g}: rank {self.rank}"
                f"/{self.needed} ({state}, smallest sv {self.smallest_sv:.3e})")


def aggregated_numerator(acl, mu, tol=1e-8):
    """Numerator of the stacked open-loop transfer and its rank at ``mu``.

    The stacked boundary ODE is block diagonal, so its adjugate scales every
    follower's own numerator block by the product of the other followers'
    characteristic polynomials; the result is assembled literally that way.
    """
    _spectrum_guard(acl, mu)
    followers = acl.followers
    dets = [np.linalg.det(mu * np.eye(f.agent.n_w) - f.bar.F_w_tilde)
            for f in followers]
    blocks = [numerator(f.agent, f.bar, mu) for f in followers]

    out_slices, minus_slices = acl.out_slices, acl.minus_slices
    n_rows = sum(f.agent.output.n_out for f in followers)
    full = np.zeros((n_rows, acl.n_minus_total), dtype=complex)
    per_follower = []
    deficient = []
    for b, blk in enumerate(blocks):
        cross = np.prod([d for j, d in enumerate(dets) if j != b])
        full[out_slices[b], minus_slices[b]] = blk * cross
        sv_own = np.linalg.svd(blk, compute_uv=False)
        per_follower.append(float(sv_own[-1]))
        own_rank = int(np.sum(sv_own > tol * max(sv_own[0], 1e-300)))
        if own_rank < min(blk.shape):
            deficient.append(b)
    sv = np.linalg.svd(full, compute_uv=False)
    rank = int(np.sum(sv > tol * max(sv[0], 1e-300)))
    report = AggregateRank(
        mu=complex(mu), rank=rank, needed=n_rows,
        smallest_sv=float(sv[min(n_rows, acl.n_minus_total) - 1]),
        per_follower=tuple(per_follower), deficient=tuple(deficient))
    return full, report


# ---------------------------------------------------------------------------
# Steady-state equations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainIntermediates:
    """Per-eigenvalue construction record (one Jordan chain)."""

    mu: complex
    beta: np.ndarray                  # (L, N*n_out) stage parameters
    gamma_vbar: np.ndarray            # (L, N*n_vbar)
    gamma_w: np.ndarray               # (L, total ODE dim)
    gamma_eps: tuple                  # per stage: per follower (M, n) table


@dataclass(frozen=True)
class RegulatorSolution:
    """Steady-state maps from the generator state to the closed loop."""

    Upsilon_vbar: np.ndarray          # (N*n_vbar) x n_v
    Upsilon_eps: tuple                # per follower GridFunction, n x n_v
    Upsilon_w: tuple                  # per follower n_w x n_v
    residuals: dict
    chains: tuple

    @property
    def worst_residual(self):
        return max(self.residuals.values())


def _boundary_system(acl, mu, rho1):
    """Boundary-relation block matrix of the modal construction."""
    followers = acl.followers
    m_tables = [transport_factor(f.agent, f.bar.A0_tilde, mu)
                for f in followers]
    minus_slices, w_slices = acl.minus_slices, acl.w_slices
    n_minus = acl.n_minus_total

    p_mat = np.zeros((n_minus, n_minus), dtype=complex)
    for b, fol in enumerate(followers):
        tables = [np.zeros((acl.grid.size, f.agent.n, fol.agent.n_minus),
                           dtype=complex) for f in followers]
        tables[b] = m_tables[b]
        fed = boundary_feedback(acl, tables)
        for a in range(len(followers)):
            p_mat[minus_slices[a], minus_slices[b]] -= fed[a]
        em_t = fol.agent.E_minus.T
        p_mat[minus_slices[b], minus_slices[b]] += em_t @ m_tables[b][-1]
        resol = np.linalg.solve(
            mu * np.eye(fol.agent.n_w) - fol.bar.F_w_tilde, fol.agent.B_w)
        p_mat[:, minus_slices[b]] -= acl.K_w_under[:, w_slices[b]] @ resol

    n_mat, _ = aggregated_numerator(acl, mu)
    n_vbar = acl.ims.n_vbar
    n_out_total = n_mat.shape[0]
    kv_rho = np.zeros((n_minus, n_out_total), dtype=complex)
    lift = np.kron(np.eye(acl.ims.n_minus_bar), rho1.reshape(-1, 1))
    for a, fol in enumerate(followers):
        kv_rho[minus_slices[a], acl.out_slices[a]] = fol.coop.K_vbar @ lift

    sys = np.zeros((n_minus + n_out_total,) * 2, dtype=complex)
    sys[:n_minus, :n_minus] = p_mat
    sys[:n_minus, n_minus:] = -kv_rho
    sys[n_minus:, :n_minus] = n_mat
    sv = np.linalg.svd(sys, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise SingularSystem(
            f"modal boundary system singular at mu={mu:.6g}; the closed "
            "loop cannot be asymptotically stable")
    return sys, m_tables


def solve_extended_regulator(acl, chains=None):
    """Solve the steady-state equations chain by chain and reassemble.

    Raises when the per-equation residuals of the reassembled solution
    exceed the module gate, or when the modal system is singular.
    """
    hookup = acl.hookup
    if chains is None:
        chains = jordan_chains(hookup.S, side="right")
    followers = acl.followers
    grid = acl.grid
    n_v = hookup.n_v
    minus_slices, w_slices = acl.minus_slices, acl.w_slices
    n_minus = acl.n_minus_total
    n_vbar_total = len(followers) * acl.ims.n_vbar
    n_out_total = sum(f.agent.output.n_out for f in followers)

    lam = [f.agent.lambda_diag() for f in followers]
    prim = [numcore.cumulative_integral4(1.0 / la, grid) for la in lam]

    columns = np.zeros((n_v, 0))
    gamma_vbar_cols = []
    gamma_w_cols = []
    gamma_eps_cols = []               # list over columns of per-follower (M,n)
    chain_records = []

    for mu, chain in chains:
        _spectrum_guard(acl, mu)
        rho1 = np.asarray(chain[0])
        sys, m_tables = _boundary_system(acl, mu, rho1)

        gam_prev = [np.zeros((grid.size, f.agent.n), dtype=complex)
                    for f in followers]
        gw_prev = [np.zeros(f.agent.n_w, dtype=complex) for f in followers]
        betas, gvs, gws, geps = [], [], [], []
        for l, rho in enumerate(chain):
            rho = np.asarray(rho)
            c_tab = []
            for idx, fol in enumerate(followers):
                drive = gam_prev[idx] - fol.g_pde @ rho
                integ = np.exp(-mu * prim[idx]) * drive / lam[idx]
                cum = _cum4c(integ, grid)
                head = fol.agent.E_plus @ (fol.g_bc0 @ rho)
                c_tab.append(np.exp(mu * prim[idx]) * (head[None, :] + cum))

            delta = np.zeros(n_vbar_total, dtype=complex)
            for m_idx in range(l):
                delta += np.concatenate([
                    np.kron(betas[m_idx][sl_out], chain[l - m_idx])
                    for sl_out in
                    acl.offsets([f.agent.output.n_out for f in followers])])
            shifted = _resolvent_w(
                acl, mu, [fol.g_w @ rho - gw_prev[idx]
                          for idx, fol in enumerate(followers)])
            fed_c = boundary_feedback(
                acl, [c[:, :, None] for c in c_tab])
            r1 = np.zeros(n_minus, dtype=complex)
            for a, fol in enumerate(followers):
                em_t = fol.agent.E_minus.T
                r1[minus_slices[a]] = (
                    fol.g_bc1 @ rho - em_t @ c_tab[a][-1] + fed_c[a][:, 0]
                    + acl.K_w_under[minus_slices[a], :] @ np.concatenate(
                        shifted))
            r1 += acl.K_vbar_under @ delta

            det_full = np.prod([np.linalg.det(
                mu * np.eye(f.agent.n_w) - f.bar.F_w_tilde)
                for f in followers])
            out_c = tracking_output(acl, [c[:, :, None] for c in c_tab])
            r2 = np.zeros(n_out_total, dtype=complex)
            for a, fol in enumerate(followers):
                r2[acl.out_slices[a]] = -det_full * (
                    fol.bar.C_w_tilde @ shifted[a] + fol.g_y @ rho
                    + out_c[a][:, 0])

            sol = np.linalg.solve(sys, np.concatenate([r1, r2]))
            e0, beta = sol[:n_minus], sol[n_minus:]

            gam = [m_tables[idx] @ e0[minus_slices[idx]] + c_tab[idx]
                   for idx in range(len(followers))]
            gw = _resolvent_w(
                acl, mu,
                [fol.agent.B_w @ e0[minus_slices[idx]] + fol.g_w @ rho
                 - gw_prev[idx] for idx, fol in enumerate(followers)])
            gv = delta + np.concatenate([
                np.kron(beta[sl_out], rho1) for sl_out in
                acl.offsets([f.agent.output.n_out for f in followers])])

            betas.append(beta)
            gvs.append(gv)
            gws.append(np.concatenate(gw))
            geps.append(tuple(gam))
            gam_prev, gw_prev = gam, gw

            columns = np.hstack([columns, rho.reshape(-1, 1)])
            gamma_vbar_cols.append(gv)
            gamma_w_cols.append(np.concatenate(gw))
            gamma_eps_cols.append(gam)

        chain_records.append(ChainIntermediates(
            mu=complex(mu), beta=np.array(betas),
            gamma_vbar=np.array(gvs), gamma_w=np.array(gws),
            gamma_eps=tuple(geps)))

    inv_cols = np.linalg.inv(columns)
    ups_vbar_c = np.column_stack(gamma_vbar_cols) @ inv_cols
    ups_w_c = np.column_stack(gamma_w_cols) @ inv_cols
    ups_eps_c = []
    for idx, fol in enumerate(followers):
        stack = np.stack([col[idx] for col in gamma_eps_cols], axis=-1)
        ups_eps_c.append(np.einsum("mnc,cv->mnv", stack, inv_cols))

    drift = max([float(np.max(np.abs(a.imag)))
                 for a in [ups_vbar_c, ups_w_c] + ups_eps_c])
    scale = max([1.0] + [float(np.max(np.abs(a)))
                         for a in [ups_vbar_c, ups_w_c] + ups_eps_c])
    if drift > 1e-8 * scale:
        raise RuntimeError(
            f"steady-state maps kept an imaginary part ({drift:.3e}); "
            "conjugate chains are inconsistent")

    ups_eps = tuple(
        GridFunction(grid, tab.real, fol.bar.A0_tilde.breakpoints)
        for fol, tab in zip(followers, ups_eps_c))
    ups_w = tuple(ups_w_c.real[w_slices[idx]]
                  for idx in range(len(followers)))
    solution = RegulatorSolution(
        Upsilon_vbar=ups_vbar_c.real, Upsilon_eps=ups_eps, Upsilon_w=ups_w,
        residuals={}, chains=tuple(chain_records))
    residuals = regulator_residuals(acl, solution)
    solution = RegulatorSolution(
        Upsilon_vbar=solution.Upsilon_vbar, Upsilon_eps=ups_eps,
        Upsilon_w=ups_w, residuals=residuals, chains=tuple(chain_records))
    worst = solution.worst_residual
    if worst > GATE_REL:
        raise RuntimeError(
            f"steady-state equations violated: worst residual {worst:.3e} "
            f"exceeds {GATE_REL:.0e} ({residuals})")
    return solution


def regulator_residuals(acl, sol):
    """Relative backward error of the six steady-state equations."""
    followers = acl.followers
    grid = acl.grid
    h = grid[1] - grid[0]
    s_gen = acl.hookup.S
    s_tilde = acl.ims.S_tilde
    res = {}

    def rel(parts, defect):
        scale = max([1.0] + [float(np.max(np.abs(p))) for p in parts])
        return float(np.max(np.abs(defect))) / scale

    # copies of the generator stay invariant
    lhs = sol.Upsilon_vbar @ s_gen
    rhs = np.concatenate([s_tilde @ sol.Upsilon_vbar[sl]
                          for sl in acl.vbar_slices])
    res["internal_model"] = rel([lhs, rhs], lhs - rhs)

    parts, defects = [], []
    for idx, fol in enumerate(followers):
        e0 = fol.agent.E_minus.T @ sol.Upsilon_eps[idx].values[0]
        lhs = sol.Upsilon_w[idx] @ s_gen - fol.bar.F_w_tilde @ sol.Upsilon_w[idx]
        rhs = fol.agent.B_w @ e0 + fol.g_w
        parts += [lhs, rhs]
        defects.append(lhs - rhs)
    res["ode_w"] = rel(parts, np.concatenate(
        [d.ravel() for d in defects]))

    parts, worst = [], 0.0
    for idx, fol in enumerate(followers):
        vals = sol.Upsilon_eps[idx].values
        e0 = fol.agent.E_minus.T @ vals[0]
        lam = fol.agent.lambda_diag()
        flux = np.einsum("mn,mnv->mnv", lam, numcore.derivative6(vals, grid))
        lhs = np.einsum("mnv,vw->mnw", vals, s_gen)
        rhs = flux + np.einsum("mnk,kv->mnv", fol.bar.A0_tilde.values, e0) \
            + fol.g_pde
        mask = np.ones(grid.size, dtype=bool)
        mask[:3] = mask[-3:] = False
        for b in sol.Upsilon_eps[idx].breakpoints:
            mask &= np.abs(grid - b) > 3.5 * h
        parts += [lhs, rhs]
        defect = (lhs - rhs)[mask]
        worst = max(worst, float(np.max(np.abs(defect))) if defect.size else 0.0)
    scale = max([1.0] + [float(np.max(np.abs(p))) for p in parts])
    res["pde"] = worst / scale

    parts, defects = [], []
    for idx, fol in enumerate(followers):
        vals0 = sol.Upsilon_eps[idx].values[0]
        lhs = (fol.agent.E_plus.T - fol.agent.Q0 @ fol.agent.E_minus.T) @ vals0
        parts += [lhs, fol.g_bc0]
        defects.append(lhs - fol.g_bc0)
    res["bc0"] = rel(parts, np.concatenate([d.ravel() for d in defects]))

    fed = boundary_feedback(acl, [sol.Upsilon_eps[idx].values
                                  for idx in range(len(followers))])
    w_stack = np.concatenate([sol.Upsilon_w[idx] for idx in
                              range(len(followers))])
    parts, defects = [], []
    for idx, fol in enumerate(followers):
        lhs = fol.agent.E_minus.T @ sol.Upsilon_eps[idx].values[-1] - fed[idx]
        rhs = acl.K_vbar_under[acl.minus_slices[idx]] @ sol.Upsilon_vbar \
            + acl.K_w_under[acl.minus_slices[idx]] @ w_stack + fol.g_bc1
        parts += [lhs, rhs]
        defects.append(lhs - rhs)
    res["bc1"] = rel(parts, np.concatenate([d.ravel() for d in defects]))

    outs = tracking_output(acl, [sol.Upsilon_eps[idx].values
                                 for idx in range(len(followers))])
    parts, defects = [], []
    for idx, fol in enumerate(followers):
        lhs = outs[idx]
        rhs = -fol.bar.C_w_tilde @ sol.Upsilon_w[idx] - fol.g_y
        parts += [lhs, rhs]
        defects.append(lhs - rhs)
    res["output"] = rel(parts, np.concatenate([d.ravel() for d in defects]))
    return res


# ---------------------------------------------------------------------------
# Discretized stability certificate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StabilityReport:
    """Spectral abscissa of the space-discretized closed loop."""

    resolution: int
    abscissa: float
    abscissa_refined: float
    drift: float
    passed: bool
    dimension: int

    def line(self):
        state = "pass" if self.passed else "FAIL"
        return (f"closed-loop abscissa {self.abscissa:.6g} at M="
                f"{self.resolution} ({state}; refined "
                f"{self.abscissa_refined:.6g}, drift {self.drift:.2e})")


def certify_stability(acl, resolution=21, threshold=-1e-6):
    """Eigenvalue certificate on the discretized closed loop.

    A proxy for the pointwise-in-space stability hypothesis: the generator
    of the coupled network is assembled at ``resolution`` grid points and
    at the doubled resolution, and the spectral abscissa plus its drift
    under refinement are reported.
    """
    from . import simloop

    gen = simloop.closed_loop_generator(acl, resolution)
    a0 = float(np.max(np.linalg.eigvals(gen).real))
    a1 = float(np.max(np.linalg.eigvals(
        simloop.closed_loop_generator(acl, 2 * resolution)).real))
    return StabilityReport(
        resolution=resolution, abscissa=a0, abscissa_refined=a1,
        drift=abs(a1 - a0), passed=bool(a0 < threshold and a1 < threshold),
        dimension=gen.shape[0])
