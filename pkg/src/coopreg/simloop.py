"""Time-domain simulation of the networked closed loop.

Method-of-lines semi-discretization with first-order upwind differences
oriented by the characteristic directions, explicit RK4 stepping, and a
synchronous once-per-step exchange of the lumped signals over the
communication graph.  Reference and disturbance signals are evaluated
analytically at the stage times rather than integrated alongside the
states, so the exogenous part of the loop carries no integration drift.
"""

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import numcore
from .agentdef import AgentClass, GridFunction, UncertainAgent


class CFLViolation(RuntimeError):
    """Explicit step too large for the fastest characteristic."""


class NonFinite(RuntimeError):
    """Blow-up detected; the message carries the first bad time stamp."""


class TopologyViolation(RuntimeError):
    """An agent asked for a signal the graph does not deliver."""


def _trapezoid(m, h):
    w = np.full(m, h)
    w[0] = w[-1] = 0.5 * h
    return w


# ---------------------------------------------------------------------------
# Space discretization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SemiDiscreteAgent:
    """Finite-dimensional stand-in for one agent.

    The state ``p`` stacks every transport node that is not fixed by a
    boundary condition (node-major flattening of the field) followed by
    the boundary ODE state.  The two boundary rows are imposed
    algebraically at each evaluation:

        X = R_p p + R_u u + R_d d,      dp/dt = A_pp p + B_pu u + B_pd d.
    """

    agent: AgentClass
    grid: np.ndarray
    kept: np.ndarray                  # flat indices of the dynamic nodes
    R_p: np.ndarray
    R_u: np.ndarray
    R_d: np.ndarray
    A_pp: np.ndarray
    B_pu: np.ndarray
    B_pd: np.ndarray
    C_row: np.ndarray                 # spatial output rows on the full field
    C_w: np.ndarray
    G_y: np.ndarray
    shift: np.ndarray                 # constant output offset (formation slot)
    max_speed: float

    @property
    def h(self):
        return float(self.grid[1] - self.grid[0])

    @property
    def n_p(self):
        return self.A_pp.shape[0]

    @property
    def q(self):
        return self.R_d.shape[1]

    @property
    def w_slice(self):
        return slice(self.kept.size, self.n_p)

    def cfl(self, dt):
        return dt * self.max_speed / self.h

    def flat_field(self, p, u, d=None):
        xf = self.R_p @ p + self.R_u @ np.atleast_1d(np.asarray(u, float))
        if self.q and d is not None:
            xf = xf + self.R_d @ np.atleast_1d(np.asarray(d, float))
        return xf

    def reconstruct(self, p, u, d=None):
        """Full field samples, shape (m, n)."""
        return self.flat_field(p, u, d).reshape(self.grid.size, self.agent.n)

    def output(self, p, u, d=None):
        y = (self.C_row @ self.flat_field(p, u, d)
             + self.C_w @ p[self.w_slice] + self.shift)
        if self.q and d is not None:
            y = y + self.G_y @ np.atleast_1d(np.asarray(d, float))
        return y

    def initial_state(self, x0=None, w0=None):
        m, n = self.grid.size, self.agent.n
        if x0 is None:
            field = np.zeros((m, n))
        elif isinstance(x0, GridFunction):
            field = x0.eval_many(self.grid).reshape(m, -1)
        elif callable(x0):
            field = np.stack([np.asarray(x0(z), dtype=float).reshape(-1)
                              for z in self.grid])
        else:
            field = np.asarray(x0, dtype=float).reshape(m, n)
        if field.shape != (m, n):
            raise numcore.DimensionMismatch(
                f"initial field must sample to {(m, n)}")
        w = (np.zeros(self.agent.n_w) if w0 is None
             else np.asarray(w0, dtype=float).reshape(self.agent.n_w))
        p = np.empty(self.n_p)
        p[:self.kept.size] = field.reshape(-1)[self.kept]
        p[self.w_slice] = w
        return p


def discretize(agent, m):
    """Semi-discrete operator for one agent on a uniform m-point grid.

    Accepts an :class:`UncertainAgent` (simulated with its perturbed
    physics and disturbance channels) or a bare :class:`AgentClass`
    (no exogenous channel).  First-order upwind differences follow the
    characteristic directions: positive velocities difference towards
    the actuated boundary they flow away from, negative ones towards
    ``z = 0``.  Integral terms use the trapezoidal rule.
    """
    if isinstance(agent, UncertainAgent):
        ua, phys = agent, agent.perturbed
    else:
        ua, phys = None, agent
    if m < 3:
        raise ValueError("need at least three grid points")
    grid = np.linspace(0.0, 1.0, m)
    h = grid[1] - grid[0]
    n_minus, n_plus, n = phys.n_minus, phys.n_plus, phys.n
    n_w = phys.n_w
    q = ua.q if ua is not None else 0
    nn = m * n

    lam = np.einsum("mkk->mk", phys.Lambda.eval_many(grid))
    a_smp = phys.A.eval_many(grid)
    a0_smp = phys.A0.eval_many(grid)
    c_smp = phys.C.eval_many(grid)

    kept_mask = np.ones((m, n), dtype=bool)
    kept_mask[-1, :n_minus] = False       # fixed by the actuated boundary
    kept_mask[0, n_minus:] = False        # fixed by the reflection at z=0
    kept = np.flatnonzero(kept_mask.reshape(-1))
    kept_pos = np.full(nn, -1, dtype=int)
    kept_pos[kept] = np.arange(kept.size)
    n_p = kept.size + n_w
    w_cols = slice(kept.size, n_p)

    # algebraic reconstruction of the two boundary rows
    r_p = np.zeros((nn, n_p))
    r_u = np.zeros((nn, n_minus))
    r_d = np.zeros((nn, q))
    r_p[kept, np.arange(kept.size)] = 1.0
    rows0 = [n_minus + i for i in range(n_plus)]                # node 0
    cols_m0 = kept_pos[np.arange(n_minus)]
    if rows0:
        r_p[np.ix_(rows0, cols_m0)] = phys.Q0
        r_p[rows0, w_cols] = phys.C0
        if q:
            r_d[rows0] = ua.G0
    rows1 = [(m - 1) * n + k for k in range(n_minus)]           # node m-1
    cols_p1 = kept_pos[[(m - 1) * n + n_minus + j for j in range(n_plus)]]
    if n_plus:
        r_p[np.ix_(rows1, cols_p1)] = phys.Q1
    r_u[rows1, np.arange(n_minus)] = 1.0
    if q:
        r_d[rows1] = ua.G1

    # field map on the full set of nodes
    mf = np.zeros((nn, nn))
    for b in range(m):
        rows = slice(b * n, (b + 1) * n)
        mf[rows, rows] += a_smp[b]
        mf[rows, :n_minus] += a0_smp[b]
    for k in range(n):
        if k < n_minus:           # lambda > 0, inflow at z=1
            for b in range(m - 1):
                i = b * n + k
                c = lam[b, k] / h
                mf[i, i + n] += c
                mf[i, i] -= c
        else:                     # lambda < 0, inflow at z=0
            for b in range(1, m):
                i = b * n + k
                c = lam[b, k] / h
                mf[i, i] += c
                mf[i, i - n] -= c
    if np.any(phys.F.values):
        for b in range(1, m):
            f_row = phys.F.eval_many(np.full(b + 1, grid[b]), grid[:b + 1])
            wts = _trapezoid(b + 1, h)
            for c in range(b + 1):
                mf[b * n:(b + 1) * n, c * n:(c + 1) * n] += wts[c] * f_row[c]

    mcw = c_smp.reshape(nn, n_w)
    gfield = (ua.G.eval_many(grid).reshape(nn, q) if q
              else np.zeros((nn, 0)))

    bw_rows = np.zeros((n_w, nn))
    bw_rows[:, :n_minus] = phys.B_w
    d_x = np.vstack([mf[kept], bw_rows])
    d_w = np.vstack([mcw[kept], phys.F_w])
    d_d = np.vstack([gfield[kept], ua.G_w if q else np.zeros((n_w, 0))])

    a_pp = d_x @ r_p
    a_pp[:, w_cols] += d_w
    b_pu = d_x @ r_u
    b_pd = d_x @ r_d + d_d

    # spatial output rows
    out = phys.output
    n_out = out.n_out
    c_row = np.zeros((n_out, nn))
    c_row[:, :n] += out.C_x0
    c_row[:, (m - 1) * n:] += out.C_x1
    for zk, ck in out.pointwise:
        i = min(int(zk / h), m - 2)
        theta = (zk - grid[i]) / h
        c_row[:, i * n:(i + 1) * n] += (1.0 - theta) * ck
        c_row[:, (i + 1) * n:(i + 2) * n] += theta * ck
    if out.C_xd is not None and not out.C_xd.is_zero():
        dens = out.C_xd.eval_many(grid)
        wts = _trapezoid(m, h)
        for b in range(m):
            c_row[:, b * n:(b + 1) * n] += wts[b] * dens[b]

    return SemiDiscreteAgent(
        agent=phys, grid=grid, kept=kept,
        R_p=r_p, R_u=r_u, R_d=r_d, A_pp=a_pp, B_pu=b_pu, B_pd=b_pd,
        C_row=c_row, C_w=out.C_w,
        G_y=(ua.G_y if q else np.zeros((n_out, 0))),
        shift=(ua.delta_shift if ua is not None else np.zeros(n_out)),
        max_speed=float(np.max(np.abs(lam))))


# ---------------------------------------------------------------------------
# Feedback gains on the simulation grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscreteGains:
    """Designed gains of one group sampled onto the simulation grid.

    ``Loc_X`` collects the distributed plus boundary part of the local
    feedback and ``Uc_X`` the distributed part of the lumped cooperative
    signal, both as quadrature rows over the flattened field, so every
    integral in the feedback is a single dot product per step.
    """

    K_vbar: np.ndarray
    K_l_w: np.ndarray
    K_c_w: np.ndarray
    Loc_X: np.ndarray                 # n_minus x (m n)
    Uc_X: np.ndarray                  # n_vbar x (m n)
    S_tilde: np.ndarray
    B_tilde_y: np.ndarray


def resample_gains(local, coop, ims, grid):
    m = grid.size
    h = grid[1] - grid[0]
    wts = _trapezoid(m, h)
    klx = local.K_l_x.eval_many(grid)
    kcx = coop.K_c_x.eval_many(grid)
    n_minus, n = klx.shape[1], klx.shape[2]
    loc = np.zeros((n_minus, m * n))
    uc = np.zeros((kcx.shape[1], m * n))
    for b in range(m):
        loc[:, b * n:(b + 1) * n] = wts[b] * klx[b]
        uc[:, b * n:(b + 1) * n] = wts[b] * kcx[b]
    loc[:, (m - 1) * n + n_minus:m * n] += local.K_l_1
    return DiscreteGains(
        K_vbar=coop.K_vbar, K_l_w=local.K_l_w, K_c_w=coop.K_c_w,
        Loc_X=loc, Uc_X=uc, S_tilde=ims.S_tilde, B_tilde_y=ims.B_tilde_y)


# ---------------------------------------------------------------------------
# Controller
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControllerState:
    """Per-agent controller memory between steps."""

    vbar: np.ndarray
    u_prev: np.ndarray                # input held over the previous step
    y_out: np.ndarray                 # published tracking output
    uc_out: np.ndarray                # published lumped cooperative signal

    @staticmethod
    def initial(n_vbar, n_minus, n_out):
        return ControllerState(np.zeros(n_vbar), np.zeros(n_minus),
                               np.zeros(n_out), np.zeros(n_vbar))


def publish_signals(sd, gains, state, p, d=None):
    """Recompute the outbound lumped signals from the current plant state.

    The actuated boundary row is reconstructed with the input held over
    the previous step, which is the value the plant actually saw up to
    this instant.  Returns the updated state and the flattened field.
    """
    xf = sd.R_p @ p + sd.R_u @ state.u_prev
    if sd.q and d is not None:
        xf = xf + sd.R_d @ d
    w = p[sd.w_slice]
    y = sd.C_row @ xf + sd.C_w @ w + sd.shift
    if sd.q and d is not None:
        y = y + sd.G_y @ d
    uc = gains.Uc_X @ xf + gains.K_c_w @ w
    return replace(state, y_out=y, uc_out=uc), xf


def controller_step(state, neighbors, gains, dt, reference, h_row, index,
                    local_meas):
    """One synchronous update of a single agent's controller.

    ``neighbors`` maps follower index to the published ``(y, uc)`` pair
    and must contain exactly the agents this one is coupled to through
    its Laplacian row ``h_row``; the reference enters weighted by the
    row sum, which equals the leader weight.  ``local_meas`` is the
    already-integrated plant part of the local feedback.  Returns the
    updated state and the input to hold over the next step.
    """
    coupled = {int(b) for b in np.flatnonzero(h_row)} - {index}
    given = set(neighbors)
    if given - coupled:
        raise TopologyViolation(
            f"agent {index} read non-neighbors {sorted(given - coupled)}")
    if coupled - given:
        raise TopologyViolation(
            f"agent {index} lacks signals from {sorted(coupled - given)}")
    drive = h_row[index] * (state.y_out - reference)
    coop = h_row[index] * state.uc_out
    for b in sorted(neighbors):       # fixed reduction order
        y_b, uc_b = neighbors[b]
        drive = drive + h_row[b] * (y_b - reference)
        coop = coop + h_row[b] * uc_b
    u = gains.K_vbar @ (state.vbar + coop) - local_meas

    # internal model advanced by RK4 with the exchanged drive frozen,
    # the same scheme and step as the plant
    forcing = gains.B_tilde_y @ drive

    def f(v):
        return gains.S_tilde @ v + forcing

    k1 = f(state.vbar)
    k2 = f(state.vbar + 0.5 * dt * k1)
    k3 = f(state.vbar + 0.5 * dt * k2)
    k4 = f(state.vbar + dt * k3)
    vbar = state.vbar + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return replace(state, vbar=vbar, u_prev=u), u


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RampSegment:
    """Reference piece r(t) = value + slope (t - t_start) for t >= t_start."""

    t_start: float
    value: np.ndarray
    slope: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "value",
                           np.atleast_1d(np.asarray(self.value, dtype=float)))
        object.__setattr__(self, "slope",
                           np.atleast_1d(np.asarray(self.slope, dtype=float)))


@dataclass(frozen=True)
class DisturbanceStep:
    """Constant disturbance ``value`` hitting ``agent`` from ``onset`` on."""

    agent: int
    onset: float
    value: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "value",
                           np.atleast_1d(np.asarray(self.value, dtype=float)))


@dataclass(frozen=True)
class Scenario:
    name: str
    t_end: float
    dt: float = 1e-2
    reference: tuple = ()
    disturbances: tuple = ()
    x0: tuple | None = None           # per-agent field IC, None = zero
    w0: tuple | None = None
    vbar0: tuple | None = None        # per-agent controller IC, None = zero
    log_every: int = 10
    snapshot_times: tuple = ()

    def __post_init__(self):
        if self.dt <= 0 or self.t_end <= 0:
            raise ValueError("dt and t_end must be positive")
        if self.log_every < 1:
            raise ValueError("log_every must be at least 1")
        starts = [seg.t_start for seg in self.reference]
        if sorted(starts) != starts:
            raise ValueError("reference segments must be time-ordered")


def reference_value(scenario, t, n_out):
    r = np.zeros(n_out)
    for seg in scenario.reference:
        if t >= seg.t_start - 1e-12:
            r = seg.value + (t - seg.t_start) * seg.slope
    return r


def disturbance_value(scenario, agent_index, t, q):
    d = np.zeros(q)
    for step in scenario.disturbances:
        if step.agent == agent_index and t >= step.onset:
            d = d + step.value
    return d


def standstill_controller_ics(local_designs, coop_designs, topology, ims, w0):
    """Controller states that balance the boundary inputs to zero.

    With straight resting fields and lumped states ``w0`` the only input
    contributions are the lumped couplings and the direct ``w`` feedback.
    Placing each internal model on the kernel of its system matrix and
    matching the feedback there yields u = 0, so a platoon standing in
    formation stays at rest until a reference or disturbance drives it.
    """
    n_f = topology.n_followers
    if len(w0) != n_f:
        raise numcore.DimensionMismatch(
            f"{len(w0)} initial lumped states for {n_f} followers")
    _, sv, vt = np.linalg.svd(ims.S_tilde)
    tol = ims.n_vbar * np.finfo(float).eps * (sv[0] if sv.size else 1.0)
    kernel = vt[int(np.sum(sv > tol)):].T
    if kernel.shape[1] == 0:
        raise ValueError("internal model has no stationary directions")
    groups = [topology.group_of(a) for a in range(n_f)]
    uc = [coop_designs[g].K_c_w @ np.asarray(w0[a], dtype=float)
          for a, g in enumerate(groups)]
    out = []
    for a, g in enumerate(groups):
        coupled = sum(topology.H[a][b] * uc[b] for b in range(n_f))
        rhs = local_designs[g].K_l_w @ np.asarray(w0[a], dtype=float) \
            - coop_designs[g].K_vbar @ coupled
        alpha, *_ = np.linalg.lstsq(coop_designs[g].K_vbar @ kernel, rhs,
                                    rcond=None)
        out.append(kernel @ alpha)
    return tuple(out)


# ---------------------------------------------------------------------------
# Closed-loop run
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimRun:
    """Decimated trajectories of one closed-loop run."""

    scenario: Scenario
    grid: np.ndarray
    t: np.ndarray
    r: np.ndarray
    w: tuple                          # per agent (K, n_w)
    y: tuple
    e_y: tuple
    u: tuple
    vbar: tuple
    x_final: tuple                    # per agent (m, n) at t_final
    t_final: float
    snapshots: tuple                  # ((t, fields per agent), ...)
    cfl: float


def run_scenario(agents, local_designs, coop_designs, topology, ims,
                 scenario, m=21):
    """Simulate the networked closed loop under one scenario.

    Lock-step loop per time step: every agent publishes its lumped
    signals from its current state, the exchange delivers them along
    graph edges only, each controller computes its boundary input and
    advances its internal model, and every plant is integrated one RK4
    step with that input held constant.  Controller states start at
    zero unless the scenario provides them.
    """
    n_f = topology.n_followers
    if len(agents) != n_f:
        raise numcore.DimensionMismatch(
            f"{len(agents)} agents for {n_f} followers")
    dt = scenario.dt
    sds = [discretize(ua, m) for ua in agents]
    worst = max(sd.cfl(dt) for sd in sds)
    if worst > 1.0:
        raise CFLViolation(
            f"dt max|lambda|/dz = {worst:.3f} > 1 at m={m}, dt={dt:g}")
    grid = sds[0].grid

    gain_map = {}
    for ua in agents:
        g = ua.group_index
        if g not in gain_map:
            gain_map[g] = resample_gains(local_designs[g], coop_designs[g],
                                         ims, grid)
    gns = [gain_map[ua.group_index] for ua in agents]
    h_rows = [topology.H[a] for a in range(n_f)]
    nb_idx = [tuple(j - 1 for j in topology.neighbors(a) if j >= 1)
              for a in range(n_f)]

    n_out = ims.n_minus_bar
    x0s = scenario.x0 if scenario.x0 is not None else (None,) * n_f
    w0s = scenario.w0 if scenario.w0 is not None else (None,) * n_f
    p = [sd.initial_state(x0, w0) for sd, x0, w0 in zip(sds, x0s, w0s)]
    states = [ControllerState.initial(ims.n_vbar, sd.agent.n_minus, n_out)
              for sd in sds]
    if scenario.vbar0 is not None:
        states = [replace(st, vbar=np.asarray(v0, dtype=float))
                  for st, v0 in zip(states, scenario.vbar0)]

    n_steps = int(round(scenario.t_end / dt))
    snap_steps = {}
    for ts in scenario.snapshot_times:
        k = int(round(ts / dt))
        if not 0 <= k <= n_steps:
            raise ValueError(f"snapshot time {ts:g} outside the run")
        snap_steps[k] = float(ts)

    t_log, r_log = [], []
    w_log = [[] for _ in range(n_f)]
    y_log = [[] for _ in range(n_f)]
    e_log = [[] for _ in range(n_f)]
    u_log = [[] for _ in range(n_f)]
    v_log = [[] for _ in range(n_f)]
    snapshots = []
    x_last = None

    for k in range(n_steps + 1):
        t = k * dt
        r = reference_value(scenario, t, n_out)
        ds = [disturbance_value(scenario, a, t, sds[a].q)
              for a in range(n_f)]
        flats = []
        for a in range(n_f):
            states[a], xf = publish_signals(sds[a], gns[a], states[a],
                                            p[a], ds[a])
            flats.append(xf)

        log_now = (k % scenario.log_every == 0) or k == n_steps
        us = []
        for a in range(n_f):
            neigh = {b: (states[b].y_out, states[b].uc_out)
                     for b in nb_idx[a]}
            w_a = p[a][sds[a].w_slice]
            meas = gns[a].Loc_X @ flats[a] + gns[a].K_l_w @ w_a
            if log_now:
                v_log[a].append(states[a].vbar.copy())
                w_log[a].append(w_a.copy())
                y_log[a].append(states[a].y_out)
                e_log[a].append(states[a].y_out - r)
            states[a], u_a = controller_step(states[a], neigh, gns[a], dt,
                                             r, h_rows[a], a, meas)
            us.append(u_a)
            if log_now:
                u_log[a].append(u_a)
        if log_now:
            t_log.append(t)
            r_log.append(r)
        if k in snap_steps:
            snapshots.append((snap_steps[k], tuple(
                xf.reshape(grid.size, -1).copy() for xf in flats)))
        if k == n_steps:
            x_last = tuple(xf.reshape(grid.size, -1).copy() for xf in flats)
            break

        for a in range(n_f):
            sd = sds[a]
            bu = sd.B_pu @ us[a]

            def rhs(tau, pp, a=a, sd=sd, bu=bu):
                val = sd.A_pp @ pp + bu
                if sd.q:
                    val = val + sd.B_pd @ disturbance_value(
                        scenario, a, tau, sd.q)
                return val

            half = 0.5 * dt
            k1 = rhs(t, p[a])
            k2 = rhs(t + half, p[a] + half * k1)
            k3 = rhs(t + half, p[a] + half * k2)
            k4 = rhs(t + dt, p[a] + dt * k3)
            p[a] = p[a] + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(p[a])):
                raise NonFinite(
                    f"agent {a} lost finiteness at t = {t + dt:.4f}")

    return SimRun(
        scenario=scenario, grid=grid,
        t=np.asarray(t_log), r=np.asarray(r_log),
        w=tuple(np.asarray(v) for v in w_log),
        y=tuple(np.asarray(v) for v in y_log),
        e_y=tuple(np.asarray(v) for v in e_log),
        u=tuple(np.asarray(v) for v in u_log),
        vbar=tuple(np.asarray(v) for v in v_log),
        x_final=x_last, t_final=n_steps * dt,
        snapshots=tuple(snapshots), cfl=float(worst))


def run_summary(run, settle_time=25.0):
    """Scalar diagnostics: late tracking error and final formation gaps."""
    sel = run.t >= settle_time - 1e-9
    if not np.any(sel):
        raise ValueError("settle time beyond the simulated horizon")
    max_ey = max(float(np.max(np.abs(e[sel]))) for e in run.e_y)
    w1 = [float(w[-1, 0]) for w in run.w]
    gaps = tuple(w1[a] - w1[a + 1] for a in range(len(w1) - 1))
    return {
        "max_e_y_after_settle": max_ey,
        "settle_time": float(settle_time),
        "final_w1": tuple(w1),
        "final_gaps": gaps,
        "t_final": float(run.t_final),
        "cfl": run.cfl,
    }


# ---------------------------------------------------------------------------
# Autonomous generator (consumed by the stability certificate)
# ---------------------------------------------------------------------------

def closed_loop_generator(acl, m):
    """Generator matrix of the autonomous space-discretized network.

    State layout: all plant states ``p`` follower by follower, then all
    internal-model states.  Exogenous channels are dropped.  The
    algebraic dependence of the boundary inputs on one another through
    the exchanged lumped signals is eliminated by one global solve, so
    the result is the exact generator of the coupled semi-discrete
    closed loop.
    """
    followers = acl.followers
    h_mat = acl.topology.H
    n_f = len(followers)
    sds = [discretize(f.agent, m) for f in followers]
    grid = sds[0].grid
    gain_map = {}
    for f in followers:
        if f.group not in gain_map:
            gain_map[f.group] = resample_gains(f.local, f.coop, acl.ims,
                                               grid)
    gns = [gain_map[f.group] for f in followers]
    n_vbar = acl.ims.n_vbar

    p_sizes = [sd.n_p for sd in sds]
    u_sizes = [sd.agent.n_minus for sd in sds]
    p_off = np.concatenate([[0], np.cumsum(p_sizes)]).astype(int)
    u_off = np.concatenate([[0], np.cumsum(u_sizes)]).astype(int)
    n_ptot, n_utot = int(p_off[-1]), int(u_off[-1])
    n_tot = n_ptot + n_f * n_vbar
    p_sl = [slice(p_off[a], p_off[a + 1]) for a in range(n_f)]
    u_sl = [slice(u_off[a], u_off[a + 1]) for a in range(n_f)]
    v_sl = [slice(n_ptot + a * n_vbar, n_ptot + (a + 1) * n_vbar)
            for a in range(n_f)]

    # per-agent measurement rows split into state and input dependence
    loc_p, loc_u, uc_p, uc_u, y_p, y_u = [], [], [], [], [], []
    for sd, g in zip(sds, gns):
        lp = g.Loc_X @ sd.R_p
        lp[:, sd.w_slice] += g.K_l_w
        up = g.Uc_X @ sd.R_p
        up[:, sd.w_slice] += g.K_c_w
        yp = sd.C_row @ sd.R_p
        yp[:, sd.w_slice] += sd.C_w
        loc_p.append(lp)
        loc_u.append(g.Loc_X @ sd.R_u)
        uc_p.append(up)
        uc_u.append(g.Uc_X @ sd.R_u)
        y_p.append(yp)
        y_u.append(sd.C_row @ sd.R_u)

    # u = (I - L_u)^{-1} (S_p p + S_v vbar)
    l_u = np.zeros((n_utot, n_utot))
    rhs = np.zeros((n_utot, n_tot))
    for a in range(n_f):
        l_u[u_sl[a], u_sl[a]] -= loc_u[a]
        rhs[u_sl[a], p_sl[a]] -= loc_p[a]
        rhs[u_sl[a], v_sl[a]] = gns[a].K_vbar
        for b in range(n_f):
            if h_mat[a, b] == 0.0:
                continue
            l_u[u_sl[a], u_sl[b]] += h_mat[a, b] * (gns[a].K_vbar @ uc_u[b])
            rhs[u_sl[a], p_sl[b]] += h_mat[a, b] * (gns[a].K_vbar @ uc_p[b])
    u_map = np.linalg.solve(np.eye(n_utot) - l_u, rhs)

    gen = np.zeros((n_tot, n_tot))
    y_rows = []
    for b in range(n_f):
        yb = np.zeros((sds[b].C_row.shape[0], n_tot))
        yb[:, p_sl[b]] = y_p[b]
        yb += y_u[b] @ u_map[u_sl[b]]
        y_rows.append(yb)
    for a in range(n_f):
        gen[p_sl[a], p_sl[a]] += sds[a].A_pp
        gen[p_sl[a], :] += sds[a].B_pu @ u_map[u_sl[a]]
        gen[v_sl[a], v_sl[a]] += gns[a].S_tilde
        drive = np.zeros_like(y_rows[a])
        for b in range(n_f):
            if h_mat[a, b] != 0.0:
                drive += h_mat[a, b] * y_rows[b]
        gen[v_sl[a], :] += gns[a].B_tilde_y @ drive
    return gen


# ---------------------------------------------------------------------------
# Open-loop integration (plant only)
# ---------------------------------------------------------------------------

def integrate_open_loop(sd, u_fn, d_fn, p0, t_end, dt):
    """RK4 on a single plant with analytic input signals.

    Unlike the closed loop, the input is evaluated at the RK4 stage
    times.  Returns the time grid and the state history, one row per
    step.
    """
    if sd.cfl(dt) > 1.0:
        raise CFLViolation(
            f"dt max|lambda|/dz = {sd.cfl(dt):.3f} > 1")
    n_steps = int(round(t_end / dt))
    hist = np.empty((n_steps + 1, sd.n_p))
    hist[0] = np.asarray(p0, dtype=float).reshape(sd.n_p)

    def rhs(tau, pp):
        val = sd.A_pp @ pp + sd.B_pu @ np.atleast_1d(
            np.asarray(u_fn(tau), dtype=float))
        if sd.q and d_fn is not None:
            val = val + sd.B_pd @ np.atleast_1d(
                np.asarray(d_fn(tau), dtype=float))
        return val

    half = 0.5 * dt
    for k in range(n_steps):
        t = k * dt
        pp = hist[k]
        k1 = rhs(t, pp)
        k2 = rhs(t + half, pp + half * k1)
        k3 = rhs(t + half, pp + half * k2)
        k4 = rhs(t + dt, pp + dt * k3)
        hist[k + 1] = pp + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(hist[k + 1])):
            raise NonFinite(f"state lost finiteness at t = {t + dt:.4f}")
    return np.arange(n_steps + 1) * dt, hist


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def _names(base, k):
    if k == 1:
        return [base]
    return [f"{base}{j + 1}" for j in range(k)]


def write_trajectories(run, path):
    """Trajectory CSV: time, then per agent w1, e_y and u columns."""
    header = ["t"]
    blocks = [run.t[:, None]]
    for a in range(len(run.w)):
        tag = f"_a{a + 1}"
        header.append(f"w1{tag}")
        header += [c + tag for c in _names("ey", run.e_y[a].shape[1])]
        header += [c + tag for c in _names("u", run.u[a].shape[1])]
        blocks += [run.w[a][:, :1], run.e_y[a], run.u[a]]
    data = np.hstack(blocks)
    lines = [",".join(header)]
    for row in data:
        lines.append(",".join(f"{v:.12g}" for v in row))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def write_snapshots(run, directory, prefix="fields"):
    """One CSV per captured snapshot: z plus every agent's field columns."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, fields in run.snapshots:
        header = ["z"]
        blocks = [run.grid[:, None]]
        for a, f in enumerate(fields):
            header += [f"x{j + 1}_a{a + 1}" for j in range(f.shape[1])]
            blocks.append(f)
        data = np.hstack(blocks)
        lines = [",".join(header)]
        for row in data:
            lines.append(",".join(f"{v:.12g}" for v in row))
        path = directory / f"{prefix}_t{t:g}.csv"
        path.write_text("\n".join(lines) + "\n")
        paths.append(path)
    return paths
