import time
from dataclasses import replace as dc_replace

import numpy as np

from coopreg import regverify, simloop
from coopreg.agentdef import (GridFunction, OutputOperatorSpec, rope_agent,
                              rope_uncertain_agent, validate_agent_class)
from coopreg.coopdesign import design_coop
from coopreg.localdesign import design_local
from coopreg.netgraph import build_topology
from coopreg.sigmodel import internal_model

t0 = time.time()


def stamp(msg):
    print(f"[{time.time() - t0:6.1f}s] {msg}", flush=True)


# ---------------- open-loop sanity first (no designs needed) ----------------
lam1 = GridFunction.from_constant([[1.0]], 101)
out1 = OutputOperatorSpec(C_x0=[[0.0]], C_x1=[[0.0]], C_w=[[1.0]])
transport = validate_agent_class(
    1, 0, lam1, Q0=np.zeros((0, 1)), Q1=np.zeros((1, 0)),
    F_w=[[0.0]], B_w=[[1.0]], C0=np.zeros((0, 1)), output=out1)
sd_tr = simloop.discretize(transport, 101)
dt_tr = 0.004
times, hist = simloop.integrate_open_loop(
    sd_tr, lambda t: 1.0, None, np.zeros(sd_tr.n_p), 2.0, dt_tr)
x_out = hist[:, 0]                     # x at z=0 (outflow end)
arrival = times[np.argmax(x_out > 0.5)]
h_tr = sd_tr.h
mass = h_tr * hist[-1, :100].sum() + hist[-1, 100]
stamp(f"transport arrival t={arrival:.3f} (want 1.0 +- {2*h_tr:.3f}), "
      f"mass(2)={mass:.12f} (want 2)")

# rope energy boundedness + expm oracle
rope_n, _ = rope_agent(3.0, 0.2, 0.5, grid_m=101)
sd_rope = simloop.discretize(rope_n, 51)
p0 = sd_rope.initial_state(
    x0=lambda z: [np.exp(-50 * (z - 0.5) ** 2), -np.exp(-50 * (z - 0.5) ** 2)],
    w0=[0.0, 0.0])
tt, hh = simloop.integrate_open_loop(
    sd_rope, lambda t: 0.0, None, p0, 10.0, 0.005)
widx = sd_rope.w_slice
en = np.linalg.norm(np.hstack([hh[:, :widx.start], hh[:, widx.start + 1:]]),
                    axis=1)
import scipy.linalg as sla
p_expm = sla.expm(sd_rope.A_pp * 10.0) @ p0
stamp(f"rope energy max/initial = {en.max() / en[0]:.3f}, "
      f"expm mismatch at t=10: {np.max(np.abs(hh[-1] - p_expm)):.2e}")

# ---------------- designs ----------------
S = np.array([[0.0, 1.0], [0.0, 0.0]])
ims = internal_model(S, [0.0, 1.0], 1)
adj = np.array([
    [0, 0, 0, 0, 0],
    [2, 0, 1, 0, 0],
    [0, 1, 0, 0, 0],
    [0, 0, 2, 0, 1],
    [0, 0, 0, 1, 0],
], dtype=float)
topo = build_topology((2, 2), adj)

nom_params = [(3.0, 0.2), (5.0, 1.0)]
a_weights = [55.0, 85.0]
agents_nom, locals_, coops = [], [], []
for g, (l, m_) in enumerate(nom_params):
    ag, _ = rope_agent(l, m_, 0.5, grid_m=101)
    agents_nom.append(ag)
    loc = design_local(ag, ode_poles=[-4.0, -4.0])
    locals_.append(loc)
    coops.append(design_coop(ag, loc, ims, topo.H_block(g, g),
                             a_weights[g], kappa=0.585))
stamp("nominal designs done")

deltas = [0.0, 2.0, 4.0, 6.0]
groups = [0, 0, 1, 1]


def platoon(params):
    return [rope_uncertain_agent(groups[i], agents_nom[groups[i]],
                                 params[i][0], params[i][1], 0.5,
                                 delta_shift=deltas[i], grid_m=101)
            for i in range(4)]


nom_plat = platoon([nom_params[g] for g in groups])
pert_plat = platoon([(3.8, 0.25), (2.2, 0.3), (5.8, 1.4), (6.0, 0.8)])

zero_hook = regverify.SignalHookup(
    S=S, P_r=np.zeros((1, 2)),
    P_d=tuple(np.zeros((1, 2)) for _ in range(4)),
    P_shift=tuple(np.zeros((1, 2)) for _ in range(4)))
acl_nom = regverify.assemble_uncertain_transformed(
    nom_plat, locals_, coops, topo, ims, zero_hook,
    bars=[locals_[g] for g in groups])
rep = regverify.certify_stability(acl_nom)
stamp(f"nominal cert: {rep.line()} dim={rep.dimension}")

# zero-gain variant must fail
dead_loc = [dc_replace(loc, K_l_x=loc.K_l_x.map(lambda v: 0 * v),
                       K_l_1=0 * loc.K_l_1, K_l_w=0 * loc.K_l_w)
            for loc in locals_]
dead_coop = [dc_replace(c, K_vbar=0 * c.K_vbar,
                        K_c_x=c.K_c_x.map(lambda v: 0 * v),
                        K_c_w=0 * c.K_c_w) for c in coops]
acl_dead = regverify.assemble_uncertain_transformed(
    nom_plat, dead_loc, dead_coop, topo, ims, zero_hook,
    bars=[dead_loc[g] for g in groups])
rep_dead = regverify.certify_stability(acl_dead)
stamp(f"zero-gain cert: passed={rep_dead.passed} "
      f"abscissa={rep_dead.abscissa:.3e}")

# ---------------- equilibrium fixed point ----------------
flat_plat = platoon([nom_params[g] for g in groups])
flat_plat = [dc_replace(ua, delta_shift=np.zeros(1)) for ua in flat_plat]
eq = simloop.Scenario(name="equilibrium", t_end=1.0, log_every=20)
run_eq = simloop.run_scenario(flat_plat, locals_, coops, topo, ims, eq, m=21)
dev = max(np.max(np.abs(w)) for w in run_eq.w)
dev = max(dev, max(np.max(np.abs(x)) for x in run_eq.x_final))
dev = max(dev, max(np.max(np.abs(v)) for v in run_eq.vbar))
stamp(f"equilibrium deviation: {dev:.2e}")

# ---------------- criterion 6: nominal, r = 1 ----------------
const = simloop.Scenario(
    name="nominal-const", t_end=30.0,
    reference=(simloop.RampSegment(0.0, 1.0, 0.0),),
    w0=tuple(np.array([d, 0.0]) for d in deltas))
run6 = simloop.run_scenario(nom_plat, locals_, coops, topo, ims, const, m=21)
sel = run6.t >= 25.0
worst6 = max(float(np.max(np.abs(e[sel]))) for e in run6.e_y)
stamp(f"criterion 6: max|e_y| on [25,30] = {worst6:.3e} (< 1e-2?)")

# ---------------- criterion 7: perturbed tracking ----------------
track = simloop.Scenario(
    name="tracking", t_end=30.0,
    reference=(simloop.RampSegment(0.0, 0.0, 1.5),
               simloop.RampSegment(10.0, 15.0, 0.5),
               simloop.RampSegment(20.0, 20.0, 0.0)),
    w0=tuple(np.array([d, 0.0]) for d in deltas))
run7 = simloop.run_scenario(pert_plat, locals_, coops, topo, ims, track, m=21)
ey30 = max(float(np.abs(e[-1]).max()) for e in run7.e_y)
summ = simloop.run_summary(run7)
stamp(f"criterion 7: max|e_y(30)| = {ey30:.3e} (< 2e-2?), "
      f"gaps = {np.round(summ['final_gaps'], 5)} (2 +- 2e-2?)")

# ---------------- criterion 8: perturbed disturbance ----------------
dist = simloop.Scenario(
    name="disturbance", t_end=30.0,
    disturbances=(simloop.DisturbanceStep(1, 0.0, -8.0),
                  simloop.DisturbanceStep(2, 15.0, -5.0)),
    w0=tuple(np.array([-d, 0.0]) for d in deltas))
run8 = simloop.run_scenario(pert_plat, locals_, coops, topo, ims, dist, m=21)
win1 = (run8.t >= 10.0) & (run8.t < 15.0)
win2 = run8.t >= 25.0
w1max = max(float(np.max(np.abs(e[win1]))) for e in run8.e_y)
w2max = max(float(np.max(np.abs(e[win2]))) for e in run8.e_y)
peak = max(float(np.max(np.abs(e))) for e in run8.e_y)
stamp(f"criterion 8: |e_y| on [10,15) = {w1max:.3e}, on [25,30] = "
      f"{w2max:.3e} (both < 2e-2?), overall peak {peak:.3f}")

# ---------------- criterion 9: steady state vs regulator solution ----------
hook3 = regverify.SignalHookup(
    S=S, P_r=np.array([[1.0, 0.0]]),
    P_d=tuple(np.zeros((1, 2)) for _ in range(4)),
    P_shift=tuple(np.array([[d / 20.0, 0.0]]) for d in deltas))
acl9 = regverify.assemble_uncertain_transformed(
    nom_plat, locals_, coops, topo, ims, hook3,
    bars=[locals_[g] for g in groups])
sol = regverify.solve_extended_regulator(acl9)
stamp(f"criterion 9 residuals: {sol.worst_residual():.2e}")

v30 = np.array([20.0, 0.0])
chi = regverify.undo_transform(acl9, [u.values for u in sol.Upsilon_eps])
run9a = simloop.run_scenario(nom_plat, locals_, coops, topo, ims, track, m=21)
run9b = simloop.run_scenario(nom_plat, locals_, coops, topo, ims, track, m=41)
err21, gap = 0.0, 0.0
for a, fol in enumerate(acl9.followers):
    x_tab = chi[a] + np.einsum("mik,kv->miv", fol.bar.Sigma.values,
                               sol.Upsilon_w[a])
    pred_gf = GridFunction(fol.agent.grid, x_tab @ v30)
    pred21 = pred_gf.eval_many(run9a.grid).reshape(21, -1)
    w_pred = sol.Upsilon_w[a] @ v30
    err21 = max(err21, float(np.max(np.abs(run9a.x_final[a] - pred21))))
    err21 = max(err21, float(np.max(np.abs(run9a.w[a][-1] - w_pred))))
    gap = max(gap, float(np.max(np.abs(run9a.x_final[a]
                                       - run9b.x_final[a][::2]))))
    gap = max(gap, float(np.max(np.abs(run9a.w[a][-1] - run9b.w[a][-1]))))
vslices = acl9.vbar_slices
for a in range(4):
    vb_pred = sol.Upsilon_vbar[vslices[a]] @ v30
    err21 = max(err21, float(np.max(np.abs(run9a.vbar[a][-1] - vb_pred))))
    gap = max(gap, float(np.max(np.abs(run9a.vbar[a][-1]
                                       - run9b.vbar[a][-1]))))
stamp(f"criterion 9: err21 = {err21:.3e}, grid gap = {gap:.3e}, "
      f"richardson bound 10*gap = {10 * gap:.3e} (err21 below?)")

# ---------------- topology sensitivity ----------------
adj_unused = adj.copy()
adj_unused[3, 1] = 0.0   # zero-weight edge stays absent: identical run
run_t1 = simloop.run_scenario(pert_plat, locals_, coops,
                              build_topology((2, 2), adj_unused), ims,
                              track, m=21)
same = max(np.max(np.abs(a - b)) for a, b in zip(run_t1.e_y, run7.e_y))
adj_used = adj.copy()
adj_used[3, 2] = 0.9     # perturb a used edge weight
run_t2 = simloop.run_scenario(pert_plat, locals_, coops,
                              build_topology((2, 2), adj_used), ims,
                              track, m=21)
diff = max(np.max(np.abs(a - b)) for a, b in zip(run_t2.e_y, run7.e_y))
stamp(f"topology: unused-edge delta = {same:.2e}, used-edge delta = {diff:.2e}")

stamp("done")
