import time

import numpy as np

from coopreg import regverify, simloop
from coopreg.agentdef import GridFunction, rope_agent, rope_uncertain_agent
from coopreg.coopdesign import design_coop
from coopreg.localdesign import design_local
from coopreg.netgraph import build_topology
from coopreg.sigmodel import internal_model

t0 = time.time()


def stamp(msg):
    print(f"[{time.time() - t0:6.1f}s] {msg}", flush=True)


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
stamp("designs done")

deltas = [0.0, 2.0, 4.0, 6.0]
groups = [0, 0, 1, 1]


def platoon(params, shifts):
    return [rope_uncertain_agent(groups[i], agents_nom[groups[i]],
                                 params[i][0], params[i][1], 0.5,
                                 delta_shift=shifts[i], grid_m=101)
            for i in range(4)]


pert_params = [(3.8, 0.25), (2.2, 0.3), (5.8, 1.4), (6.0, 0.8)]
nom_plat = platoon([nom_params[g] for g in groups], deltas)
pert_plat = platoon(pert_params, deltas)

ref = (simloop.RampSegment(0.0, 0.0, 1.5),
       simloop.RampSegment(10.0, 15.0, 0.5),
       simloop.RampSegment(20.0, 20.0, 0.0))
w0_track = tuple(np.array([d, 0.0]) for d in deltas)
vb0_track = simloop.standstill_controller_ics(locals_, coops, topo, ims,
                                              w0_track)
track = simloop.Scenario(name="tracking", t_end=30.0, reference=ref,
                         w0=w0_track, vbar0=vb0_track)

# tracking with paper-faithful stand-still start
run7 = simloop.run_scenario(pert_plat, locals_, coops, topo, ims, track, m=21)
ey30 = max(float(np.abs(e[-1]).max()) for e in run7.e_y)
u0 = max(float(np.abs(u[0]).max()) for u in run7.u)
gaps = simloop.run_summary(run7)["final_gaps"]
stamp(f"criterion 7 standstill start: |e_y(30)| = {ey30:.4e}, |u(0)| = "
      f"{u0:.2e}, gaps = " + " ".join(f"{g:.4f}" for g in gaps))

# ---------------- criterion 9: steady state vs regulator solution ---------
hook3 = regverify.SignalHookup(
    S=S, P_r=np.array([[1.0, 0.0]]),
    P_d=tuple(np.zeros((1, 2)) for _ in range(4)),
    P_shift=tuple(np.array([[d / 20.0, 0.0]]) for d in deltas))
acl9 = regverify.assemble_uncertain_transformed(
    nom_plat, locals_, coops, topo, ims, hook3,
    bars=[locals_[g] for g in groups])
sol = regverify.solve_extended_regulator(acl9)
stamp(f"criterion 9 residuals: {sol.worst_residual:.2e}")

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
      f"5*gap = {5 * gap:.3e} (err21 below?)")

# ---------------- topology sensitivity ----------------
adj_unused = adj.copy()
adj_unused[3, 1] = 0.0   # already zero: identical topology object
run_t1 = simloop.run_scenario(pert_plat, locals_, coops,
                              build_topology((2, 2), adj_unused), ims,
                              track, m=21)
same = max(float(np.max(np.abs(a - b)))
           for a, b in zip(run_t1.e_y, run7.e_y))
adj_used = adj.copy()
adj_used[3, 2] = 0.9     # perturb a used cross-group edge weight
run_t2 = simloop.run_scenario(pert_plat, locals_, coops,
                              build_topology((2, 2), adj_used), ims,
                              track, m=21)
diff = max(float(np.max(np.abs(a - b)))
           for a, b in zip(run_t2.e_y, run7.e_y))
stamp(f"topology: untouched-edge delta = {same:.2e} (0?), "
      f"reweighted-edge delta = {diff:.2e} (>1e-4?)")

# ---------------- perturbed-platoon stability certificate -----------------
zero_hook = regverify.SignalHookup(
    S=S, P_r=np.zeros((1, 2)),
    P_d=tuple(np.zeros((1, 2)) for _ in range(4)),
    P_shift=tuple(np.zeros((1, 2)) for _ in range(4)))
acl_p = regverify.assemble_uncertain_transformed(
    pert_plat, locals_, coops, topo, ims, zero_hook)
rep = regverify.certify_stability(acl_p)
stamp("perturbed certificate: " + rep.line())

stamp("done")
