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
nom_plat = [rope_uncertain_agent(groups[i], agents_nom[groups[i]],
                                 nom_params[groups[i]][0],
                                 nom_params[groups[i]][1], 0.5,
                                 delta_shift=deltas[i], grid_m=101)
            for i in range(4)]

hook3 = regverify.SignalHookup(
    S=S, P_r=np.array([[1.0, 0.0]]),
    P_d=tuple(np.zeros((1, 2)) for _ in range(4)),
    P_shift=tuple(np.array([[d / 20.0, 0.0]]) for d in deltas))
acl9 = regverify.assemble_uncertain_transformed(
    nom_plat, locals_, coops, topo, ims, hook3,
    bars=[locals_[g] for g in groups])
sol = regverify.solve_extended_regulator(acl9)
stamp(f"criterion 9 residuals: {sol.worst_residual:.2e}")

hold = simloop.Scenario(
    name="hold20", t_end=30.0, log_every=100,
    reference=(simloop.RampSegment(0.0, 20.0, 0.0),))
v30 = np.array([20.0, 0.0])
chi = regverify.undo_transform(acl9, [u.values for u in sol.Upsilon_eps])
runs = {mm: simloop.run_scenario(nom_plat, locals_, coops, topo, ims,
                                 hold, m=mm) for mm in (21, 41)}
err21 = gap = 0.0
err_x = err_w = err_v = 0.0
for a, fol in enumerate(acl9.followers):
    x_tab = chi[a] + np.einsum("mik,kv->miv", fol.bar.Sigma.values,
                               sol.Upsilon_w[a])
    pred_gf = GridFunction(fol.agent.grid, x_tab @ v30)
    pred21 = pred_gf.eval_many(runs[21].grid).reshape(21, -1)
    w_pred = sol.Upsilon_w[a] @ v30
    err_x = max(err_x, float(np.max(np.abs(runs[21].x_final[a] - pred21))))
    err_w = max(err_w, float(np.max(np.abs(runs[21].w[a][-1] - w_pred))))
    gap = max(gap, float(np.max(np.abs(runs[21].x_final[a]
                                       - runs[41].x_final[a][::2]))))
    gap = max(gap, float(np.max(np.abs(runs[21].w[a][-1]
                                       - runs[41].w[a][-1]))))
for a in range(4):
    vb_pred = sol.Upsilon_vbar[acl9.vbar_slices[a]] @ v30
    err_v = max(err_v, float(np.max(np.abs(runs[21].vbar[a][-1] - vb_pred))))
    gap = max(gap, float(np.max(np.abs(runs[21].vbar[a][-1]
                                       - runs[41].vbar[a][-1]))))
err21 = max(err_x, err_w, err_v)
stamp(f"criterion 9 settled: err x/w/vbar = {err_x:.3e}/{err_w:.3e}/"
      f"{err_v:.3e}, gap = {gap:.3e}, 5*gap = {5 * gap:.3e} "
      f"-> {'PASS' if err21 < 5 * gap else 'FAIL'}")
stamp("done")
