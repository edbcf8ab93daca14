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

hold = simloop.Scenario(
    name="hold20", t_end=30.0, log_every=100,
    reference=(simloop.RampSegment(0.0, 20.0, 0.0),))
run = simloop.run_scenario(nom_plat, locals_, coops, topo, ims, hold, m=21)
v30 = np.array([20.0, 0.0])
chi = regverify.undo_transform(acl9, [u.values for u in sol.Upsilon_eps])

for a, fol in enumerate(acl9.followers):
    x_tab = chi[a] + np.einsum("mik,kv->miv", fol.bar.Sigma.values,
                               sol.Upsilon_w[a])
    pred = GridFunction(fol.agent.grid,
                        x_tab @ v30).eval_many(run.grid).reshape(21, -1)
    simx = run.x_final[a]
    d = simx - pred
    w_pred = sol.Upsilon_w[a] @ v30
    vb_pred = sol.Upsilon_vbar[acl9.vbar_slices[a]] @ v30
    u_sim = float(run.u[a][-1][0])
    e_minus = fol.agent.E_minus
    e_plus = fol.agent.E_plus
    x1_pred = (x_tab @ v30)[-1]
    u_pred = float((e_minus.T @ x1_pred
                    - fol.agent.Q1 @ e_plus.T @ x1_pred)[0])
    print(f"agent {a}:")
    print(f"  w sim {run.w[a][-1]} pred {w_pred}")
    print(f"  vbar sim {run.vbar[a][-1]} pred {vb_pred}")
    print(f"  u sim {u_sim:.6f} pred(bc1) {u_pred:.6f}")
    print(f"  field mismatch per comp: {np.max(np.abs(d), axis=0)}")
    print(f"  comp profiles at z=0,0.5,1:")
    for j in range(d.shape[1]):
        print(f"    comp {j}: sim {simx[0, j]:+.5f}/{simx[10, j]:+.5f}/"
              f"{simx[20, j]:+.5f}  pred {pred[0, j]:+.5f}/"
              f"{pred[10, j]:+.5f}/{pred[20, j]:+.5f}")
stamp("done")
