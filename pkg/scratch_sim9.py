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

deltas = [0.0, 2.0, 4.0, 6.0]
groups = [0, 0, 1, 1]
nom_params = [(3.0, 0.2), (5.0, 1.0)]
a_weights = [55.0, 85.0]
v30 = np.array([20.0, 0.0])
hook = None

preds = {}
for gm in (101, 201):
    agents_nom, locals_, coops = [], [], []
    for g, (l, m_) in enumerate(nom_params):
        ag, _ = rope_agent(l, m_, 0.5, grid_m=gm)
        agents_nom.append(ag)
        loc = design_local(ag, ode_poles=[-4.0, -4.0])
        locals_.append(loc)
        coops.append(design_coop(ag, loc, ims, topo.H_block(g, g),
                                 a_weights[g], kappa=0.585))
    plat = [rope_uncertain_agent(groups[i], agents_nom[groups[i]],
                                 nom_params[groups[i]][0],
                                 nom_params[groups[i]][1], 0.5,
                                 delta_shift=deltas[i], grid_m=gm)
            for i in range(4)]
    hook = regverify.SignalHookup(
        S=S, P_r=np.array([[1.0, 0.0]]),
        P_d=tuple(np.zeros((1, 2)) for _ in range(4)),
        P_shift=tuple(np.array([[d / 20.0, 0.0]]) for d in deltas))
    acl = regverify.assemble_uncertain_transformed(
        plat, locals_, coops, topo, ims, hook,
        bars=[locals_[g] for g in groups])
    sol = regverify.solve_extended_regulator(acl)
    chi = regverify.undo_transform(acl, [u.values for u in sol.Upsilon_eps])
    probe = np.linspace(0.0, 1.0, 21)
    rows = []
    for a, fol in enumerate(acl.followers):
        x_tab = chi[a] + np.einsum("mik,kv->miv", fol.bar.Sigma.values,
                                   sol.Upsilon_w[a])
        rows.append(GridFunction(fol.agent.grid,
                                 x_tab @ v30).eval_many(probe).reshape(21, -1))
    preds[gm] = (rows,
                 [sol.Upsilon_w[a] @ v30 for a in range(4)],
                 [sol.Upsilon_vbar[acl.vbar_slices[a]] @ v30
                  for a in range(4)])
    stamp(f"design grid {gm}: field residue (true steady state is zero) = "
          + " ".join(f"{float(np.max(np.abs(r))):.3e}" for r in rows))

gap_x = max(float(np.max(np.abs(a - b)))
            for a, b in zip(preds[101][0], preds[201][0]))
gap_v = max(float(np.max(np.abs(a - b)))
            for a, b in zip(preds[101][2], preds[201][2]))
stamp(f"prediction refinement gap: fields {gap_x:.3e}, vbar {gap_v:.3e}")
stamp("done")
