import time

import numpy as np

from coopreg import simloop
from coopreg.agentdef import rope_agent, rope_uncertain_agent
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
pert_params = [(3.8, 0.25), (2.2, 0.3), (5.8, 1.4), (6.0, 0.8)]
pert_plat = [rope_uncertain_agent(groups[i], agents_nom[groups[i]],
                                  pert_params[i][0], pert_params[i][1], 0.5,
                                  delta_shift=deltas[i], grid_m=101)
             for i in range(4)]

ref = (simloop.RampSegment(0.0, 0.0, 1.5),
       simloop.RampSegment(10.0, 15.0, 0.5),
       simloop.RampSegment(20.0, 20.0, 0.0))
w0_track = tuple(np.array([d, 0.0]) for d in deltas)
w0_eq = tuple(np.array([-d, 0.0]) for d in deltas)
vbar0 = simloop.standstill_controller_ics(locals_, coops, topo, ims, w0_eq)
dists = (simloop.DisturbanceStep(1, 0.0, -8.0),
         simloop.DisturbanceStep(2, 15.0, -5.0))

for mm, dtt in ((21, 1e-2), (41, 5e-3), (81, 2.5e-3), (101, 2e-3)):
    le = max(1, int(round(0.1 / dtt)))
    tr = simloop.Scenario(name="track", t_end=30.0, dt=dtt, reference=ref,
                          w0=w0_track, log_every=le)
    rr = simloop.run_scenario(pert_plat, locals_, coops, topo, ims, tr, m=mm)
    tail = [float(np.max([np.abs(e[np.argmin(np.abs(rr.t - tq))])
                          for e in rr.e_y])) for tq in (26.0, 27.0, 28.0, 29.0, 30.0)]
    per_agent = [float(np.abs(e[-1]).max()) for e in rr.e_y]
    stamp(f"track m={mm} dt={dtt:g}: |e_y| at 26..30 = "
          + " ".join(f"{v:.3e}" for v in tail)
          + " | per-agent(30): " + " ".join(f"{v:.3e}" for v in per_agent))

    di = simloop.Scenario(name="dist", t_end=30.0, dt=dtt, w0=w0_eq,
                          vbar0=vbar0, disturbances=dists, log_every=le)
    rd = simloop.run_scenario(pert_plat, locals_, coops, topo, ims, di, m=mm)
    win1 = (rd.t >= 10.0) & (rd.t < 15.0)
    win2 = rd.t >= 25.0
    m1 = max(float(np.max(np.abs(e[win1]))) for e in rd.e_y)
    m2 = max(float(np.max(np.abs(e[win2]))) for e in rd.e_y)
    stamp(f"dist  m={mm} dt={dtt:g}: [10,15) = {m1:.4e}, [25,30] = {m2:.4e}")

stamp("done")
