import time

import numpy as np

from coopreg import regverify, simloop
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


def platoon(params, shifts):
    return [rope_uncertain_agent(groups[i], agents_nom[groups[i]],
                                 params[i][0], params[i][1], 0.5,
                                 delta_shift=shifts[i], grid_m=101)
            for i in range(4)]


pert_params = [(3.8, 0.25), (2.2, 0.3), (5.8, 1.4), (6.0, 0.8)]
pert_plat = platoon(pert_params, deltas)

# ---------- criterion 8 with stand-still start ----------
w0 = tuple(np.array([-d, 0.0]) for d in deltas)
vbar0 = simloop.standstill_controller_ics(locals_, coops, topo, ims, w0)
stamp("standstill vbar0: " + " ".join(f"({v[0]:.3f},{v[1]:.3f})"
                                      for v in vbar0))

# invariance probe: no drive at all, must stay put
hold = simloop.Scenario(name="hold", t_end=2.0, w0=w0, vbar0=vbar0,
                        log_every=10)
run_h = simloop.run_scenario(pert_plat, locals_, coops, topo, ims, hold, m=21)
dev = max(float(np.max(np.abs(e))) for e in run_h.e_y)
umax = max(float(np.max(np.abs(u))) for u in run_h.u)
stamp(f"equilibrium hold: max|e_y| = {dev:.2e}, max|u| = {umax:.2e}")

dist = simloop.Scenario(
    name="disturbance", t_end=30.0, w0=w0, vbar0=vbar0, log_every=10,
    disturbances=(simloop.DisturbanceStep(1, 0.0, -8.0),
                  simloop.DisturbanceStep(2, 15.0, -5.0)))
run8 = simloop.run_scenario(pert_plat, locals_, coops, topo, ims, dist, m=21)
t = run8.t
win1 = (t >= 10.0) & (t < 15.0)
win2 = t >= 25.0
m1 = max(float(np.max(np.abs(e[win1]))) for e in run8.e_y)
m2 = max(float(np.max(np.abs(e[win2]))) for e in run8.e_y)
peak = max(float(np.max(np.abs(e))) for e in run8.e_y)
stamp(f"criterion 8: peak {peak:.3f}, [10,15) {m1:.3e}, [25,30] {m2:.3e}")

run8b = simloop.run_scenario(pert_plat, locals_, coops, topo, ims, dist, m=41)
m1b = max(float(np.max(np.abs(e[win1]))) for e in run8b.e_y)
m2b = max(float(np.max(np.abs(e[win2]))) for e in run8b.e_y)
stamp(f"criterion 8 at m=41: [10,15) {m1b:.3e}, [25,30] {m2b:.3e}")

# ---------- criterion 7: fixed-Courant refinement ----------
track = simloop.Scenario(
    name="tracking", t_end=30.0,
    reference=(simloop.RampSegment(0.0, 0.0, 1.5),
               simloop.RampSegment(10.0, 15.0, 0.5),
               simloop.RampSegment(20.0, 20.0, 0.0)),
    w0=tuple(np.array([d, 0.0]) for d in deltas))
for mm, dtt in ((21, 1e-2), (41, 5e-3), (81, 2.5e-3)):
    tr = simloop.Scenario(name="tracking", t_end=30.0, dt=dtt,
                          reference=track.reference, w0=track.w0,
                          log_every=max(1, int(round(0.1 / dtt))))
    rr = simloop.run_scenario(pert_plat, locals_, coops, topo, ims, tr, m=mm)
    ey30 = max(float(np.abs(e[-1]).max()) for e in rr.e_y)
    i25 = rr.t >= 25.0
    ey25 = max(float(np.max(np.abs(e[i25]))) for e in rr.e_y)
    gaps = simloop.run_summary(rr)["final_gaps"]
    stamp(f"criterion 7 m={mm} dt={dtt:g}: |e_y(30)| = {ey30:.3e}, "
          f"max[25,30] = {ey25:.3e}, gaps = "
          + " ".join(f"{g:.4f}" for g in gaps))

stamp("done")
