import time

import numpy as np

from coopreg import agentdef, coopdesign, localdesign, sigmodel

S = np.array([[0.0, 1.0], [0.0, 0.0]])
b_y = np.array([0.0, 1.0])
ims = sigmodel.internal_model(S, b_y, 1)
h11 = np.array([[3.0, -1.0], [-1.0, 1.0]])

for gi, (l, mass, a_w) in enumerate([(3.0, 0.2, 55.0), (5.0, 1.0, 85.0)], 1):
    agent, _ = agentdef.rope_agent(l=l, m=mass, rho=0.5, grid_m=101)
    t0 = time.time()
    local = localdesign.design_local(agent, ode_poles=[-4.0, -4.0])
    t1 = time.time()
    pi_x, pi_w, res = coopdesign.solve_pi(agent, local, ims)
    t2 = time.time()
    print(f"group {gi}: local {t1-t0:.1f}s, solve_pi {t2-t1:.3f}s")
    print("  pi residuals:", {k: f"{v:.2e}" for k, v in res.items()})
    print("  Pi_w =\n", pi_w)
    anchor = np.array([[3/16, 1/32], [-1/2, -1/16]])
    print("  anchor err:", np.max(np.abs(pi_w - anchor)))
    b_e = coopdesign.compute_be(agent, local, ims, pi_x)
    print("  B_e =", b_e.ravel(), " ratio:", b_e[0, 0] / b_e[1, 0])
    n0 = coopdesign.numerator(agent, local, 0.0)
    print(f"  N(0) = {n0.real.ravel()}")
    rep = coopdesign.transmission_rank(agent, local, ims)
    for r in rep:
        print("  ", r.line())
    ident = coopdesign.gain_identity_residual(agent, local, ims, b_e)
    print(f"  identity residual: {ident:.2e}")
    gain = coopdesign.simultaneous_gain(ims, b_e, h11, a_w, kappa=0.585)
    print(f"  kappa={gain.kappa}, P eigs={np.linalg.eigvalsh(gain.P)}")
    print(f"  K_vbar={gain.K_vbar.ravel()}")
    print(f"  max Re sigma(F_e) = {np.max(gain.spectrum.real):.4f}")
    kcx, kcw = coopdesign.cooperative_gains(local, pi_x, pi_w)
    print(f"  K_c_w = {kcw.ravel()}, K_c_x(0) = {kcx.eval(0.0).ravel()}")
    d1 = coopdesign.denominator(agent, local, 1.0)
    print(f"  D(1) = {d1.real.ravel()}")
