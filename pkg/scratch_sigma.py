"""Instrumented Sigma iteration on both rope groups (throwaway)."""
import numpy as np
import time

from coopreg import numcore
from coopreg.agentdef import rope_agent
from coopreg.localdesign import (
    _kron_samples, _vec_samples, _unvec_samples, sigma_residual,
)


def run(label, l, m_load, rho):
    agent, _ = rope_agent(l=l, m=m_load, rho=rho)
    grid = agent.grid
    m, n, nw = grid.size, agent.n, agent.n_w
    lam = agent.lambda_diag()
    lam_inv = np.einsum("mk,kl->mkl", 1.0 / lam, np.eye(n))
    K_w = numcore.place_poles(agent.F_w, agent.B_w, [-4.0, -4.0])
    f_t = agent.F_w - agent.B_w @ K_w

    theta1 = _kron_samples(
        np.broadcast_to(f_t.T, (m, nw, nw)), lam_inv
    ) - _kron_samples(
        np.broadcast_to(np.eye(nw), (m, nw, nw)),
        np.einsum("mij,mjk->mik", lam_inv, agent.A.values),
    )
    rhs = np.einsum("mij,jk->mik", agent.A0.values, K_w) - agent.C.values
    theta3 = _vec_samples(np.einsum("mij,mjk->mik", lam_inv, rhs))
    sigma0 = numcore.vec(
        -agent.E_minus @ K_w + agent.E_plus @ (agent.C0 - agent.Q0 @ K_w)
    )
    w4 = numcore.cumulative_weights4(grid)
    theta4 = sigma0 + w4 @ theta3

    scale = np.max(np.abs(theta4)) + 1.0
    sigma = theta4.copy()
    t0 = time.perf_counter()
    print(f"--- {label}: scale={scale:.4g}  |theta4|={np.max(np.abs(theta4)):.4g}")
    peak = 0.0
    for it in range(1, 201):
        core = np.einsum("mab,mb->ma", theta1, sigma)
        new = theta4 + w4 @ core
        diff = np.max(np.abs(new - sigma))
        sigma = new
        mag = np.max(np.abs(sigma))
        peak = max(peak, mag)
        if it <= 40 or diff < 1e-9:
            print(f"  it={it:3d}  diff={diff:.3e}  max|sigma|={mag:.4g}  ratio={mag/scale:.2f}")
        if diff < 1e-9:
            break
    dt = time.perf_counter() - t0
    vals = _unvec_samples(sigma, n, nw)
    from coopreg.agentdef import GridFunction
    sig_gf = GridFunction(grid, vals)
    res = sigma_residual(agent, K_w, sig_gf)
    print(f"  => iters={it}, peak_ratio={peak/scale:.2f}, residual={res:.3e}, "
          f"time={dt:.2f}s")
    print(f"  Sigma(0) check: {np.max(np.abs(vals[0] - (-agent.E_minus @ K_w + agent.E_plus @ (agent.C0 - agent.Q0 @ K_w)))):.3e}")
    return agent, K_w, sig_gf


run("group 1 (l=3, m=0.2)", 3.0, 0.2, 0.5)
run("group 2 (l=5, m=1.0)", 5.0, 1.0, 0.5)
