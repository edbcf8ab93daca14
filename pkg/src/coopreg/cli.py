"""Command line front end.

Four subcommands wire the library into a file-based workflow:

* ``design``    read a project config, run both design layers and write a
                versioned JSON artifact plus a plain-text design log
* ``verify``    check an artifact against its config, run the verification
                battery (residuals, rank tests, stability certificate,
                steady-state equations) and stamp the artifact on success
* ``simulate``  run one named closed-loop scenario from a verified artifact
                and write trajectory/snapshot CSV files plus a summary
* ``rope-demo`` unpack the bundled heavy-rope platoon config and run the
                whole pipeline end to end

Artifacts embed a schema string and the sha256 of the config file they were
built from; ``verify`` and ``simulate`` refuse on a mismatch.  All outputs
are deterministic: no timestamps, sorted JSON keys, fixed float formatting.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import tomli

from . import netgraph, numcore, regverify, simloop
from .agentdef import GridFunction, OutputOperatorSpec, rope_agent, \
    rope_uncertain_agent
from .coopdesign import CoopDesign, design_coop
from .localdesign import LocalDesign, design_local
from .numcore import KernelFunction
from .sigmodel import internal_model

ARTIFACT_SCHEMA = "coopreg-design/1"
STAMP_SCHEMA = "coopreg-verified/1"
REGULATOR_GATE = 1e-6                 # relative residual of the steady-state equations
RECOVERY_TOL = 2e-2


class ConfigError(ValueError):
    """Malformed or inconsistent project configuration."""


class DesignAbort(RuntimeError):
    """Design refused with a diagnostic (e.g. the leader is not a root)."""


class VerifyRefused(RuntimeError):
    """Artifact does not belong to the given config or is not verified."""


# ---------------------------------------------------------------------------
# Project configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProjectConfig:
    """Parsed config plus the raw bytes it was parsed from (for hashing)."""

    path: Path
    raw: bytes
    data: dict

    @property
    def sha256(self):
        return hashlib.sha256(self.raw).hexdigest()


def load_config(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    try:
        data = tomli.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}")
    for section in ("signal_model", "topology", "design", "group", "agent"):
        if section not in data:
            raise ConfigError(f"{path}: missing [{section}] section")
    return ProjectConfig(path, raw, data)


def signal_parts(cfg):
    sm = cfg.data["signal_model"]
    try:
        s_gen = np.asarray(sm["S"], dtype=float)
        b_y = np.asarray(sm["b_y"], dtype=float)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"[signal_model]: {exc}")
    n_out = int(sm.get("n_outputs", 1))
    if n_out < 1:
        raise ConfigError("[signal_model]: n_outputs must be positive")
    return s_gen, b_y, n_out


def build_network(cfg):
    tp = cfg.data["topology"]
    try:
        sizes = tuple(int(s) for s in tp["group_sizes"])
        adjacency = np.asarray(tp["adjacency"], dtype=float)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"[topology]: {exc}")
    return netgraph.build_topology(sizes, adjacency)


def _nominal_agent(gspec, index, grid_m):
    kind = gspec.get("kind", "rope")
    if kind != "rope":
        raise ConfigError(
            f"[[group]] {index + 1}: unsupported kind {kind!r} (available: rope)")
    try:
        agent, _ = rope_agent(float(gspec["length"]),
                              float(gspec["load_mass"]),
                              float(gspec["density"]), grid_m=grid_m)
    except KeyError as exc:
        raise ConfigError(f"[[group]] {index + 1}: missing key {exc}")
    return agent


def build_nominals(cfg, topo, grid_m):
    groups = cfg.data["group"]
    if len(groups) != topo.n_groups:
        raise ConfigError(
            f"{len(groups)} [[group]] entries for {topo.n_groups} groups")
    return [_nominal_agent(g, i, grid_m) for i, g in enumerate(groups)]


def build_followers(cfg, nominals, topo, grid_m):
    """Perturbed agents in follower order; missing keys fall back to nominal."""
    specs = cfg.data["agent"]
    if len(specs) != topo.n_followers:
        raise ConfigError(
            f"{len(specs)} [[agent]] entries for {topo.n_followers} followers")
    followers = []
    for a, spec in enumerate(specs):
        g = int(spec.get("group", 0)) - 1
        if g != topo.group_of(a):
            raise ConfigError(
                f"[[agent]] {a + 1}: group {g + 1} does not match the "
                f"topology blocks (expected {topo.group_of(a) + 1})")
        gspec = cfg.data["group"][g]
        followers.append(rope_uncertain_agent(
            g, nominals[g],
            float(spec.get("length", gspec["length"])),
            float(spec.get("load_mass", gspec["load_mass"])),
            float(spec.get("density", gspec["density"])),
            delta_shift=float(spec.get("shift", 0.0)),
            grid_m=grid_m))
    return followers


def follower_shifts(cfg):
    return [float(spec.get("shift", 0.0)) for spec in cfg.data["agent"]]


def output_dir(cfg, args):
    if getattr(args, "out", None):
        return Path(args.out)
    rel = cfg.data.get("output", {}).get("directory", "out")
    return cfg.path.parent / rel


# ---------------------------------------------------------------------------
# Artifact (de)serialization
# ---------------------------------------------------------------------------

def _pack_arr(a):
    return np.asarray(a).tolist()


def _pack_carr(a):
    a = np.asarray(a)
    return {"re": a.real.tolist(), "im": a.imag.tolist()}


def _unpack_carr(d):
    return np.asarray(d["re"], dtype=float) + 1j * np.asarray(d["im"],
                                                              dtype=float)


def _pack_gf(gf):
    return {"grid": gf.grid.tolist(), "values": gf.values.tolist()}


def _unpack_gf(d):
    return GridFunction(np.asarray(d["grid"], dtype=float),
                        np.asarray(d["values"], dtype=float))


def _pack_kf(kf):
    disc = [[[int(i), int(j)],
             [None if not np.isfinite(v) else float(v) for v in rows]]
            for (i, j), rows in kf.discontinuities]
    return {"grid": kf.grid.tolist(), "values": kf.values.tolist(),
            "discontinuities": disc}


def _unpack_kf(d):
    disc = tuple(((int(ij[0]), int(ij[1])),
                  np.array([np.nan if v is None else float(v) for v in rows]))
                 for ij, rows in d["discontinuities"])
    return KernelFunction(np.asarray(d["grid"], dtype=float),
                          np.asarray(d["values"], dtype=float),
                          discontinuities=disc)


def _pack_outspec(spec):
    return {
        "C_x0": _pack_arr(spec.C_x0), "C_x1": _pack_arr(spec.C_x1),
        "C_w": _pack_arr(spec.C_w),
        "C_xd": None if spec.C_xd is None else _pack_gf(spec.C_xd),
        "pointwise": [[float(z), _pack_arr(c)] for z, c in spec.pointwise],
    }


def _unpack_outspec(d):
    return OutputOperatorSpec(
        C_x0=np.asarray(d["C_x0"], dtype=float),
        C_x1=np.asarray(d["C_x1"], dtype=float),
        C_w=np.asarray(d["C_w"], dtype=float),
        C_xd=None if d["C_xd"] is None else _unpack_gf(d["C_xd"]),
        pointwise=tuple((z, np.asarray(c, dtype=float))
                        for z, c in d["pointwise"]),
    )


def _pack_local(loc):
    return {
        "K_w": _pack_arr(loc.K_w), "F_w_tilde": _pack_arr(loc.F_w_tilde),
        "Sigma": _pack_gf(loc.Sigma), "K": _pack_kf(loc.K),
        "K_I": _pack_kf(loc.K_I), "A0_tilde": _pack_gf(loc.A0_tilde),
        "K_l_x": _pack_gf(loc.K_l_x), "K_l_1": _pack_arr(loc.K_l_1),
        "K_l_w": _pack_arr(loc.K_l_w),
        "C_x_tilde": _pack_outspec(loc.C_x_tilde),
        "C_w_tilde": _pack_arr(loc.C_w_tilde), "t_f": float(loc.t_f),
        "sigma_iterations": int(loc.sigma_iterations),
        "kernel_iterations": int(loc.kernel_iterations),
        "inverse_iterations": int(loc.inverse_iterations),
        "sigma_res": float(loc.sigma_res),
        "kernel_res": float(loc.kernel_res),
        "tol_sigma": float(loc.tol_sigma),
        "tol_kernel": float(loc.tol_kernel),
    }


def _unpack_local(d):
    return LocalDesign(
        K_w=np.asarray(d["K_w"], dtype=float),
        F_w_tilde=np.asarray(d["F_w_tilde"], dtype=float),
        Sigma=_unpack_gf(d["Sigma"]), K=_unpack_kf(d["K"]),
        K_I=_unpack_kf(d["K_I"]), A0_tilde=_unpack_gf(d["A0_tilde"]),
        K_l_x=_unpack_gf(d["K_l_x"]),
        K_l_1=np.asarray(d["K_l_1"], dtype=float),
        K_l_w=np.asarray(d["K_l_w"], dtype=float),
        C_x_tilde=_unpack_outspec(d["C_x_tilde"]),
        C_w_tilde=np.asarray(d["C_w_tilde"], dtype=float),
        t_f=d["t_f"], sigma_iterations=d["sigma_iterations"],
        kernel_iterations=d["kernel_iterations"],
        inverse_iterations=d["inverse_iterations"],
        sigma_res=d["sigma_res"], kernel_res=d["kernel_res"],
        tol_sigma=d["tol_sigma"], tol_kernel=d["tol_kernel"],
    )


def _pack_coop(coop):
    return {
        "Pi_x": _pack_gf(coop.Pi_x), "Pi_w": _pack_arr(coop.Pi_w),
        "B_e": _pack_arr(coop.B_e), "P": _pack_arr(coop.P),
        "K_vbar": _pack_arr(coop.K_vbar), "kappa": float(coop.kappa),
        "a": float(coop.a), "K_c_x": _pack_gf(coop.K_c_x),
        "K_c_w": _pack_arr(coop.K_c_w), "F_e": _pack_arr(coop.F_e),
        "F_e_spectrum": _pack_carr(coop.F_e_spectrum),
        "pi_residuals": {k: float(v) for k, v in coop.pi_residuals.items()},
        "rank_report": [{"mu": [float(np.real(r.mu)), float(np.imag(r.mu))],
                         "rank": int(r.rank), "needed": int(r.needed),
                         "smallest_sv": float(r.smallest_sv)}
                        for r in coop.rank_report],
        "identity_residual": float(coop.identity_residual),
    }


def _unpack_coop(d):
    from .coopdesign import RankReport
    report = tuple(RankReport(mu=complex(r["mu"][0], r["mu"][1]),
                              rank=r["rank"], needed=r["needed"],
                              smallest_sv=r["smallest_sv"])
                   for r in d["rank_report"])
    return CoopDesign(
        Pi_x=_unpack_gf(d["Pi_x"]),
        Pi_w=np.asarray(d["Pi_w"], dtype=float),
        B_e=np.asarray(d["B_e"], dtype=float),
        P=np.asarray(d["P"], dtype=float),
        K_vbar=np.asarray(d["K_vbar"], dtype=float),
        kappa=d["kappa"], a=d["a"], K_c_x=_unpack_gf(d["K_c_x"]),
        K_c_w=np.asarray(d["K_c_w"], dtype=float),
        F_e=np.asarray(d["F_e"], dtype=float),
        F_e_spectrum=_unpack_carr(d["F_e_spectrum"]),
        pi_residuals=dict(d["pi_residuals"]), rank_report=report,
        identity_residual=d["identity_residual"],
    )


def dump_artifact(art, path):
    text = json.dumps(art, sort_keys=True, separators=(",", ":"),
                      allow_nan=False)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n")
    return path


def load_artifact(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise VerifyRefused(f"cannot read artifact {path}: {exc}")
    art = json.loads(raw)
    if art.get("schema") != ARTIFACT_SCHEMA:
        raise VerifyRefused(
            f"artifact schema {art.get('schema')!r} is not {ARTIFACT_SCHEMA!r}")
    return art, hashlib.sha256(raw).hexdigest()


def check_artifact_matches(art, cfg):
    if art["config_sha256"] != cfg.sha256:
        raise VerifyRefused(
            "artifact was built from a different config "
            f"(artifact {art['config_sha256'][:12]}…, "
            f"config {cfg.sha256[:12]}…)")


def designs_from_artifact(art):
    locals_ = [_unpack_local(g["local"]) for g in art["groups"]]
    coops = [_unpack_coop(g["coop"]) for g in art["groups"]]
    return locals_, coops


# ---------------------------------------------------------------------------
# design
# ---------------------------------------------------------------------------

def _leader_diagnostic(report):
    spec = ", ".join(f"{complex(z):.6g}" for z in report["spectrum"])
    return ("design aborted: the leader is not a root of the communication "
            "graph, so the follower block of the Laplacian is not Hurwitz-"
            "definite\n"
            f"  min Re sigma(H) = {report['min_real_part']:.6g}\n"
            f"  sigma(H) = {spec}")


def do_design(cfg, grid_m, tol_sigma, tol_kernel, out_dir, artifact_name):
    s_gen, b_y, n_out = signal_parts(cfg)
    ims = internal_model(s_gen, b_y, n_out)
    topo = build_network(cfg)
    rooted, report = netgraph.leader_is_root(topo)
    if not rooted:
        raise DesignAbort(_leader_diagnostic(report))

    dz = cfg.data["design"]
    grid_m = int(grid_m or dz.get("grid", 101))
    tol_sigma = float(tol_sigma or dz.get("tol_sigma", 1e-9))
    tol_kernel = float(tol_kernel or dz.get("tol_kernel", 1e-3))
    kappa = dz.get("kappa")

    nominals = build_nominals(cfg, topo, grid_m)
    log = [f"design grid M = {grid_m}",
           f"internal model: {ims.n_vbar} states per agent"]
    groups_out = []
    for g, agent in enumerate(nominals):
        gspec = cfg.data["group"][g]
        loc = design_local(agent, ode_poles=gspec.get("ode_poles"),
                           tol_sigma=tol_sigma, tol_kernel=tol_kernel)
        coop = design_coop(agent, loc, ims, topo.H_block(g, g),
                           float(gspec["a_weight"]), kappa=kappa)
        groups_out.append({"local": _pack_local(loc), "coop": _pack_coop(coop)})
        worst_pi = max(coop.pi_residuals.values())
        fe_abscissa = float(np.max(coop.F_e_spectrum.real))
        log += [
            f"group {g + 1}:",
            f"  decoupling solver: {loc.sigma_iterations} iterations, "
            f"residual {loc.sigma_res:.3e} (tol {loc.tol_sigma:g})",
            f"  kernel solver: {loc.kernel_iterations} iterations, residual "
            f"{loc.kernel_res:.3e} (tol {loc.tol_kernel:g}); inverse kernel "
            f"{loc.inverse_iterations} iterations",
            f"  settling time t_f = {loc.t_f:.6g}",
            f"  coupling equations: worst residual {worst_pi:.3e}; input "
            f"identity residual {coop.identity_residual:.3e}",
        ]
        log += ["  " + r.line() for r in coop.rank_report]
        log += [
            f"  stabilization: a = {coop.a:g}, kappa = {coop.kappa:g}",
            f"  max Re sigma(F_e) = {fe_abscissa:.6g}",
        ]

    art = {
        "schema": ARTIFACT_SCHEMA,
        "config_sha256": cfg.sha256,
        "design_grid": grid_m,
        "signal_model": {"S": _pack_arr(s_gen), "b_y": _pack_arr(b_y),
                         "n_outputs": n_out},
        "topology": {"group_sizes": [int(s) for s in topo.group_sizes],
                     "adjacency": _pack_arr(cfg.data["topology"]["adjacency"])},
        "groups": groups_out,
    }
    out_dir = Path(out_dir)
    art_path = dump_artifact(art, out_dir / artifact_name)
    log_text = "\n".join(log) + "\n"
    (out_dir / "design_log.txt").write_text(log_text)
    return art_path, log_text


def cmd_design(args):
    cfg = load_config(args.config)
    out = output_dir(cfg, args)
    name = cfg.data.get("output", {}).get("artifact", "design.json")
    art_path, log_text = do_design(cfg, args.grid, args.tol_sigma,
                                   args.tol_kernel, out, name)
    sys.stdout.write(log_text)
    print(f"wrote {art_path}")
    return 0


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def _distinct_eigenvalues(s_gen):
    eigs = np.linalg.eigvals(s_gen)
    kept = []
    for mu in sorted(eigs, key=lambda z: (round(z.real, 9), round(z.imag, 9))):
        if not any(abs(mu - k) < 1e-9 for k in kept):
            kept.append(mu)
    return kept


def verification_hookup(s_gen, n_out, followers):
    """Generic exogenous couplings so every right-hand side is exercised.

    The reference is the leading block of the signal-model state; per-agent
    disturbance and formation couplings get distinct nonzero weights on the
    trailing column so no equation degenerates to the homogeneous case.
    """
    n_v = s_gen.shape[0]
    p_r = np.zeros((n_out, n_v))
    p_r[:, :n_out] = np.eye(n_out)
    p_d, p_shift = [], []
    for a, fol in enumerate(followers):
        q = fol.G_w.shape[1]
        pd = np.zeros((q, n_v))
        pd[:, -1] = float(a + 1)
        ps = np.zeros((n_out, n_v))
        ps[:, -1] = np.asarray(fol.delta_shift, dtype=float)
        p_d.append(pd)
        p_shift.append(ps)
    return regverify.SignalHookup(S=s_gen, P_r=p_r, P_d=tuple(p_d),
                                  P_shift=tuple(p_shift))


def do_verify(cfg, art, art_sha, resolution, out_dir):
    check_artifact_matches(art, cfg)
    s_gen, b_y, n_out = signal_parts(cfg)
    ims = internal_model(s_gen, b_y, n_out)
    topo = build_network(cfg)
    grid_m = int(art["design_grid"])
    locals_, coops = designs_from_artifact(art)
    nominals = build_nominals(cfg, topo, grid_m)
    followers = build_followers(cfg, nominals, topo, grid_m)
    hookup = verification_hookup(s_gen, n_out, followers)
    acl = regverify.assemble_uncertain_transformed(
        followers, locals_, coops, topo, ims, hookup)

    lines = [f"artifact schema {art['schema']}, config hash match",
             f"design grid M = {grid_m}"]
    checks = {"schema": True, "config_hash": True}

    design_ok = True
    for g, loc in enumerate(locals_):
        ok = loc.sigma_res <= loc.tol_sigma and loc.kernel_res <= loc.tol_kernel
        design_ok &= ok
        lines.append(
            f"group {g + 1} design residuals: decoupling {loc.sigma_res:.3e}"
            f" <= {loc.tol_sigma:g}, kernel {loc.kernel_res:.3e}"
            f" <= {loc.tol_kernel:g} {'ok' if ok else 'FAIL'}")
    checks["design_residuals"] = bool(design_ok)

    rank_ok = True
    ranks = []
    for mu in _distinct_eigenvalues(s_gen):
        _, rep = regverify.aggregated_numerator(acl, mu)
        rank_ok &= rep.ok
        ranks.append({"mu": [float(mu.real), float(mu.imag)],
                      "rank": int(rep.rank), "needed": int(rep.needed),
                      "smallest_sv": float(rep.smallest_sv), "ok": rep.ok})
        lines.append(rep.line())
    checks["transmission_zeros"] = bool(rank_ok)

    sol = regverify.solve_extended_regulator(acl)
    residuals = regverify.regulator_residuals(acl, sol)
    reg_ok = all(v <= REGULATOR_GATE for v in residuals.values())
    checks["regulator_equations"] = bool(reg_ok)
    lines.append("steady-state equations (relative residuals, gate "
                 f"{REGULATOR_GATE:g}): {'ok' if reg_ok else 'FAIL'}")
    lines += [f"  {k}: {v:.3e}" for k, v in sorted(residuals.items())]

    cert = regverify.certify_stability(acl, resolution=resolution)
    checks["stability"] = bool(cert.passed)
    lines.append(cert.line())

    passed = all(checks.values())
    lines.append(f"verification {'PASSED' if passed else 'FAILED'}")
    report = {
        "schema": STAMP_SCHEMA,
        "artifact_sha256": art_sha,
        "config_sha256": cfg.sha256,
        "passed": passed,
        "checks": checks,
        "rank_tests": ranks,
        "regulator_residuals": {k: float(v) for k, v in residuals.items()},
        "stability": {"resolution": cert.resolution,
                      "abscissa": cert.abscissa,
                      "abscissa_refined": cert.abscissa_refined,
                      "drift": cert.drift, "dimension": cert.dimension,
                      "passed": cert.passed},
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "verify_report.txt").write_text("\n".join(lines) + "\n")
    return passed, report, "\n".join(lines)


def stamp_path(artifact_path):
    artifact_path = Path(artifact_path)
    return artifact_path.parent / (artifact_path.name + ".verified.json")


def cmd_verify(args):
    cfg = load_config(args.config)
    art, art_sha = load_artifact(args.artifact)
    out = output_dir(cfg, args)
    passed, report, text = do_verify(cfg, art, art_sha,
                                     int(args.grid or 21), out)
    stamp = stamp_path(args.artifact)
    stamp.write_text(json.dumps(report, sort_keys=True, indent=1,
                                allow_nan=False) + "\n")
    print(text)
    print(f"wrote {stamp}")
    return 0 if passed else 1


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def build_scenario(cfg, name, dt, log_every, locals_, coops, topo, ims):
    table = cfg.data.get("scenario", {})
    if name not in table:
        avail = ", ".join(sorted(table)) or "none"
        raise ConfigError(f"unknown scenario {name!r}; available: {avail}")
    sc = table[name]
    if "t_end" not in sc:
        raise ConfigError(f"[scenario.{name}]: missing t_end")

    reference = tuple(
        simloop.RampSegment(float(row[0]), row[1], row[2])
        for row in sc.get("reference", ()))
    disturbances = tuple(
        simloop.DisturbanceStep(int(row[0]) - 1, float(row[1]), row[2])
        for row in sc.get("disturbances", ()))
    for d in disturbances:
        if not 0 <= d.agent < topo.n_followers:
            raise ConfigError(
                f"[scenario.{name}]: disturbance agent {d.agent + 1} out of "
                f"range 1..{topo.n_followers}")

    shifts = follower_shifts(cfg)
    n_w = locals_[0].K_l_w.shape[1]
    start = sc.get("start", "rest")
    if isinstance(start, str):
        if start == "rest":
            w0 = tuple(np.zeros(n_w) for _ in shifts)
        elif start == "formation":
            w0 = tuple(np.array([-s] + [0.0] * (n_w - 1)) for s in shifts)
        else:
            raise ConfigError(
                f"[scenario.{name}]: start must be 'rest', 'formation' or "
                "per-agent arrays")
    else:
        w0 = tuple(np.asarray(row, dtype=float) for row in start)
        if len(w0) != topo.n_followers:
            raise ConfigError(
                f"[scenario.{name}]: start needs {topo.n_followers} rows")

    controller = sc.get("controller", "zero")
    if controller == "zero":
        vbar0 = None
    elif controller == "standstill":
        vbar0 = simloop.standstill_controller_ics(locals_, coops, topo, ims,
                                                  w0)
    else:
        raise ConfigError(
            f"[scenario.{name}]: controller must be 'zero' or 'standstill'")

    return simloop.Scenario(
        name=name, t_end=float(sc["t_end"]), dt=dt, reference=reference,
        disturbances=disturbances, w0=w0, vbar0=vbar0, log_every=log_every,
        snapshot_times=tuple(float(t) for t in sc.get("snapshot_times", ())))


def recovery_times(run, onsets, tol=RECOVERY_TOL):
    """Per onset: time until every agent's |e_y| is back below tol for good."""
    out = {}
    for onset in onsets:
        sel = run.t >= onset - 1e-9
        worst = 0.0
        for e in run.e_y:
            bad = np.max(np.abs(e[sel]), axis=1) >= tol
            hits = run.t[sel][bad]
            if hits.size:
                worst = max(worst, float(hits[-1] - onset))
        out[f"{onset:g}"] = worst
    return out


def do_simulate(cfg, art, scenario_name, m, dt, out_dir):
    s_gen, b_y, n_out = signal_parts(cfg)
    ims = internal_model(s_gen, b_y, n_out)
    topo = build_network(cfg)
    grid_m = int(art["design_grid"])
    locals_, coops = designs_from_artifact(art)
    nominals = build_nominals(cfg, topo, grid_m)
    followers = build_followers(cfg, nominals, topo, grid_m)

    sim = cfg.data.get("simulation", {})
    m = int(m or sim.get("grid", 21))
    dt = float(dt or sim.get("dt", 1e-2))
    log_every = int(sim.get("log_every", 10))
    scenario = build_scenario(cfg, scenario_name, dt, log_every, locals_,
                              coops, topo, ims)

    run = simloop.run_scenario(followers, locals_, coops, topo, ims,
                               scenario, m=m)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    traj = simloop.write_trajectories(run, out_dir / f"traj_{scenario_name}.csv")
    snap_paths = simloop.write_snapshots(run, out_dir,
                                         prefix=f"fields_{scenario_name}")
    summary = simloop.run_summary(run)
    summary["scenario"] = scenario_name
    summary["sim_grid"] = m
    summary["dt"] = dt
    onsets = sorted({d.onset for d in scenario.disturbances})
    if onsets:
        summary["recovery_times"] = recovery_times(run, onsets)
    spath = out_dir / f"summary_{scenario_name}.json"
    spath.write_text(json.dumps(summary, sort_keys=True, indent=1,
                                allow_nan=False) + "\n")
    return run, summary, [traj, spath] + snap_paths


def _summary_lines(summary):
    gaps = ", ".join(f"{g:.4f}" for g in summary["final_gaps"])
    lines = [
        f"scenario {summary['scenario']}: grid m = {summary['sim_grid']}, "
        f"dt = {summary['dt']:g}, t_final = {summary['t_final']:g}",
        f"  max |e_y| for t >= {summary['settle_time']:g}: "
        f"{summary['max_e_y_after_settle']:.4e}",
        f"  final formation gaps: {gaps}",
    ]
    for onset, rec in summary.get("recovery_times", {}).items():
        lines.append(f"  recovery after onset t = {onset}: {rec:.2f} s")
    return lines


def cmd_simulate(args):
    cfg = load_config(args.config)
    art, art_sha = load_artifact(args.artifact)
    check_artifact_matches(art, cfg)
    if not args.force:
        stamp = stamp_path(args.artifact)
        try:
            rec = json.loads(stamp.read_text())
        except OSError:
            raise VerifyRefused(
                f"artifact is not verified (no {stamp.name}); run the verify "
                "subcommand first or pass --force")
        if rec.get("artifact_sha256") != art_sha or not rec.get("passed"):
            raise VerifyRefused(
                "verification stamp is stale or failed; re-run verify or "
                "pass --force")
    out = output_dir(cfg, args)
    _, summary, paths = do_simulate(cfg, art, args.scenario, args.grid,
                                    args.dt, out)
    print("\n".join(_summary_lines(summary)))
    for p in paths[:2]:
        print(f"wrote {p}")
    return 0


# ---------------------------------------------------------------------------
# rope-demo
# ---------------------------------------------------------------------------

def cmd_rope_demo(args):
    out = Path(args.out or "rope_demo_out")
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "rope.toml"
    cfg_path.write_bytes(resources.files("coopreg")
                         .joinpath("data/rope.toml").read_bytes())
    cfg = load_config(cfg_path)
    name = cfg.data.get("output", {}).get("artifact", "design.json")

    print(f"[1/4] design -> {out / name}")
    art_path, log_text = do_design(cfg, None, args.tol_sigma, args.tol_kernel,
                                   out, name)
    sys.stdout.write(log_text)

    print("[2/4] verify")
    art, art_sha = load_artifact(art_path)
    passed, report, text = do_verify(cfg, art, art_sha, 21, out)
    stamp_path(art_path).write_text(
        json.dumps(report, sort_keys=True, indent=1, allow_nan=False) + "\n")
    print(text)
    if not passed:
        print("demo aborted: verification failed")
        return 1

    code = 0
    for step, scenario in ((3, "tracking"), (4, "disturbance")):
        print(f"[{step}/4] simulate {scenario}")
        _, summary, _ = do_simulate(cfg, art, scenario, args.grid, args.dt,
                                    out)
        print("\n".join(_summary_lines(summary)))
    print(f"demo outputs in {out}")
    return code


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="coopreg",
        description="Design, verify and simulate networked boundary-control "
                    "regulators for transport-PIDE agent platoons.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", help="run both design layers, write the "
                                      "JSON artifact and a design log")
    p.add_argument("config")
    p.add_argument("--grid", type=int, help="design grid points (overrides "
                                            "the config)")
    p.add_argument("--tol-sigma", type=float, dest="tol_sigma")
    p.add_argument("--tol-kernel", type=float, dest="tol_kernel")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("verify", help="check an artifact against its config "
                                      "and run the verification battery")
    p.add_argument("config")
    p.add_argument("artifact")
    p.add_argument("--grid", type=int, help="stability certificate "
                                            "resolution (default 21)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("simulate", help="run one named scenario from a "
                                        "verified artifact")
    p.add_argument("config")
    p.add_argument("artifact")
    p.add_argument("scenario")
    p.add_argument("--grid", type=int, help="simulation grid points")
    p.add_argument("--dt", type=float, help="simulation time step")
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true",
                   help="simulate even without a passing verification stamp")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("rope-demo", help="run the bundled heavy-rope platoon "
                                         "end to end")
    p.add_argument("--grid", type=int, help="simulation grid points")
    p.add_argument("--dt", type=float, help="simulation time step")
    p.add_argument("--tol-sigma", type=float, dest="tol_sigma")
    p.add_argument("--tol-kernel", type=float, dest="tol_kernel")
    p.add_argument("--out", help="output directory (default rope_demo_out)")
    p.set_defaults(func=cmd_rope_demo)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DesignAbort, VerifyRefused) as exc:
        print(f"{exc}", file=sys.stderr)
        return 1
    except (numcore.Uncontrollable, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
