"""Command-line entry point: simulate / ode / tagged / verify / scaling.

Config precedence is defaults < config file < flags.  Config files are
either flat ``key = value`` text (``[section]`` headers are allowed and
ignored, keys are global) or JSON.  Every output embeds the resolved
config and master seed, so a run can be reproduced from any of its files.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import analysis, meanfield, tagged
from .kernels import Kernel, load_table_kernel, make_product_kernel, verify_kernel
from .particle import CountState, RandomStream, init_iid, replica_seed, run_until
from .records import (
    SCHEMA_VERSION,
    write_measure_csv,
    write_trajectory_jsonl,
)


class ConfigError(ValueError):
    pass


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


@dataclass
class RunConfig:
    gamma: Optional[float] = None
    table: Optional[str] = None       # CSV kernel table; overrides gamma
    table_mu: float = 1.0
    table_nu: float = 1.0
    table_c: float = 1.0
    L: int = 1000
    N: Optional[int] = None
    rho: Optional[float] = None
    t_end: float = 1.0
    grid: Optional[str] = None        # "t0:t1:dt"
    replicas: int = 1
    seed: int = 0
    jobs: int = 1
    out: str = "out"
    rtol: float = 1e-8
    atol: float = 1e-12
    k_cap: int = meanfield.K_CAP_DEFAULT
    init_csv: Optional[str] = None    # ode: t,k,f_k initial profile
    w0: Optional[int] = None          # tagged initial size (default: uniform rule)
    l_list: Optional[str] = None      # scaling: comma-separated L values
    gamma_list: Optional[str] = None  # scaling: comma-separated gammas

    def resolved(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    def validate(self):
        if self.table is None and self.gamma is None and self.gamma_list is None:
            raise ConfigError("kernel unspecified: give gamma= or table=")
        if self.N is not None and self.rho is not None:
            raise ConfigError("give exactly one of N and rho, not both")
        if self.N is None and self.rho is None:
            raise ConfigError("give one of N and rho")
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        if self.t_end < 0:
            raise ConfigError("t_end must be >= 0")
        if self.L < 2:
            raise ConfigError("L must be >= 2")

    def kernel(self) -> Kernel:
        if self.table is not None:
            return load_table_kernel(self.table, growth_mu=self.table_mu,
                                     growth_nu=self.table_nu,
                                     growth_C=self.table_c)
        return make_product_kernel(self.gamma)

    def particles(self) -> int:
        if self.N is not None:
            return self.N
        return round(self.rho * self.L)

    def density(self) -> float:
        return self.rho if self.rho is not None else self.N / self.L

    def grid_times(self) -> np.ndarray:
        if self.grid is None:
            if self.t_end == 0:
                return np.array([0.0])
            n = 21
            return np.linspace(0.0, self.t_end, n)
        parts = self.grid.split(":")
        if len(parts) != 3:
            raise ConfigError(f'grid must be "t0:t1:dt", got {self.grid!r}')
        t0, t1, dt = (float(p) for p in parts)
        if dt <= 0 or t1 < t0:
            raise ConfigError(f"bad grid range {self.grid!r}")
        n = int(round((t1 - t0) / dt))
        return t0 + dt * np.arange(n + 1)


_BOOL = {"true": True, "false": False, "yes": True, "no": False}


def _coerce(name: str, raw, current):
    if raw is None or isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return raw
    s = str(raw).strip()
    if s.lower() in ("none", ""):
        return None
    for f in fields(RunConfig):
        if f.name == name:
            break
    else:
        raise ConfigError(f"unknown config key {name!r}")
    ann = f.type
    try:
        if "int" in ann:
            return int(s)
        if "float" in ann:
            return float(s)
    except ValueError as e:
        raise ConfigError(f"field {name!r}: {e}") from None
    return s


def load_config_file(path) -> dict:
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}: invalid JSON ({e.msg})")
    out = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        out[key] = value.strip()
    return out


def build_config(args) -> RunConfig:
    cfg = RunConfig()
    file_vals = load_config_file(args.config) if args.config else {}
    for key, value in file_vals.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"{args.config}: unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, value, getattr(cfg, key)))
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            setattr(cfg, f.name, flag)
    if getattr(args, "jobs", None) is None and "jobs" not in file_vals:
        cfg.jobs = int(os.environ.get("EDG_LAB_JOBS", "1"))
    cfg.validate()
    return cfg


# -- simulate ----------------------------------------------------------


def _one_replica(payload):
    cfg_dict, i = payload
    cfg = RunConfig(**{k: v for k, v in cfg_dict.items() if k != "schema_version"})
    kernel = cfg.kernel()
    seq = replica_seed(cfg.seed, i)
    init_seq, run_seq = seq.spawn(2)
    state = init_iid(kernel, cfg.L, cfg.particles(), init_seq)
    rec = run_until(state, cfg.t_end, grid=cfg.grid_times(),
                    stream=RandomStream(run_seq), replica=i)
    rec.seed = cfg.seed
    return rec


def cmd_simulate(cfg: RunConfig) -> int:
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    resolved = cfg.resolved()
    payloads = [(resolved, i) for i in range(cfg.replicas)]
    if cfg.jobs > 1 and cfg.replicas > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            records = list(pool.map(_one_replica, payloads))
    else:
        records = [_one_replica(p) for p in payloads]
    for rec in records:
        write_trajectory_jsonl(outdir / f"replica_{rec.replica:04d}.jsonl",
                               rec, config=resolved)
    summary = analysis.summarize_ensemble(records)
    with open(outdir / "ensemble_mean.csv", "w") as fh:
        fh.write(f"# config={json.dumps(resolved, sort_keys=True)}\n")
        fh.write("t,k,F_mean,F_var\n")
        for it, t in enumerate(summary.times):
            for k in range(summary.f_mean.shape[1]):
                if summary.f_mean[it, k] > 0 or k == 0:
                    fh.write(f"{float(t)!r},{k},{float(summary.f_mean[it, k])!r},"
                             f"{float(summary.f_var[it, k])!r}\n")
    print(f"simulate: {cfg.replicas} replica(s) -> {outdir}")
    return 0


# -- ode ---------------------------------------------------------------


def _load_profile_csv(path) -> np.ndarray:
    rows = {}
    with open(path) as fh:
        header = fh.readline()
        for ln, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                k, fk = int(parts[-2]), float(parts[-1])
            except (ValueError, IndexError):
                raise ConfigError(f"{path}:{ln}: expected ...,k,f_k row")
            rows[k] = fk
    K = max(rows)
    f0 = np.zeros(K + 1)
    for k, fk in rows.items():
        f0[k] = fk
    if abs(f0.sum() - 1.0) > 1e-6:
        raise ConfigError(f"{path}: profile sums to {f0.sum():.8f}, not 1")
    return f0


def cmd_ode(cfg: RunConfig) -> int:
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    kernel = cfg.kernel()
    rho = cfg.density()
    if cfg.init_csv:
        f0 = _load_profile_csv(cfg.init_csv)
    else:
        f0 = meanfield.poisson_profile(rho, max(32, int(8 * rho)))
    traj = meanfield.integrate(f0, kernel, cfg.t_end, grid=cfg.grid_times(),
                               rtol=cfg.rtol, atol=cfg.atol, k_cap=cfg.k_cap,
                               track_sizebias=True)
    resolved = cfg.resolved()
    resolved["blown_up"] = traj.blown_up
    resolved["t_blowup"] = traj.t_blowup
    meanfield.write_trajectory_csv(traj, outdir / "ode_profile.csv",
                                   outdir / "ode_summary.csv")
    with open(outdir / "ode_run.json", "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, "config": resolved,
                   "summary": traj.summary()}, fh, indent=2, sort_keys=True,
                  default=_json_default)
        fh.write("\n")
    msg = f"ode: integrated to t={traj.times[-1]:g} -> {outdir}"
    if traj.blown_up:
        msg += f" (blow-up flagged at t={traj.t_blowup:g})"
    print(msg)
    return 0


# -- tagged ------------------------------------------------------------


def cmd_tagged(cfg: RunConfig) -> int:
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    kernel = cfg.kernel()
    rho = cfg.density()
    f0 = meanfield.poisson_profile(rho, max(32, int(8 * rho)))
    mf = meanfield.integrate(f0, kernel, cfg.t_end, grid=cfg.grid_times(),
                             rtol=cfg.rtol, atol=cfg.atol,
                             track_sizebias=True)
    finals = np.empty(cfg.replicas, dtype=np.int64)
    for i in range(cfg.replicas):
        seq = replica_seed(cfg.seed, i)
        init_seq, run_seq = seq.spawn(2)
        state = init_iid(kernel, cfg.L, cfg.particles(), init_seq)
        stream = RandomStream(run_seq)
        if cfg.w0 is not None:
            ts = tagged.init_tagged(state, rule=("size", cfg.w0))
        else:
            ts = tagged.init_tagged(state, rule="uniform",
                                    seed=np.random.SeedSequence(
                                        cfg.seed, spawn_key=(i, 1)))
        times, ws = tagged.run_tagged(ts, cfg.t_end, grid=[cfg.t_end],
                                      stream=stream)
        finals[i] = ws[-1]
    p_final = mf.ps[-1]
    tv = tagged.compare_tagged_laws(finals, p_final)
    law = np.bincount(finals) / cfg.replicas
    resolved = cfg.resolved()
    with open(outdir / "tagged_law.csv", "w") as fh:
        fh.write(f"# config={json.dumps(resolved, sort_keys=True)}\n")
        fh.write("k,empirical,limit_p\n")
        for k in range(max(len(law), len(p_final))):
            e = law[k] if k < len(law) else 0.0
            p = p_final[k] if k < len(p_final) else 0.0
            if e > 0 or p > 1e-15:
                fh.write(f"{k},{float(e)!r},{float(p)!r}\n")
    with open(outdir / "tagged_run.json", "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, "config": resolved,
                   "t": cfg.t_end, "tv_vs_limit": tv,
                   "replicas": cfg.replicas}, fh, indent=2, sort_keys=True,
                  default=_json_default)
        fh.write("\n")
    print(f"tagged: TV(W^L(t), p(t)) = {tv:.4f} -> {outdir}")
    return 0


# -- verify ------------------------------------------------------------


def cmd_verify(cfg: RunConfig) -> int:
    """Quick verification battery at the configured scale.

    Not the full acceptance suite (that lives in the test suite); this runs
    kernel checks, conservation, an LLN gap and a weak-form residual, and
    exits nonzero if any check fails.
    """
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    kernel = cfg.kernel()
    rho = cfg.density()
    checks = {}

    rep = verify_kernel(kernel, k_max=50)
    checks["kernel"] = {
        "pass": bool(rep.symmetry_ok and rep.positivity_ok and rep.bound_ok),
        "worst_ratio": rep.worst_ratio,
    }

    f0 = meanfield.poisson_profile(rho, max(32, int(8 * rho)))
    traj = meanfield.integrate(f0, kernel, cfg.t_end, grid=cfg.grid_times(),
                               rtol=cfg.rtol, atol=cfg.atol, k_cap=cfg.k_cap)
    fT = traj.fs[-1]
    leak = traj.leaks[-1]
    mass_err = abs(float(np.dot(np.arange(len(fT)), fT)) + leak - rho)
    checks["ode_conservation"] = {
        "pass": bool(abs(fT.sum() - 1.0) <= 1e-8
                     and mass_err <= 1e-6 + leak and leak <= 1e-4
                     and not traj.blown_up),
        "sum_err": abs(float(fT.sum()) - 1.0),
        "mass_err": mass_err,
        "leak": leak,
    }

    records = analysis.run_ensemble(kernel, cfg.L, cfg.particles(), cfg.t_end,
                                    cfg.grid_times(), cfg.replicas, cfg.seed)
    summary = analysis.summarize_ensemble(records)
    gaps = analysis.lln_distance(summary, traj)
    checks["lln"] = {
        "pass": bool(gaps["l1_gap"][-1] <= 0.05),
        "l1_gap_final": float(gaps["l1_gap"][-1]),
    }
    resid = analysis.weak_form_residual(summary, kernel, lambda k: float(k == 0),
                                        cfg.t_end)
    checks["weak_form"] = {"pass": bool(resid <= 0.05), "residual": resid}

    ok = all(c["pass"] for c in checks.values())
    report = {"schema_version": SCHEMA_VERSION, "config": cfg.resolved(),
              "pass": ok, "checks": checks}
    with open(outdir / "verify.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    for name, c in checks.items():
        print(f"verify:{name}: {'PASS' if c['pass'] else 'FAIL'}")
    print(f"verify: {'PASS' if ok else 'FAIL'} -> {outdir}/verify.json")
    return 0 if ok else 1


# -- scaling -----------------------------------------------------------


def cmd_scaling(cfg: RunConfig) -> int:
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rho = cfg.density()
    gammas = ([float(g) for g in cfg.gamma_list.split(",")]
              if cfg.gamma_list else [cfg.gamma if cfg.gamma is not None else 1.0])
    report = {"schema_version": SCHEMA_VERSION, "config": cfg.resolved(),
              "coarsening": {}, "absorption": None}
    rows = []
    for g in gammas:
        kernel = make_product_kernel(g)
        f0 = meanfield.poisson_profile(rho, max(32, int(8 * rho)))
        grid = cfg.grid_times()
        # long coarsening horizons accumulate roundoff at the atol floor;
        # a 1e-10 floor keeps the negativity clip consistent with it
        traj = meanfield.integrate(f0, kernel, cfg.t_end, grid=grid,
                                   rtol=cfg.rtol, atol=max(cfg.atol, 1e-10),
                                   k_cap=cfg.k_cap)
        ell = traj.ell_series()
        try:
            fit = analysis.fit_coarsening(traj.times, ell, g)
            entry = {"beta_hat": fit.beta_hat, "regime": fit.regime,
                     "r2": fit.r2, "expected_beta": fit.expected_beta,
                     "t_gel": fit.t_gel, "blown_up": traj.blown_up}
        except analysis.InsufficientDynamicRange as e:
            entry = {"error": str(e), "blown_up": traj.blown_up}
        report["coarsening"][repr(g)] = entry
        for t, l in zip(traj.times, ell):
            rows.append((g, t, l))
    with open(outdir / "coarsening.csv", "w") as fh:
        fh.write(f"# config={json.dumps(cfg.resolved(), sort_keys=True)}\n")
        fh.write("gamma,t,ell\n")
        for g, t, l in rows:
            fh.write(f"{float(g)!r},{float(t)!r},{float(l)!r}\n")
    if cfg.l_list:
        Ls = [int(x) for x in cfg.l_list.split(",")]
        kernel = make_product_kernel(gammas[0])
        ab = analysis.absorption_study(kernel, Ls, rho, cfg.replicas,
                                       master_seed=cfg.seed)
        report["absorption"] = {str(k): v for k, v in ab.items()}
    with open(outdir / "scaling.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    for g, entry in report["coarsening"].items():
        if "beta_hat" in entry:
            print(f"scaling: gamma={g}: beta_hat={entry['beta_hat']:.4f}"
                  f" ({entry['regime']})")
        else:
            print(f"scaling: gamma={g}: {entry['error']}")
    print(f"scaling -> {outdir}")
    return 0


# -- entry -------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edglab", description="Exchange-driven growth toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("simulate", "seeded Monte Carlo ensemble of the particle system"),
        ("ode", "mean-field master-equation integration"),
        ("tagged", "tagged-particle ensemble vs the limiting law"),
        ("verify", "verification battery (nonzero exit on failure)"),
        ("scaling", "coarsening exponents and absorption scaling"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--gamma", type=float, default=None)
        p.add_argument("--L", type=int, default=None)
        p.add_argument("--N", type=int, default=None)
        p.add_argument("--rho", type=float, default=None)
        p.add_argument("--t-end", dest="t_end", type=float, default=None)
        p.add_argument("--replicas", type=int, default=None)
        p.add_argument("--grid", type=str, default=None)
        if name == "ode":
            p.add_argument("--init-csv", dest="init_csv", type=str, default=None)
            p.add_argument("--rtol", type=float, default=None)
            p.add_argument("--atol", type=float, default=None)
            p.add_argument("--k-cap", dest="k_cap", type=int, default=None)
        if name == "tagged":
            p.add_argument("--w0", type=int, default=None)
        if name == "scaling":
            p.add_argument("--l-list", dest="l_list", type=str, default=None)
            p.add_argument("--gamma-list", dest="gamma_list", type=str,
                           default=None)
        p.add_argument("--table", type=str, default=None)
    return parser


_COMMANDS = {
    "simulate": cmd_simulate,
    "ode": cmd_ode,
    "tagged": cmd_tagged,
    "verify": cmd_verify,
    "scaling": cmd_scaling,
}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = build_config(args)
    except ConfigError as e:
        print(f"edglab: config error: {e}", file=sys.stderr)
        return 2
    return _COMMANDS[args.command](cfg)


if __name__ == "__main__":
    sys.exit(main())
