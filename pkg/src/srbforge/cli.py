"""Experiment configuration, orchestration and artifact emission.

Subcommands: diagnose | partition | measure | validate | all.  Every run
writes its resolved configuration next to the outputs, and identical
configuration plus seed produces byte-identical artifacts.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .dynamics import (builtin_map_names, get_map, iterate_map,
                       evaluate_orbit, verify_nondegeneracy)
from .errors import ConfigError, SrbForgeError
from .hyperbolic import (HyperbolicConfig, hyperbolic_density,
                         lyapunov_statistics, slow_recurrence_average)
from .partition import (audit_no_deep_overlap, forbidden_mass_series,
                        make_base_partition, run_partitioning)
from .regions import RegionSet
from .tower import (DensityEstimate, assemble_induced_map, birkhoff_check,
                    hyperbolic_vs_return_statistics,
                    induced_invariant_density, l1_distance, time_integral,
                    tower_pushforward)
from .ulam import orbit_histogram, ulam_density

STAGES = ("diagnose", "partition", "measure", "validate")

__all__ = ["ExperimentConfig", "run_experiment", "compare_densities", "main"]


@dataclass
class ExperimentConfig:
    map_name: str = "doubling"
    map_eps: float = None           # parameter for maps that take one
    sigma: float = None             # derived from lambda when absent
    delta: float = None             # truncation radius; per-map default
    b_exp: float = 0.25
    iterate: str = "auto"           # "auto" or an integer
    pliss_margin: float = None      # per-map default when absent
    delta0: float = 0.112
    delta1: float = 0.45
    grid_size: int = 100_000
    N_max: int = 10
    cells: int = 16384              # density grid G
    J_max: int = None               # default: max R + 10
    lyap_samples: int = 100
    lyap_N: int = 100_000
    lyap_window: int = 100
    birkhoff_samples: int = 100
    birkhoff_n: int = 100_000
    mc_samples: int = 20_000_000
    hist_steps: int = 10_000_000
    hist_cells: int = 1024
    orbit_checks: int = 100
    orbit_depth: int = 10_000
    rng_seed: int = 7
    output_dir: str = "srbforge_out"
    coverage_target: float = 0.99
    dump_elements: bool = True
    emit_plot_scripts: bool = False

    def map_params(self):
        return {} if self.map_eps is None else {"eps": self.map_eps}


def _load_config_file(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError("bad config line: %r" % line)
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _coerce(cfg: ExperimentConfig, key: str, val):
    if not hasattr(cfg, key):
        raise ConfigError("unknown config key %r" % key)
    cur = getattr(cfg, key)
    if isinstance(cur, bool):
        val = str(val).lower() in ("1", "true", "yes", "on")
    elif isinstance(cur, int) and not isinstance(cur, bool):
        val = int(float(val))
    elif isinstance(cur, float):
        val = float(val)
    elif key in ("iterate",):
        val = str(val)
    elif cur is None:
        if key in ("sigma", "delta", "pliss_margin", "map_eps"):
            val = float(val)
        elif key == "J_max":
            val = int(float(val))
    setattr(cfg, key, val)


def compare_densities(a: DensityEstimate, b: DensityEstimate) -> float:
    """L1 distance of the normalized densities (same grid required)."""
    return l1_distance(a, b)


def _coarsen(d: DensityEstimate, G2: int) -> DensityEstimate:
    if d.grid_size % G2:
        raise ConfigError("cannot coarsen %d cells to %d" % (d.grid_size, G2))
    m = d.masses.reshape(G2, d.grid_size // G2).sum(axis=1)
    return DensityEstimate(G2, m, float(m.sum()), float(m.max() * G2))


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

class _Pipeline:
    def __init__(self, cfg: ExperimentConfig, stages):
        self.cfg = cfg
        self.stages = stages
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.base_map = get_map(cfg.map_name, **cfg.map_params())
        self.summary = []
        self.map_g = None
        self.hcfg = None
        self.state = None
        self.imap = None
        self.nu = None
        self.mu = None

    # -- helpers ---------------------------------------------------------
    def note(self, line):
        self.summary.append(line)

    def write_json(self, name, obj):
        (self.out / name).write_text(json.dumps(obj, indent=2, sort_keys=True,
                                                default=_json_default) + "\n")

    def write_csv(self, name, header, columns, fmt="%.17g"):
        rows = np.column_stack([np.asarray(c, dtype=np.float64)
                                for c in columns])
        with open(self.out / name, "w") as fh:
            fh.write(header + "\n")
            np.savetxt(fh, rows, delimiter=",", fmt=fmt)

    # -- parameter resolution ---------------------------------------------
    def resolve_dynamics(self):
        cfg = self.cfg
        margin = cfg.pliss_margin
        if margin is None:
            margin = self.base_map.pliss_margin_default
        lam0 = self.base_map.known_lyapunov
        if lam0 is None or lam0 <= 0:
            lam0 = self._estimate_lambda0()
        if cfg.iterate == "auto":
            floor = 4.0 * np.log(2.0)
            n0 = 1
            while margin * n0 * lam0 <= floor:
                n0 += 1
                if n0 > 64:
                    raise ConfigError("cannot reach the contraction gate; "
                                      "the map barely expands (lambda0 ~ %g)" % lam0)
        else:
            n0 = int(cfg.iterate)
        lam = margin * n0 * lam0
        sigma = cfg.sigma if cfg.sigma is not None else float(np.exp(-lam))
        if cfg.sigma is not None:
            lam = float(-np.log(sigma))
        delta = cfg.delta
        if delta is None:
            delta = 1e-5 if len(self.base_map.critical_points) else 0.1
        self.map_g = iterate_map(self.base_map, n0) if n0 > 1 else self.base_map
        self.hcfg = HyperbolicConfig(sigma=sigma, delta=delta, b_exp=cfg.b_exp,
                                     lam=lam, iterate_power=n0)
        self.note("map: %s  iterate n0=%d  lambda=%.6g  sigma=%.6g  delta=%g  b=%g"
                  % (self.base_map.name, n0, lam, sigma, delta, cfg.b_exp))

    def _estimate_lambda0(self):
        rng = np.random.default_rng(self.cfg.rng_seed)
        pts = rng.uniform(0, 1, size=32)
        if self.base_map.dimension == 2:
            pts = rng.uniform(0, 1, size=(32, 2))
        vals = []
        for x in pts:
            orb = evaluate_orbit(self.base_map, x, 4000)
            if not orb.singular.any():
                vals.append(float(-orb.log_inv_norms.mean()))
        if not vals:
            raise ConfigError("could not estimate the expansion rate")
        return float(np.median(vals))

    # -- stages -----------------------------------------------------------
    def stage_diagnose(self):
        cfg = self.cfg
        rng = np.random.default_rng(cfg.rng_seed)
        d = self.base_map.dimension
        samples = (rng.uniform(0, 1, size=cfg.lyap_samples) if d == 1 else
                   rng.uniform(0, 1, size=(cfg.lyap_samples, 2)))
        rep = lyapunov_statistics(self.base_map, list(samples), cfg.lyap_N,
                                  cfg.lyap_window)
        nondeg = verify_nondegeneracy(self.base_map, 1000, cfg.rng_seed)
        dens = []
        theta_cfg = HyperbolicConfig(
            sigma=float(np.exp(-0.25 * max(rep["mean_final_average"], 1e-6)))
            if rep["mean_final_average"] > 1e-9 else 0.9,
            delta=0.1, b_exp=cfg.b_exp, lam=max(rep["mean_final_average"], 1e-6))
        if d == 1:
            for x in samples[:50]:
                orb = evaluate_orbit(self.base_map, x, 2000)
                if orb.singular.any():
                    continue
                dens.append(hyperbolic_density(orb, 2000, theta_cfg))
        slow = {}
        if d == 1 and len(self.base_map.critical_points):
            orb = evaluate_orbit(self.base_map, float(samples[0]), 1000)
            for dl in (0.1, 0.01, 0.001):
                slow["%g" % dl] = slow_recurrence_average(orb, 1000, dl)
        report = {
            "lyapunov": {k: rep[k] for k in
                         ("map", "N", "window", "agree_fraction",
                          "mean_final_average", "n_skipped")},
            "nondegeneracy": nondeg,
            "theta_hat": (min(dens) if dens else None),
            "hyperbolic_density_mean": (float(np.mean(dens)) if dens else None),
            "slow_recurrence": slow,
        }
        self.write_json("diagnose_report.json", report)
        if d == 1:
            rows = [r for r in rep["samples"] if not r["skipped"]]
            self.write_csv("lyapunov_samples.csv",
                           "point,liminf_proxy,limsup_proxy,final_average",
                           [[r["point"] for r in rows],
                            [r["liminf_proxy"] for r in rows],
                            [r["limsup_proxy"] for r in rows],
                            [r["final_average"] for r in rows]])
        self.note("diagnose: lambda-hat %.6g, liminf/limsup agreement %.3f"
                  % (rep["mean_final_average"], rep["agree_fraction"]))
        if report["theta_hat"] is not None:
            self.note("diagnose: empirical qualifying-time density >= %.4f"
                      % report["theta_hat"])

    def stage_partition(self):
        cfg = self.cfg
        if self.base_map.dimension != 1:
            raise ConfigError("partitioning runs on one-dimensional maps")
        base = make_base_partition(self.base_map.domain, cfg.delta0, cfg.delta1)
        self.state = run_partitioning(
            self.map_g, self.hcfg, base, N_max=cfg.N_max,
            grid_size=cfg.grid_size, coverage_target=cfg.coverage_target)
        st = self.state
        series = forbidden_mass_series(st)
        audit = audit_no_deep_overlap(st)
        report = {
            "elements": len(st.store),
            "steps_run": st.step,
            "coverage": st.coverage(),
            "coverage_target": cfg.coverage_target,
            "collar_identity_ok": all(st.checks["collar_identity"].values()),
            "collar_ring_identity_ok": all(st.checks["collar_ring_identity"].values()),
            "deep_overlap_ok": audit["ok"],
            "deep_overlap_violations": len(audit["violations"]),
            "lclaim_violations": len(st.checks["lclaim_violations"]),
            "rem2_rejects": st.checks["rem2_rejects"],
            "skipped_probes": st.checks["skipped_probes"],
            "forbidden_tail_slope": series["tail_slope"],
            "log_sqrt_sigma": series["log_sqrt_sigma"],
            "collar_bound_ok": series["collar_bound_ok"],
            "collar_bound_violations": series["collar_bound_violations"],
        }
        self.write_json("partition_report.json", report)
        self.write_csv("partition_series.csv",
                       "n,leb_forbidden,leb_collars,coverage",
                       [series["n"], series["leb_forbidden"],
                        series["leb_collars"], series["coverage"]])
        if cfg.dump_elements:
            s = st.store
            self.write_csv("partition_elements.csv",
                           "source,target,R,left,right,center",
                           [s.source, s.target, s.step,
                            np.asarray(s.left, dtype=np.float64),
                            np.asarray(s.right, dtype=np.float64), s.center])
        self.note("partition: %d elements in %d steps, coverage %.6f"
                  % (len(st.store), st.step, st.coverage()))
        self.note("partition: exact collar identities %s, deep-overlap audit %s"
                  % (report["collar_identity_ok"], audit["ok"]))

    def stage_measure(self):
        cfg = self.cfg
        if self.state is None:
            self.stage_partition()
        self.imap = assemble_induced_map(self.state)
        self.nu = induced_invariant_density(self.imap, cfg.cells)
        ti = time_integral(self.imap, self.nu)
        jmax = cfg.J_max if cfg.J_max is not None else int(self.imap.returns.max()) + 10
        self.mu = tower_pushforward(self.imap, self.nu, jmax, cfg.cells,
                                    rng_seed=cfg.rng_seed,
                                    mc_samples=cfg.mc_samples)
        report = {
            "branches": self.imap.n_branches,
            "kappa_measured": self.imap.kappa,
            "sqrt_sigma": float(np.sqrt(self.hcfg.sigma)),
            "distortion_K": self.imap.distortion_K,
            "markov_endpoint_error": self.imap.markov_endpoint_error,
            "nu_residual": self.nu.meta["residual"],
            "nu_sup_density": self.nu.sup_bound,
            "time_integral": ti["integral_estimate"],
            "time_tail_slope": ti["tail_slope"],
            "time_verdict": ti["verdict"],
            "tower_tail_mass": self.mu.meta["tail_mass"],
            "tower_truncation_dominates": self.mu.meta["truncation_dominates"],
            "J_max": jmax,
        }
        self.write_json("measure_report.json", report)
        for name, d in (("induced_density.csv", self.nu),
                        ("tower_density.csv", self.mu)):
            G = d.grid_size
            edges = np.arange(G) / G
            self.write_csv(name, "cell_left,cell_right,mass,density",
                           [edges, edges + 1.0 / G, d.masses,
                            d.masses * G / max(d.total_mass, 1e-300)])
        self.note("measure: %d branches, kappa %.4g (sqrt sigma %.4g), "
                  "integral of the return time %.6g"
                  % (self.imap.n_branches, self.imap.kappa,
                     np.sqrt(self.hcfg.sigma), ti["integral_estimate"]))

    def stage_validate(self):
        cfg = self.cfg
        if self.mu is None:
            self.stage_measure()
        G = cfg.cells
        um, res, its = ulam_density(self.base_map, G)
        ud = DensityEstimate(G, um, 1.0, float(um.max() * G),
                             {"residual": res, "iterations": its})
        l1_ulam = compare_densities(self.mu, ud)
        hist = orbit_histogram(self.base_map, cfg.hist_steps, cfg.hist_cells,
                               seed=cfg.rng_seed)
        hd = DensityEstimate(cfg.hist_cells, hist, 1.0,
                             float(hist.max() * cfg.hist_cells))
        l1_hist = compare_densities(_coarsen(self.mu, cfg.hist_cells), hd)
        bk = birkhoff_check(self.base_map, self.mu,
                            samples=cfg.birkhoff_samples, n=cfg.birkhoff_n,
                            rng_seed=cfg.rng_seed)
        rng = np.random.default_rng(cfg.rng_seed + 1)
        eq_ok = 0
        eq_tried = 0
        depths = []
        for x in rng.uniform(0, 1, size=cfg.orbit_checks):
            try:
                r = hyperbolic_vs_return_statistics(self.state, self.imap,
                                                    float(x), cfg.orbit_depth)
            except SrbForgeError:
                continue
            eq_tried += 1
            depths.append(r["effective_depth"])
            eq_ok += int(r["eqS1_ok"] and r["eqS2_ok"])
        report = {
            "l1_tower_vs_ulam": l1_ulam,
            "l1_tower_vs_orbit_histogram": l1_hist,
            "ulam_residual": res,
            "birkhoff": bk,
            "counting_orbits_checked": eq_tried,
            "counting_orbits_ok": eq_ok,
            "counting_median_depth": (float(np.median(depths)) if depths else None),
        }
        self.write_json("validation_report.json", report)
        edges = np.arange(G) / G
        self.write_csv("ulam_density.csv", "cell_left,cell_right,mass,density",
                       [edges, edges + 1.0 / G, um, um * G])
        self.note("validate: L1(tower, ulam) = %.5f, L1(tower, orbit hist) = %.5f"
                  % (l1_ulam, l1_hist))
        self.note("validate: counting inequalities ok on %d/%d orbits"
                  % (eq_ok, eq_tried))

    # -- driver ------------------------------------------------------------
    def run(self):
        self._write_resolved_config()
        if "partition" in self.stages or "measure" in self.stages \
                or "validate" in self.stages:
            self.resolve_dynamics()
            self.hcfg.require_partition_grade()
            self.hcfg.validate_b_against(self.map_g.nondeg_beta)
        elif "diagnose" in self.stages:
            pass
        for s in STAGES:
            if s in self.stages:
                getattr(self, "stage_" + s)()
        if self.cfg.emit_plot_scripts:
            self._emit_plot_scripts()
        (self.out / "summary.txt").write_text("\n".join(self.summary) + "\n")
        return 0

    def _write_resolved_config(self):
        lines = ["%s=%s" % (k, v) for k, v in sorted(asdict(self.cfg).items())]
        (self.out / "resolved_config.txt").write_text("\n".join(lines) + "\n")

    def _emit_plot_scripts(self):
        script = """\
import matplotlib.pyplot as plt
import numpy as np

series = np.genfromtxt('partition_series.csv', delimiter=',', names=True)
fig, ax = plt.subplots(1, 2, figsize=(10, 4))
ax[0].semilogy(series['n'], series['leb_forbidden'], 'o-')
ax[0].set(xlabel='step', ylabel='forbidden mass')
ax[1].plot(series['n'], series['coverage'], 'o-')
ax[1].set(xlabel='step', ylabel='coverage')
fig.tight_layout()
fig.savefig('partition_series.png', dpi=150)

for name in ('induced_density', 'tower_density', 'ulam_density'):
    try:
        d = np.genfromtxt(name + '.csv', delimiter=',', names=True)
    except OSError:
        continue
    plt.figure(figsize=(8, 3))
    plt.plot(d['cell_left'], d['density'], lw=0.5)
    plt.xlabel('x'); plt.ylabel('density'); plt.title(name)
    plt.tight_layout(); plt.savefig(name + '.png', dpi=150)
"""
        (self.out / "plot_results.py").write_text(script)


def _json_default(obj):
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError("cannot serialize %r" % type(obj))


def run_experiment(cfg: ExperimentConfig, stages=("diagnose", "partition",
                                                  "measure", "validate")) -> int:
    """Execute the selected stages; on failure write a machine-readable
    error record and return a nonzero status."""
    pipe = _Pipeline(cfg, set(stages))
    try:
        return pipe.run()
    except SrbForgeError as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").write_text(
            json.dumps(record, indent=2, sort_keys=True) + "\n")
        print("error: %s" % exc, file=sys.stderr)
        return 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="srb-forge",
        description="Construct and validate invariant densities for weakly "
                    "expanding interval and circle maps.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("all",):
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--map", dest="map_name", choices=builtin_map_names())
        p.add_argument("--eps", dest="map_eps", type=float)
        p.add_argument("--sigma", type=float)
        p.add_argument("--delta", type=float)
        p.add_argument("--delta0", type=float)
        p.add_argument("--delta1", type=float)
        p.add_argument("--b", dest="b_exp", type=float)
        p.add_argument("--iterate", help="'auto' or a fixed power")
        p.add_argument("--margin", dest="pliss_margin", type=float)
        p.add_argument("--grid", dest="grid_size", type=int)
        p.add_argument("--nmax", dest="N_max", type=int)
        p.add_argument("--cells", type=int)
        p.add_argument("--jmax", dest="J_max", type=int)
        p.add_argument("--seed", dest="rng_seed", type=int)
        p.add_argument("--out", dest="output_dir")
        p.add_argument("--coverage", dest="coverage_target", type=float)
        p.add_argument("--N", dest="lyap_N", type=int)
        p.add_argument("--mc-samples", dest="mc_samples", type=int)
        p.add_argument("--plots", dest="emit_plot_scripts", action="store_true",
                       default=None)
    args = parser.parse_args(argv)

    cfg = ExperimentConfig()
    if args.config:
        for k, v in _load_config_file(args.config).items():
            _coerce(cfg, k, v)
    for key, val in vars(args).items():
        if key in ("command", "config") or val is None:
            continue
        setattr(cfg, key, val)
    stages = set(STAGES) if args.command == "all" else {args.command}
    try:
        return run_experiment(cfg, stages)
    except ConfigError as exc:
        print("configuration error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
