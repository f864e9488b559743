"""Command line: simulate, chunk, fit-vbill, fit-mcmc, compare.

Every command accepts ``--config FILE`` with ``key = value`` lines; explicit
flags win over file values.  The resolved configuration is written to the
output directory as ``config.txt``, which can be passed back with
``--config`` to replay a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import chunkstore, mcmc, pipeline, simulate
from .fisher_identity import ISConfig
from .natgrad import ConditioningError
from .optimizer import EPS_PANEL, EPS_TRACTABLE, MLENonConvergence, OptimizerConfig, write_trace
from .variational import PriorSpec, marginal_density_grid

log = logging.getLogger("vbill")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------- config


def read_config_file(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            k, v = line.split("=", 1)
            out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(defaults: dict, explicit: dict, config_path=None) -> dict:
    """Merge defaults, config-file values and explicit flags (in that order)."""
    values = dict(defaults)
    if config_path:
        for k, v in read_config_file(config_path).items():
            if k not in values:
                raise ConfigError(f"unknown configuration key {k!r}")
            values[k] = v
    values.update(explicit)
    return values


def write_config(cfg: dict, out: Path, command: str) -> None:
    with open(out / "config.txt", "w") as fh:
        fh.write(f"# {command}\n")
        for k in sorted(cfg):
            if cfg[k] is not None:
                fh.write(f"{k} = {cfg[k]}\n")


def _int(v, name):
    try:
        return int(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be an integer, got {v!r}") from None


def _float(v, name):
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {v!r}") from None


def _bool(v) -> bool:
    return v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes", "on")


def parse_subsample(value, n: int) -> int:
    """``"2%"`` or an absolute count."""
    s = str(value).strip()
    if s.endswith("%"):
        m = int(round(float(s[:-1]) / 100.0 * n))
    else:
        m = _int(s, "m")
    if m < 1:
        raise ConfigError(f"subsample size {value!r} gives m < 1 for n = {n}")
    return m


def _data_dir(value) -> Path:
    if value is None:
        raise ConfigError("a data directory is required (flag or VBILL_DATA_DIR)")
    return Path(value)


# --------------------------------------------------------------- commands


def cmd_simulate(cfg: dict) -> None:
    kind = str(cfg["kind"]).lower()
    n = _int(cfg["n"], "n")
    seed = _int(cfg["seed"], "seed")
    out = Path(cfg["out"])
    if n < 0:
        raise ConfigError("n must be non-negative")
    if kind == "logistic":
        data = simulate.simulate_logistic(n, seed=seed)
        truth = {"beta": data.beta.tolist()}
    elif kind == "panel":
        data = simulate.simulate_panel(n, T=_int(cfg["T"], "T"), seed=seed)
        truth = {"beta": data.beta.tolist(), "gamma": data.gamma}
    else:
        raise ConfigError(f"unknown kind {kind!r} (logistic or panel)")
    rpc = _int(cfg["rows_per_chunk"], "rows_per_chunk") if cfg.get("rows_per_chunk") else max(n, 1)
    manifest = chunkstore.write_chunks(data, rpc, out)
    with open(out / "truth.json", "w") as fh:
        json.dump({"kind": kind, "n": n, "seed": seed, **truth}, fh, indent=1)
    write_config(cfg, out, "simulate")
    print(f"wrote {manifest.n} units in {len(manifest.chunks)} chunk(s) to {out}")


def cmd_chunk(cfg: dict) -> None:
    src = chunkstore.ChunkManifest.load(_data_dir(cfg["data"]))
    model = chunkstore.load_model(src)
    out = Path(cfg["out"])
    manifest = chunkstore.write_chunks(
        (model.X, model.y), _int(cfg["rows_per_chunk"], "rows_per_chunk"), out,
        shuffle=_bool(cfg["shuffle"]), seed=_int(cfg["seed"], "seed"),
    )
    truth = Path(src.root) / "truth.json"
    if truth.exists():
        shutil.copy(truth, out / "truth.json")
    write_config(cfg, out, "chunk")
    print(f"wrote {len(manifest.chunks)} chunk(s) to {out}")


def _param_names(manifest: chunkstore.ChunkManifest) -> list[str]:
    names = [f"beta{j}" for j in range(manifest.p + 1)]
    return names + ["gamma"] if manifest.schema == chunkstore.PANEL else names


def _write_summary(out: Path, names, mean, sd) -> None:
    with open(out / "summary.csv", "w") as fh:
        fh.write("parameter,mean,sd\n")
        for name, m, s in zip(names, mean, sd):
            fh.write(f"{name},{float(m)!r},{float(s)!r}\n")


def read_summary(path: Path):
    rows = [line.strip().split(",") for line in open(path / "summary.csv").read().splitlines()[1:] if line.strip()]
    return [r[0] for r in rows], np.array([float(r[1]) for r in rows]), np.array([float(r[2]) for r in rows])


def cmd_fit_vbill(cfg: dict) -> None:
    data = _data_dir(cfg["data"])
    manifest = chunkstore.ChunkManifest.load(data)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    panel = manifest.schema == chunkstore.PANEL
    model = chunkstore.load_model(manifest)
    n = model.n
    m = parse_subsample(cfg["m"], n)
    eps = cfg["eps_stop"]
    eps = (EPS_PANEL if panel else EPS_TRACTABLE) if eps in (None, "auto") else _float(eps, "eps_stop")
    ocfg = OptimizerConfig(
        S=_int(cfg["S"], "S"), a0=_float(cfg["a0"], "a0"), tau=_float(cfg["tau"], "tau"), K=_int(cfg["K"], "K"),
        eps_stop=eps, max_iterations=_int(cfg["max_iterations"], "max_iterations"), points=str(cfg["points"]),
        seed=_int(cfg["seed"], "seed"), average=_bool(cfg["average"]),
    )
    prior = PriorSpec(_float(cfg["prior_var"], "prior_var"))
    chunked = _bool(cfg["chunked"])
    chunk_sizes = manifest.unit_counts if chunked else None
    source = chunkstore.FetchingLogisticModel(manifest) if (chunked and not panel) else None
    is_cfg = ISConfig(N=_int(cfg["N"], "N"), points=str(cfg["points"])) if panel else None
    t0 = time.perf_counter()
    run = pipeline.run_vbill(
        model, m, ocfg, prior, is_cfg, init_seed=_int(cfg["init_seed"], "init_seed"),
        chunk_sizes=chunk_sizes, source=source,
    )
    wall = time.perf_counter() - t0
    lam = run.lam
    run.cache.fingerprint = manifest.content
    run.cache.save(out / "control_variates.bin")
    np.savetxt(out / "lambda.txt", np.column_stack([lam.mu, lam.B]), header=f"mu B\nc {lam.c!r}", fmt="%.17g")
    names = _param_names(manifest)
    _write_summary(out, names, lam.mu, lam.marginal_sd())
    with open(out / "density_grids.csv", "w") as fh:
        fh.write("parameter,theta,density\n")
        for j, name in enumerate(names):
            grid, dens = marginal_density_grid(lam, j)
            for g, d in zip(grid, dens):
                fh.write(f"{name},{g!r},{d!r}\n")
    write_trace(run.fit.trace, out / "trace.jsonl")
    info = {
        "method": "vbill", "content": f"{manifest.content:016x}", "n": n, "m": m,
        "iterations": run.fit.iterations, "converged": run.fit.converged, "wall_time": wall,
    }
    with open(out / "run.json", "w") as fh:
        json.dump(info, fh, indent=1)
    write_config(cfg, out, "fit-vbill")
    print(f"VBILL stopped after {run.fit.iterations} iterations ({'converged' if run.fit.converged else 'max iterations'})")


def cmd_fit_mcmc(cfg: dict) -> None:
    manifest = chunkstore.ChunkManifest.load(_data_dir(cfg["data"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    model = chunkstore.load_model(manifest)
    chain_cfg = mcmc.ChainConfig(
        iterations=_int(cfg["iterations"], "iterations") + _int(cfg["burn_in"], "burn_in"),
        burn_in=_int(cfg["burn_in"], "burn_in"), seed=_int(cfg["seed"], "seed"),
    )
    prior = PriorSpec(_float(cfg["prior_var"], "prior_var"))
    t0 = time.perf_counter()
    chain, N = pipeline.run_mcmc(model, prior, chain_cfg, tune_seed=_int(cfg["init_seed"], "init_seed"))
    wall = time.perf_counter() - t0
    mcmc.write_draws(chain, out / "draws.f8")
    _write_summary(out, _param_names(manifest), chain.mean, chain.sd)
    info = {
        "method": "pmmh" if N else "adaptive_rw_mh", "content": f"{manifest.content:016x}", "n": model.n,
        "iterations": chain_cfg.iterations, "acceptance_rate": chain.acceptance_rate, "is_samples": N,
        "wall_time": wall, "mcse": chain.batch_means_se().tolist(),
    }
    with open(out / "run.json", "w") as fh:
        json.dump(info, fh, indent=1)
    write_config(cfg, out, "fit-mcmc")
    print(f"chain finished, acceptance rate {chain.acceptance_rate:.3f}")


def compare_dirs(vbill_dir, mcmc_dir) -> dict:
    vb, mc = Path(vbill_dir), Path(mcmc_dir)
    info_v = json.load(open(vb / "run.json"))
    info_m = json.load(open(mc / "run.json"))
    if info_v["content"] != info_m["content"]:
        raise chunkstore.ChunkError(
            f"results come from different datasets ({info_v['content']} vs {info_m['content']})"
        )
    names, mv, sv = read_summary(vb)
    names_m, mm, sm = read_summary(mc)
    if names != names_m:
        raise ConfigError("parameter lists differ")
    rows = []
    for j, name in enumerate(names):
        rows.append({
            "parameter": name, "vbill_mean": mv[j], "vbill_sd": sv[j], "mcmc_mean": mm[j], "mcmc_sd": sm[j],
            "abs_dmean_over_sd": abs(mv[j] - mm[j]) / sm[j], "sd_ratio": sv[j] / sm[j],
        })
    return {
        "parameters": rows,
        "wall_time_ratio": info_v["wall_time"] / info_m["wall_time"] if info_m["wall_time"] else float("nan"),
        "vbill_iterations": info_v.get("iterations"),
        "mcmc_iterations": info_m.get("iterations"),
    }


def render_report(rep: dict) -> str:
    lines = [f"{'param':<8} {'VB mean':>11} {'VB sd':>9} {'MCMC mean':>11} {'MCMC sd':>9} {'|dm|/sd':>8} {'sd ratio':>8}"]
    for r in rep["parameters"]:
        lines.append(
            f"{r['parameter']:<8} {r['vbill_mean']:>11.5f} {r['vbill_sd']:>9.5f} {r['mcmc_mean']:>11.5f} "
            f"{r['mcmc_sd']:>9.5f} {r['abs_dmean_over_sd']:>8.3f} {r['sd_ratio']:>8.3f}"
        )
    lines.append(f"wall-time ratio (VBILL / MCMC): {rep['wall_time_ratio']:.4f}")
    lines.append(f"iterations: VBILL {rep['vbill_iterations']}, MCMC {rep['mcmc_iterations']}")
    return "\n".join(lines)


def cmd_compare(cfg: dict) -> None:
    rep = compare_dirs(cfg["vbill"], cfg["mcmc"])
    text = render_report(rep)
    print(text)
    if cfg.get("out"):
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w") as fh:
            json.dump(rep, fh, indent=1)
        with open(out / "report.txt", "w") as fh:
            fh.write(text + "\n")
        write_config(cfg, out, "compare")


# ----------------------------------------------------------------- parser


COMMANDS = {
    "simulate": ("simulate a logistic or panel dataset", [
        ("--kind", {"default": "logistic", "choices": ["logistic", "panel"]}),
        ("--n", {"default": 100000}),
        ("--T", {"default": simulate.PANEL_T}),
        ("--seed", {"default": 0}),
        ("--rows-per-chunk", {"default": None}),
        ("--out", {"default": "@data"}),
    ]),
    "chunk": ("re-chunk a dataset", [
        ("--data", {"default": "@data"}),
        ("--rows-per-chunk", {"default": 10000}),
        ("--shuffle", {"default": False, "nargs": "?", "const": True}),
        ("--seed", {"default": 0}),
        ("--out", {"default": None}),
    ]),
    "fit-vbill": ("variational fit with subsampled likelihood gradients", [
        ("--data", {"default": "@data"}),
        ("--out", {"default": "vbill_out"}),
        ("--m", {"default": "1%", "help": "subsample size, absolute or percent of n"}),
        ("--S", {"default": 256}),
        ("--points", {"default": "RQMC", "choices": ["MC", "RQMC"]}),
        ("--eps-stop", {"default": "auto"}),
        ("--a0", {"default": 0.1}),
        ("--tau", {"default": 50.0}),
        ("--K", {"default": 5}),
        ("--max-iterations", {"default": 1000}),
        ("--prior-var", {"default": 50.0}),
        ("--N", {"default": 256, "help": "importance samples per panel"}),
        ("--seed", {"default": 0}),
        ("--init-seed", {"default": 0}),
        ("--chunked", {"default": False, "nargs": "?", "const": True, "help": "stratify the subsample by chunk"}),
        ("--average", {"default": False, "nargs": "?", "const": True, "help": "stop on the windowed mean of lambda"}),
    ]),
    "fit-mcmc": ("adaptive MH or pseudo-marginal MH reference fit", [
        ("--data", {"default": "@data"}),
        ("--out", {"default": "mcmc_out"}),
        ("--iterations", {"default": 30000, "help": "kept iterations after burn-in"}),
        ("--burn-in", {"default": 10000}),
        ("--prior-var", {"default": 50.0}),
        ("--seed", {"default": 0}),
        ("--init-seed", {"default": 0}),
    ]),
    "compare": ("side-by-side report of a VBILL and an MCMC fit", [
        ("--vbill", {"default": None}),
        ("--mcmc", {"default": None}),
        ("--out", {"default": None}),
    ]),
}
HANDLERS = {
    "simulate": cmd_simulate, "chunk": cmd_chunk, "fit-vbill": cmd_fit_vbill,
    "fit-mcmc": cmd_fit_mcmc, "compare": cmd_compare,
}
REQUIRED = {"chunk": ("out",), "compare": ("vbill", "mcmc")}


def _dest(flag: str) -> str:
    return flag.lstrip("-").replace("-", "_")


def build_parser(suppress: bool = False) -> argparse.ArgumentParser:
    """Parser with real defaults, or with every default suppressed (to see explicit flags)."""
    p = argparse.ArgumentParser(prog="vbill", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (help_text, opts) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", default=None, help="key = value configuration file")
        for flag, kw in opts:
            kw = dict(kw)
            kw["dest"] = _dest(flag)
            kw["default"] = argparse.SUPPRESS if suppress else kw["default"]
            sp.add_argument(flag, **kw)
    return p


def command_defaults(command: str) -> dict:
    data = str(chunkstore.default_data_dir())
    return {_dest(flag): (data if kw["default"] == "@data" else kw["default"]) for flag, kw in COMMANDS[command][1]}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    explicit = vars(build_parser(suppress=True).parse_args(argv))
    for k in ("command", "config", "verbose"):
        explicit.pop(k, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(command_defaults(args.command), explicit, args.config)
        for key in REQUIRED.get(args.command, ()):
            if cfg.get(key) in (None, ""):
                raise ConfigError(f"--{key} is required")
        HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (chunkstore.ChunkError, chunkstore.SchemaError, OSError) as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConditioningError, MLENonConvergence, FloatingPointError) as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
