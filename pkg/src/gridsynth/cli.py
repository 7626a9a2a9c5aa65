"""Command-line entry points.

Every command takes its settings from three layers, strongest first:
command-line flags, then the matching section of a YAML file given with
--config, then built-in defaults.  Each command writes a manifest.json next
to its outputs recording the effective configuration, the seed, content
digests of every input, and the tool version, so a run can be reproduced
(bit-identically, for the deterministic modes) from the manifest alone.

Exit codes: 0 on success, 2 for validation problems (bad flags, malformed
files, mismatched digests), 3 for numerical failures (divergence, singular
systems, exhausted generation budgets).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .datagen import (
    NormStats,
    ScenarioConfig,
    generate,
    load_dataset,
    save_dataset,
)
from .diffusion import NoiseSchedule, TrainConfig, load_checkpoint, save_checkpoint, train
from .errors import (
    DigestMismatch,
    DimensionMismatch,
    DivergenceError,
    FeasibilityError,
    GenerationExhausted,
    GridSynthError,
    NegativeRadicand,
    NormNotFrozen,
    ParseError,
    SchemaError,
    SingularJacobian,
    ValidationError,
)
from .grid import GridCase, feature_labels, load_bundled_case, parse_case
from .kernels import BACKEND
from .metrics import fidelity_report, write_plot_data
from .sampler import GuidanceSchedule, SamplerConfig, sample

BENCH_SIZES = (500, 1000, 2000, 5000)
SWEEP_WIDTHS = (64, 128, 256, 512)

_GUIDANCE_DEFAULTS = {
    "lambda_max": 0.5,
    "decay": "constant",
    "line_limits": True,
    "step_cap": 1.0,
}


# -- configuration plumbing ----------------------------------------------------


def _load_case(spec: str) -> GridCase:
    """A case is either a path to a .case file or a bundled case name."""
    p = Path(spec)
    if p.exists():
        return parse_case(p)
    return load_bundled_case(spec)


def _config_section(path: str | None, command: str) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    doc = yaml.safe_load(text)
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config must be a mapping of command sections")
    section = doc.get(command, {})
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ValidationError(f"{path}: section {command!r} must be a mapping")
    return section


def _merge(defaults: dict, section: dict, flags: dict, command: str) -> dict:
    """Layer the three config sources; unknown file keys are rejected."""
    merged = dict(defaults)
    for key, value in section.items():
        norm_key = str(key).replace("-", "_")
        if norm_key not in merged:
            raise ValidationError(f"unknown config key {key!r} for command {command}")
        merged[norm_key] = value
    for key, value in flags.items():
        if value is not None:
            merged[key] = value
    return merged


def _build_guidance(spec, flag_lambda: float | None) -> GuidanceSchedule | None:
    """Turn the config's guidance spec plus the --guidance-lambda flag into a
    schedule; a zero weight (or an explicit null section with no flag) means
    no guidance at all."""
    if spec is None and flag_lambda is None:
        return None
    fields = dict(_GUIDANCE_DEFAULTS)
    if isinstance(spec, dict):
        for key, value in spec.items():
            norm_key = str(key).replace("-", "_")
            if norm_key not in fields:
                raise ValidationError(f"unknown guidance key {key!r}")
            fields[norm_key] = value
    elif spec is not None and not isinstance(spec, dict):
        raise ValidationError("guidance must be a mapping or null")
    if flag_lambda is not None:
        fields["lambda_max"] = flag_lambda
    if fields["lambda_max"] == 0:
        return None
    return GuidanceSchedule(**fields)


def _guidance_echo(g: GuidanceSchedule | None):
    if g is None:
        return None
    return {
        "lambda_max": g.lambda_max,
        "decay": g.decay,
        "line_limits": g.line_limits,
        "step_cap": g.step_cap,
    }


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, config: dict, seed, inputs: dict) -> None:
    manifest = {
        "tool": "gridsynth",
        "version": __version__,
        "command": command,
        "kernel_backend": BACKEND,
        "seed": seed,
        "config": config,
        "inputs": inputs,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_states_csv(path: Path, states: np.ndarray, labels: list[str]) -> None:
    np.savetxt(path, states, delimiter=",", header=",".join(labels), comments="")


def _read_states_csv(path: Path, grid: GridCase) -> np.ndarray:
    labels = feature_labels(grid)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if header != labels:
        raise SchemaError(f"{path.name}: columns do not match the grid's feature layout")
    states = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if states.shape[1] != 4 * grid.n:
        raise SchemaError(f"{path.name}: wrong column count")
    return states


def _load_model_dir(model_dir: str, grid: GridCase):
    """Read model.npz plus the norm stats it was trained with."""
    mdir = Path(model_dir)
    model_path = mdir / "model.npz"
    norm_path = mdir / "norm.json"
    for p in (model_path, norm_path):
        if not p.exists():
            raise SchemaError(f"missing {p.name} in {mdir}")
    model, sched, _meta = load_checkpoint(model_path)
    norm = NormStats.from_dict(json.loads(norm_path.read_text()))
    if norm.grid_digest != grid.digest():
        raise DigestMismatch("model directory belongs to a different grid")
    return model, sched, norm, model_path


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    defaults = {
        "case": None,
        "seed": 0,
        "n_samples": 2000,
        "load_scale_range": [0.8, 1.2],
        "jitter_sigma": 0.05,
        "attempt_factor": 10,
        "min_acceptance": 0.1,
    }
    flags = {"case": args.case, "seed": args.seed, "n_samples": args.n_samples}
    cfg = _merge(defaults, _config_section(args.config, "gen-data"), flags, "gen-data")
    if cfg["case"] is None:
        raise ValidationError("gen-data needs a case (--case or config)")

    grid = _load_case(cfg["case"])
    out = _out_dir(args)
    scen = ScenarioConfig(
        n_samples=int(cfg["n_samples"]),
        seed=int(cfg["seed"]),
        load_scale_range=tuple(cfg["load_scale_range"]),
        jitter_sigma=float(cfg["jitter_sigma"]),
        attempt_factor=int(cfg["attempt_factor"]),
        min_acceptance=float(cfg["min_acceptance"]),
    )
    ds = generate(grid, scen)
    save_dataset(ds, out, feature_labels(grid))
    _write_manifest(out, "gen-data", cfg, scen.seed, {"case": grid.digest()})
    print(
        f"wrote {ds.n_samples} states for {grid.name} to {out} "
        f"(acceptance {ds.meta.get('acceptance_rate', float('nan')):.3f})"
    )
    return 0


def cmd_train(args) -> int:
    defaults = {
        "case": None,
        "dataset": None,
        "seed": 0,
        "epochs": 600,
        "batch_size": 128,
        "lr": 1e-3,
        "lr_schedule": "cosine",
        "hidden": 512,
        "depth": 3,
        "time_dim": 64,
        "val_fraction": 0.1,
        "timesteps": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
    }
    flags = {
        "case": args.case,
        "dataset": args.dataset,
        "seed": args.seed,
        "epochs": args.epochs,
    }
    cfg = _merge(defaults, _config_section(args.config, "train"), flags, "train")
    if cfg["case"] is None or cfg["dataset"] is None:
        raise ValidationError("train needs a case and a dataset directory")

    grid = _load_case(cfg["case"])
    ds = load_dataset(cfg["dataset"], grid)
    out = _out_dir(args)
    sched = NoiseSchedule.linear(
        int(cfg["timesteps"]), float(cfg["beta_start"]), float(cfg["beta_end"])
    )
    tc = TrainConfig(
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        lr=float(cfg["lr"]),
        lr_schedule=str(cfg["lr_schedule"]),
        hidden=int(cfg["hidden"]),
        depth=int(cfg["depth"]),
        time_dim=int(cfg["time_dim"]),
        val_fraction=float(cfg["val_fraction"]),
        seed=int(cfg["seed"]),
    )
    model, log = train(
        ds.norm.normalize(ds.states), sched, tc, norm_digest=ds.norm.digest()
    )
    save_checkpoint(out / "model.npz", model, sched)
    (out / "norm.json").write_text(json.dumps(ds.norm.to_dict(), indent=1))
    log.to_csv(out / "train_log.csv")
    _write_manifest(
        out,
        "train",
        cfg,
        tc.seed,
        {
            "case": grid.digest(),
            "dataset": _file_digest(Path(cfg["dataset"]) / "dataset.csv"),
            "norm": ds.norm.digest(),
        },
    )
    print(
        f"trained {tc.epochs} epochs on {ds.n_samples} states: "
        f"final val loss {log.val_loss[-1]:.5f} -> {out / 'model.npz'}"
    )
    return 0


def _sampler_defaults() -> dict:
    return {
        "case": None,
        "model": None,
        "seed": 0,
        "n_samples": 1000,
        "mode": "ddim",
        "ddim_steps": 30,
        "eta": 0.2,
        "guidance": dict(_GUIDANCE_DEFAULTS),
        "clamp_zero_injection": True,
        "project": False,
        "batch_size": None,
    }


def _sampler_flags(args) -> dict:
    return {
        "case": args.case,
        "model": args.model,
        "seed": args.seed,
        "n_samples": getattr(args, "n_samples", None),
        "mode": getattr(args, "mode", None),
        "ddim_steps": args.ddim_steps,
        "eta": args.eta,
        "clamp_zero_injection": False if args.no_clamp else None,
        "project": True if getattr(args, "project", None) else None,
        "batch_size": getattr(args, "batch_size", None),
    }


def _sampler_config(cfg: dict, guidance: GuidanceSchedule | None, n_samples: int) -> SamplerConfig:
    return SamplerConfig(
        n_samples=n_samples,
        method=str(cfg["mode"]),
        ddim_steps=int(cfg["ddim_steps"]),
        eta=float(cfg["eta"]),
        guidance=guidance,
        clamp_zero_injection=bool(cfg["clamp_zero_injection"]),
        project=bool(cfg["project"]),
        seed=int(cfg["seed"]),
        batch_size=None if cfg["batch_size"] is None else int(cfg["batch_size"]),
    )


def cmd_sample(args) -> int:
    cfg = _merge(_sampler_defaults(), _config_section(args.config, "sample"), _sampler_flags(args), "sample")
    if cfg["case"] is None or cfg["model"] is None:
        raise ValidationError("sample needs a case and a model directory")

    grid = _load_case(cfg["case"])
    model, sched, norm, model_path = _load_model_dir(cfg["model"], grid)
    guidance = _build_guidance(cfg["guidance"], args.guidance_lambda)
    scfg = _sampler_config(cfg, guidance, int(cfg["n_samples"]))
    out = _out_dir(args)

    batch = sample(model, sched, grid, norm, scfg)

    _save_states_csv(out / "samples.csv", batch.states, feature_labels(grid))
    cols = ["r_h", "r_g"]
    data = [batch.r_h, batch.r_g]
    if batch.proj_converged is not None:
        cols += ["proj_converged", "proj_distance"]
        data += [batch.proj_converged.astype(float), batch.proj_distance]
    rows = [",".join(cols)]
    rows += [",".join(repr(float(c[i])) for c in data) for i in range(batch.n_samples)]
    (out / "residuals.csv").write_text("\n".join(rows) + "\n")

    echo = dict(cfg)
    echo["guidance"] = _guidance_echo(guidance)
    _write_manifest(
        out,
        "sample",
        echo,
        scfg.seed,
        {"case": grid.digest(), "model": _file_digest(model_path), "norm": norm.digest()},
    )
    print(
        f"sampled {batch.n_samples} states in {batch.wall_seconds:.2f}s "
        f"(mean r_h {batch.r_h.mean():.3e}, mean r_g {batch.r_g.mean():.3e}) -> {out}"
    )
    return 0


def cmd_eval(args) -> int:
    defaults = {
        "case": None,
        "dataset": None,
        "samples": None,
        "n_bins": 50,
        "buses": None,
    }
    flags = {"case": args.case, "dataset": args.dataset, "samples": args.samples}
    cfg = _merge(defaults, _config_section(args.config, "eval"), flags, "eval")
    if cfg["case"] is None or cfg["dataset"] is None or cfg["samples"] is None:
        raise ValidationError("eval needs a case, a dataset directory, and samples")

    grid = _load_case(cfg["case"])
    real = load_dataset(cfg["dataset"], grid)
    spath = Path(cfg["samples"])
    if spath.is_dir():
        spath = spath / "samples.csv"
    syn = _read_states_csv(spath, grid)
    out = _out_dir(args)

    rep = fidelity_report(real, syn, grid, n_bins=int(cfg["n_bins"]))
    rep.to_json(out / "fidelity.json")
    buses = cfg["buses"]
    write_plot_data(
        real,
        syn,
        grid,
        out / "plots",
        n_bins=int(cfg["n_bins"]),
        buses=None if buses is None else [int(b) for b in buses],
    )
    _write_manifest(
        out,
        "eval",
        cfg,
        None,
        {
            "case": grid.digest(),
            "dataset": _file_digest(Path(cfg["dataset"]) / "dataset.csv"),
            "samples": _file_digest(spath),
        },
    )
    print(f"mean W1 {rep.w1_mean:.4f}, mean KL {rep.kl_mean:.4f} -> {out / 'fidelity.json'}")
    return 0


def _linear_fit(x: np.ndarray, y: np.ndarray):
    """Least-squares line y = a + b x with its coefficient of determination."""
    b, a = np.polyfit(x, y, 1)
    resid = y - (a + b * x)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), r2


def cmd_bench(args) -> int:
    defaults = _sampler_defaults()
    defaults.pop("n_samples")
    defaults.pop("mode")
    defaults.pop("project")
    defaults["sizes"] = list(BENCH_SIZES)
    flags = _sampler_flags(args)
    for key in ("n_samples", "mode", "project"):
        flags.pop(key, None)
    cfg = _merge(defaults, _config_section(args.config, "bench"), flags, "bench")
    if cfg["case"] is None or cfg["model"] is None:
        raise ValidationError("bench needs a case and a model directory")
    sizes = [int(s) for s in cfg["sizes"]]
    if any(s < 1 for s in sizes):
        raise ValidationError("bench sizes must all be >= 1 samples")
    if len(sizes) < 2:
        raise ValidationError("bench needs at least two sizes to fit a line")

    grid = _load_case(cfg["case"])
    model, sched, norm, model_path = _load_model_dir(cfg["model"], grid)
    guidance = _build_guidance(cfg["guidance"], args.guidance_lambda)
    out = _out_dir(args)

    rows = []
    times = {}
    for method in ("ddim", "ddpm"):
        steps = int(cfg["ddim_steps"]) if method == "ddim" else sched.n_steps
        for n in sizes:
            base = dict(cfg, mode=method, project=False)
            scfg = _sampler_config(base, guidance, n)
            batch = sample(model, sched, grid, norm, scfg)
            rows.append((method, n, steps, batch.wall_seconds))
            times[(method, n)] = batch.wall_seconds
            print(f"  {method} n={n}: {batch.wall_seconds:.2f}s")

    fits = {}
    x = np.array(sizes, dtype=float)
    for method in ("ddim", "ddpm"):
        y = np.array([times[(method, n)] for n in sizes])
        a, b, r2 = _linear_fit(x, y)
        fits[method] = {"intercept_s": a, "seconds_per_sample": b, "r2": r2}

    largest = max(sizes)
    speedup = times[("ddpm", largest)] / times[("ddim", largest)]

    lines = ["method,n_samples,steps,seconds"]
    lines += [f"{m},{n},{s},{t!r}" for m, n, s, t in rows]
    (out / "bench.csv").write_text("\n".join(lines) + "\n")
    summary = {"sizes": sizes, "fits": fits, "speedup_at_largest": speedup}
    (out / "bench.json").write_text(json.dumps(summary, indent=1))

    echo = dict(cfg)
    echo["guidance"] = _guidance_echo(guidance)
    _write_manifest(
        out,
        "bench",
        echo,
        cfg["seed"],
        {"case": grid.digest(), "model": _file_digest(model_path), "norm": norm.digest()},
    )
    print(
        f"speedup at n={largest}: {speedup:.1f}x "
        f"(R^2 ddim {fits['ddim']['r2']:.4f}, ddpm {fits['ddpm']['r2']:.4f})"
    )
    bad = [m for m in fits if fits[m]["r2"] <= 0.99]
    if bad:
        print(f"time scaling is not linear for {', '.join(bad)} (R^2 <= 0.99)", file=sys.stderr)
        return 3
    return 0


def cmd_capacity_sweep(args) -> int:
    defaults = {
        "case": None,
        "dataset": None,
        "seed": 0,
        "epochs": 150,
        "widths": list(SWEEP_WIDTHS),
        "batch_size": 128,
        "lr": 1e-3,
        "lr_schedule": "cosine",
        "depth": 3,
        "time_dim": 64,
        "val_fraction": 0.1,
        "timesteps": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
    }
    flags = {
        "case": args.case,
        "dataset": args.dataset,
        "seed": args.seed,
        "epochs": args.epochs,
    }
    cfg = _merge(defaults, _config_section(args.config, "capacity-sweep"), flags, "capacity-sweep")
    if cfg["case"] is None or cfg["dataset"] is None:
        raise ValidationError("capacity-sweep needs a case and a dataset directory")
    widths = [int(w) for w in cfg["widths"]]
    if not widths or any(w < 1 for w in widths):
        raise ValidationError("widths must be a non-empty list of positive ints")

    grid = _load_case(cfg["case"])
    ds = load_dataset(cfg["dataset"], grid)
    out = _out_dir(args)
    sched = NoiseSchedule.linear(
        int(cfg["timesteps"]), float(cfg["beta_start"]), float(cfg["beta_end"])
    )
    states_norm = ds.norm.normalize(ds.states)

    final = []
    for width in widths:
        tc = TrainConfig(
            epochs=int(cfg["epochs"]),
            batch_size=int(cfg["batch_size"]),
            lr=float(cfg["lr"]),
            lr_schedule=str(cfg["lr_schedule"]),
            hidden=width,
            depth=int(cfg["depth"]),
            time_dim=int(cfg["time_dim"]),
            val_fraction=float(cfg["val_fraction"]),
            seed=int(cfg["seed"]),
        )
        _, log = train(states_norm, sched, tc, norm_digest=ds.norm.digest())
        log.to_csv(out / f"capacity_w{width}.csv")
        final.append((width, log.val_loss[-1]))
        print(f"  width {width}: final val loss {log.val_loss[-1]:.5f}")

    lines = ["width,final_val_loss"]
    lines += [f"{w},{v!r}" for w, v in final]
    (out / "capacity.csv").write_text("\n".join(lines) + "\n")
    _write_manifest(
        out,
        "capacity-sweep",
        cfg,
        cfg["seed"],
        {
            "case": grid.digest(),
            "dataset": _file_digest(Path(cfg["dataset"]) / "dataset.csv"),
        },
    )
    print(f"swept {len(widths)} widths -> {out / 'capacity.csv'}")
    return 0


# -- parser --------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file with per-command sections")
    p.add_argument("--case", help="bundled case name or path to a .case file")
    p.add_argument("--seed", type=int, help="root random seed")
    p.add_argument("--out", required=True, help="output directory")


def _add_sampling_flags(p: argparse.ArgumentParser, with_mode: bool = True) -> None:
    if with_mode:
        p.add_argument("--mode", choices=("ddpm", "ddim"), help="sampling method")
    p.add_argument("--ddim-steps", type=int, help="number of reverse steps for ddim")
    p.add_argument("--eta", type=float, help="ddim stochasticity in [0, 1]")
    p.add_argument(
        "--guidance-lambda",
        type=float,
        help="feasibility correction weight; 0 disables guidance",
    )
    p.add_argument(
        "--no-clamp",
        action="store_true",
        default=None,
        help="do not clamp structurally-zero injections",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridsynth",
        description="Synthesize feasible power-grid operating states with a "
        "constraint-guided diffusion model.",
    )
    parser.add_argument("--version", action="version", version=f"gridsynth {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="solve randomized scenarios into a dataset")
    _add_common(p)
    p.add_argument("--n-samples", type=int, help="number of feasible states to keep")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit the denoiser to a dataset")
    _add_common(p)
    p.add_argument("--dataset", help="directory written by gen-data")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw new states from a trained model")
    _add_common(p)
    p.add_argument("--model", help="directory written by train")
    p.add_argument("--n-samples", type=int, help="number of states to draw")
    p.add_argument("--batch-size", type=int, help="chunk size for the reverse process")
    _add_sampling_flags(p)
    p.add_argument(
        "--project",
        action="store_true",
        default=None,
        help="project each sample onto the feasible set afterwards",
    )
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score synthetic states against a dataset")
    _add_common(p)
    p.add_argument("--dataset", help="real dataset directory to compare against")
    p.add_argument("--samples", help="samples.csv (or the directory holding it)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time both samplers across batch sizes")
    _add_common(p)
    p.add_argument("--model", help="directory written by train")
    _add_sampling_flags(p, with_mode=False)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("capacity-sweep", help="train at several widths, log val loss")
    _add_common(p)
    p.add_argument("--dataset", help="directory written by gen-data")
    p.add_argument("--epochs", type=int, help="training epochs per width")
    p.set_defaults(func=cmd_capacity_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        SingularJacobian,
        DivergenceError,
        NegativeRadicand,
        FeasibilityError,
        GenerationExhausted,
    ) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (
        ParseError,
        SchemaError,
        ValidationError,
        DimensionMismatch,
        DigestMismatch,
        NormNotFrozen,
        GridSynthError,
        OSError,
        yaml.YAMLError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
