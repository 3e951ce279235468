"""Command-line entry point: ``youngnet run | analyze | check``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import re
import sys
from pathlib import Path

import numpy as np

from . import analysis as an
from . import autodiff as ad
from .config import ConfigError, RunConfig, load_config
from .network import (CheckpointError, NetworkConfig, PotentialNetwork, evaluate, forward_jet, init_xavier,
                      load_checkpoint)
from .problems import FieldPotential, LossWeights, ProblemSpec, evaluate_loss
from .sampling import Axis, GridSpec, grid_weight_sum, latent_draw, mesh_batch, stochastic_meshgrid, substream
from .trainer import TrainingError, TrainRecord, load_state, train, training_grid

log = logging.getLogger("youngnet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
FAILURE_MARKER = "FAILED"


# ---------------------------------------------------------------------------
# analysis of one network
# ---------------------------------------------------------------------------

def _anchor_tag(anchor) -> str:
    return "_".join(f"{a:.4f}".rstrip("0").rstrip(".") if a else "0" for a in anchor)


def _sample_stats(m: an.EmpiricalMeasure) -> dict:
    v = m.samples
    near_wells = np.minimum(np.abs(v - 1.0), np.abs(v + 1.0)) <= 0.25
    minus, plus = m.well_fractions()
    return {
        "mean": float(np.mean(v)),
        "well_minus": minus,
        "well_plus": plus,
        "near_wells": float(np.mean(near_wells)),
        "near_zero": float(np.mean(np.abs(v) <= 0.25)),
    }


def _checkpoint_epoch(path: Path) -> int | None:
    m = re.fullmatch(r"checkpoint_(\d+)\.ckpt", path.name)
    return int(m.group(1)) if m else None


def w2_trace(run_dir: Path, final_epoch: int | None = None) -> list[an.W2EnergyPoint]:
    """W2-vs-energy diagnostic over every epoch checkpoint in ``run_dir``."""
    found = []
    for p in Path(run_dir).glob("checkpoint_*.ckpt"):
        e = _checkpoint_epoch(p)
        if e is not None:
            found.append((e, p))
    final = Path(run_dir) / "checkpoint_final.ckpt"
    if final.exists() and final_epoch is not None and all(e != final_epoch for e, _ in found):
        found.append((final_epoch, final))
    probe = an.probe_grid_1d()
    out = []
    for epoch, path in sorted(found):
        net, _, _ = load_checkpoint(path)
        out.append(an.w2_energy_diagnostic(net, epoch, probe))
    return out


def analyze_network(net: PotentialNetwork, cfg: RunConfig, out_dir, history: TrainRecord | None = None,
                    run_dir=None) -> dict:
    """Write field/histogram CSVs and ``metrics.json`` for ``net``; return the metrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = cfg.problem
    a = cfg.analysis
    rng = substream(cfg.run.seed, "analysis")
    metrics: dict = {"case": problem.case, "seed": cfg.run.seed}
    if history is not None and len(history):
        metrics["epochs_completed"] = history.epoch[-1]
        metrics["final_loss"] = {"total": history.total[-1], "energy": history.energy[-1],
                                 "boundary": history.boundary[-1], "curl": history.curl[-1]}
    else:
        metrics["epochs_completed"] = 0
    hist_dir = out / "histograms"
    anchors = cfg.anchors()
    rows = []
    if problem.case == "bolza-1d":
        field = an.reconstruct_u_1d(net, training_grid(cfg.train_config()))
        field.write_csv(out / "field.csv")
        metrics["max_abs_u"] = float(np.max(np.abs(field.u)))
        metrics["energy_estimate"] = an.energy_estimate(net, problem, an.probe_grid_1d())
        # one latent draw shared by every probe
        latents = latent_draw(a.latent_draw, a.histogram_samples, 1, rng)
        for anchor in anchors:
            m = an.pushforward_histogram(net, anchor, "xi", latents=latents, bins=a.histogram_bins,
                                         value_range=(a.histogram_lo, a.histogram_hi))
            m.write_csv(hist_dir / f"x_{_anchor_tag(anchor)}_xi.csv")
            row = {"anchor": list(anchor), "component": "xi", **_sample_stats(m),
                   "w2_to_analytic": an.w2_empirical_1d(m.samples, an.BOLZA_MEASURE)}
            rows.append(row)
        if run_dir is not None:
            trace = w2_trace(run_dir, metrics["epochs_completed"])
            with open(out / "w2_trace.csv", "w") as fh:
                fh.write("epoch,w2_sq,energy_gap,bound,ratio\n")
                for p in trace:
                    fh.write(f"{p.epoch},{p.w2_sq!r},{p.energy_gap!r},{p.bound!r},{p.ratio!r}\n")
            if trace:
                last = trace[-1]
                metrics["w2_energy"] = {"epoch": last.epoch, "w2_sq": last.w2_sq, "energy_gap": last.energy_gap,
                                        "bound": last.bound, "ratio": last.ratio, "holds": last.holds}
    else:
        probe = an.probe_grid_2d(a.probe_physical, a.probe_latent, a.probe_latent_range)
        field = an.reconstruct_u_2d(net, probe, a.path_mode)
        field.write_csv(out / "field.csv")
        metrics["max_abs_u"] = float(np.max(np.abs(field.u)))
        metrics["path_discrepancy"] = field.path_discrepancy
        metrics["curl_fd_rms"] = an.curl_fd(field.xs, field.ys, field.V1, field.V2)
        s = problem.boundary_slope
        right = field.u[-1, :] - s * field.ys
        top = field.u[:, -1] - s * field.xs
        metrics["boundary_rms"] = {"right": float(np.sqrt(np.mean(right ** 2))),
                                   "top": float(np.sqrt(np.mean(top ** 2)))}
        metrics["energy_estimate"] = an.energy_estimate(net, problem, probe)
        latents = latent_draw(a.latent_draw, a.histogram_samples, 2, rng)
        for anchor in anchors:
            vals = an.pushforward_samples(net, anchor, latents)
            for k, comp in enumerate(an.COMPONENTS):
                m = an.histogram_of(anchor, comp, vals[:, k], a.histogram_bins, (a.histogram_lo, a.histogram_hi))
                m.write_csv(hist_dir / f"xy_{_anchor_tag(anchor)}_{comp}.csv")
                rows.append({"anchor": list(anchor), "component": comp, **_sample_stats(m)})
    metrics["anchors"] = rows
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def run(cfg: RunConfig, resume=None) -> tuple[int, Path]:
    """Train and analyze; every artifact lands in ``cfg.run.out``.

    ``resume`` names a training checkpoint written under the same configuration.
    """
    if resume is not None:
        try:
            load_state(resume, cfg.train_config())
        except (ValueError, KeyError) as exc:
            raise CheckpointError(f"cannot resume from {resume}: {exc}") from exc
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / FAILURE_MARKER
    if marker.exists():
        marker.unlink()
    cfg.write(out / "config.ini")
    net = init_xavier(cfg.network_config())
    try:
        net, record = train(cfg.train_config(), net, out_dir=out, resume_from=resume)
    except TrainingError as exc:
        marker.write_text(f"numerical failure at epoch {exc.epoch}, term {exc.term}\n"
                          f"last good checkpoint: {exc.checkpoint}\n")
        log.error("%s", exc)
        return EXIT_NUMERIC, out
    except BaseException as exc:
        marker.write_text(f"{type(exc).__name__}: {exc}\n")
        raise
    try:
        analyze_network(net, cfg, out, history=record, run_dir=out)
    except BaseException as exc:
        marker.write_text(f"analysis failed: {type(exc).__name__}: {exc}\n")
        raise
    return EXIT_OK, out


def checkpoint_config(meta: dict, base: RunConfig) -> RunConfig:
    """``base`` with problem settings taken from a training checkpoint's metadata."""
    if "train_config" not in meta:
        return base
    tc = json.loads(meta["train_config"])
    return base.with_overrides({
        "run.case": tc["problem"]["case"],
        "loss.alpha": tc["problem"]["alpha"],
        "run.seed": tc["seed"],
        "sampling.latent_range": tc["latent_range"],
        "train.grid_x": tc["grid_x"],
        "train.grid_xi": tc["grid_xi"],
    }).validate()


def analyze(checkpoint, cfg: RunConfig, out_dir=None) -> Path:
    """Analyze a stored network; artifacts go to ``out_dir`` (default next to the checkpoint)."""
    checkpoint = Path(checkpoint)
    net, meta, arrays = load_checkpoint(checkpoint)
    cfg = checkpoint_config(meta, cfg)
    if net.config.input_dim != cfg.problem.input_dim:
        raise CheckpointError(f"{checkpoint}: network input_dim {net.config.input_dim} "
                              f"does not fit case {cfg.problem.case}")
    out = Path(out_dir) if out_dir is not None else checkpoint.parent / f"analysis_{checkpoint.stem}"
    history = TrainRecord.from_arrays(arrays) if any(k.startswith("history.") for k in arrays) else None
    analyze_network(net, cfg, out, history=history)
    return out


def self_check(seed: int = 0) -> list[tuple[str, bool, str]]:
    """Gradient and quadrature self-tests; returns (name, passed, detail) rows."""
    rows = []
    rng = np.random.default_rng(seed)

    # input partials against central differences
    net = init_xavier(NetworkConfig(4, depth=2, hidden_width=6, seed=seed))
    pts = rng.uniform(-1, 1, (5, 4))
    j = forward_jet(net, pts, (2, 3))
    h = 1e-5
    e2, e3 = np.eye(4)[2], np.eye(4)[3]
    fd = (evaluate(net, pts + h * e2) - evaluate(net, pts - h * e2)) / (2 * h)
    err = float(np.max(np.abs(j.da - fd) / np.maximum(1.0, np.abs(fd))))
    rows.append(("input partials vs finite differences", err < 1e-5, f"max rel err {err:.2e}"))
    h2 = 1e-4
    fd2 = (evaluate(net, pts + h2 * (e2 + e3)) - evaluate(net, pts + h2 * (e2 - e3))
           - evaluate(net, pts - h2 * (e2 - e3)) + evaluate(net, pts - h2 * (e2 + e3))) / (4 * h2 * h2)
    err = float(np.max(np.abs(j.dab - fd2) / np.maximum(1.0, np.abs(fd2))))
    rows.append(("mixed partials vs finite differences", err < 1e-3, f"max rel err {err:.2e}"))

    # parameter gradient of a full 2D loss
    batch = stochastic_meshgrid(GridSpec.unit(4, 2, 2), 8, rng)
    aux = mesh_batch(np.linspace(0, 1, 3), np.linspace(0, 1, 3), np.linspace(-2, 2, 3), np.linspace(-2, 2, 3))
    problem = ProblemSpec("two-well-affine", alpha=0.1)

    def loss_at(theta):
        return evaluate_loss(problem, net.with_params(theta), batch, LossWeights(), aux=aux).total

    tape = ad.Tape()
    br = evaluate_loss(problem, net, batch, LossWeights(), aux=aux, tape=tape)
    tape.finalize(br.graph["total"])
    g = ad.grad_params(tape)
    idx = rng.choice(net.params.size, 12, replace=False)
    worst = 0.0
    for i in idx:
        d = np.zeros_like(net.params)
        d[i] = 1e-6
        num = (loss_at(net.params + d) - loss_at(net.params - d)) / 2e-6
        worst = max(worst, abs(num - g[i]) / max(1e-6, abs(num) + abs(g[i])))
    rows.append(("parameter gradient vs finite differences", worst < 1e-4, f"max rel err {worst:.2e}"))

    # quadrature
    target = math.sqrt(2 * math.pi) * math.erf(2 / math.sqrt(2))
    s = grid_weight_sum(Axis("xi", -2.0, 2.0, 201))
    rows.append(("latent grid weight sum", abs(s - target) <= 1e-3, f"{s:.6f} vs {target:.6f}"))
    ident = FieldPotential(2, {1: lambda p: p[:, 1]})
    m = an.pushforward_histogram(ident, (0.5,), "xi", count=10_000, rng=substream(seed, "analysis"))
    ks = an.ks_statistic_normal(m.samples)
    crit = an.ks_critical_1pct(m.count)
    rows.append(("identity pushforward KS at 1%", ks < crit, f"D={ks:.4f} < {crit:.4f}"))
    return rows


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

FLAG_KEYS = {
    "case": "run.case",
    "epochs": "train.epochs",
    "seed": "run.seed",
    "out": "run.out",
    "lambda1": "loss.lambda1",
    "lambda2": "loss.lambda2",
    "lambda3": "loss.lambda3",
    "alpha": "loss.alpha",
    "batch_initial": "train.batch_initial",
    "trunk_mode": "network.trunk_mode",
    "latent_sampling": "sampling.latent_sampling",
}


def _add_verbose(p: argparse.ArgumentParser):
    # SUPPRESS keeps a subcommand default from clobbering a global -v
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                   help="log progress to stderr")


def _add_config_flags(p: argparse.ArgumentParser):
    _add_verbose(p)
    p.add_argument("--config", help="key = value file with [sections]; flags override it")
    p.add_argument("--case")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lambda3", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--batch-initial", type=int)
    p.add_argument("--trunk-mode")
    p.add_argument("--latent-sampling")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="youngnet", description="Young-measure potentials for non-convex variational problems")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="train, analyze and export one configuration")
    _add_config_flags(p_run)
    p_run.add_argument("--resume", metavar="CHECKPOINT", help="continue from a training checkpoint of this configuration")
    p_an = sub.add_parser("analyze", help="analyze a stored checkpoint")
    p_an.add_argument("checkpoint")
    _add_config_flags(p_an)
    p_chk = sub.add_parser("check", help="gradient and quadrature self-tests")
    p_chk.add_argument("--seed", type=int, default=0)
    _add_verbose(p_chk)
    return parser


def _resolve(args) -> RunConfig:
    overrides = {key: getattr(args, flag) for flag, key in FLAG_KEYS.items()
                 if getattr(args, flag, None) is not None}
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "check":
            rows = self_check(args.seed)
            width = max(len(r[0]) for r in rows)
            for name, ok, detail in rows:
                print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}")
            return EXIT_OK if all(r[1] for r in rows) else EXIT_NUMERIC
        cfg = _resolve(args)
        if args.command == "run":
            status, out = run(cfg, args.resume)
            print(out)
            return status
        out = analyze(args.checkpoint, cfg, args.out)
        print(out)
        return EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
