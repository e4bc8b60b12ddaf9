"""Command-line harness: synth, train, rollout, eval, mz-verify, cost-report,
selftest.

Every subcommand accepts --seed and --out and prints a one-line JSON summary
on stdout (stable key order). Runtime failures exit 1 with a diagnostic JSON
on stderr; unknown flags exit 2 with usage.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=_jsonable)


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x)}")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, default=None, help="output path or directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trajlab", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic trajectory (STMD v1)")
    _add_common(p)
    p.add_argument("--residues", type=int, default=8)
    p.add_argument("--frames", type=int, default=1024)
    p.add_argument("--base-dt", type=float, default=0.01, help="ns between snapshots")
    p.add_argument("--bond-stiffness", type=float, default=50.0)
    p.add_argument("--confinement", type=float, default=0.5)
    p.add_argument("--friction", type=float, default=6.0)

    p = sub.add_parser("train", help="train the denoiser on STMD trajectories")
    _add_common(p)
    p.add_argument("--data", type=str, nargs="+", required=True, help="STMD file(s)")
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--frames-per-sample", type=int, default=8)
    p.add_argument("--model-dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--st-layers", type=int, default=2)
    p.add_argument("--ctx-noise-prob", type=float, default=0.75)
    p.add_argument("--ctx-noise-max", type=float, default=0.1)
    p.add_argument("--loss-csv", type=str, default=None)
    p.add_argument("--log-every", type=int, default=0)

    p = sub.add_parser("rollout", help="autoregressive generation from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--init", type=str, default=None, help="STMD file; frame 0 seeds generation")
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--stride-ns", type=float, default=0.01)
    p.add_argument("--residues", type=int, default=None)
    p.add_argument("--ctx-noise", choices=["resample", "fixed", "off"], default="resample")
    p.add_argument("--ctx-fixed-tau", type=float, default=0.05)
    p.add_argument("--no-cache", action="store_true")

    p = sub.add_parser("eval", help="metric report for a generated vs reference trajectory")
    _add_common(p)
    p.add_argument("--gen", type=str, required=True)
    p.add_argument("--ref", type=str, required=True)
    p.add_argument("--lags", type=int, nargs="+", default=[1, 2, 5, 10, 20])
    p.add_argument("--tica-lags", type=int, nargs="+", default=[1, 5, 10, 20])
    p.add_argument("--d-clash", type=float, default=3.0)
    p.add_argument("--d-break", type=float, default=4.5)
    p.add_argument("--renormalize", action="store_true")
    p.add_argument("--curves-csv", type=str, default=None)

    p = sub.add_parser("mz-verify", help="memory-inflation verification battery")
    _add_common(p)
    p.add_argument("--systems", type=int, default=50)
    p.add_argument("--separability-draws", type=int, default=20)

    p = sub.add_parser("cost-report", help="FLOP and KV-cache sweeps (CSV)")
    _add_common(p)
    p.add_argument("--N", type=int, nargs="+", default=[200])
    p.add_argument("--L", type=int, nargs="+", default=[32])
    p.add_argument("--d", type=int, default=256)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--bytes-per-scalar", type=int, default=4)

    p = sub.add_parser("selftest", help="run the acceptance criteria")
    _add_common(p)
    p.add_argument("--only", type=str, default=None, help="comma-separated criterion numbers")
    return ap


# ---------------------------------------------------------------------------


def cmd_synth(args) -> dict:
    from . import stmdio
    from .synth import SynthConfig, synth_generate

    cfg = SynthConfig(
        n_residues=args.residues,
        base_dt=args.base_dt,
        bond_stiffness=args.bond_stiffness,
        confinement=args.confinement,
        friction=args.friction,
    )
    traj = synth_generate(cfg, args.frames, args.seed)
    out = args.out or f"synth_{args.seed}.stmd"
    stmdio.write_trajectory(out, traj)
    return {
        "command": "synth",
        "out": str(out),
        "frames": traj.n_frames,
        "residues": traj.n_residues,
        "stride_ns": cfg.base_dt,
        "seed": args.seed,
    }


def cmd_train(args) -> dict:
    import torch

    torch.set_num_threads(1)
    from . import checkpoint, stmdio
    from .igso3 import IGSO3Table
    from .model import Denoiser, DenoiserConfig
    from .schedule import NoiseSchedule
    from .training import TrainConfig, train_loop, write_loss_curve

    dataset = [stmdio.read_trajectory(p) for p in args.data]
    sch = NoiseSchedule()
    mcfg = DenoiserConfig(
        model_dim=args.model_dim, heads=args.heads, blocks=args.blocks, st_layers=args.st_layers
    )
    tcfg = TrainConfig(
        steps=args.steps,
        lr=args.lr,
        frames_per_sample=args.frames_per_sample,
        ctx_noise_prob=args.ctx_noise_prob,
        ctx_noise_max=args.ctx_noise_max,
    )
    rng = np.random.default_rng(args.seed)
    model = Denoiser(mcfg, sch).init_for_training(rng)
    model, curve = train_loop(dataset, tcfg, model, rng, sch, IGSO3Table(), log_every=args.log_every)
    out = args.out or "denoiser.ckpt"
    checkpoint.save_params(out, model)
    if args.loss_csv:
        write_loss_curve(args.loss_csv, curve)
    last = curve[-1]
    return {
        "command": "train",
        "out": str(out),
        "steps": len(curve),
        "final_loss_trans": last[1],
        "final_loss_rot": last[2],
        "seed": args.seed,
    }


def _load_model(path):
    import torch

    torch.set_num_threads(1)
    from . import checkpoint

    return checkpoint.load_denoiser(path)


def cmd_rollout(args) -> dict:
    from . import stmdio
    from .igso3 import IGSO3Table
    from .rollout import GenerationError, RolloutConfig, generate

    model = _load_model(args.checkpoint)
    initial = None
    if args.init:
        initial = stmdio.read_trajectory(args.init).frame_sets[0]
    rng = np.random.default_rng(args.seed)
    cfg = RolloutConfig(
        ctx_noise=args.ctx_noise, ctx_fixed_tau=args.ctx_fixed_tau, use_cache=not args.no_cache
    )
    out = args.out or "rollout.stmd"
    try:
        traj, info = generate(
            model,
            initial,
            args.frames,
            args.stride_ns,
            rng,
            n_residues=args.residues,
            table=IGSO3Table(),
            cfg=cfg,
        )
    except GenerationError as err:
        if err.partial_trajectory is not None:
            stmdio.write_trajectory(out, err.partial_trajectory)
        err.info["seed"] = args.seed
        print(_json_line({"error": str(err), "info": err.info}), file=sys.stderr)
        raise SystemExit(1)
    stmdio.write_trajectory(out, traj)
    info["seed"] = args.seed
    sidecar = Path(str(out) + ".json")
    sidecar.write_text(_json_line(info))
    return {"command": "rollout", "out": str(out), **info}


def cmd_eval(args) -> dict:
    from . import stmdio
    from .metrics import (
        PCABasis,
        autocorr_curve,
        coverage,
        rmsd_curve,
        tica_correlation,
        validity,
        vamp2_curve,
    )
    from .se3 import kabsch_align

    gen = stmdio.read_trajectory(args.gen, renormalize=args.renormalize)
    ref = stmdio.read_trajectory(args.ref, renormalize=args.renormalize)
    # align both to the reference's starting frame
    ref_frame = ref.frame_sets[0]
    gen = kabsch_align(gen, ref_frame).trajectory
    ref = kabsch_align(ref, ref_frame).trajectory

    vmask = validity(gen, d_clash=args.d_clash, d_break=args.d_break)
    vref = validity(ref, d_clash=args.d_clash, d_break=args.d_break)
    basis = PCABasis.fit(ref)
    cov = coverage(gen, ref, basis)
    cov_valid = coverage(gen, ref, basis, valid_mask=vmask.valid)
    lags = args.lags
    report = {
        "coverage": cov,
        "coverage_valid": cov_valid,
        "rmsd_curve": {
            "lags": lags,
            "gen": rmsd_curve(gen, lags, basis),
            "ref": rmsd_curve(ref, lags, basis),
        },
        "autocorr_curve": {
            "lags": lags,
            "gen": autocorr_curve(gen, lags, basis),
            "ref": autocorr_curve(ref, lags, basis),
        },
        "vamp2_curve": {
            "lags": lags,
            "gen": vamp2_curve(gen, lags, basis),
            "ref": vamp2_curve(ref, lags, basis),
        },
        "tica": tica_correlation(gen, ref, vmask.valid, lags=args.tica_lags),
        "validity": {
            "gen_ca_valid_pct": vmask.percent_valid,
            "ref_ca_valid_pct": vref.percent_valid,
            "d_clash": args.d_clash,
            "d_break": args.d_break,
            "clash_rate_max_pct": 1.29,
            "break_rate_max_pct": 0.2,
            "clash_defined": vmask.clash_defined,
        },
    }
    out = args.out or "report.json"
    Path(out).write_text(json.dumps(report, indent=2, sort_keys=True, default=_jsonable))
    if args.curves_csv:
        with open(args.curves_csv, "w") as f:
            f.write("lag,rmsd_gen,rmsd_ref,autocorr_gen,autocorr_ref,vamp2_gen,vamp2_ref\n")
            for i, lag in enumerate(lags):
                row = [
                    report["rmsd_curve"]["gen"][i],
                    report["rmsd_curve"]["ref"][i],
                    report["autocorr_curve"]["gen"][i],
                    report["autocorr_curve"]["ref"][i],
                    report["vamp2_curve"]["gen"][i],
                    report["vamp2_curve"]["ref"][i],
                ]
                f.write(",".join([str(lag)] + ["" if v is None else f"{v:.8g}" for v in row]) + "\n")
    return {
        "command": "eval",
        "out": str(out),
        "jsd": cov["jsd"],
        "recall": cov["recall"],
        "precision": cov["precision"],
        "f1": cov["f1"],
        "ca_valid_pct": vmask.percent_valid,
        "seed": args.seed,
    }


def cmd_mz_verify(args) -> dict:
    from . import mz

    rng = np.random.default_rng(args.seed)
    worst_rel = 0.0
    residuals = []
    for i in range(args.systems):
        sys_i = mz.random_stable_system(
            rng, int(rng.integers(1, 5)), int(rng.integers(2, 9)), with_kernels=bool(i % 2)
        )
        rel = 0.0
        for _ in range(20):
            p = complex(rng.uniform(0.2, 3.0), rng.uniform(-2.0, 2.0))
            a = mz.inflate_kernel(sys_i, p)
            b = mz.schur_kernel_oracle(sys_i, p)
            rel = max(rel, float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-30)))
        residuals.append(rel)
        worst_rel = max(worst_rel, rel)

    # hand system: K(t) = exp(-t)
    hand = mz.BlockSystem(np.array([[0.0]]), np.array([[1.0]]), np.array([[1.0]]), np.array([[-1.0]]))
    t = np.linspace(0.0, 5.0, 101)
    k_err = float(np.max(np.abs(mz.kernel_time_closed_form(hand, t)[:, 0, 0] - np.exp(-t))))

    # convergence order of GLE vs full under dt halving
    errs = []
    for dt in (2e-3, 1e-3):
        n = int(round(5.0 / dt))
        ks = mz.kernel_time_closed_form(hand, np.arange(n + 1) * dt)
        _, s_full, _ = mz.simulate_full(hand, np.array([1.0]), np.array([0.0]), 5.0, dt)
        _, s_gle = mz.simulate_gle(hand.omega_ss, ks, np.array([1.0]), 5.0, dt)
        errs.append(float(np.max(np.abs(s_gle[:, 0] - s_full[:, 0]))))
    order_ratio = errs[0] / errs[1]

    # separability: rank-1 vs generic coupled systems
    sep_ratios = []
    t_sep = np.linspace(0.0, 4.0, 81)
    for _ in range(args.separability_draws):
        sys_i = mz.random_stable_system(rng, 3, 6)
        svals, _ = mz.separability_test(mz.kernel_time_closed_form(sys_i, t_sep))
        sep_ratios.append(float(svals[1] / svals[0]))
    u = rng.standard_normal((2, 2))
    rank1 = u[None, :, :] * np.exp(-t_sep)[:, None, None]
    svals1, verdict1 = mz.separability_test(rank1)
    out = {
        "command": "mz-verify",
        "systems": args.systems,
        "worst_inflation_residual": worst_rel,
        "hand_kernel_max_err": k_err,
        "gle_convergence_ratio": order_ratio,
        "separability_min_ratio_coupled": min(sep_ratios),
        "separability_rank1_ratio": float(svals1[1] / svals1[0] if svals1[0] > 0 else 0.0),
        "rank1_verdict": verdict1,
        "seed": args.seed,
    }
    if args.out:
        Path(args.out).write_text(json.dumps({**out, "per_system_residuals": residuals}, indent=2, sort_keys=True))
    return out


def cmd_cost_report(args) -> dict:
    from . import costmodel

    rows = costmodel.sweep_rows(args.N, args.L, args.d, args.layers, args.bytes_per_scalar)
    out = args.out or "cost_report.csv"
    cols = list(rows[0].keys())
    with open(out, "w") as f:
        f.write(",".join(cols) + "\n")
        for r in rows:
            f.write(",".join(str(r[c]) for c in cols) + "\n")
    summary = {"command": "cost-report", "out": str(out), "rows": len(rows), "seed": args.seed}
    if len(rows) == 1:
        summary["kv_singles_bytes"] = rows[0]["kv_singles_bytes"]
        summary["kv_singles_plus_pairs_bytes"] = rows[0]["kv_singles_plus_pairs_bytes"]
    return summary


def cmd_selftest(args) -> dict:
    from . import acceptance

    only = None
    if args.only:
        only = {int(c) for c in args.only.split(",")}
    results = acceptance.run_all(seed=args.seed, only=only, verbose=True)
    n_pass = sum(r.passed for r in results)
    summary = {
        "command": "selftest",
        "criteria_run": len(results),
        "criteria_passed": n_pass,
        "all_passed": n_pass == len(results),
        "seed": args.seed,
    }
    if args.out:
        Path(args.out).write_text(
            json.dumps(
                {**summary, "results": [r.as_dict() for r in results]},
                indent=2,
                sort_keys=True,
                default=_jsonable,
            )
        )
    if n_pass != len(results):
        print(_json_line(summary))
        raise SystemExit(1)
    return summary


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "eval": cmd_eval,
    "mz-verify": cmd_mz_verify,
    "cost-report": cmd_cost_report,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    t0 = time.perf_counter()
    try:
        summary = COMMANDS[args.command](args)
    except SystemExit:
        raise
    except Exception as err:  # runtime failure -> diagnostic JSON on stderr
        print(_json_line({"error": str(err), "type": type(err).__name__, "command": args.command}), file=sys.stderr)
        return 1
    summary["elapsed_s"] = round(time.perf_counter() - t0, 3)
    print(_json_line(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
