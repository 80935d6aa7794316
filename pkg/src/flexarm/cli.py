"""``flexarm`` command line: modes, simulate, compare, train, uncertainty, lyapunov."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import harness
from .config import ExperimentConfig
from .errors import FlexArmError, ValidationError


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if getattr(args, "episodes", None) is not None:
        cfg = cfg.with_overrides(sac__training_episodes=args.episodes)
    return cfg


def _out(args, cfg) -> Path:
    out = Path(args.out or cfg.data["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.yaml").write_text(cfg.dump())
    return out


def do_modes(args):
    cfg = _load(args)
    rep = harness.cmd_modes(cfg, _out(args, cfg))
    print("mode  beta (1/m)        beta*L")
    for i, (b, bl) in enumerate(zip(rep["beta"], rep["beta_L"]), 1):
        print(f"{i:>4}  {b:.10f}  {bl:.10f}")
    print(f"max |det| residual       {rep['max_det_residual']:.3e}")
    print(f"max boundary residual    {rep['max_bc_residual']:.3e}")
    print(f"max orthonormality error {rep['max_orthonormality_error']:.3e}")


def do_simulate(args):
    cfg = _load(args)
    m = harness.cmd_simulate(cfg, _out(args, cfg), args.checkpoint)
    print(f"angular RMSE        {m.angular_rmse_deg:.6g} deg")
    print(f"tip velocity RMSE   {m.tip_velocity_rmse:.6g} m/s")
    print(f"tip deflection peak {m.tip_deflection_peak:.6g} m")
    print(f"torque peak         {m.torque_peak:.6g} N m")
    print(f"config {m.config_hash} seed {m.seed}")


def do_compare(args):
    cfg = _load(args)
    s = harness.cmd_compare(cfg, _out(args, cfg), args.checkpoint)
    for arm, v in s["arms"].items():
        print(f"{arm:8} tip velocity RMSE {v['tip_velocity_rmse']:.6g} m/s  angular RMSE {v['angular_rmse_deg']:.6g} deg")
    print(f"suite: planner better on {100 * s['suite_fraction_drl_better']:.0f}% of {s['suite_pairs']} pairs, "
          f"median reduction {s['suite_median_reduction']:.3g}x, reach rate {100 * s['suite_reach_rate']:.0f}%")
    print(f"config {s['config_hash']} seed {s['seed']}")


def do_train(args):
    from .sac import format_train_log, train

    cfg = _load(args)
    out = _out(args, cfg)
    sac_cfg = cfg.sac_config()
    t0 = time.time()

    def progress(st, row):
        if st.episode % args.log_every == 0 or st.episode == sac_cfg.training_episodes:
            h = np.array(st.history)[-100:]
            print(f"episode {st.episode:>5}/{sac_cfg.training_episodes} steps {st.total_steps:>7} "
                  f"avg return {h[:, 2].mean():9.2f} reach {h[:, 3].mean():.2f} fail {h[:, 4].mean():.2f} "
                  f"[{time.time() - t0:.0f} s]", flush=True)

    st = train(sac_cfg, out, resume=args.checkpoint, params=cfg.beam_params(), gains=cfg.pde_gains(),
               model_kwargs=harness.model_kwargs(cfg), progress=progress,
               extra_meta={"config_hash": cfg.hash, "seed": cfg.data["seed"]})
    (out / "train_log.csv").write_text(format_train_log(st.history))
    print(f"checkpoint {out / 'checkpoint.ckpt'}")


def do_uncertainty(args):
    cfg = _load(args)
    cells = harness.cmd_uncertainty(cfg, _out(args, cfg))
    for c in cells:
        print(f"{c['level_pct']:+4d}%  angular RMSE {c['angular_rmse_deg']:.6g} deg  {c['status']}")


def do_lyapunov(args):
    cfg = _load(args)
    traces = harness.cmd_lyapunov(cfg, _out(args, cfg))
    bad = 0
    for tr in traces:
        bad += tr.violations
        print(f"step to {tr.target_deg:g} deg: lambda {tr.lam:.4g} 1/s, violations {tr.violations}, "
              f"final |e| {abs(tr.final_error):.3e} rad")
    if bad:
        print(f"{bad} samples exceed the certified bound", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flexarm", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML experiment config (defaults used when omitted)")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--out", metavar="DIR", help="output directory (created if missing)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, helptext in (
        ("modes", do_modes, "eigenvalues, boundary residuals and orthonormality of the modal basis"),
        ("simulate", do_simulate, "run the configured schedule, write trajectory CSV and metrics"),
        ("compare", do_compare, "PDE+DRL vs PDE+CPT vs PID+CPT plus the evaluation suite"),
        ("train", do_train, "train the SAC planner"),
        ("uncertainty", do_uncertainty, "angular RMSE under controller-model parameter errors"),
        ("lyapunov", do_lyapunov, "V(t) against the certified exponential bound"),
    ):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.set_defaults(func=fn)
        if name in ("simulate", "compare", "train"):
            sp.add_argument("--checkpoint", metavar="PATH",
                            help="planner checkpoint (train: resume from it)")
        if name == "train":
            sp.add_argument("--episodes", type=int, metavar="N", help="override training_episodes")
            sp.add_argument("--log-every", type=int, default=25, metavar="N")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return int(args.func(args) or 0)
    except FlexArmError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return 7


if __name__ == "__main__":
    sys.exit(main())
