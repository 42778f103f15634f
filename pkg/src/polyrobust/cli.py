"""Command-line entry point: ``polyrobust <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import certification as cert_mod
from . import io
from . import synthesis as syn
from .errors import PolyRobustError
from .harness import PRESETS, ExperimentConfig, gen_instance, run_experiment
from .model import (CoEllitopic, ContrastMatrix, EllitopicNuisance, NoNuisance, Sparse,
                    sample_observation)
from .recovery import make_estimator

SYNTH_METHODS = ("auto", "no-nuisance", "ellitopic", "coellitopic", "hg", "ig", "hig")


def _config(args):
    over = {k: v for k, v in (("seed", args.seed), ("n_trials", getattr(args, "trials", None)),
                              ("workers", getattr(args, "workers", None)),
                              ("output_dir", getattr(args, "out_dir", None)))
            if v is not None}
    if args.config:
        with open(args.config) as f:
            d = json.load(f)
        d.update(over)
        return ExperimentConfig.from_dict(d)
    return ExperimentConfig.preset(args.preset, **over)


def _auto_method(inst):
    nz = inst.nuisance
    if isinstance(nz, NoNuisance):
        return "no-nuisance"
    if isinstance(nz, EllitopicNuisance):
        return "ellitopic"
    if isinstance(nz, CoEllitopic):
        return "coellitopic"
    return "hig"


def synthesize(inst, method="auto", kappa=0.25, seed=0, theta1_mode="auto"):
    """Contrast and certificate for ``method`` (see :data:`SYNTH_METHODS`).

    Sparse methods return the full recovery contrast: ``[H, G]`` for ``hg`` and
    ``ig``, and the four role-tagged blocks for ``hig``.
    """
    method = _auto_method(inst) if method == "auto" else method
    if method == "no-nuisance":
        rep = syn.synth_no_nuisance(inst)
        return rep.contrast, rep.certificate
    if method == "ellitopic":
        rep = syn.synth_ellitopic_nuisance(inst)
        return rep.contrast, rep.certificate
    if method == "coellitopic":
        rep = syn.synth_coellitopic(inst, seed=seed)
        return rep.contrast, rep.certificate
    if method not in ("hg", "ig", "hig"):
        raise PolyRobustError(f"unknown method {method!r}")
    tilde = bar = None
    if method in ("hg", "hig"):
        H = syn.synth_h_sparse(inst, kappa=kappa)
        tilde = syn.synth_g_sparse(inst, H, kappa=kappa, theta1_mode=theta1_mode, seed=seed)
        if method == "hg":
            return (ContrastMatrix.concat([H, tilde.contrast], H.threshold),
                    tilde.certificate)
    Hbar = ContrastMatrix(np.eye(inst.m), "h", syn.ig_threshold(inst, inst.m))
    bar = syn.synth_alternative(inst, Hbar, theta1_mode=theta1_mode, seed=seed)
    if method == "ig":
        return ContrastMatrix.concat([Hbar, bar.contrast], Hbar.threshold), bar.certificate
    combined = syn.build_aggregated_contrast(tilde, bar)
    agg, _, _, _ = syn.certify_aggregated_contrast(inst, combined, kappa)
    return combined, agg


def certify(inst, contrast, kappa=0.25):
    """Risk bound of the estimate with ``contrast`` on ``inst``.

    Bounded nuisance: the bounded certificate. Sparse nuisance: role-tagged
    aggregated contrasts get the aggregated bound; otherwise the columns tagged
    ``h`` form ``H``, and the smaller of the admissible-``H`` bound (when ``H``
    is admissible) and the arbitrary-``H`` bound is returned.
    """
    if not isinstance(inst.nuisance, Sparse):
        return cert_mod.certify_bounded(inst, contrast)
    if "h_tilde" in contrast.roles:
        return syn.certify_aggregated_contrast(inst, contrast, kappa)[0]
    thr = contrast.threshold
    h_mask = np.array([r == "h" for r in contrast.roles])
    H = contrast.matrix[:, h_mask]
    G = ContrastMatrix(contrast.matrix[:, ~h_mask], tuple(np.array(contrast.roles)[~h_mask]),
                       thr)
    aux = cert_mod.opt_programs(inst, H, thr)
    best = cert_mod.certify_sparse_alt(inst, contrast, aux)
    if H.shape[1] == inst.n:
        try:
            adm = cert_mod.certify_sparse(inst, G, H, kappa, threshold=thr)
        except PolyRobustError:
            adm = None
        if adm is not None:
            best = cert_mod.certify_aggregated(adm, best)
    return best


def _write(obj, path):
    io.save(obj, path)
    print(f"wrote {path}")


def cmd_make_instance(args):
    cfg = _config(args)
    _write(gen_instance(cfg), args.output)


def cmd_synth(args):
    inst = io.load(args.instance, "instance")
    contrast, cert = synthesize(inst, args.method, args.kappa, args.seed, args.theta1_mode)
    os.makedirs(args.out_dir, exist_ok=True)
    _write(contrast, os.path.join(args.out_dir, "contrast.json"))
    _write(cert, os.path.join(args.out_dir, "certificate.json"))
    print(f"certified bound: {cert.value:.6g}")


def cmd_certify(args):
    inst = io.load(args.instance, "instance")
    contrast = io.load(args.contrast, "contrast")
    cert = certify(inst, contrast, args.kappa)
    if args.output:
        _write(cert, args.output)
    print(f"certified bound: {cert.value:.6g}")


def cmd_recover(args):
    inst = io.load(args.instance, "instance")
    contrast = io.load(args.contrast, "contrast")
    if args.observation:
        omega = io.load_vector(args.observation)
    else:
        x = io.load_vector(args.x_star)
        nu = io.load_vector(args.nu_star) if args.nu_star else None
        omega = sample_observation(inst, x, nu, args.seed)
    out = make_estimator(inst, contrast).estimate(omega)
    d = {"feasible": out.feasible, "objective": out.objective, "x_hat": out.x_hat.tolist(),
         "nu_hat": out.nu_hat.tolist(), "w_hat": out.w_hat.tolist()}
    text = json.dumps(d)
    if args.output:
        with open(args.output, "w") as f:
            f.write(text + "\n")
        print(f"wrote {args.output}")
    else:
        print(text)


def cmd_experiment(args):
    cfg = _config(args)
    if cfg.output_dir is None:
        cfg.output_dir = "results"
    report = run_experiment(cfg)
    for est, s in report.summary().items():
        med = s['error'].get('q50', float('nan'))
        print(f"{est:4s} bound={s['bound']:.4g} median_error={med:.4g} "
              f"outside={s['outside_fraction']:.3f} violations={s['violations']} "
              f"nu_violations={s['nu_violations']} failures={s['failures']}")
    print(f"wrote {cfg.output_dir}/trials.csv and {cfg.output_dir}/summary.json")
    return 0 if not report.violations() else 3


def build_parser():
    p = argparse.ArgumentParser(prog="polyrobust",
                                description="Polyhedral estimates with nuisance: contrast "
                                            "synthesis, risk certificates and recovery.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cfg_args(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("make-instance", help="generate a problem instance")
    cfg_args(sp)
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_make_instance)

    sp = sub.add_parser("synth", help="synthesize a contrast and its certificate")
    sp.add_argument("--instance", required=True)
    sp.add_argument("--method", choices=SYNTH_METHODS, default="auto")
    sp.add_argument("--kappa", type=float, default=0.25)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--theta1-mode", choices=("auto", "full", "range", "zero"), default="auto")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("certify", help="certify the risk of a given contrast")
    sp.add_argument("--instance", required=True)
    sp.add_argument("--contrast", required=True)
    sp.add_argument("--kappa", type=float, default=0.25)
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_certify)

    sp = sub.add_parser("recover", help="run the polyhedral estimate on one observation")
    sp.add_argument("--instance", required=True)
    sp.add_argument("--contrast", required=True)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--observation", help="JSON list (or {'omega': [...]})")
    g.add_argument("--x-star", help="JSON signal; an observation is simulated")
    sp.add_argument("--nu-star")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_recover)

    sp = sub.add_parser("experiment", help="run a seeded Monte-Carlo experiment")
    cfg_args(sp)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--out-dir")
    sp.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (PolyRobustError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
