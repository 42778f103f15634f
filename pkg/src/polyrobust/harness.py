"""Seeded Monte-Carlo experiments comparing three sparse-nuisance estimators.

``HG`` uses an admissible ``H`` with a synthesized ``G``; ``IG`` uses
``H = I_m`` with the alternative synthesis; ``HIG`` aggregates all four
blocks in one recovery program. Every trial records whether the noise lies in
the confidence set of each estimator, so certified bounds can be checked
against the empirical errors.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import certification as cert_mod
from . import synthesis as syn
from .ellitope import BasicEllitope, euclidean_ball, rank_one_box
from .errors import DomainError, PolyRobustError
from .model import ContrastMatrix, ProblemInstance, Sparse, in_confidence_set
from .recovery import L1Estimator

log = logging.getLogger(__name__)

ESTIMATORS = ("HG", "IG", "HIG")
PRESETS = {
    "desk": dict(m=64, n=64, p=16, q=16, s=4),
    "paper": dict(m=256, n=256, p=32, q=32, s=8),
    "tiny": dict(m=16, n=16, p=4, q=4, s=1),
}
BOUND_ATOL = 1e-6


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Parameters of one experiment.

    ``recipe`` is ``smooth`` (Gaussian ``A`` with ``A'A = I``, ``N = I``,
    ``B = I`` and the smooth-signal set) or ``custom`` (matrices read from the
    JSON file ``custom_path`` with keys ``A``, ``N`` and optionally ``B``).
    """

    m: int = 64
    n: int = 64
    p: int = 16
    q: int = 16
    sigma: float = 0.1
    epsilon: float = 0.05
    s: int = 4
    kappa: float = 0.25
    n_trials: int = 100
    seed: int = 0
    recipe: str = "smooth"
    custom_path: str = None
    estimators: tuple = ESTIMATORS
    nuisance_amplitude: float = None
    signal_sampler: str = "auto"
    smooth_bounds: tuple = (4.0, 1.0, 4.0)
    theta1_mode: str = "auto"
    workers: int = 1
    output_dir: str = None

    def __post_init__(self):
        self.estimators = tuple(self.estimators)
        self.smooth_bounds = tuple(float(b) for b in self.smooth_bounds)
        self.validate()

    @property
    def amplitude(self):
        return 10.0 * self.sigma if self.nuisance_amplitude is None else self.nuisance_amplitude

    def validate(self):
        for k in ("m", "n", "p", "q", "n_trials"):
            if int(getattr(self, k)) != getattr(self, k) or getattr(self, k) < 1:
                raise DomainError(f"{k} must be a positive integer")
        if not 0 < self.epsilon < 1:
            raise DomainError("epsilon must lie in (0, 1)")
        if not self.sigma > 0:
            raise DomainError("sigma must be positive")
        if int(self.s) != self.s or not (1 <= self.s <= self.n):
            raise DomainError("s must be an integer in [1, n]")
        if not 0 < self.kappa < 0.5:
            raise DomainError("kappa must lie in (0, 1/2)")
        if self.recipe not in ("smooth", "custom"):
            raise DomainError(f"unknown recipe {self.recipe!r}")
        if self.recipe == "smooth" and (self.n != self.m or self.q != self.p):
            raise DomainError("the smooth recipe uses N = I_m and B = I_p")
        if self.recipe == "custom" and not self.custom_path:
            raise DomainError("the custom recipe needs custom_path")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad or not self.estimators:
            raise DomainError(f"estimators must be a nonempty subset of {ESTIMATORS}")
        if "HIG" in self.estimators and not {"HG", "IG"} <= set(self.estimators):
            raise DomainError("HIG needs both HG and IG")
        if self.signal_sampler not in ("auto", "box", "hit-and-run"):
            raise DomainError(f"unknown signal sampler {self.signal_sampler!r}")
        if self.workers < 1:
            raise DomainError("workers must be positive")

    @classmethod
    def preset(cls, name, **overrides):
        if name not in PRESETS:
            raise DomainError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**dict(PRESETS[name], **overrides))

    def to_dict(self):
        d = asdict(self)
        d["estimators"] = list(self.estimators)
        d["smooth_bounds"] = list(self.smooth_bounds)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        preset = d.pop("preset", None)
        if preset is not None:
            return cls.preset(preset, **d)
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# instance construction
# ---------------------------------------------------------------------------

def smoothness_rows(p):
    """Rows of ``P``: ``z_1``, ``(z_2 - z_1)/h`` and second differences over ``h^2``."""
    if p < 3:
        raise DomainError("the smooth-signal set needs p >= 3")
    h = 2.0 * math.pi / p
    P = np.zeros((p, p))
    P[0, 0] = 1.0
    P[1, :2] = np.array([-1.0, 1.0]) / h
    for i in range(2, p):
        P[i, i - 2:i + 1] = np.array([1.0, -2.0, 1.0]) / h ** 2
    return P


def build_smoothness_ellitope(p, f0_bound=4.0, df0_bound=1.0, d2f_bound=4.0):
    """``{z : |z_1| <= f0, |z_2 - z_1|/h <= df0, |second difference|/h^2 <= d2f}``.

    ``z`` samples a function on the grid ``h, 2h, ..., p h`` with ``h = 2 pi / p``.
    """
    P = smoothness_rows(p)
    bounds = np.r_[f0_bound, df0_bound, np.full(p - 2, d2f_bound)]
    return rank_one_box(P, bounds)


def _orthonormal_gaussian(m, p, rng):
    Q, R = np.linalg.qr(rng.standard_normal((m, p)))
    return Q * np.sign(np.where(np.diag(R) == 0, 1.0, np.diag(R)))


def gen_instance(cfg, seed=None):
    """Problem instance of the experiment, deterministic in ``seed``."""
    seed = cfg.seed if seed is None else seed
    if cfg.recipe == "custom":
        with open(cfg.custom_path) as f:
            d = json.load(f)
        A, N = np.asarray(d["A"], float), np.asarray(d["N"], float)
        B = np.asarray(d.get("B", np.eye(A.shape[1])), float)
        X = (BasicEllitope.from_dict(d["X"]) if "X" in d
             else build_smoothness_ellitope(A.shape[1], *cfg.smooth_bounds))
    else:
        rng = np.random.default_rng(seed)
        A = _orthonormal_gaussian(cfg.m, cfg.p, rng)
        N, B = np.eye(cfg.m), np.eye(cfg.p)
        X = build_smoothness_ellitope(cfg.p, *cfg.smooth_bounds)
    return ProblemInstance(A=A, B=B, X=X, Bstar=euclidean_ball(B.shape[0]),
                           nuisance=Sparse(cfg.s), N=N, sigma=cfg.sigma, epsilon=cfg.epsilon)


def gen_sparse_nuisance(n, s, amplitude, seed):
    """``s`` uniformly placed entries ``+-amplitude (1 + U[0, 1])``."""
    if not 0 <= s <= n:
        raise DomainError("s must lie in [0, n]")
    rng = np.random.default_rng(seed)
    nu = np.zeros(n)
    idx = rng.choice(n, size=s, replace=False)
    nu[idx] = rng.choice([-1.0, 1.0], size=s) * amplitude * (1.0 + rng.random(s))
    return nu


def _box_rows(X):
    """``(P, b)`` when ``X = {|P x| <= b}`` with square invertible ``P``, else ``None``."""
    if X.n_forms != X.dim or type(X.tset).__name__ != "Box":
        return None
    rows = []
    for T in X.forms:
        w, V = np.linalg.eigh(T)
        if np.sum(w > 1e-12 * max(w[-1], 1e-300)) != 1:
            return None
        rows.append(V[:, -1] * math.sqrt(w[-1]))
    P = np.array(rows)
    if np.linalg.matrix_rank(P) < X.dim:
        return None
    return P, np.sqrt(np.asarray(X.tset.upper, dtype=float))


def _chord(X, x, d):
    """Largest ``t`` with ``gauge(x + t d) <= 1`` (bisection, ``x`` inside)."""
    hi = 1.0
    while X.gauge(x + hi * d) <= 1.0 and hi < 1e12:
        hi *= 2.0
    lo = 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if X.gauge(x + mid * d) <= 1.0:
            lo = mid
        else:
            hi = mid
    return lo


def sample_signal(X, seed, method="auto", steps=200):
    """Random point of ``X``.

    ``box`` draws ``u`` uniformly in the box and returns ``P^-1 u`` (uniform on
    ``X``; needs ``X = {|P x| <= b}`` with invertible ``P``). ``hit-and-run``
    runs ``steps`` hit-and-run moves from the origin. ``auto`` picks ``box``
    when available.
    """
    rng = np.random.default_rng(seed)
    pb = _box_rows(X) if method in ("auto", "box") else None
    if method == "box" and pb is None:
        raise DomainError("box sampling needs a set {|P x| <= b} with invertible P")
    if pb is not None:
        P, b = pb
        return np.linalg.solve(P, b * rng.uniform(-1.0, 1.0, size=b.size))
    x = np.zeros(X.dim)
    for _ in range(steps):
        d = rng.standard_normal(X.dim)
        d /= np.linalg.norm(d)
        t_hi, t_lo = _chord(X, x, d), -_chord(X, x, -d)
        x = x + rng.uniform(t_lo, t_hi) * d
    return x


# ---------------------------------------------------------------------------
# synthesis phase
# ---------------------------------------------------------------------------

@dataclass
class EstimatorSpec:
    """Everything a trial needs to run and check one estimator."""

    name: str
    contrast: ContrastMatrix
    threshold: float
    bound: float
    nu_bounds: dict = field(default_factory=dict)


def _min_bound(*certs):
    return float(min(c.value for c in certs if c is not None))


def synthesize_all(cfg, inst):
    """Contrasts, thresholds and certified bounds for the selected estimators."""
    specs, info, timing = {}, {}, {}
    s = cfg.s
    t0 = time.perf_counter()
    if "HG" in cfg.estimators:
        H = syn.synth_h_sparse(inst, kappa=cfg.kappa)
        timing["synth_H"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        tilde = syn.synth_g_sparse(inst, H, kappa=cfg.kappa, theta1_mode=cfg.theta1_mode,
                                   seed=cfg.seed)
        recert = cert_mod.certify_sparse(inst, tilde.contrast, H.matrix, cfg.kappa,
                                         threshold=H.threshold)
        timing["synth_G_tilde"] = time.perf_counter() - t0
        rho_H = tilde.extras["rho_H"]
        specs["HG"] = EstimatorSpec(
            "HG", ContrastMatrix.concat([H, tilde.contrast], H.threshold), H.threshold,
            _min_bound(tilde.certificate, recert),
            {"q1": 2 * s * rho_H, "q2": math.sqrt(2 * s) * rho_H, "qinf": rho_H})
        info["HG"] = {"synthesized": tilde.certificate.value, "recertified": recert.value,
                      "rho_H": rho_H, "n_G": tilde.contrast.ncols}
    if "IG" in cfg.estimators:
        t0 = time.perf_counter()
        Hbar = ContrastMatrix(np.eye(inst.m), "h", syn.ig_threshold(inst, inst.m))
        bar = syn.synth_alternative(inst, Hbar, theta1_mode=cfg.theta1_mode, seed=cfg.seed)
        aux = bar.extras["aux"]
        D = ContrastMatrix.concat([Hbar, bar.contrast], Hbar.threshold)
        recert = cert_mod.certify_sparse_alt(inst, D, aux)
        timing["synth_G_bar"] = time.perf_counter() - t0
        specs["IG"] = EstimatorSpec("IG", D, Hbar.threshold,
                                    _min_bound(bar.certificate, recert),
                                    {"opt_inf": aux.opt_inf, "opt2": aux.opt2})
        info["IG"] = {"synthesized": bar.certificate.value, "recertified": recert.value,
                      "opt_inf": aux.opt_inf, "opt2": aux.opt2, "n_G": bar.contrast.ncols}
    if "HIG" in cfg.estimators:
        t0 = time.perf_counter()
        combined = syn.build_aggregated_contrast(tilde, bar)
        agg, ca, cb, aux_agg = syn.certify_aggregated_contrast(inst, combined, cfg.kappa)
        timing["certify_HIG"] = time.perf_counter() - t0
        rho_agg = ca.scalars.get("rho_H")
        nu_b = {"opt_inf": aux_agg.opt_inf, "opt2": aux_agg.opt2}
        if rho_agg is not None:
            nu_b.update(q1=2 * s * rho_agg, q2=math.sqrt(2 * s) * rho_agg, qinf=rho_agg)
        specs["HIG"] = EstimatorSpec("HIG", combined, combined.threshold, float(agg.value), nu_b)
        info["HIG"] = {"bound_a": ca.value, "bound_b": cb.value, "branch": agg.branch,
                       "opt_inf": aux_agg.opt_inf, "opt2": aux_agg.opt2}
    return specs, info, timing


# ---------------------------------------------------------------------------
# trials
# ---------------------------------------------------------------------------

class TrialRunner:
    """Compiles one l1 estimator per spec and runs seeded trials."""

    def __init__(self, cfg, inst, specs):
        self.cfg, self.inst, self.specs = cfg, inst, specs
        self.estimators = {k: L1Estimator(inst, sp.contrast, sp.threshold)
                           for k, sp in specs.items()}

    def run(self, trial, seed):
        cfg, inst = self.cfg, self.inst
        ss = np.random.SeedSequence(seed)
        s_sig, s_nu, s_xi = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
        x_star = sample_signal(inst.X, s_sig, cfg.signal_sampler)
        nu_star = gen_sparse_nuisance(inst.n, cfg.s, cfg.amplitude, s_nu)
        xi = inst.sigma * np.random.default_rng(s_xi).standard_normal(inst.m)
        omega = inst.A @ x_star + inst.N @ nu_star + xi
        rows = []
        for name, sp in self.specs.items():
            row = {"trial": trial, "seed": seed, "estimator": name,
                   "x_norm": float(np.linalg.norm(x_star)), "bound": sp.bound,
                   "in_confidence_set": bool(in_confidence_set(sp.contrast, xi, sp.threshold))}
            t0 = time.perf_counter()
            try:
                out = self.estimators[name].estimate(omega)
            except PolyRobustError as exc:
                row.update(status=f"error: {exc}", feasible=False)
                rows.append(row)
                continue
            row["solve_time"] = time.perf_counter() - t0
            row["feasible"] = out.feasible
            row["status"] = "ok" if out.feasible else "infeasible"
            if out.feasible:
                z = out.nu_hat - nu_star
                row.update(
                    error=float(cert_mod.error_norm(inst, inst.B @ (out.x_hat - x_star))),
                    nu_error_1=float(np.abs(z).sum()),
                    nu_error_2=float(np.linalg.norm(z)),
                    nu_error_inf=float(np.max(np.abs(z), initial=0.0)),
                    nu_l1_hat=float(np.abs(out.nu_hat).sum()),
                    nu_l1_star=float(np.abs(nu_star).sum()))
            rows.append(row)
        return rows


_WORKER = None


def _init_worker(cfg, inst, specs):
    global _WORKER
    _WORKER = TrialRunner(cfg, inst, specs)


def _run_chunk(items):
    return [r for t, sd in items for r in _WORKER.run(t, sd)]


def trial_seeds(seed, n_trials):
    ss = np.random.SeedSequence([int(seed), 7919])
    return [int(c.generate_state(1)[0]) for c in ss.spawn(n_trials)]


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

CSV_FIELDS = ("trial", "seed", "estimator", "status", "feasible", "in_confidence_set", "error",
              "bound", "x_norm", "nu_error_1", "nu_error_2", "nu_error_inf", "nu_l1_hat",
              "nu_l1_star", "solve_time")


def _within(value, bound):
    return value <= bound + BOUND_ATOL * (1.0 + abs(bound))


@dataclass
class ExperimentReport:
    config: dict
    records: list
    bounds: dict
    nu_bounds: dict
    synthesis: dict
    timings: dict

    def rows(self, estimator):
        return [r for r in self.records if r["estimator"] == estimator]

    def violations(self, estimator=None):
        """Confidence-set trials whose error exceeds the certified bound."""
        out = []
        for r in self.records:
            if estimator is not None and r["estimator"] != estimator:
                continue
            if not r["in_confidence_set"]:
                continue
            if not r.get("feasible") or not _within(r["error"], r["bound"]):
                out.append(r)
        return out

    def nu_violations(self, estimator=None):
        """Confidence-set trials breaking a nuisance-side bound, as ``(row, key)``."""
        keys = {"q1": "nu_error_1", "q2": "nu_error_2", "qinf": "nu_error_inf",
                "opt_inf": "nu_error_inf", "opt2": "nu_error_2"}
        out = []
        for r in self.records:
            if estimator is not None and r["estimator"] != estimator:
                continue
            if not (r["in_confidence_set"] and r.get("feasible")):
                continue
            for k, b in self.nu_bounds.get(r["estimator"], {}).items():
                if not _within(r[keys[k]], b):
                    out.append((r, k))
        return out

    def outside_fraction(self, estimator):
        rows = self.rows(estimator)
        return sum(not r["in_confidence_set"] for r in rows) / max(len(rows), 1)

    def summary(self):
        out = {}
        for est in self.bounds:
            errs = np.array([r["error"] for r in self.rows(est) if r.get("feasible")])
            rel = np.array([r["error"] / r["x_norm"] for r in self.rows(est)
                            if r.get("feasible") and r["x_norm"] > 0])
            q = (lambda a: {f"q{int(p * 100)}": float(np.quantile(a, p))
                            for p in (0.1, 0.5, 0.9)} if a.size else {})
            out[est] = {"bound": self.bounds[est], "error": q(errs), "relative_error": q(rel),
                        "max_error": float(errs.max()) if errs.size else math.nan,
                        "outside_fraction": self.outside_fraction(est),
                        "violations": len(self.violations(est)),
                        "nu_violations": len(self.nu_violations(est)),
                        "failures": sum(not r.get("feasible") for r in self.rows(est))}
        return out

    def to_json(self, path=None):
        d = {"config": self.config, "bounds": self.bounds, "nu_bounds": self.nu_bounds,
             "synthesis": self.synthesis, "timings": self.timings, "summary": self.summary()}
        text = json.dumps(d, indent=2, sort_keys=True, default=float)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=CSV_FIELDS, extrasaction="ignore")
            w.writeheader()
            for r in self.records:
                w.writerow({k: r.get(k, "") for k in CSV_FIELDS})


def run_experiment(cfg, inst=None):
    """Synthesize all contrasts once, then run ``cfg.n_trials`` seeded trials.

    Synthesis failures propagate; per-trial solver failures are recorded in
    the ``status`` column.
    """
    timings = {}
    t0 = time.perf_counter()
    inst = gen_instance(cfg) if inst is None else inst
    timings["instance"] = time.perf_counter() - t0
    specs, info, syn_t = synthesize_all(cfg, inst)
    timings.update(syn_t)
    log.info("bounds: %s", {k: sp.bound for k, sp in specs.items()})
    seeds = trial_seeds(cfg.seed, cfg.n_trials)
    items = list(enumerate(seeds))
    t0 = time.perf_counter()
    if cfg.workers > 1:
        chunks = [items[i::cfg.workers] for i in range(cfg.workers)]
        with ProcessPoolExecutor(cfg.workers, initializer=_init_worker,
                                 initargs=(cfg, inst, specs)) as ex:
            records = [r for part in ex.map(_run_chunk, chunks) for r in part]
    else:
        runner = TrialRunner(cfg, inst, specs)
        records = [r for t, sd in items for r in runner.run(t, sd)]
    records.sort(key=lambda r: (r["trial"], ESTIMATORS.index(r["estimator"])))
    timings["trials"] = time.perf_counter() - t0
    report = ExperimentReport(cfg.to_dict(), records, {k: sp.bound for k, sp in specs.items()},
                              {k: sp.nu_bounds for k, sp in specs.items()}, info, timings)
    if cfg.output_dir:
        os.makedirs(cfg.output_dir, exist_ok=True)
        report.to_csv(os.path.join(cfg.output_dir, "trials.csv"))
        report.to_json(os.path.join(cfg.output_dir, "summary.json"))
    return report
