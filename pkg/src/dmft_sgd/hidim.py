"""Finite-(n, d) dynamics: multi-pass SGD, SME, gradient flow, one-pass SGD.

All engines record the same coordinate-separable observables on the
epoch-rescaled time grid.  ``run_sgd``/``run_sme``/``run_gradient_flow`` take
one explicit dataset shared read-only across their trials (trials then differ
only in the algorithmic randomness); ``simulate`` is the top-level driver
that redraws the dataset per trial, which is what trial averaging against the
deterministic kernel predictions needs.  Both use the same per-trial seed
layout, so different engines run on identical per-trial datasets.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import model as mdl
from .errors import DivergenceError, InvalidInputError
from .grid import TimeGrid
from .sampling import derive_seeds, derived_seed, rng_from
from .traces import ObservableTrace, from_trials

DIVERGENCE_BOUND = 1e6
GF_CONVERGENCE_TOL = 1e-6


@dataclass
class SimConfig:
    """Finite-size instance: dimensions, batch scaling, trials, and grid."""

    n: int
    d: int
    grid: TimeGrid
    alpha: float = 0.0
    kappa: int = 1
    trials: int = 1
    seed: int = 0
    data_dist: str = "gaussian"
    gf_substeps: int = 4  # gradient-flow Euler step = delta / gf_substeps
    thresholds: tuple = (1.0,)
    threads: Optional[int] = None

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise InvalidInputError("n and d must be >= 1")
        if not (0.0 <= self.alpha < 1.0):
            raise InvalidInputError("alpha must lie in [0, 1)")
        if not (1 <= self.kappa <= self.n):
            raise InvalidInputError("kappa must lie in [1, n]")
        if self.trials < 1:
            raise InvalidInputError("trials must be >= 1")
        if self.data_dist not in ("gaussian", "rademacher"):
            raise InvalidInputError(f"unknown data_dist {self.data_dist!r}")

    def n_threads(self):
        env = os.environ.get("DMFT_SGD_THREADS")
        if env:
            return max(1, int(env))
        if self.threads:
            return max(1, int(self.threads))
        return min(self.trials, os.cpu_count() or 1)


def _draw_x(rng, n, d, data_dist):
    if data_dist == "gaussian":
        return rng.standard_normal((n, d)) / np.sqrt(d)
    return (2.0 * rng.integers(0, 2, size=(n, d)) - 1.0) / np.sqrt(d)


def generate_dataset(config: SimConfig, spec, seed):
    """Draw (X, theta_star, theta0, eps, y) for one instance.

    X has iid entries of variance 1/d; rows of (theta0, theta_star) are iid
    from the initialization law; labels follow the teacher map.
    """
    rng = rng_from(seed)
    x = _draw_x(rng, config.n, config.d, config.data_dist)
    theta0, theta_star = spec.init_law.sample(rng, size=config.d)
    eps = spec.noise_law.sample(rng, config.n)
    y = mdl.labels(spec, x @ theta_star, eps)
    return x, theta_star, theta0, eps, y


def _observables(theta, theta_star, x, y, spec, thresholds):
    d = theta.shape[0]
    xi = x @ theta
    overlap = theta.T @ theta_star / d
    self_overlap = theta.T @ theta / d
    loss = float(np.mean(spec.loss.value(spec.activation.value(xi), y)))
    norms = np.linalg.norm(xi, axis=1)
    cdf = np.array([np.mean(norms <= c) for c in thresholds])
    return overlap, self_overlap, loss, cdf


def _guard(theta, step):
    if not np.all(np.isfinite(theta)) or np.sum(theta**2) / theta.shape[0] > DIVERGENCE_BOUND:
        raise DivergenceError(f"iterate diverged at step {step}", step=step)


class _Recorder:
    def __init__(self, config, spec, x, y, theta_star):
        self.config, self.spec = config, spec
        self.x, self.y, self.theta_star = x, y, theta_star
        self.overlap, self.self_overlap, self.loss, self.cdf = [], [], [], []

    def record(self, theta):
        o, s, l, c = _observables(theta, self.theta_star, self.x, self.y,
                                  self.spec, self.config.thresholds)
        self.overlap.append(o)
        self.self_overlap.append(s)
        self.loss.append(l)
        self.cdf.append(c)

    def arrays(self):
        return {
            "overlap": np.array(self.overlap),
            "self_overlap": np.array(self.self_overlap),
            "train_loss": np.array(self.loss),
            "xi_cdf": np.array(self.cdf),
        }


def _sgd_trial(x, y, theta_star, eps, theta0, config, spec, seed):
    """ceil(T n^{1-alpha}) updates with uniform without-replacement batches and
    learning rate eta^j = n^alpha eta_bar(j n^{alpha-1}); observables recorded
    at theta^{floor(t n^{1-alpha})} for grid times t."""
    grid = config.grid
    n = config.n
    steps_per_unit = n ** (1.0 - config.alpha)
    total_steps = math.ceil(grid.T * steps_per_unit)
    record_at = np.floor(grid.times * steps_per_unit).astype(int)
    rng = rng_from(seed)
    theta = theta0.copy()
    rec = _Recorder(config, spec, x, y, theta_star)
    next_rec = 0
    for j in range(total_steps + 1):
        while next_rec < len(record_at) and record_at[next_rec] == j:
            rec.record(theta)
            next_rec += 1
        if j == total_steps:
            break
        batch = rng.choice(n, size=config.kappa, replace=False)
        xb = x[batch]
        fb = mdl.f_batch(spec, xb @ theta, xb @ theta_star, eps[batch])
        eta_j = n**config.alpha * spec.eta(j * n ** (config.alpha - 1.0))
        theta = theta - eta_j * (xb.T @ fb / config.kappa + spec.regularizer.g(theta) / n)
        _guard(theta, j)
    while next_rec < len(record_at):
        rec.record(theta)
        next_rec += 1
    return rec.arrays()


def _sme_trial(x, y, theta_star, eps, theta0, config, spec, seed):
    """Gaussian-driver discrete dynamics with step delta (the SME integrator)."""
    grid = config.grid
    n = config.n
    delta, kap = grid.delta, spec.kappa_bar
    eta = spec.eta_on_grid(grid)
    rng = rng_from(seed)
    theta = theta0.copy()
    rec = _Recorder(config, spec, x, y, theta_star)
    rec.record(theta)
    for t in range(grid.N):
        z = rng.normal(delta * kap, np.sqrt(delta * kap), n)
        fv = mdl.f_batch(spec, x @ theta, x @ theta_star, eps)
        theta = theta - (eta[t] / kap) * (x.T @ (fv * z[:, None])) \
            - delta * eta[t] * spec.regularizer.g(theta)
        _guard(theta, t)
        rec.record(theta)
    return rec.arrays()


def _gf_trial(x, y, theta_star, eps, theta0, config, spec, seed, until_convergence=False):
    """Explicit Euler on d theta / d tau = -(X^T f + g) with step delta/gf_substeps.

    With until_convergence, integration stops once ||theta' - theta||/sqrt(d)
    drops below 1e-6 and later grid times repeat the converged point.
    """
    grid = config.grid
    h = grid.delta / config.gf_substeps
    theta = theta0.copy()
    rec = _Recorder(config, spec, x, y, theta_star)
    rec.record(theta)
    converged = False
    for t in range(grid.N):
        if not converged:
            for sub in range(config.gf_substeps):
                fv = mdl.f_batch(spec, x @ theta, x @ theta_star, eps)
                new = theta - h * (x.T @ fv + spec.regularizer.g(theta))
                _guard(new, t * config.gf_substeps + sub)
                move = np.linalg.norm(new - theta) / np.sqrt(config.d)
                theta = new
                if until_convergence and move < GF_CONVERGENCE_TOL:
                    converged = True
                    break
        rec.record(theta)
    return rec.arrays()


def _one_pass_trial(config, spec, seed):
    """Fresh sample per step; observables at tau = step / d on a fixed
    evaluation batch of size n.  The model's ridge penalty enters as d^{-1} g,
    i.e. it is read as the population-risk penalty of the one-pass problem."""
    grid = config.grid
    d = config.d
    total_steps = math.ceil(grid.T * d)
    record_at = np.floor(grid.times * d).astype(int)
    rng = rng_from(seed)
    theta0, theta_star = spec.init_law.sample(rng, size=d)
    x_eval = _draw_x(rng, config.n, d, config.data_dist)
    eps_eval = spec.noise_law.sample(rng, config.n)
    y_eval = mdl.labels(spec, x_eval @ theta_star, eps_eval)
    theta = theta0.copy()
    rec = _Recorder(config, spec, x_eval, y_eval, theta_star)
    next_rec = 0
    for j in range(total_steps + 1):
        while next_rec < len(record_at) and record_at[next_rec] == j:
            rec.record(theta)
            next_rec += 1
        if j == total_steps:
            break
        xj = _draw_x(rng, 1, d, config.data_dist)[0]
        epsj = float(spec.noise_law.sample(rng, None))
        fj = mdl.f_batch(spec, xj @ theta, xj @ theta_star, epsj)
        eta_j = float(spec.eta(j / d))
        theta = theta - eta_j * (np.outer(xj, fj) + spec.regularizer.g(theta) / d)
        _guard(theta, j)
    while next_rec < len(record_at):
        rec.record(theta)
        next_rec += 1
    return rec.arrays()


_TRIALS = {"sgd": _sgd_trial, "sme": _sme_trial, "gf": _gf_trial}


def _map_trials(config, fn, seeds):
    workers = config.n_threads()
    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, seeds))
    return [fn(s) for s in seeds]


def _shared_data_run(engine, x, y, theta_star, eps, theta0, config, spec, **kw):
    seeds = derive_seeds(config.seed, config.trials)
    trial = _TRIALS[engine]
    results = _map_trials(
        config, lambda s: trial(x, y, theta_star, eps, theta0, config, spec, s, **kw), seeds
    )
    per_trial = {key: np.stack([r[key] for r in results]) for key in results[0]}
    meta = {"engine": engine, "seed": config.seed, "n": config.n, "d": config.d,
            "trials": config.trials, "shared_data": True}
    return from_trials(config.grid.times, per_trial, config.thresholds, meta=meta)


def run_sgd(x, y, theta_star, eps, theta0, config: SimConfig, spec) -> ObservableTrace:
    """Multi-pass SGD trials on one shared dataset."""
    return _shared_data_run("sgd", x, y, theta_star, eps, theta0, config, spec)


def run_sme(x, y, theta_star, eps, theta0, config: SimConfig, spec) -> ObservableTrace:
    """SME diffusion trials on one shared dataset."""
    return _shared_data_run("sme", x, y, theta_star, eps, theta0, config, spec)


def run_gradient_flow(x, y, theta_star, eps, theta0, config: SimConfig, spec,
                      until_convergence=False) -> ObservableTrace:
    """Gradient-flow path on one shared dataset (deterministic per dataset)."""
    return _shared_data_run("gf", x, y, theta_star, eps, theta0, config, spec,
                            until_convergence=until_convergence)


def run_one_pass_sgd(config: SimConfig, spec, seed) -> ObservableTrace:
    """One-pass SGD trials; each trial draws its own fresh sample stream."""
    seeds = derive_seeds(seed, config.trials)
    results = _map_trials(config, lambda s: _one_pass_trial(config, spec, s), seeds)
    per_trial = {key: np.stack([r[key] for r in results]) for key in results[0]}
    meta = {"engine": "onepass", "seed": seed, "n": config.n, "d": config.d,
            "trials": config.trials}
    return from_trials(config.grid.times, per_trial, config.thresholds, meta=meta)


def simulate(engine, config: SimConfig, spec) -> ObservableTrace:
    """Trial-averaged run of one engine with a fresh dataset per trial.

    Trial m uses the (2m)-th derived seed for its dataset and the (2m+1)-th
    for the algorithmic randomness, so different engines simulated from the
    same config see identical per-trial datasets.
    """
    if engine == "onepass":
        return run_one_pass_sgd(config, spec, config.seed)
    trial = _TRIALS[engine]

    def one(m):
        data_seed = derived_seed(config.seed, 2 * m)
        algo_seed = derived_seed(config.seed, 2 * m + 1)
        x, theta_star, theta0, eps, y = generate_dataset(config, spec, data_seed)
        return trial(x, y, theta_star, eps, theta0, config, spec, algo_seed)

    results = _map_trials(config, one, list(range(config.trials)))
    per_trial = {key: np.stack([r[key] for r in results]) for key in results[0]}
    meta = {"engine": engine, "seed": config.seed, "n": config.n, "d": config.d,
            "trials": config.trials, "shared_data": False}
    return from_trials(config.grid.times, per_trial, config.thresholds, meta=meta)
