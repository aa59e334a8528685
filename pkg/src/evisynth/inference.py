"""Adaptive blocked random-walk Metropolis-within-Gibbs engine.

Each sweep proposes a Gaussian step for every block in turn; per-block
global scales adapt toward the target acceptance rate during warmup
(Robbins-Monro on the log scale) together with per-coordinate proposal
standard deviations estimated from the warmup sample variance. Both freeze
when warmup ends. Chains draw from independent Philox substreams of the
master seed, so results are bit-identical for a given (model, config) at
any parallelism level.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import config as cfgmod
from . import rng as rngmod
from .diagnostics import Diagnostics, compute_diagnostics
from .errors import ConfigError, InitializationError
from .kernels import BACKEND

ADAPT_WINDOW = 25


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    n_warmup: int = 5000
    n_keep: int = 5000
    seed: int = 0
    adapt_target: float = 0.28     # RWM block acceptance target
    thinning: int = 1
    rhat_threshold: float = 1.05
    init_retries: int = 100
    kernel: str = "auto"           # auto | hmc | rwm
    hmc_steps: int = 16            # max leapfrog steps per draw (jittered)
    hmc_target: float = 0.8        # dual-averaging acceptance target

    def __post_init__(self):
        if self.n_chains < 1:
            raise ConfigError("sampler: n_chains must be >= 1")
        if self.n_warmup < 0 or self.n_keep < 1:
            raise ConfigError("sampler: need n_warmup >= 0 and n_keep >= 1")
        if not 0.0 < self.adapt_target < 1.0:
            raise ConfigError("sampler: adapt_target must lie in (0, 1)")
        if not 0.0 < self.hmc_target < 1.0:
            raise ConfigError("sampler: hmc_target must lie in (0, 1)")
        if self.thinning < 1:
            raise ConfigError("sampler: thinning must be >= 1")
        if self.kernel not in ("auto", "hmc", "rwm"):
            raise ConfigError("sampler: kernel must be auto, hmc or rwm")
        if self.hmc_steps < 1:
            raise ConfigError("sampler: hmc_steps must be >= 1")

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "SamplerConfig":
        return cls(
            n_chains=cfgmod.get_int(kv, "n_chains", cls.n_chains),
            n_warmup=cfgmod.get_int(kv, "n_warmup", cls.n_warmup),
            n_keep=cfgmod.get_int(kv, "n_keep", cls.n_keep),
            seed=cfgmod.get_int(kv, "seed", cls.seed),
            adapt_target=cfgmod.get_float(kv, "adapt_target", cls.adapt_target),
            thinning=cfgmod.get_int(kv, "thinning", cls.thinning),
            rhat_threshold=cfgmod.get_float(kv, "rhat_threshold", cls.rhat_threshold),
            init_retries=cfgmod.get_int(kv, "init_retries", cls.init_retries),
            kernel=cfgmod.get_str(kv, "kernel", cls.kernel),
            hmc_steps=cfgmod.get_int(kv, "hmc_steps", cls.hmc_steps),
            hmc_target=cfgmod.get_float(kv, "hmc_target", cls.hmc_target),
        )

    @classmethod
    def from_file(cls, path) -> "SamplerConfig":
        return cls.from_kv(cfgmod.parse_kv_file(path))


@dataclass
class PosteriorDraws:
    """Retained draws of the full unconstrained parameter vector (basic
    parameters on link scales plus hyperparameters), by chain."""

    draws: np.ndarray          # (n_chains, n_keep, dim)
    names: list[str]
    cfg: SamplerConfig
    acceptance: np.ndarray     # (n_chains, n_blocks)

    @property
    def dim(self) -> int:
        return self.draws.shape[2]

    def flat(self) -> np.ndarray:
        """(n_chains * n_keep, dim), chain-major order."""
        return self.draws.reshape(-1, self.draws.shape[2])


def metropolis_accept(logp_prop: float, logp_cur: float, log_u: float) -> bool:
    """Standard Metropolis rule; log_u is log of a Uniform(0,1) draw."""
    if logp_prop >= logp_cur:
        return True
    return log_u < logp_prop - logp_cur


def _initial_point(model, cfg: SamplerConfig, chain: int):
    init_rng = rngmod.make_stream(cfg.seed, rngmod.INIT, chain)
    theta = None
    logp = -math.inf
    for _ in range(cfg.init_retries):
        theta = model.init_theta(init_rng)
        logp = model.logpost(theta)
        if math.isfinite(logp):
            return theta, logp
    terms = {}
    if theta is not None and hasattr(model, "logpost_terms"):
        terms = model.logpost_terms(theta)
    raise InitializationError(
        f"no finite log-posterior in {cfg.init_retries} prior draws "
        f"(chain {chain}); last attempt term values: {terms}",
        term_values=terms)


def run_chain(model, cfg: SamplerConfig, chain: int):
    """One chain; returns (kept draws, post-warmup acceptance per block).

    Warmup has two phases: a greedy blocked hill-climb (first quarter) that
    moves the prior-drawn start into the posterior's bulk, then standard
    Metropolis with Robbins-Monro scale adaptation and per-coordinate
    proposal sds estimated from the warmup draws. Everything freezes when
    warmup ends."""
    theta, logp = _initial_point(model, cfg, chain)
    rng = rngmod.make_stream(cfg.seed, rngmod.CHAIN, chain)
    blocks = model.blocks()
    nb = len(blocks)
    dim = model.dim

    n_climb = cfg.n_warmup // 4
    log_scale = np.array([math.log(2.38 / math.sqrt(len(b))) for b in blocks])
    coord_sd = np.ones(dim)
    win_acc = np.zeros(nb)
    win_prop = np.zeros(nb)
    post_acc = np.zeros(nb)
    post_prop = np.zeros(nb)
    mean = np.zeros(dim)
    m2 = np.zeros(dim)
    n_mom = 0
    n_windows = 0

    kept = np.empty((cfg.n_keep, dim))
    total = cfg.n_warmup + cfg.n_keep * cfg.thinning
    moments_from = n_climb + (cfg.n_warmup - n_climb) // 4

    for it in range(total):
        climb = it < n_climb
        warm = it < cfg.n_warmup
        for bi in range(nb):
            b = blocks[bi]
            z = rng.standard_normal(len(b))
            log_u = math.log(rng.random())
            step = math.exp(log_scale[bi]) * coord_sd[b] * z
            old = theta[b].copy()
            theta[b] = old + step
            logp_prop = model.logpost(theta)
            if climb:
                # uphill only; +0.3/-0.2 equilibrates near 40% acceptance
                # (greedy acceptance tops out at 1/2, so the target must sit
                # below it or the scale collapses)
                if logp_prop >= logp:
                    logp = logp_prop
                    log_scale[bi] += 0.3
                else:
                    theta[b] = old
                    log_scale[bi] -= 0.2
                continue
            if metropolis_accept(logp_prop, logp, log_u):
                logp = logp_prop
                if warm:
                    win_acc[bi] += 1
                else:
                    post_acc[bi] += 1
            else:
                theta[b] = old
            if warm:
                win_prop[bi] += 1
            else:
                post_prop[bi] += 1
        if warm:
            if it >= moments_from:
                n_mom += 1
                delta = theta - mean
                mean += delta / n_mom
                m2 += delta * (theta - mean)
            if not climb and (it + 1) % ADAPT_WINDOW == 0:
                n_windows += 1
                gamma = min(0.3, 3.0 / math.sqrt(n_windows))
                rate = win_acc / np.maximum(win_prop, 1.0)
                log_scale += gamma * (rate - cfg.adapt_target)
                win_acc[:] = 0.0
                win_prop[:] = 0.0
                if n_mom >= 2 * ADAPT_WINDOW:
                    var = m2 / max(n_mom - 1, 1)
                    coord_sd = np.sqrt(np.maximum(var, 1e-12))
        else:
            j = it - cfg.n_warmup
            if (j + 1) % cfg.thinning == 0:
                kept[(j + 1) // cfg.thinning - 1] = theta
    rates = post_acc / np.maximum(post_prop, 1.0)
    return kept, rates


def run_chain_hmc(model, cfg: SamplerConfig, chain: int):
    """One Hamiltonian chain: leapfrog with a jittered step count, dual
    averaging of the step size toward hmc_target, and a diagonal mass matrix
    re-estimated twice during warmup; everything freezes after warmup.
    Divergent transitions (energy error > 1000) are rejected and flagged."""
    theta, _ = _initial_point(model, cfg, chain)
    rng = rngmod.make_stream(cfg.seed, rngmod.CHAIN, chain)
    dim = model.dim
    logp, grad = model.logpost_grad(theta)

    inv_mass = np.ones(dim)       # posterior variance estimate (M^-1)
    mom_sd = np.ones(dim)         # sqrt(M)
    eps = 0.1 * dim ** -0.25
    # crude bracketing of a workable initial step size
    for _ in range(30):
        p = rng.standard_normal(dim) * mom_sd
        h0 = -logp + 0.5 * float(np.sum(p * p * inv_mass))
        th = theta + eps * inv_mass * (p + 0.5 * eps * grad)
        lp1, g1 = model.logpost_grad(th)
        p1 = p + 0.5 * eps * (grad + g1)
        h1 = -lp1 + 0.5 * float(np.sum(p1 * p1 * inv_mass))
        alpha = math.exp(min(0.0, h0 - h1)) if math.isfinite(h1) else 0.0
        if 0.2 < alpha < 0.9:
            break
        eps = eps * 2.0 if alpha >= 0.9 else eps * 0.5

    mu = math.log(10.0 * eps)
    log_eps_bar = math.log(eps)
    h_bar = 0.0
    da_t = 0
    mean = np.zeros(dim)
    m2 = np.zeros(dim)
    n_mom = 0
    mass_updates = sorted({int(cfg.n_warmup * 0.5), int(cfg.n_warmup * 0.8)})
    kept = np.empty((cfg.n_keep, dim))
    total = cfg.n_warmup + cfg.n_keep * cfg.thinning
    accepted = 0.0
    proposed = 0.0
    divergences = []

    for it in range(total):
        warm = it < cfg.n_warmup
        n_steps = 1 + int(rng.random() * cfg.hmc_steps)
        # jittered step size breaks leapfrog resonances
        eps_t = eps * (0.9 + 0.2 * rng.random())
        p = rng.standard_normal(dim) * mom_sd
        log_u = math.log(rng.random())
        h0 = -logp + 0.5 * float(np.sum(p * p * inv_mass))
        th = theta.copy()
        lp_new, g_new = logp, grad
        p = p + 0.5 * eps_t * g_new
        diverged = False
        for step in range(n_steps):
            th += eps_t * inv_mass * p
            lp_new, g_new = model.logpost_grad(th)
            if not (math.isfinite(lp_new) and np.all(np.isfinite(g_new))):
                diverged = True
                break
            p += eps_t * g_new if step < n_steps - 1 else 0.5 * eps_t * g_new
        if diverged:
            alpha = 0.0
        else:
            h1 = -lp_new + 0.5 * float(np.sum(p * p * inv_mass))
            delta_h = h0 - h1
            if not math.isfinite(delta_h) or delta_h < -1000.0:
                diverged = True
                alpha = 0.0
            else:
                alpha = math.exp(min(0.0, delta_h))
                if log_u < delta_h:
                    theta = th
                    logp, grad = lp_new, g_new
        if diverged and not warm:
            divergences.append(it - cfg.n_warmup)
        if warm:
            da_t += 1
            h_bar = (1.0 - 1.0 / (da_t + 10)) * h_bar \
                + (cfg.hmc_target - alpha) / (da_t + 10)
            log_eps = mu - math.sqrt(da_t) / 0.05 * h_bar / 10.0
            w = da_t ** -0.75
            log_eps_bar = w * log_eps + (1.0 - w) * log_eps_bar
            eps = math.exp(log_eps)
            if it >= cfg.n_warmup // 4:
                n_mom += 1
                delta = theta - mean
                mean += delta / n_mom
                m2 += delta * (theta - mean)
            if (it + 1) in mass_updates and n_mom > 10:
                var = m2 / (n_mom - 1)
                inv_mass = (n_mom / (n_mom + 5.0)) * var \
                    + (5.0 / (n_mom + 5.0)) * 1e-3
                mom_sd = 1.0 / np.sqrt(inv_mass)
                mean[:] = 0.0
                m2[:] = 0.0
                n_mom = 0
                mu = math.log(10.0) + log_eps_bar
                h_bar = 0.0
                da_t = 0
            if it + 1 == cfg.n_warmup:
                eps = math.exp(log_eps_bar)
        else:
            accepted += alpha
            proposed += 1.0
            j = it - cfg.n_warmup
            if (j + 1) % cfg.thinning == 0:
                kept[(j + 1) // cfg.thinning - 1] = theta
    rate = np.array([accepted / max(proposed, 1.0)])
    return kept, rate, divergences


def _use_hmc(model, cfg: SamplerConfig) -> bool:
    if cfg.kernel == "rwm":
        return False
    has_grad = hasattr(model, "logpost_grad")
    if cfg.kernel == "hmc" and not has_grad:
        raise ConfigError("kernel=hmc requires a model with logpost_grad")
    return has_grad


def _chain_job(args):
    model, cfg, chain = args
    if _use_hmc(model, cfg):
        return run_chain_hmc(model, cfg, chain)
    kept, rates = run_chain(model, cfg, chain)
    return kept, rates, []


def run_chains(model, cfg: SamplerConfig, threads: int = 1
               ) -> tuple[PosteriorDraws, Diagnostics]:
    """All chains plus diagnostics; identical output at any `threads`."""
    jobs = [(model, cfg, chain) for chain in range(cfg.n_chains)]
    if threads > 1 and cfg.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(threads, cfg.n_chains)) as pool:
            results = list(pool.map(_chain_job, jobs))
    else:
        results = [_chain_job(job) for job in jobs]
    draws = np.stack([kept for kept, _, _ in results])
    acceptance = np.stack([rates for _, rates, _ in results])
    flags = []
    for ci, (_, rates, divs) in enumerate(results):
        for bi, rate in enumerate(rates):
            if rate < 0.02:
                flags.append(f"chain {ci} block {bi} stuck (acceptance {rate:.3f})")
        for it in divs:
            flags.append(f"chain {ci} draw {it}: divergent transition")
    posterior = PosteriorDraws(draws=draws, names=list(model.names), cfg=cfg,
                               acceptance=acceptance)
    diag = compute_diagnostics(draws, acceptance, flags)
    return posterior, diag


# ---------------------------------------------------------------------------
# single-parameter conjugate toy (engine oracle / `fit --self-test`)

class BetaBinomialModel:
    """Beta(a, b) prior with a Binomial(n) observation, sampled on logit(p);
    the posterior of p is Beta(a + y, b + n - y) analytically."""

    def __init__(self, y: int, n: int, a: float = 1.0, b: float = 1.0):
        if not 0 <= y <= n:
            raise ConfigError("toy model needs 0 <= y <= n")
        self.y, self.n, self.a, self.b = y, n, a, b
        self.dim = 1
        self.names = ["logit_p"]

    def blocks(self):
        return [np.array([0], dtype=np.int64)]

    def init_theta(self, rng):
        p = rng.beta(self.a, self.b)
        p = min(max(p, 1e-12), 1 - 1e-12)
        return np.array([math.log(p) - math.log1p(-p)])

    def logpost(self, theta):
        v = float(theta[0])
        log_p = -_softplus(-v)
        log_q = -_softplus(v)
        return (self.a + self.y) * log_p + (self.b + self.n - self.y) * log_q

    def logpost_grad(self, theta):
        v = float(theta[0])
        p = 1.0 / (1.0 + math.exp(-v)) if v >= 0 else math.exp(v) / (1.0 + math.exp(v))
        grad = (self.a + self.y) * (1.0 - p) - (self.b + self.n - self.y) * p
        return self.logpost(theta), np.array([grad])

    def posterior_mean_var(self) -> tuple[float, float]:
        a = self.a + self.y
        b = self.b + self.n - self.y
        mean = a / (a + b)
        var = a * b / ((a + b) ** 2 * (a + b + 1))
        return mean, var


def _softplus(x: float) -> float:
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def engine_info() -> str:
    return f"adaptive HMC + blocked RWM-within-Gibbs kernels; kernels={BACKEND}"
