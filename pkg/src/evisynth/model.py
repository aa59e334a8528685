"""Model graph: basic parameters, link functions, hierarchy, functionals.

Basic parameters live in one unconstrained vector theta (all on link
scales); `materialize` maps theta to the dense (G, A, S, R, T) arrays of
rho / pi / delta. Structure:

- rho: per-cell softmax over exposure blocks. The MSM block share (males)
  and both PWID shares are constant across years; the MSM block is split
  into clinic / non-clinic by an annual share. lowest-risk is the softmax
  baseline, so the simplex closes by construction.
- clinic prevalence: four components per clinic stratum-year. g1
  (previously diagnosed) and g2 (newly diagnosed among testers) are free
  on the logit scale; g3/g4 (not offered / opted out) are odds-scale
  multiples kappa3/kappa4 of g2. Total clinic prevalence is the
  pathway-weighted combination, and the diagnosed share counts newly
  diagnosed cases with a latent per-year weight w_t ~ U(0,1), so clinic
  undiagnosed prevalence lies between its start- and end-year values.
- non-clinic groups: logit(pi) and logit(delta) are the clinic values
  shifted by a log-odds-ratio beta = mu[outcome, family]
  + psi[outcome]*male + sigma_strata*z[a,r] + sigma_year*z[t].
- PWID: free logit anchors for current injectors; ex-injectors share pi
  and have delta_ex = delta_cur + (1 - delta_cur)*expit(eps), which makes
  the diagnosed-ordering constraint hold by construction.
- lowest-risk: OTH non-clinic logits shifted by global offsets omega.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import config as cfgmod
from . import kernels as K
from .errors import ConfigError, DomainError, ShapeError
from .strata import (CLINIC_FAMILIES, G_BA_C, G_BA_NC, G_LOW, G_MSM_C,
                     G_MSM_NC, G_OTH_C, G_OTH_NC, G_PWID_CUR, G_PWID_EX,
                     Frame, PopulationFrame)

LOG_2PI = 1.8378770664093454836
FAMILIES = ("MSM", "BA", "OTH")
OUTCOMES = ("pi", "delta")
# psi slots: male:female shifts identified by NHSBT / AHSS
PSI_NAMES = ("psi_pi_het", "psi_delta_BA", "psi_delta_OTH")


# ---------------------------------------------------------------------------
# public link operations

def logit(p):
    """Log-odds of p; domain error at or outside {0, 1}."""
    arr = np.asarray(p, dtype=float)
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise DomainError("logit requires 0 < p < 1")
    out = np.log(arr) - np.log1p(-arr)
    return float(out) if np.isscalar(p) or arr.ndim == 0 else out


def expit(x):
    arr = np.asarray(x, dtype=float)
    out = np.empty_like(arr, dtype=float)
    K.expit_into(np.ascontiguousarray(arr.ravel()), out.reshape(-1))
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def apply_or_linkage(base_logit, log_or):
    """Proportion implied by shifting an anchor's log-odds by log_or."""
    b = np.asarray(base_logit, dtype=float)
    s = np.asarray(log_or, dtype=float)
    if not (np.all(np.isfinite(b)) and np.all(np.isfinite(s))):
        raise DomainError("apply_or_linkage requires finite inputs")
    return expit(b + s)


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ModelConfig:
    """Prior settings and linkage activation; all keys overridable in the
    model config file (prefix `prior_`, see README)."""

    rho_alpha_mean: tuple[float, float, float, float] = (-6.0, -4.5, -4.0, -3.0)
    rho_alpha_sd: float = 1.5
    msm_clinic_mean: float = -5.0
    msm_clinic_sd: float = 1.0
    msm_nonclinic_mean: float = -4.0
    msm_nonclinic_sd: float = 1.0
    pwid_alpha_mean: float = -6.0
    pwid_alpha_sd: float = 1.0
    g1_mean: float = -4.5
    g1_sd: float = 1.5
    g2_mean: float = -5.5
    g2_sd: float = 1.5
    pwid_pi_mean: float = -4.0
    pwid_pi_sd: float = 1.5
    pwid_delta_mean: float = 1.0
    pwid_delta_sd: float = 1.0
    or_mean_sd: float = 10.0          # mu ~ Normal(0, sd^2)
    mf_or_sd: float = 10.0            # psi ~ Normal(0, sd^2)
    sigma_scale: float = 1.0          # sigma ~ Half-Normal(scale)
    kappa_scale: float = 1.0          # log kappa ~ Half-Normal(scale)
    eps_mean: float = 0.0
    eps_sd: float = 1.0
    lowrisk_share: float = 0.2       # OTHhet-nonclinic share of the residual block
    lowrisk_pi_shift: float = -2.0   # fixed log-odds, lowest-risk vs OTH-nonclinic
    lowrisk_delta_shift: float = 0.0
    offset_sd: float = 3.0            # survey offsets b ~ Normal(0, sd^2)
    clinic_w: tuple[float, float, float] = (0.75, 0.15, 0.10)
    census_default_se: float = 0.05   # logit scale
    sources: tuple[str, ...] = ("ALL",)

    def __post_init__(self):
        w = self.clinic_w
        if len(w) != 3 or any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise ConfigError("clinic_w must be three non-negative shares summing to 1")
        for name in ("rho_alpha_sd", "msm_clinic_sd", "msm_nonclinic_sd", "pwid_alpha_sd",
                     "g1_sd", "g2_sd", "pwid_pi_sd", "pwid_delta_sd", "or_mean_sd",
                     "mf_or_sd", "sigma_scale", "kappa_scale", "eps_sd",
                     "offset_sd"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model config: {name} must be > 0")
        if not 0.0 < self.lowrisk_share < 1.0:
            raise ConfigError("model config: lowrisk_share must lie in (0, 1)")

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        g = cfgmod.get_float
        means = kv.get("prior_rho_alpha_mean")
        if means is not None:
            vals = tuple(float(v) for v in means.split(","))
            if len(vals) != 4:
                raise ConfigError("prior_rho_alpha_mean needs 4 values "
                                  "(BA-clinic, BA-nonclinic, OTH-clinic, OTH-nonclinic)")
        else:
            vals = cls.rho_alpha_mean
        w = kv.get("clinic_w")
        clinic_w = (tuple(float(v) for v in w.split(",")) if w is not None
                    else cls.clinic_w)
        return cls(
            rho_alpha_mean=vals,
            rho_alpha_sd=g(kv, "prior_rho_alpha_sd", cls.rho_alpha_sd),
            msm_clinic_mean=g(kv, "prior_msm_clinic_mean", cls.msm_clinic_mean),
            msm_clinic_sd=g(kv, "prior_msm_clinic_sd", cls.msm_clinic_sd),
            msm_nonclinic_mean=g(kv, "prior_msm_nonclinic_mean", cls.msm_nonclinic_mean),
            msm_nonclinic_sd=g(kv, "prior_msm_nonclinic_sd", cls.msm_nonclinic_sd),
            pwid_alpha_mean=g(kv, "prior_pwid_alpha_mean", cls.pwid_alpha_mean),
            pwid_alpha_sd=g(kv, "prior_pwid_alpha_sd", cls.pwid_alpha_sd),
            g1_mean=g(kv, "prior_g1_mean", cls.g1_mean),
            g1_sd=g(kv, "prior_g1_sd", cls.g1_sd),
            g2_mean=g(kv, "prior_g2_mean", cls.g2_mean),
            g2_sd=g(kv, "prior_g2_sd", cls.g2_sd),
            pwid_pi_mean=g(kv, "prior_pwid_pi_mean", cls.pwid_pi_mean),
            pwid_pi_sd=g(kv, "prior_pwid_pi_sd", cls.pwid_pi_sd),
            pwid_delta_mean=g(kv, "prior_pwid_delta_mean", cls.pwid_delta_mean),
            pwid_delta_sd=g(kv, "prior_pwid_delta_sd", cls.pwid_delta_sd),
            or_mean_sd=g(kv, "prior_or_mean_sd", cls.or_mean_sd),
            mf_or_sd=g(kv, "prior_mf_or_sd", cls.mf_or_sd),
            sigma_scale=g(kv, "prior_sigma_scale", cls.sigma_scale),
            kappa_scale=g(kv, "prior_kappa_scale", cls.kappa_scale),
            eps_mean=g(kv, "prior_eps_mean", cls.eps_mean),
            eps_sd=g(kv, "prior_eps_sd", cls.eps_sd),
            lowrisk_share=g(kv, "lowrisk_share", cls.lowrisk_share),
            lowrisk_pi_shift=g(kv, "lowrisk_pi_shift", cls.lowrisk_pi_shift),
            lowrisk_delta_shift=g(kv, "lowrisk_delta_shift", cls.lowrisk_delta_shift),
            offset_sd=g(kv, "prior_offset_sd", cls.offset_sd),
            clinic_w=clinic_w,
            census_default_se=g(kv, "census_default_se", cls.census_default_se),
            sources=tuple(cfgmod.get_list(kv, "sources", ["ALL"])),
        )

    @classmethod
    def from_file(cls, path) -> "ModelConfig":
        return cls.from_kv(cfgmod.parse_kv_file(path))

    def source_active(self, source: str) -> bool:
        return "ALL" in self.sources or source in self.sources


# ---------------------------------------------------------------------------
# parameter layout

@dataclass(frozen=True)
class ParamLayout:
    """Named slices of the unconstrained parameter vector."""

    slices: dict[str, slice]
    shapes: dict[str, tuple[int, ...]]
    dim: int

    def offset(self, name: str, *idx: int) -> int:
        """Absolute theta index of a multi-index within a named block."""
        return self.slices[name].start + int(
            np.ravel_multi_index(idx, self.shapes[name]))


def build_layout(frame: Frame, n_offsets: dict[str, int]) -> ParamLayout:
    """n_offsets: survey-offset vector length per two-arm source."""
    c = frame.config
    A, S, R, T = len(c.ages), len(c.genders), len(c.regions), len(c.years)
    has_male = "male" in c.genders
    blocks: list[tuple[str, tuple[int, ...]]] = [
        ("rho_het_clinic", (A, S, R, T, 2)),      # BA-clinic, OTH-clinic (annual)
        ("rho_het_nonclinic", (A, S, R)),         # BA-nc (constant in t); the
        # OTH-nc / lowest-risk residual block is the softmax baseline, split
        # by the fixed configured share
        ("rho_msm_clinic", (A, R, T) if has_male else (0,)),
        ("rho_msm_nonclinic", (A, R) if has_male else (0,)),
        ("rho_pwid", (A, S, R, 2)),               # current, ex
        ("g1_MSM", (A, R, T) if has_male else (0,)),
        ("g1_BA", (A, S, R, T)),
        ("g1_OTH", (A, S, R, T)),
        ("g2_MSM", (A, R, T) if has_male else (0,)),
        ("g2_BA", (A, S, R, T)),
        ("g2_OTH", (A, S, R, T)),
        ("pwid_pi", (A, S, R, T)),
        ("pwid_delta", (A, S, R, T)),
        ("z_strata", (2, 3, A, R)),               # (outcome, family, age, region)
        ("z_year", (2, 3, T)),
        ("mu_or", (2, 3)),
        ("psi", (3,)),
        ("log_sigma_strata", (2,)),
        ("log_sigma_year", (2,)),
        ("kappa_raw", (2,)),
        ("w_raw", (T,)),
        ("eps", (1,)),
    ]
    for source in ("GMSHS", "AHSS", "NHSBT"):
        blocks.append((f"offset_{source}", (n_offsets.get(source, 0),)))
    slices, shapes = {}, {}
    pos = 0
    for name, shape in blocks:
        size = int(np.prod(shape)) if all(s > 0 for s in shape) else 0
        slices[name] = slice(pos, pos + size)
        shapes[name] = shape if size else (0,)
        pos += size
    return ParamLayout(slices=slices, shapes=shapes, dim=pos)


def param_names(layout: ParamLayout, frame: Frame) -> list[str]:
    """One stable, colon-separated name per scalar parameter."""
    c = frame.config
    labels = {
        "rho_het_clinic": (c.ages, c.genders, c.regions,
                           [str(y) for y in c.years],
                           ["BAhet-clinic", "OTHhet-clinic"]),
        "rho_het_nonclinic": (c.ages, c.genders, c.regions),
        "rho_msm_clinic": (c.ages, c.regions, [str(y) for y in c.years]),
        "rho_msm_nonclinic": (c.ages, c.regions),
        "rho_pwid": (c.ages, c.genders, c.regions, ["current", "ex"]),
        "pwid_pi": (c.ages, c.genders, c.regions, [str(y) for y in c.years]),
        "pwid_delta": (c.ages, c.genders, c.regions, [str(y) for y in c.years]),
        "z_strata": (OUTCOMES, FAMILIES, c.ages, c.regions),
        "z_year": (OUTCOMES, FAMILIES, [str(y) for y in c.years]),
        "mu_or": (OUTCOMES, FAMILIES),
        "psi": (PSI_NAMES,),
        "log_sigma_strata": (OUTCOMES,),
        "log_sigma_year": (OUTCOMES,),
        "kappa_raw": (["kappa3", "kappa4"],),
        "w_raw": ([str(y) for y in c.years],),
        "eps": (["pwid-ex"],),
    }
    for fam in FAMILIES:
        axes = ((c.ages, c.regions, [str(y) for y in c.years]) if fam == "MSM"
                else (c.ages, c.genders, c.regions, [str(y) for y in c.years]))
        labels[f"g1_{fam}"] = axes
        labels[f"g2_{fam}"] = axes
    names = [""] * layout.dim
    for name, sl in layout.slices.items():
        size = sl.stop - sl.start
        if size == 0:
            continue
        if name in labels:
            axes = labels[name]
            for flat in range(size):
                idx = np.unravel_index(flat, layout.shapes[name])
                parts = [str(axes[d][i]) for d, i in enumerate(idx)]
                names[sl.start + flat] = ":".join([name] + parts)
        else:  # survey offsets
            for flat in range(size):
                names[sl.start + flat] = f"{name}:{flat}"
    return names


# ---------------------------------------------------------------------------
# materialized states

@dataclass
class ClinicComponents:
    """Per clinic stratum-year prevalence components, concatenated over
    families in plan-row order (fam_id indexes FAMILIES)."""

    fam_id: np.ndarray
    cell_flat: np.ndarray   # flat (A,S,R,T) cell index
    g1: np.ndarray
    g2: np.ndarray
    g3: np.ndarray
    g4: np.ndarray


@dataclass
class BasicParameters:
    rho: np.ndarray     # (G, A, S, R, T)
    pi: np.ndarray
    delta: np.ndarray
    comps: ClinicComponents
    mask: np.ndarray    # validity (False = structural MSM x female zero)


@dataclass
class FunctionalParameters:
    plwh: np.ndarray          # N * rho * pi
    undiag_count: np.ndarray  # plwh * (1 - delta)
    undiag_prev: np.ndarray   # pi * (1 - delta)
    rho_n: np.ndarray         # N * rho (group denominators)
    diag_count: np.ndarray    # plwh * delta


def derive_functionals(basic: BasicParameters, pop: PopulationFrame) -> FunctionalParameters:
    """Functional parameters; the defining identities hold exactly because
    these are the only expressions that compute them."""
    if basic.rho.shape[1:] != pop.N.shape:
        raise ShapeError(f"state cells {basic.rho.shape[1:]} != population {pop.N.shape}")
    n = pop.N[np.newaxis, ...]
    rho_n = basic.rho * n
    plwh = rho_n * basic.pi
    one_minus_delta = 1.0 - basic.delta
    undiag = plwh * one_minus_delta
    u = basic.pi * one_minus_delta
    diag = plwh * basic.delta
    return FunctionalParameters(plwh=plwh, undiag_count=undiag, undiag_prev=u,
                                rho_n=rho_n, diag_count=diag)


def aggregate_prop_diag(func: FunctionalParameters, cells) -> float:
    """Aggregate proportion diagnosed = sum diagnosed / sum PLWH over cells."""
    num = float(func.diag_count[cells].sum())
    den = float(func.plwh[cells].sum())
    return num / den if den > 0 else 0.0


# ---------------------------------------------------------------------------
# hierarchy (public contract + quadrature-checkable density)

@dataclass
class HierarchyParameters:
    mu_or: np.ndarray        # (2, 3): outcome x family mean log-ORs
    sigma_strata: np.ndarray  # (2,)
    sigma_year: np.ndarray    # (2,)
    z: np.ndarray             # all standardized effects, flat


def _norm_logpdf(x, mean, sd):
    z = (np.asarray(x, dtype=float) - mean) / sd
    return float(np.sum(-0.5 * z * z - np.log(sd) - 0.5 * LOG_2PI))


def _halfnormal_logpdf(x, scale):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        return -np.inf
    return float(np.sum(0.5 * math.log(2.0 / math.pi) - np.log(scale)
                        - 0.5 * (x / scale) ** 2))


def hierarchy_logdensity(h: HierarchyParameters, config: ModelConfig) -> float:
    """Sum of standard-normal log densities of all standardized effects plus
    the hyperprior log densities of the mean log-ORs and both scales."""
    if np.any(h.sigma_strata <= 0) or np.any(h.sigma_year <= 0):
        raise DomainError("hierarchy scales must be > 0")
    value = _norm_logpdf(h.z, 0.0, 1.0)
    value += _norm_logpdf(h.mu_or, 0.0, config.or_mean_sd)
    value += _halfnormal_logpdf(h.sigma_strata, config.sigma_scale)
    value += _halfnormal_logpdf(h.sigma_year, config.sigma_scale)
    return value


# ---------------------------------------------------------------------------
# the model graph: plans + transforms

@dataclass
class ModelGraph:
    frame: Frame
    pop: PopulationFrame
    config: ModelConfig
    layout: ParamLayout
    names: list[str] = field(repr=False)

    # rho plan (CSR of block logits per cell)
    alpha_idx: np.ndarray = field(repr=False, default=None)
    alpha_indptr: np.ndarray = field(repr=False, default=None)
    direct_src: np.ndarray = field(repr=False, default=None)
    direct_dst: np.ndarray = field(repr=False, default=None)
    base_src: np.ndarray = field(repr=False, default=None)
    base_oth_dst: np.ndarray = field(repr=False, default=None)
    base_low_dst: np.ndarray = field(repr=False, default=None)

    # clinic plan (concatenated family rows)
    cl_fam: np.ndarray = field(repr=False, default=None)
    cl_cell: np.ndarray = field(repr=False, default=None)
    cl_g1_idx: np.ndarray = field(repr=False, default=None)
    cl_g2_idx: np.ndarray = field(repr=False, default=None)
    cl_w: np.ndarray = field(repr=False, default=None)        # (n, 3) pathway shares
    cl_wt_idx: np.ndarray = field(repr=False, default=None)
    cl_dst_c: np.ndarray = field(repr=False, default=None)
    cl_dst_nc: np.ndarray = field(repr=False, default=None)
    # per-row theta indices of (mu, psi, z_strata, z_year), one matrix per
    # outcome; beta = gathered row . (1, 1, sigma_strata, sigma_year)
    cl_link_pi: np.ndarray = field(repr=False, default=None)   # (n, 4)
    cl_link_de: np.ndarray = field(repr=False, default=None)   # (n, 4)
    cl_oth_rows: np.ndarray = field(repr=False, default=None)
    cl_low_dst: np.ndarray = field(repr=False, default=None)

    # pwid plan
    pw_pi_idx: np.ndarray = field(repr=False, default=None)
    pw_de_idx: np.ndarray = field(repr=False, default=None)
    pw_dst: np.ndarray = field(repr=False, default=None)      # (n, 4) cur/ex x pi/de targets

    # priors
    prior_idx: np.ndarray = field(repr=False, default=None)
    prior_mean: np.ndarray = field(repr=False, default=None)
    prior_sd: np.ndarray = field(repr=False, default=None)

    mask: np.ndarray = field(repr=False, default=None)

    @property
    def dim(self) -> int:
        return self.layout.dim

    # -- prior -------------------------------------------------------------
    def prior_logdensity(self, theta: np.ndarray) -> float:
        lay = self.layout
        value = K.normal_sum(theta[self.prior_idx], self.prior_mean, self.prior_sd)
        w = np.ascontiguousarray(theta[lay.slices["w_raw"]])
        sp = np.empty_like(w)
        K.softplus_into(w, sp)
        value += float(np.sum(w) - 2.0 * np.sum(sp))  # U(0,1) via logit
        scale = self.config.sigma_scale
        hn_const = 0.5 * math.log(2.0 / math.pi) - math.log(scale)
        for name in ("log_sigma_strata", "log_sigma_year"):
            sl = lay.slices[name]
            for v in theta[sl]:
                sig = math.exp(min(v, 300.0))  # overflow -> -inf density anyway
                value += hn_const - 0.5 * (sig / scale) ** 2 + v
        return value

    def sample_prior(self, rng: np.random.Generator) -> np.ndarray:
        lay = self.layout
        theta = np.empty(lay.dim)
        theta[self.prior_idx] = (self.prior_mean
                                 + self.prior_sd * rng.standard_normal(len(self.prior_idx)))
        u = rng.random(lay.shapes["w_raw"][0])
        theta[lay.slices["w_raw"]] = np.log(u) - np.log1p(-u)
        for name in ("log_sigma_strata", "log_sigma_year"):
            size = lay.slices[name].stop - lay.slices[name].start
            sig = np.abs(self.config.sigma_scale * rng.standard_normal(size))
            theta[lay.slices[name]] = np.log(sig)
        return theta

    def _ext(self, theta: np.ndarray) -> np.ndarray:
        """theta with a constant 0.0 appended (gather target for fixed slots);
        buffer reused across calls, never escapes."""
        buf = getattr(self, "_ext_buf", None)
        if buf is None:
            buf = np.empty(self.layout.dim + 1)
            buf[-1] = 0.0
            self._ext_buf = buf
        buf[:-1] = theta
        return buf

    @property
    def n_tiled(self) -> np.ndarray:
        """Population N broadcast over the group axis, flat (G * cells)."""
        cached = getattr(self, "_n_tiled", None)
        if cached is None:
            cached = np.tile(self.pop.N.reshape(-1), self.frame.shape[0])
            self._n_tiled = cached
        return cached

    # -- transforms ----------------------------------------------------------
    def materialize_rho(self, theta: np.ndarray) -> np.ndarray:
        """theta -> dense rho (G, A, S, R, T); simplex per valid cell."""
        if theta.shape != (self.layout.dim,):
            raise ShapeError(f"theta has shape {theta.shape}, expected ({self.layout.dim},)")
        return self.forward(theta)["basic"].rho

    def forward(self, theta: np.ndarray) -> dict:
        """Full transform theta -> state, keeping the intermediates the
        reverse pass needs. Returns a dict; 'basic' holds the public
        BasicParameters view."""
        lay = self.layout
        theta_ext = self._ext(theta)

        # rho stage
        pvals = theta_ext[self.alpha_idx]
        K.softmax_rows(pvals, self.alpha_indptr)
        rho = np.zeros(self.frame.shape)
        rho_flat = rho.reshape(-1)
        rho_flat[self.direct_dst] = pvals[self.direct_src]
        phi = self.config.lowrisk_share
        base = pvals[self.base_src]
        rho_flat[self.base_oth_dst] = phi * base
        rho_flat[self.base_low_dst] = (1.0 - phi) * base

        pi = np.zeros(self.frame.shape)
        delta = np.zeros(self.frame.shape)
        pi_flat = pi.reshape(-1)
        de_flat = delta.reshape(-1)

        # clinic components
        kraw = theta[lay.slices["kappa_raw"]]
        lk = np.abs(kraw)
        g1 = np.empty(len(self.cl_cell))
        K.expit_into(theta[self.cl_g1_idx], g1)
        eta2 = theta[self.cl_g2_idx]
        g2 = np.empty_like(eta2)
        K.expit_into(eta2, g2)
        g3 = np.empty_like(eta2)
        K.expit_into(eta2 + lk[0], g3)
        g4 = np.empty_like(eta2)
        K.expit_into(eta2 + lk[1], g4)
        w_t = np.empty(len(self.cl_wt_idx))
        K.expit_into(theta[self.cl_wt_idx], w_t)

        rest = 1.0 - g1
        wtest = self.cl_w[:, 0] * g2
        mix = wtest + self.cl_w[:, 1] * g3 + self.cl_w[:, 2] * g4
        pi_c = g1 + rest * mix
        diag_c = g1 + w_t * rest * wtest
        delta_c = diag_c / pi_c

        eta_pi_c = np.empty_like(pi_c)
        K.logit_into(pi_c, eta_pi_c)
        eta_de_c = np.empty_like(delta_c)
        K.logit_into(delta_c, eta_de_c)

        sig_s = np.exp(theta[lay.slices["log_sigma_strata"]])
        sig_y = np.exp(theta[lay.slices["log_sigma_year"]])
        g_pi = theta_ext[self.cl_link_pi]
        g_de = theta_ext[self.cl_link_de]
        # +-30 keeps the compounded logits strictly inside float (0,1);
        # the clip only binds at ~e^-400 prior density
        eta_pi_nc = np.clip(
            eta_pi_c + g_pi @ np.array([1.0, 1.0, sig_s[0], sig_y[0]]),
            -30.0, 30.0)
        eta_de_nc = np.clip(
            eta_de_c + g_de @ np.array([1.0, 1.0, sig_s[1], sig_y[1]]),
            -30.0, 30.0)
        pi_nc = np.empty_like(eta_pi_nc)
        K.expit_into(eta_pi_nc, pi_nc)
        de_nc = np.empty_like(eta_de_nc)
        K.expit_into(eta_de_nc, de_nc)

        pi_flat[self.cl_dst_c] = pi_c
        de_flat[self.cl_dst_c] = delta_c
        pi_flat[self.cl_dst_nc] = pi_nc
        de_flat[self.cl_dst_nc] = de_nc

        rows = self.cl_oth_rows
        low_pi = np.empty(len(rows))
        K.expit_into(eta_pi_nc[rows] + self.config.lowrisk_pi_shift, low_pi)
        low_de = np.empty(len(rows))
        K.expit_into(eta_de_nc[rows] + self.config.lowrisk_delta_shift, low_de)
        pi_flat[self.cl_low_dst] = low_pi
        de_flat[self.cl_low_dst] = low_de

        pw_pi = np.empty(len(self.pw_pi_idx))
        K.expit_into(theta[self.pw_pi_idx], pw_pi)
        pw_de = np.empty(len(self.pw_de_idx))
        K.expit_into(theta[self.pw_de_idx], pw_de)
        v_eps = float(theta[lay.slices["eps"].start])
        e = (1.0 / (1.0 + math.exp(-v_eps)) if v_eps >= 0
             else math.exp(v_eps) / (1.0 + math.exp(v_eps)))
        pw_de_ex = pw_de + (1.0 - pw_de) * e
        pi_flat[self.pw_dst[:, 0]] = pw_pi
        pi_flat[self.pw_dst[:, 1]] = pw_pi
        de_flat[self.pw_dst[:, 2]] = pw_de
        de_flat[self.pw_dst[:, 3]] = pw_de_ex

        comps = ClinicComponents(fam_id=self.cl_fam, cell_flat=self.cl_cell,
                                 g1=g1, g2=g2, g3=g3, g4=g4)
        basic = BasicParameters(rho=rho, pi=pi, delta=delta, comps=comps,
                                mask=self.mask)

        rho_n = rho_flat * self.n_tiled
        plwh = rho_n * pi_flat
        undiag = plwh * (1.0 - de_flat)
        diag_n = plwh * de_flat
        return {
            "basic": basic, "rho_flat": rho_flat, "pi_flat": pi_flat,
            "de_flat": de_flat, "rho_n": rho_n, "plwh": plwh,
            "undiag": undiag, "diag_n": diag_n,
            "pvals": pvals,
            "g1": g1, "g2": g2, "g3": g3, "g4": g4, "w_t": w_t,
            "rest": rest, "wtest": wtest, "mix": mix, "pi_c": pi_c,
            "diag_c": diag_c, "delta_c": delta_c,
            "pi_nc": pi_nc, "de_nc": de_nc, "low_pi": low_pi, "low_de": low_de,
            "g_pi": g_pi, "g_de": g_de, "sig_s": sig_s, "sig_y": sig_y,
            "kraw": kraw, "pw_pi": pw_pi, "pw_de": pw_de, "e": e,
        }

    def materialize(self, theta: np.ndarray) -> BasicParameters:
        if theta.shape != (self.layout.dim,):
            raise ShapeError(f"theta has shape {theta.shape}, "
                             f"expected ({self.layout.dim},)")
        return self.forward(theta)["basic"]

    def backward(self, theta: np.ndarray, fs: dict, acc: dict) -> np.ndarray:
        """Reverse pass: accumulators from the likelihood terms
        (d rho_n / plwh / undiag / diag_n / g1 / g2 and direct d theta)
        become the gradient of the log-posterior. Returns d theta including
        the prior's contribution."""
        lay = self.layout
        dim = lay.dim
        d_theta = acc["theta"]  # (dim + 1,); last slot absorbs fixed-zero gathers

        de_flat = fs["de_flat"]
        plwh = fs["plwh"]
        d_plwh = acc["plwh"] + acc["undiag"] * (1.0 - de_flat) \
            + acc["diag_n"] * de_flat
        d_delta = plwh * (acc["diag_n"] - acc["undiag"])
        d_rho_n = acc["rho_n"] + d_plwh * fs["pi_flat"]
        d_pi = d_plwh * fs["rho_n"]
        d_rho = d_rho_n * self.n_tiled

        # clinic stage
        pi_c, delta_c = fs["pi_c"], fs["delta_c"]
        pi_nc, de_nc = fs["pi_nc"], fs["de_nc"]
        d_pi_nc = d_pi[self.cl_dst_nc]
        d_de_nc = d_delta[self.cl_dst_nc]
        d_eta_pi_nc = d_pi_nc * pi_nc * (1.0 - pi_nc)
        d_eta_de_nc = d_de_nc * de_nc * (1.0 - de_nc)
        rows = self.cl_oth_rows
        d_low_pi = d_pi[self.cl_low_dst]
        d_low_de = d_delta[self.cl_low_dst]
        g_low_pi = d_low_pi * fs["low_pi"] * (1.0 - fs["low_pi"])
        g_low_de = d_low_de * fs["low_de"] * (1.0 - fs["low_de"])
        np.add.at(d_eta_pi_nc, rows, g_low_pi)
        np.add.at(d_eta_de_nc, rows, g_low_de)

        # beta backward: G @ (1, 1, sig_s, sig_y)
        sig_s, sig_y = fs["sig_s"], fs["sig_y"]
        for d_b, link, g_mat, ss, sy, oi in (
                (d_eta_pi_nc, self.cl_link_pi, fs["g_pi"], sig_s[0], sig_y[0], 0),
                (d_eta_de_nc, self.cl_link_de, fs["g_de"], sig_s[1], sig_y[1], 1)):
            K.scatter_add(np.ascontiguousarray(link[:, 0]), d_b, d_theta)
            K.scatter_add(np.ascontiguousarray(link[:, 1]), d_b, d_theta)
            K.scatter_add(np.ascontiguousarray(link[:, 2]), d_b * ss, d_theta)
            K.scatter_add(np.ascontiguousarray(link[:, 3]), d_b * sy, d_theta)
            d_sig_s = float(np.sum(d_b * g_mat[:, 2]))
            d_sig_y = float(np.sum(d_b * g_mat[:, 3]))
            d_theta[lay.slices["log_sigma_strata"].start + oi] += d_sig_s * ss
            d_theta[lay.slices["log_sigma_year"].start + oi] += d_sig_y * sy

        # through the clinic logits
        d_pi_c = d_pi[self.cl_dst_c] \
            + d_eta_pi_nc / np.maximum(pi_c * (1.0 - pi_c), 1e-12)
        d_delta_c = d_delta[self.cl_dst_c] \
            + d_eta_de_nc / np.maximum(delta_c * (1.0 - delta_c), 1e-12)

        d_diag = d_delta_c / pi_c
        d_pi_c = d_pi_c - d_delta_c * delta_c / pi_c

        g1, g2, g3, g4 = fs["g1"], fs["g2"], fs["g3"], fs["g4"]
        rest, wtest, mix, w_t = fs["rest"], fs["wtest"], fs["mix"], fs["w_t"]
        w0 = self.cl_w[:, 0]
        d_g1 = acc["g1"] + d_pi_c * (1.0 - mix) + d_diag * (1.0 - w_t * wtest)
        d_g2 = acc["g2"] + (d_pi_c + d_diag * w_t) * rest * w0
        d_g3 = d_pi_c * rest * self.cl_w[:, 1]
        d_g4 = d_pi_c * rest * self.cl_w[:, 2]
        d_wt = d_diag * rest * wtest

        K.scatter_add(self.cl_g1_idx, d_g1 * g1 * (1.0 - g1), d_theta)
        d3 = d_g3 * g3 * (1.0 - g3)
        d4 = d_g4 * g4 * (1.0 - g4)
        d_eta2 = d_g2 * g2 * (1.0 - g2) + d3 + d4
        K.scatter_add(self.cl_g2_idx, d_eta2, d_theta)
        kraw = fs["kraw"]
        ksl = lay.slices["kappa_raw"]
        d_theta[ksl.start] += float(np.sign(kraw[0]) * d3.sum())
        d_theta[ksl.start + 1] += float(np.sign(kraw[1]) * d4.sum())
        K.scatter_add(self.cl_wt_idx, d_wt * w_t * (1.0 - w_t), d_theta)

        # PWID
        pw_pi, pw_de, e = fs["pw_pi"], fs["pw_de"], fs["e"]
        d_pw_pi = d_pi[self.pw_dst[:, 0]] + d_pi[self.pw_dst[:, 1]]
        d_de_cur = d_delta[self.pw_dst[:, 2]]
        d_de_ex = d_delta[self.pw_dst[:, 3]]
        d_pw_de = d_de_cur + d_de_ex * (1.0 - e)
        d_e = float(np.sum(d_de_ex * (1.0 - pw_de)))
        K.scatter_add(self.pw_pi_idx, d_pw_pi * pw_pi * (1.0 - pw_pi), d_theta)
        K.scatter_add(self.pw_de_idx, d_pw_de * pw_de * (1.0 - pw_de), d_theta)
        d_theta[lay.slices["eps"].start] += d_e * e * (1.0 - e)

        # rho stage
        d_p = np.zeros(len(self.alpha_idx))
        d_p[self.direct_src] = d_rho[self.direct_dst]
        phi = self.config.lowrisk_share
        d_p[self.base_src] = phi * d_rho[self.base_oth_dst] \
            + (1.0 - phi) * d_rho[self.base_low_dst]
        d_vals = np.empty_like(d_p)
        K.softmax_rows_backward(fs["pvals"], d_p, self.alpha_indptr, d_vals)
        K.scatter_add(self.alpha_idx, d_vals, d_theta)

        # prior
        grad = d_theta[:dim]
        grad[self.prior_idx] += -(theta[self.prior_idx] - self.prior_mean) \
            / (self.prior_sd * self.prior_sd)
        wsl = lay.slices["w_raw"]
        w = theta[wsl]
        ew = np.empty_like(w)
        K.expit_into(w, ew)
        grad[wsl] += 1.0 - 2.0 * ew
        scale2 = self.config.sigma_scale ** 2
        for name in ("log_sigma_strata", "log_sigma_year"):
            sl = lay.slices[name]
            sig2 = np.exp(2.0 * theta[sl])
            grad[sl] += 1.0 - sig2 / scale2
        return grad

    def hierarchy_from_theta(self, theta: np.ndarray) -> HierarchyParameters:
        lay = self.layout
        return HierarchyParameters(
            mu_or=theta[lay.slices["mu_or"]].reshape(2, 3).copy(),
            sigma_strata=np.exp(theta[lay.slices["log_sigma_strata"]]),
            sigma_year=np.exp(theta[lay.slices["log_sigma_year"]]),
            z=np.concatenate([theta[lay.slices["z_strata"]],
                              theta[lay.slices["z_year"]]]),
        )


def _cell_flat(frame: Frame, a, s, r, t) -> int:
    return frame.cell_flat(a, s, r, t)


def _dense_flat(frame: Frame, g, a, s, r, t) -> int:
    return frame.dense_flat(g, a, s, r, t)


def build_graph(frame: Frame, pop: PopulationFrame, config: ModelConfig,
                clinic_weights: dict | None = None,
                n_offsets: dict[str, int] | None = None) -> ModelGraph:
    """Compile the transform plans. clinic_weights maps (family, a, s, r, t)
    -> (tested, not-offered, opted-out) shares; missing cells use the config
    default. n_offsets sizes the per-row survey offset vectors."""
    pop.check_frame(frame)
    c = frame.config
    A, S, R, T = frame.cell_shape
    layout = build_layout(frame, n_offsets or {})
    lay = layout
    male = c.genders.index("male") if "male" in c.genders else None
    zero_slot = layout.dim  # index of the appended 0.0 in theta_ext

    # --- rho plan
    alpha_idx, indptr = [], [0]
    direct_src, direct_dst = [], []
    base_src, base_oth_dst, base_low_dst = [], [], []
    for a in range(A):
        for s in range(S):
            for r in range(R):
                for t in range(T):
                    if s == male:
                        alpha_idx.append(lay.offset("rho_msm_clinic", a, r, t))
                        direct_src.append(len(alpha_idx) - 1)
                        direct_dst.append(_dense_flat(frame, G_MSM_C, a, s, r, t))
                        alpha_idx.append(lay.offset("rho_msm_nonclinic", a, r))
                        direct_src.append(len(alpha_idx) - 1)
                        direct_dst.append(_dense_flat(frame, G_MSM_NC, a, s, r, t))
                    for gslot, which in ((G_PWID_CUR, 0), (G_PWID_EX, 1)):
                        alpha_idx.append(lay.offset("rho_pwid", a, s, r, which))
                        direct_src.append(len(alpha_idx) - 1)
                        direct_dst.append(_dense_flat(frame, gslot, a, s, r, t))
                    for gslot, j in ((G_BA_C, 0), (G_OTH_C, 1)):
                        alpha_idx.append(lay.offset("rho_het_clinic", a, s, r, t, j))
                        direct_src.append(len(alpha_idx) - 1)
                        direct_dst.append(_dense_flat(frame, gslot, a, s, r, t))
                    alpha_idx.append(lay.offset("rho_het_nonclinic", a, s, r))
                    direct_src.append(len(alpha_idx) - 1)
                    direct_dst.append(_dense_flat(frame, G_BA_NC, a, s, r, t))
                    # residual block (baseline 0) splits into OTH-nc / lowest
                    alpha_idx.append(zero_slot)
                    base_src.append(len(alpha_idx) - 1)
                    base_oth_dst.append(_dense_flat(frame, G_OTH_NC, a, s, r, t))
                    base_low_dst.append(_dense_flat(frame, G_LOW, a, s, r, t))
                    indptr.append(len(alpha_idx))

    # --- clinic plan
    fam_groups = {"MSM": (G_MSM_C, G_MSM_NC), "BA": (G_BA_C, G_BA_NC),
                  "OTH": (G_OTH_C, G_OTH_NC)}
    cw = clinic_weights or {}
    cl = {k: [] for k in ("fam", "cell", "g1", "g2", "w", "wt", "dst_c", "dst_nc",
                          "link_pi", "link_de")}
    oth_rows, low_dst = [], []
    for fi, fam in enumerate(FAMILIES):
        g_c, g_nc = fam_groups[fam]
        genders = [male] if fam == "MSM" else list(range(S))
        for a in range(A):
            for s in genders:
                if s is None:
                    continue
                for r in range(R):
                    for t in range(T):
                        row = len(cl["fam"])
                        cl["fam"].append(fi)
                        cl["cell"].append(_cell_flat(frame, a, s, r, t))
                        if fam == "MSM":
                            cl["g1"].append(lay.offset("g1_MSM", a, r, t))
                            cl["g2"].append(lay.offset("g2_MSM", a, r, t))
                        else:
                            cl["g1"].append(lay.offset(f"g1_{fam}", a, s, r, t))
                            cl["g2"].append(lay.offset(f"g2_{fam}", a, s, r, t))
                        cl["w"].append(cw.get((fam, a, s, r, t), config.clinic_w))
                        cl["wt"].append(lay.offset("w_raw", t))
                        cl["dst_c"].append(_dense_flat(frame, g_c, a, s, r, t))
                        cl["dst_nc"].append(_dense_flat(frame, g_nc, a, s, r, t))
                        is_male = (s == male)
                        psi_pi = (lay.offset("psi", 0)
                                  if fam in ("BA", "OTH") and is_male else zero_slot)
                        if fam == "BA" and is_male:
                            psi_de = lay.offset("psi", 1)
                        elif fam == "OTH" and is_male:
                            psi_de = lay.offset("psi", 2)
                        else:
                            psi_de = zero_slot
                        cl["link_pi"].append((lay.offset("mu_or", 0, fi), psi_pi,
                                              lay.offset("z_strata", 0, fi, a, r),
                                              lay.offset("z_year", 0, fi, t)))
                        cl["link_de"].append((lay.offset("mu_or", 1, fi), psi_de,
                                              lay.offset("z_strata", 1, fi, a, r),
                                              lay.offset("z_year", 1, fi, t)))
                        if fam == "OTH":
                            oth_rows.append(row)
                            low_dst.append(_dense_flat(frame, G_LOW, a, s, r, t))

    # --- pwid plan
    pw_pi_idx, pw_de_idx, pw_dst = [], [], []
    for a in range(A):
        for s in range(S):
            for r in range(R):
                for t in range(T):
                    pw_pi_idx.append(lay.offset("pwid_pi", a, s, r, t))
                    pw_de_idx.append(lay.offset("pwid_delta", a, s, r, t))
                    pw_dst.append((
                        _dense_flat(frame, G_PWID_CUR, a, s, r, t),
                        _dense_flat(frame, G_PWID_EX, a, s, r, t),
                        _dense_flat(frame, G_PWID_CUR, a, s, r, t),
                        _dense_flat(frame, G_PWID_EX, a, s, r, t),
                    ))

    # --- priors (normal part; w_raw and log_sigma handled analytically)
    prior_idx, prior_mean, prior_sd = [], [], []

    def add_normal(name, mean, sd):
        sl = lay.slices[name]
        size = sl.stop - sl.start
        if size == 0:
            return
        mean = np.broadcast_to(np.asarray(mean, dtype=float), (size,))
        prior_idx.extend(range(sl.start, sl.stop))
        prior_mean.extend(mean.tolist())
        prior_sd.extend([sd] * size)

    rm = config.rho_alpha_mean  # (BA-c, BA-nc, OTH-c, OTH-nc reserved)
    add_normal("rho_het_clinic", np.tile([rm[0], rm[2]], A * S * R * T),
               config.rho_alpha_sd)
    add_normal("rho_het_nonclinic", rm[1], config.rho_alpha_sd)
    add_normal("rho_msm_clinic", config.msm_clinic_mean, config.msm_clinic_sd)
    add_normal("rho_msm_nonclinic", config.msm_nonclinic_mean,
               config.msm_nonclinic_sd)
    add_normal("rho_pwid", config.pwid_alpha_mean, config.pwid_alpha_sd)
    for fam in FAMILIES:
        add_normal(f"g1_{fam}", config.g1_mean, config.g1_sd)
        add_normal(f"g2_{fam}", config.g2_mean, config.g2_sd)
    add_normal("pwid_pi", config.pwid_pi_mean, config.pwid_pi_sd)
    add_normal("pwid_delta", config.pwid_delta_mean, config.pwid_delta_sd)
    add_normal("z_strata", 0.0, 1.0)
    add_normal("z_year", 0.0, 1.0)
    add_normal("mu_or", 0.0, config.or_mean_sd)
    add_normal("psi", 0.0, config.mf_or_sd)
    add_normal("kappa_raw", 0.0, config.kappa_scale)
    add_normal("eps", config.eps_mean, config.eps_sd)
    for source in ("GMSHS", "AHSS", "NHSBT"):
        add_normal(f"offset_{source}", 0.0, config.offset_sd)

    i64 = np.int64
    graph = ModelGraph(
        frame=frame, pop=pop, config=config, layout=layout,
        names=param_names(layout, frame),
        alpha_idx=np.asarray(alpha_idx, dtype=i64),
        alpha_indptr=np.asarray(indptr, dtype=i64),
        direct_src=np.asarray(direct_src, dtype=i64),
        direct_dst=np.asarray(direct_dst, dtype=i64),
        base_src=np.asarray(base_src, dtype=i64),
        base_oth_dst=np.asarray(base_oth_dst, dtype=i64),
        base_low_dst=np.asarray(base_low_dst, dtype=i64),
        cl_fam=np.asarray(cl["fam"], dtype=i64),
        cl_cell=np.asarray(cl["cell"], dtype=i64),
        cl_g1_idx=np.asarray(cl["g1"], dtype=i64),
        cl_g2_idx=np.asarray(cl["g2"], dtype=i64),
        cl_w=np.asarray(cl["w"], dtype=float),
        cl_wt_idx=np.asarray(cl["wt"], dtype=i64),
        cl_dst_c=np.asarray(cl["dst_c"], dtype=i64),
        cl_dst_nc=np.asarray(cl["dst_nc"], dtype=i64),
        cl_link_pi=np.asarray(cl["link_pi"], dtype=i64),
        cl_link_de=np.asarray(cl["link_de"], dtype=i64),
        cl_oth_rows=np.asarray(oth_rows, dtype=i64),
        cl_low_dst=np.asarray(low_dst, dtype=i64),
        pw_pi_idx=np.asarray(pw_pi_idx, dtype=i64),
        pw_de_idx=np.asarray(pw_de_idx, dtype=i64),
        pw_dst=np.asarray(pw_dst, dtype=i64),
        prior_idx=np.asarray(prior_idx, dtype=i64),
        prior_mean=np.asarray(prior_mean, dtype=float),
        prior_sd=np.asarray(prior_sd, dtype=float),
        mask=frame.valid_mask(),
    )
    return graph
