"""Per-source log-likelihood terms and the assembled posterior.

Each data source becomes one term object holding precompiled index plans
(CSR margins into the dense (G, A, S, R, T) state arrays); evaluating a
term is a couple of gathers plus one kernel reduction. Data-dependent
constants (binomial coefficients, -log d!) are computed once at build so
term values are true log densities; the public scalar helpers below use
the same convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .errors import DataError, ShapeError, TermNanError
from .model import ModelConfig, ModelGraph, build_graph
from .strata import (CLINIC_FAMILIES, G_BA_C, G_BA_NC, G_MSM_C, G_OTH_C,
                     G_PWID_CUR, G_PWID_EX, Frame, PopulationFrame)

SOURCES = ("ONS", "CENSUS", "NATSAL", "PWID-SIZE", "GUMCAD-ATTEND",
           "GUMCAD-PREV", "GMSHS", "UAM", "NSHPC", "AHSS", "NHSBT", "HARS")

_I64 = np.int64


# ---------------------------------------------------------------------------
# public scalar helpers (documented convention: constants kept)

def binomial_loglik(y: int, n: int, p: float) -> float:
    """log C(n,y) + y log p + (n-y) log(1-p); 0*log(0) treated as 0."""
    if y < 0 or n < 0 or y > n:
        raise DataError(f"binomial requires 0 <= y <= n, got y={y}, n={n}")
    if not 0.0 <= p <= 1.0:
        raise DataError(f"binomial probability {p} outside [0, 1]")
    value = math.lgamma(n + 1) - math.lgamma(y + 1) - math.lgamma(n - y + 1)
    if y > 0:
        value += y * math.log(p) if p > 0 else -math.inf
    if n - y > 0:
        value += (n - y) * math.log1p(-p) if p < 1 else -math.inf
    return value


def poisson_loglik(d: int, lam: float) -> float:
    """d log lam - lam - log d!; zero count at zero rate contributes 0."""
    if d < 0 or lam < 0:
        raise DataError(f"poisson requires d >= 0 and rate >= 0, got {d}, {lam}")
    if d == 0:
        return -lam
    if lam == 0.0:
        return -math.inf
    return d * math.log(lam) - lam - math.lgamma(d + 1)


def normal_logpdf(x: float, mean: float, sd: float) -> float:
    z = (x - mean) / sd
    return -0.5 * z * z - math.log(sd) - 0.5 * math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# observation tables (produced by ingest, consumed here)

@dataclass
class ObservationTable:
    """Validated rows of one source, with margins resolved to the frame.

    margins[i] holds the dense (group, cell) flat indices a row informs;
    margins2 holds the second arm for two-arm sources; cells[i] holds the
    distinct cell flats (for population denominators).
    """

    source: str
    columns: dict[str, np.ndarray]
    margins: list[np.ndarray]
    cells: list[np.ndarray]
    margins2: list[np.ndarray] | None = None
    cells2: list[np.ndarray] | None = None
    row_stratum: list[tuple] | None = None  # exact (g,a,s,r,t) where required
    path: str = ""

    @property
    def n_rows(self) -> int:
        return len(self.margins)


def _csr(parts: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    idx = (np.concatenate(parts) if parts else np.empty(0, dtype=_I64))
    indptr = np.zeros(len(parts) + 1, dtype=_I64)
    if parts:
        indptr[1:] = np.cumsum(np.asarray([len(p) for p in parts], dtype=_I64))
    return np.ascontiguousarray(idx, dtype=_I64), indptr


def _log_choose(n: np.ndarray, y: np.ndarray) -> float:
    return float(sum(math.lgamma(ni + 1) - math.lgamma(yi + 1)
                     - math.lgamma(ni - yi + 1) for ni, yi in zip(n, y)))


def _safe_ratio(num: np.ndarray, den: np.ndarray,
                out: np.ndarray | None = None) -> np.ndarray:
    """num/den with 0/0 -> 0 (empty-margin and zero-prevalence edges)."""
    if out is None:
        out = np.zeros_like(num)
    else:
        out.fill(0.0)
    np.divide(num, den, out=out, where=den > 0)
    return out



def _dbinom_dp(y: np.ndarray, n: np.ndarray, p: np.ndarray) -> np.ndarray:
    """d/dp of the binomial log density, 0*log(0) conventions preserved."""
    out = np.zeros_like(p)
    pos = y > 0
    out[pos] += y[pos] / np.maximum(p[pos], 1e-300)
    rest = (n - y) > 0
    out[rest] -= (n - y)[rest] / np.maximum(1.0 - p[rest], 1e-300)
    return out


# ---------------------------------------------------------------------------
# evaluation products shared by every term

@dataclass
class EvalProducts:
    basic: object           # BasicParameters
    rho: np.ndarray         # all flat over (G * cells)
    pi: np.ndarray
    delta: np.ndarray
    rho_n: np.ndarray
    plwh: np.ndarray
    undiag: np.ndarray
    diag_n: np.ndarray

    def field(self, name: str) -> np.ndarray:
        return getattr(self, name)


# ---------------------------------------------------------------------------
# term plans

@dataclass
class RhoCountTerm:
    """Counts of persons in a group out of the cell population
    (GUMCAD-ATTEND attendance rows)."""

    name: str
    y: np.ndarray
    n: np.ndarray            # population of the margin cells (known)
    idx: np.ndarray
    indptr: np.ndarray
    const: float
    _buf: np.ndarray = None

    def value(self, theta, prod: EvalProducts) -> float:
        if self._buf is None:
            self._buf = np.empty(len(self.y))
        K.csr_gather_sum(prod.rho_n, self.idx, self.indptr, self._buf)
        p = self._buf / self.n
        return K.binom_sum_p(self.y, self.n, p) + self.const

    def value_and_grad(self, theta, prod: EvalProducts, acc: dict) -> float:
        if self._buf is None:
            self._buf = np.empty(len(self.y))
        K.csr_gather_sum(prod.rho_n, self.idx, self.indptr, self._buf)
        p = self._buf / self.n
        d_agg = _dbinom_dp(self.y, self.n, p) / self.n
        K.csr_scatter_add(d_agg, self.idx, self.indptr, acc["rho_n"])
        return K.binom_sum_p(self.y, self.n, p) + self.const


@dataclass
class GumcadPrevTerm:
    """Clinic prevalence components: binomials on the directly observed
    previously- and newly-diagnosed counts (g1, g2); g3/g4 enter the state
    via the odds-scale kappa linkage, not through observed counts."""

    name: str
    comp_rows: np.ndarray    # row index into ClinicComponents arrays
    y: np.ndarray            # stacked (prev_diag, new_diag)
    n: np.ndarray            # stacked (attendees, tested)
    const: float
    _p: np.ndarray = None

    def value(self, theta, prod: EvalProducts) -> float:
        comps = prod.basic.comps
        k = len(self.comp_rows)
        if self._p is None:
            self._p = np.empty(2 * k)
        self._p[:k] = comps.g1[self.comp_rows]
        self._p[k:] = comps.g2[self.comp_rows]
        return K.binom_sum_p(self.y, self.n, self._p) + self.const

    def value_and_grad(self, theta, prod: EvalProducts, acc: dict) -> float:
        value = self.value(theta, prod)
        k = len(self.comp_rows)
        d_p = _dbinom_dp(self.y, self.n, self._p)
        np.add.at(acc["g1"], self.comp_rows, d_p[:k])
        np.add.at(acc["g2"], self.comp_rows, d_p[k:])
        return value


@dataclass
class RatioEstimateTerm:
    """Survey-weighted proportion estimates: normal likelihood on the logit
    of an aggregate share (NATSAL MSM proportion, CENSUS ethnic split)."""

    name: str
    est_logit: np.ndarray
    se: np.ndarray
    num_field: str
    num_idx: np.ndarray
    num_indptr: np.ndarray
    den_field: str | None    # None -> den_const
    den_idx: np.ndarray
    den_indptr: np.ndarray
    den_const: np.ndarray
    _num: np.ndarray = None
    _den: np.ndarray = None
    _ratio: np.ndarray = None

    def value(self, theta, prod: EvalProducts) -> float:
        if self._num is None:
            self._num = np.empty(len(self.est_logit))
            self._den = np.empty(len(self.est_logit))
            self._ratio = np.empty(len(self.est_logit))
        K.csr_gather_sum(prod.field(self.num_field), self.num_idx,
                         self.num_indptr, self._num)
        if self.den_field is None:
            den = self.den_const
        else:
            den = self._den
            K.csr_gather_sum(prod.field(self.den_field), self.den_idx,
                             self.den_indptr, den)
        ratio = _safe_ratio(self._num, den, self._ratio)
        eta = np.empty_like(ratio)
        K.logit_into(ratio, eta)
        return K.normal_sum(eta, self.est_logit, self.se)

    def value_and_grad(self, theta, prod: EvalProducts, acc: dict) -> float:
        value = self.value(theta, prod)
        r = self._ratio
        den = self.den_const if self.den_field is None else self._den
        eta = np.empty_like(r)
        K.logit_into(r, eta)
        d_eta = -(eta - self.est_logit) / (self.se * self.se)
        d_r = d_eta / np.maximum(r * (1.0 - r), 1e-12)
        d_num = _safe_ratio(d_r, den)
        K.csr_scatter_add(d_num, self.num_idx, self.num_indptr,
                          acc[self.num_field])
        if self.den_field is not None:
            d_den = -d_num * r
            K.csr_scatter_add(d_den, self.den_idx, self.den_indptr,
                              acc[self.den_field])
        return value


@dataclass
class CountScaleTerm:
    """Log-normal evidence on a group-size count, N * rho aggregated over
    the margin (PWID population size studies)."""

    name: str
    log_est: np.ndarray
    se: np.ndarray
    idx: np.ndarray
    indptr: np.ndarray
    _buf: np.ndarray = None

    def value(self, theta, prod: EvalProducts) -> float:
        if self._buf is None:
            self._buf = np.empty(len(self.log_est))
        K.csr_gather_sum(prod.rho_n, self.idx, self.indptr, self._buf)
        with np.errstate(divide="ignore"):
            logc = np.log(self._buf)
        return K.normal_sum(logc, self.log_est, self.se)

    def value_and_grad(self, theta, prod: EvalProducts, acc: dict) -> float:
        value = self.value(theta, prod)
        with np.errstate(divide="ignore"):
            logc = np.log(self._buf)
        d_agg = -(logc - self.log_est) / (self.se * self.se) \
            / np.maximum(self._buf, 1e-300)
        K.csr_scatter_add(d_agg, self.idx, self.indptr, acc["rho_n"])
        return value


@dataclass
class MixtureBinomTerm:
    """Binomial against a rho-weighted mixture proportion over the margin
    (UAM pi and delta rows; NSHPC undiagnosed prevalence in women)."""

    name: str
    y: np.ndarray
    n: np.ndarray
    num_field: str
    den_field: str
    num_idx: np.ndarray
    num_indptr: np.ndarray
    const: float
    _num: np.ndarray = None
    _den: np.ndarray = None
    _ratio: np.ndarray = None

    def value(self, theta, prod: EvalProducts) -> float:
        if self._num is None:
            self._num = np.empty(len(self.y))
            self._den = np.empty(len(self.y))
            self._ratio = np.empty(len(self.y))
        K.csr_gather_sum(prod.field(self.num_field), self.num_idx,
                         self.num_indptr, self._num)
        K.csr_gather_sum(prod.field(self.den_field), self.num_idx,
                         self.num_indptr, self._den)
        p = _safe_ratio(self._num, self._den, self._ratio)
        return K.binom_sum_p(self.y, self.n, p) + self.const

    def value_and_grad(self, theta, prod: EvalProducts, acc: dict) -> float:
        value = self.value(theta, prod)
        p = self._ratio
        d_p = _dbinom_dp(self.y, self.n, p)
        d_num = _safe_ratio(d_p, self._den)
        d_den = -d_num * p
        K.csr_scatter_add(d_num, self.num_idx, self.num_indptr,
                          acc[self.num_field])
        K.csr_scatter_add(d_den, self.num_idx, self.num_indptr,
                          acc[self.den_field])
        return value


@dataclass
class TwoArmOrTerm:
    """Indirect odds-ratio evidence: two binomial arms whose logits are the
    model's margin quantities shifted by one free per-row survey offset, so
    only the arm contrast (the model log-OR) is identified
    (GMSHS clinic/non-clinic; AHSS and NHSBT male/female)."""

    name: str
    y: np.ndarray            # stacked: arm-1 rows then arm-2 rows
    n: np.ndarray
    num_field: str
    den_field: str
    idx: np.ndarray          # stacked CSR over both arms' margins
    indptr: np.ndarray
    offset_idx: np.ndarray   # theta index per stacked row (repeated per arm)
    const: float
    _num: np.ndarray = None
    _den: np.ndarray = None
    _ratio: np.ndarray = None

    def value(self, theta, prod: EvalProducts) -> float:
        if self._num is None:
            self._num = np.empty(len(self.y))
            self._den = np.empty(len(self.y))
            self._ratio = np.empty(len(self.y))
        K.csr_gather_sum(prod.field(self.num_field), self.idx, self.indptr,
                         self._num)
        K.csr_gather_sum(prod.field(self.den_field), self.idx, self.indptr,
                         self._den)
        q = _safe_ratio(self._num, self._den, self._ratio)
        eta = np.empty_like(q)
        K.logit_into(q, eta)
        eta += theta[self.offset_idx]
        return K.binom_sum_logit(self.y, self.n, eta) + self.const

    def value_and_grad(self, theta, prod: EvalProducts, acc: dict) -> float:
        value = self.value(theta, prod)
        q = self._ratio
        eta = np.empty_like(q)
        K.logit_into(q, eta)
        eta += theta[self.offset_idx]
        p_fit = np.empty_like(eta)
        K.expit_into(eta, p_fit)
        d_eta = self.y - self.n * p_fit
        K.scatter_add(self.offset_idx, d_eta, acc["theta"])
        d_q = d_eta / np.maximum(q * (1.0 - q), 1e-12)
        d_num = _safe_ratio(d_q, self._den)
        d_den = -d_num * q
        K.csr_scatter_add(d_num, self.idx, self.indptr, acc[self.num_field])
        K.csr_scatter_add(d_den, self.idx, self.indptr, acc[self.den_field])
        return value


@dataclass
class HarsTerm:
    """Register counts of people living with diagnosed HIV: Poisson against
    N * rho * pi * delta aggregated over the row margin; per-group rows
    realize the exposure-group distribution (Poisson factorization of the
    multinomial given its total)."""

    name: str
    d: np.ndarray
    idx: np.ndarray
    indptr: np.ndarray
    const: float
    _lam: np.ndarray = None

    def value(self, theta, prod: EvalProducts) -> float:
        if self._lam is None:
            self._lam = np.empty(len(self.d))
        K.csr_gather_sum(prod.diag_n, self.idx, self.indptr, self._lam)
        return K.poisson_sum(self.d, self._lam) + self.const

    def value_and_grad(self, theta, prod: EvalProducts, acc: dict) -> float:
        value = self.value(theta, prod)
        d_lam = np.where(self.d > 0,
                         self.d / np.maximum(self._lam, 1e-300), 0.0) - 1.0
        K.csr_scatter_add(d_lam, self.idx, self.indptr, acc["diag_n"])
        return value


# ---------------------------------------------------------------------------
# model assembly

def clinic_pathway_weights(frame: Frame, table: ObservationTable | None,
                           config: ModelConfig) -> dict:
    """Observed (tested, not offered, opted out) shares among non-previously-
    diagnosed attendees, per clinic stratum; config default where no data."""
    weights = {}
    if table is None:
        return weights
    cols = table.columns
    fam_of_group = {g: fam for fam, (g, _) in CLINIC_FAMILIES.items()}
    for i in range(table.n_rows):
        g, a, s, r, t = table.row_stratum[i]
        fam = fam_of_group[frame.config.exposures[g]]
        m = float(cols["tested"][i] + cols["not_offered"][i] + cols["opted_out"][i])
        if m <= 0:
            continue
        weights[(fam, a, s, r, t)] = (float(cols["tested"][i]) / m,
                                      float(cols["not_offered"][i]) / m,
                                      float(cols["opted_out"][i]) / m)
    return weights


class Model:
    """Posterior assembled from a graph and compiled source terms; the
    sampler-facing interface (dim, names, blocks, logpost, init)."""

    def __init__(self, graph: ModelGraph, terms: list, blocks: list[np.ndarray],
                 init_idx: np.ndarray | None = None,
                 init_values: np.ndarray | None = None):
        self.graph = graph
        self.terms = terms
        self._blocks = blocks
        self.init_idx = (init_idx if init_idx is not None
                         else np.empty(0, dtype=_I64))
        self.init_values = (init_values if init_values is not None
                            else np.empty(0))

    @property
    def dim(self) -> int:
        return self.graph.dim

    @property
    def names(self) -> list[str]:
        return self.graph.names

    def blocks(self) -> list[np.ndarray]:
        return self._blocks

    def init_theta(self, rng) -> np.ndarray:
        """Prior draw with anchor coordinates recentred at empirical moments
        of their own data (jittered for between-chain dispersion); leaves the
        posterior untouched, only shortens warmup."""
        theta = self.graph.sample_prior(rng)
        if len(self.init_idx):
            jitter = 0.1 * rng.standard_normal(len(self.init_idx))
            theta[self.init_idx] = self.init_values + jitter
        return theta

    @staticmethod
    def _products_from(fs: dict) -> EvalProducts:
        return EvalProducts(basic=fs["basic"], rho=fs["rho_flat"],
                            pi=fs["pi_flat"], delta=fs["de_flat"],
                            rho_n=fs["rho_n"], plwh=fs["plwh"],
                            undiag=fs["undiag"], diag_n=fs["diag_n"])

    def products(self, theta: np.ndarray) -> EvalProducts:
        fs = self.graph.forward(np.ascontiguousarray(theta, dtype=float))
        return self._products_from(fs)

    def logpost_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        """Log-posterior and its gradient (hand-coded reverse pass); states
        outside float support return (-inf, zeros) and are left to the
        sampler's rejection logic."""
        theta = np.ascontiguousarray(theta, dtype=float)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            fs = self.graph.forward(theta)
            prod = self._products_from(fs)
            acc = {
                "rho_n": np.zeros_like(fs["rho_n"]),
                "plwh": np.zeros_like(fs["plwh"]),
                "undiag": np.zeros_like(fs["undiag"]),
                "diag_n": np.zeros_like(fs["diag_n"]),
                "g1": np.zeros_like(fs["g1"]),
                "g2": np.zeros_like(fs["g2"]),
                "theta": np.zeros(self.dim + 1),
            }
            total = self.graph.prior_logdensity(theta)
            for term in self.terms:
                value = term.value_and_grad(theta, prod, acc)
                if math.isnan(value):
                    return -math.inf, np.zeros(self.dim)
                total += value
            if not math.isfinite(total):
                return -math.inf, np.zeros(self.dim)
            grad = self.graph.backward(theta, fs, acc)
        return total, grad

    def logpost_terms(self, theta: np.ndarray) -> dict[str, float]:
        theta = np.ascontiguousarray(theta, dtype=float)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out = {"prior": self.graph.prior_logdensity(theta)}
            prod = self.products(theta)
            for term in self.terms:
                value = term.value(theta, prod)
                if math.isnan(value):
                    raise TermNanError(term.name)
                out[term.name] = value
        return out

    def logpost(self, theta: np.ndarray) -> float:
        """Sampler-internal fast path: float-overflow states (reachable only
        through wild proposals) evaluate to -inf and get rejected; the public
        total_logposterior/logposterior_terms surface keeps the strict
        NaN-is-a-hard-failure contract."""
        theta = np.ascontiguousarray(theta, dtype=float)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            total = self.graph.prior_logdensity(theta)
            prod = self.products(theta)
            for term in self.terms:
                value = term.value(theta, prod)
                if math.isnan(value):
                    return -math.inf
                total += value
        return total


def total_logposterior(model: Model, theta: np.ndarray) -> float:
    """Prior plus every active source term; -inf outside support; a NaN
    term at a representable state is a hard failure naming the term."""
    return sum(model.logpost_terms(theta).values())


def logposterior_terms(model: Model, theta: np.ndarray) -> dict[str, float]:
    """Term-wise breakdown (diagnostics; keys are source names + 'prior')."""
    return model.logpost_terms(theta)


def build_terms(frame: Frame, pop: PopulationFrame, graph: ModelGraph,
                tables: dict[str, ObservationTable],
                config: ModelConfig) -> list:
    """Compile one term per active source with data present."""
    terms = []
    n_flat = pop.N.reshape(-1)
    comp_row = {(int(f), int(c)): i
                for i, (f, c) in enumerate(zip(graph.cl_fam, graph.cl_cell))}
    fam_index = {fam: i for i, fam in enumerate(("MSM", "BA", "OTH"))}
    fam_of_group = {g: fam for fam, (g, _) in CLINIC_FAMILIES.items()}

    def cells_n(cells: np.ndarray) -> float:
        return float(n_flat[cells].sum())

    for source in SOURCES:
        table = tables.get(source)
        if table is None or not config.source_active(source) or table.n_rows == 0:
            continue
        cols = table.columns

        if source == "ONS":
            continue  # known denominators; no likelihood contribution

        if source == "GUMCAD-ATTEND":
            idx, indptr = _csr(table.margins)
            n = np.asarray([cells_n(c) for c in table.cells])
            y = cols["attendees"].astype(float)
            if np.any(y > n):
                raise DataError(f"{source}: attendees exceed population")
            terms.append(RhoCountTerm(name=source, y=y, n=n, idx=idx,
                                      indptr=indptr,
                                      const=_log_choose(n, y)))

        elif source == "GUMCAD-PREV":
            rows = []
            for i in range(table.n_rows):
                g, a, s, r, t = table.row_stratum[i]
                fam = fam_of_group[frame.config.exposures[g]]
                rows.append(comp_row[(fam_index[fam], frame.cell_flat(a, s, r, t))])
            y_prev = cols["prev_diag"].astype(float)
            n_att = cols["attendees"].astype(float)
            y_new = cols["new_diag"].astype(float)
            n_test = cols["tested"].astype(float)
            y = np.concatenate([y_prev, y_new])
            n = np.concatenate([n_att, n_test])
            terms.append(GumcadPrevTerm(name=source,
                                        comp_rows=np.asarray(rows, dtype=_I64),
                                        y=y, n=n, const=_log_choose(n, y)))

        elif source in ("NATSAL", "CENSUS"):
            num_idx, num_indptr = _csr(table.margins)
            if source == "NATSAL":
                den_const = np.asarray([cells_n(c) for c in table.cells])
                den_field, den_idx, den_indptr = None, np.empty(0, _I64), np.zeros(1, _I64)
            else:
                den_field = "rho_n"
                den_idx, den_indptr = _csr(table.margins2)
                den_const = np.empty(0)
            terms.append(RatioEstimateTerm(
                name=source, est_logit=cols["est_logit"].astype(float),
                se=cols["se"].astype(float), num_field="rho_n",
                num_idx=num_idx, num_indptr=num_indptr, den_field=den_field,
                den_idx=den_idx, den_indptr=den_indptr, den_const=den_const))

        elif source == "PWID-SIZE":
            idx, indptr = _csr(table.margins)
            terms.append(CountScaleTerm(
                name=source, log_est=np.log(cols["estimate"].astype(float)),
                se=cols["se_log"].astype(float), idx=idx, indptr=indptr))

        elif source == "UAM":
            idx, indptr = _csr(table.margins)
            pos = cols["positive"].astype(float)
            samp = cols["sampled"].astype(float)
            aware = cols["aware"].astype(float)
            terms.append(MixtureBinomTerm(
                name="UAM-pi", y=pos, n=samp, num_field="plwh",
                den_field="rho_n", num_idx=idx, num_indptr=indptr,
                const=_log_choose(samp, pos)))
            terms.append(MixtureBinomTerm(
                name="UAM-delta", y=aware, n=pos, num_field="diag_n",
                den_field="plwh", num_idx=idx, num_indptr=indptr,
                const=_log_choose(pos, aware)))

        elif source == "NSHPC":
            idx, indptr = _csr(table.margins)
            y = cols["diagnoses"].astype(float)
            n = cols["births"].astype(float)
            terms.append(MixtureBinomTerm(
                name=source, y=y, n=n, num_field="undiag", den_field="rho_n",
                num_idx=idx, num_indptr=indptr, const=_log_choose(n, y)))

        elif source in ("GMSHS", "AHSS", "NHSBT"):
            fieldmap = {"GMSHS": ("undiag", "rho_n"),
                        "AHSS": ("diag_n", "plwh"),
                        "NHSBT": ("plwh", "rho_n")}
            num_field, den_field = fieldmap[source]
            idx, indptr = _csr(list(table.margins) + list(table.margins2))
            sl = graph.layout.slices[f"offset_{source}"]
            offsets = np.arange(sl.start, sl.stop, dtype=_I64)
            if len(offsets) != table.n_rows:
                raise ShapeError(f"{source}: offset vector does not match rows")
            y = np.concatenate([cols["y1"], cols["y2"]]).astype(float)
            n = np.concatenate([cols["n1"], cols["n2"]]).astype(float)
            terms.append(TwoArmOrTerm(
                name=source, y=y, n=n,
                num_field=num_field, den_field=den_field,
                idx=idx, indptr=indptr,
                offset_idx=np.concatenate([offsets, offsets]),
                const=_log_choose(n, y)))

        elif source == "HARS":
            idx, indptr = _csr(table.margins)
            d = cols["diagnosed"].astype(float)
            const = -float(sum(math.lgamma(di + 1) for di in d))
            terms.append(HarsTerm(name=source, d=d, idx=idx, indptr=indptr,
                                  const=const))
    return terms


def build_blocks(graph: ModelGraph) -> list[np.ndarray]:
    """Sampler update blocks: related coordinates grouped, deterministic order."""
    lay = graph.layout
    c = graph.frame.config
    A, S, R, T = graph.frame.cell_shape
    male = c.genders.index("male") if "male" in c.genders else None
    blocks: list[np.ndarray] = []

    def off(name, *idx):
        return lay.offset(name, *idx)

    if male is not None:
        for a in range(A):
            for r in range(R):
                blocks.append(np.asarray(
                    [off("rho_msm_nonclinic", a, r)]
                    + [off("rho_msm_clinic", a, r, t) for t in range(T)], dtype=_I64))
    for a in range(A):
        for s in range(S):
            for r in range(R):
                blocks.append(np.asarray(
                    [off("rho_pwid", a, s, r, 0), off("rho_pwid", a, s, r, 1)]
                    + [off("pwid_pi", a, s, r, t) for t in range(T)]
                    + [off("pwid_delta", a, s, r, t) for t in range(T)], dtype=_I64))
                blocks.append(np.asarray(
                    [off("rho_het_nonclinic", a, s, r)]
                    + [off("rho_het_clinic", a, s, r, t, j)
                       for t in range(T) for j in range(2)], dtype=_I64))
    for fam in ("MSM", "BA", "OTH"):
        if fam == "MSM":
            if male is None:
                continue
            genders = [male]
        else:
            genders = list(range(S))
        for a in range(A):
            for s in genders:
                for r in range(R):
                    if fam == "MSM":
                        idx = ([off("g1_MSM", a, r, t) for t in range(T)]
                               + [off("g2_MSM", a, r, t) for t in range(T)])
                    else:
                        idx = ([off(f"g1_{fam}", a, s, r, t) for t in range(T)]
                               + [off(f"g2_{fam}", a, s, r, t) for t in range(T)])
                    blocks.append(np.asarray(idx, dtype=_I64))
    for oi in range(2):
        for fi in range(3):
            blocks.append(np.asarray(
                [off("z_strata", oi, fi, a, r) for a in range(A) for r in range(R)]
                + [off("z_year", oi, fi, t) for t in range(T)]
                + [off("mu_or", oi, fi)], dtype=_I64))
    blocks.append(np.asarray(
        list(range(lay.slices["psi"].start, lay.slices["psi"].stop))
        + list(range(lay.slices["log_sigma_strata"].start,
                     lay.slices["log_sigma_strata"].stop))
        + list(range(lay.slices["log_sigma_year"].start,
                     lay.slices["log_sigma_year"].stop)), dtype=_I64))
    blocks.append(np.asarray(
        list(range(lay.slices["kappa_raw"].start, lay.slices["kappa_raw"].stop))
        + list(range(lay.slices["w_raw"].start, lay.slices["w_raw"].stop))
        + list(range(lay.slices["eps"].start, lay.slices["eps"].stop)),
        dtype=_I64))
    for source in ("GMSHS", "AHSS", "NHSBT"):
        sl = lay.slices[f"offset_{source}"]
        if sl.stop > sl.start:
            blocks.append(np.arange(sl.start, sl.stop, dtype=_I64))
    return blocks


def _emp_logit(y: float, n: float) -> float:
    return math.log((y + 0.5) / (n - y + 0.5))


def _empirical_inits(frame: Frame, graph: ModelGraph, pop: PopulationFrame,
                     tables: dict[str, ObservationTable],
                     config: ModelConfig) -> dict[int, float]:
    """Warmup-shortening start values for the anchor coordinates, from
    empirical moments of the sources that observe them directly."""
    c = frame.config
    A, S, R, T = frame.cell_shape
    lay = graph.layout
    male = c.genders.index("male") if "male" in c.genders else None
    fam_index = {"MSM": 0, "BA": 1, "OTH": 2}
    fam_of_group = {g: fam for fam, (g, _) in CLINIC_FAMILIES.items()}
    init: dict[int, float] = {}

    gumcad = tables.get("GUMCAD-PREV")
    if gumcad is not None:
        cols = gumcad.columns
        for i in range(gumcad.n_rows):
            g, a, s, r, t = gumcad.row_stratum[i]
            fam = fam_of_group[c.exposures[g]]
            if fam == "MSM":
                i1 = lay.offset("g1_MSM", a, r, t)
                i2 = lay.offset("g2_MSM", a, r, t)
            else:
                i1 = lay.offset(f"g1_{fam}", a, s, r, t)
                i2 = lay.offset(f"g2_{fam}", a, s, r, t)
            if cols["attendees"][i] > 0:
                init[i1] = _emp_logit(cols["prev_diag"][i], cols["attendees"][i])
            if cols["tested"][i] > 0:
                init[i2] = _emp_logit(cols["new_diag"][i], cols["tested"][i])

    uam = tables.get("UAM")
    if uam is not None:
        cols = uam.columns
        for i in range(uam.n_rows):
            _, a, s, r, t = [int(v) for v in
                             np.unravel_index(uam.margins[i][0], frame.shape)]
            if cols["sampled"][i] > 0:
                init[lay.offset("pwid_pi", a, s, r, t)] = _emp_logit(
                    cols["positive"][i], cols["sampled"][i])
            if cols["positive"][i] > 0:
                init[lay.offset("pwid_delta", a, s, r, t)] = _emp_logit(
                    cols["aware"][i], cols["positive"][i])

    # group-size shares -> softmax logits relative to the lowest-risk baseline
    attend_share: dict[tuple, float] = {}
    attend = tables.get("GUMCAD-ATTEND")
    if attend is not None:
        n_flat = pop.N.reshape(-1)
        for i in range(attend.n_rows):
            g, a, s, r, t = attend.row_stratum[i]
            n_pop = float(n_flat[attend.cells[i]].sum())
            attend_share[(g, a, s, r, t)] = float(
                (attend.columns["attendees"][i] + 0.5) / (n_pop + 1.0))
    natsal_p: dict[tuple, float] = {}
    natsal = tables.get("NATSAL")
    if natsal is not None:
        for i in range(natsal.n_rows):
            _, a, s, r, t = [int(v) for v in
                             np.unravel_index(natsal.margins[i][0], frame.shape)]
            natsal_p[(a, r)] = float(_expit_scalar(natsal.columns["est_logit"][i]))
    census_q: dict[tuple, float] = {}
    census = tables.get("CENSUS")
    if census is not None:
        for i in range(census.n_rows):
            _, a, s, r, t = [int(v) for v in
                             np.unravel_index(census.margins[i][0], frame.shape)]
            census_q[(a, s, r)] = float(_expit_scalar(census.columns["est_logit"][i]))
    pwid_share: dict[tuple, float] = {}
    pwid = tables.get("PWID-SIZE")
    if pwid is not None:
        n_flat = pop.N.reshape(-1)
        for i in range(pwid.n_rows):
            g, a, s, r, t = [int(v) for v in
                             np.unravel_index(pwid.margins[i][0], frame.shape)]
            n_pop = float(n_flat[pwid.cells[i]].sum())
            pwid_share[(g, a, s, r)] = min(
                float(pwid.columns["estimate"][i]) / n_pop, 0.2)

    floor = 1e-5
    for a in range(A):
        for s in range(S):
            for r in range(R):
                msm = natsal_p.get((a, r), 0.025) if s == male else 0.0
                p_cur = pwid_share.get((G_PWID_CUR, a, s, r), 0.003)
                p_ex = pwid_share.get((G_PWID_EX, a, s, r), 0.006)
                q = census_q.get((a, s, r), 0.03)
                het = max(1.0 - msm - p_cur - p_ex, 0.2)
                ba_c = np.mean([attend_share.get((G_BA_C, a, s, r, t), 1e-4)
                                for t in range(T)])
                oth_c = np.mean([attend_share.get((G_OTH_C, a, s, r, t), 5e-3)
                                 for t in range(T)])
                ba_nc = max(q * het - ba_c, floor)
                lowest = max(1.0 - msm - p_cur - p_ex - ba_c - oth_c - ba_nc, 0.1)

                def alog(x):
                    return math.log(max(x, floor) / lowest)

                init[lay.offset("rho_pwid", a, s, r, 0)] = alog(p_cur)
                init[lay.offset("rho_pwid", a, s, r, 1)] = alog(p_ex)
                init[lay.offset("rho_het_nonclinic", a, s, r)] = alog(ba_nc)
                for t in range(T):
                    ba_ct = attend_share.get((G_BA_C, a, s, r, t), 1e-4)
                    oth_ct = attend_share.get((G_OTH_C, a, s, r, t), 5e-3)
                    init[lay.offset("rho_het_clinic", a, s, r, t, 0)] = alog(ba_ct)
                    init[lay.offset("rho_het_clinic", a, s, r, t, 1)] = alog(oth_ct)
                if s == male:
                    for t in range(T):
                        msm_c = attend_share.get((G_MSM_C, a, s, r, t),
                                                 0.3 * msm)
                        init[lay.offset("rho_msm_clinic", a, r, t)] = alog(msm_c)
                    mean_c = np.mean([attend_share.get((G_MSM_C, a, s, r, t),
                                                       0.3 * msm)
                                      for t in range(T)])
                    init[lay.offset("rho_msm_nonclinic", a, r)] = alog(
                        max(msm - mean_c, floor))
    return init


def _expit_scalar(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _offset_inits(model: Model) -> None:
    """Align each survey offset with its arm-1 empirical logit at the
    recentred start point (kills the offset/level misalignment at init)."""
    theta0 = np.zeros(model.dim)
    theta0[model.graph.prior_idx] = model.graph.prior_mean
    if len(model.init_idx):
        theta0[model.init_idx] = model.init_values
    prod = model.products(theta0)
    extra_idx, extra_val = [], []
    for term in model.terms:
        if not isinstance(term, TwoArmOrTerm):
            continue
        rows = len(term.y) // 2
        num = np.empty(len(term.y))
        K.csr_gather_sum(prod.field(term.num_field), term.idx, term.indptr, num)
        den = np.empty(len(term.y))
        K.csr_gather_sum(prod.field(term.den_field), term.idx, term.indptr, den)
        q = _safe_ratio(num, den)
        for i in range(rows):
            if term.n[i] <= 0 or q[i] <= 0 or q[i] >= 1:
                continue
            b_hat = (_emp_logit(term.y[i], term.n[i])
                     - math.log(q[i] / (1.0 - q[i])))
            extra_idx.append(int(term.offset_idx[i]))
            extra_val.append(b_hat)
    if extra_idx:
        model.init_idx = np.concatenate([model.init_idx,
                                         np.asarray(extra_idx, dtype=_I64)])
        model.init_values = np.concatenate([model.init_values,
                                            np.asarray(extra_val)])


def build_model(frame: Frame, pop: PopulationFrame,
                tables: dict[str, ObservationTable],
                config: ModelConfig) -> Model:
    """Assemble the posterior for a validated set of observation tables."""
    n_offsets = {s: (tables[s].n_rows if s in tables and config.source_active(s)
                     else 0)
                 for s in ("GMSHS", "AHSS", "NHSBT")}
    weights = clinic_pathway_weights(frame, tables.get("GUMCAD-PREV"), config)
    graph = build_graph(frame, pop, config, clinic_weights=weights,
                        n_offsets=n_offsets)
    terms = build_terms(frame, pop, graph, tables, config)
    init = _empirical_inits(frame, graph, pop,
                            {k: v for k, v in tables.items()
                             if config.source_active(k)}, config)
    idx = np.asarray(sorted(init), dtype=_I64)
    vals = np.asarray([init[i] for i in sorted(init)])
    model = Model(graph=graph, terms=terms, blocks=build_blocks(graph),
                  init_idx=idx, init_values=vals)
    _offset_inits(model)
    return model
