"""Synthetic ground truth and full observation bundles.

Truth is drawn from exactly the model's prior (required for calibration
validity); every table is then sampled from the corresponding likelihood at
the truth values, reusing the model's own transform so generator and
evaluator cannot drift apart. Sampling designs (survey sizes, clinic
pathway splits, birth counts) are deterministic given the config, so the
fitted model conditions on the same ancillary quantities the generator
used.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import rng as rngmod
from .errors import ConfigError, DataError
from .ingest import load_bundle, write_manifest, write_source_csv
from .likelihoods import clinic_pathway_weights
from .model import ModelConfig, ModelGraph, build_graph, derive_functionals
from .strata import (G_BA_C, G_BA_NC, G_LOW, G_MSM_C, G_MSM_NC, G_OTH_C,
                     G_OTH_NC, G_PWID_CUR, G_PWID_EX, UNDER45_AGES, Frame,
                     PopulationFrame)

CLINIC_GROUPS_IDX = {"MSM": G_MSM_C, "BA": G_BA_C, "OTH": G_OTH_C}
FAMILY_OF_CLINIC = {G_MSM_C: "MSM", G_BA_C: "BA", G_OTH_C: "OTH"}


@dataclass(frozen=True)
class SimConfig:
    """Per-source sampling intensities (the simulation design)."""

    scenario: str = "prior"
    uam_sampled: int = 300
    gmshs_n: int = 800
    ahss_n: int = 500
    nhsbt_n: int = 20000
    birth_rate: float = 0.06
    natsal_se: float = 0.15      # logit scale, fixed by design
    pwid_se_log: float = 0.15
    pop_scale: float = 1.0

    def __post_init__(self):
        for name in ("uam_sampled", "gmshs_n", "ahss_n", "nhsbt_n"):
            if getattr(self, name) < 0:
                raise ConfigError(f"simulation: {name} must be >= 0")
        if not 0 < self.birth_rate < 1:
            raise ConfigError("simulation: birth_rate must lie in (0, 1)")

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "SimConfig":
        return cls(
            scenario=cfgmod.get_str(kv, "scenario", cls.scenario),
            uam_sampled=cfgmod.get_int(kv, "sim_uam_sampled", cls.uam_sampled),
            gmshs_n=cfgmod.get_int(kv, "sim_gmshs_n", cls.gmshs_n),
            ahss_n=cfgmod.get_int(kv, "sim_ahss_n", cls.ahss_n),
            nhsbt_n=cfgmod.get_int(kv, "sim_nhsbt_n", cls.nhsbt_n),
            birth_rate=cfgmod.get_float(kv, "sim_birth_rate", cls.birth_rate),
            natsal_se=cfgmod.get_float(kv, "sim_natsal_se", cls.natsal_se),
            pwid_se_log=cfgmod.get_float(kv, "sim_pwid_se_log", cls.pwid_se_log),
            pop_scale=cfgmod.get_float(kv, "sim_pop_scale", cls.pop_scale),
        )


def synth_population(frame: Frame, sim: SimConfig) -> PopulationFrame:
    """Deterministic England-like denominators: ~39.6M aged 15-74 at scale 1,
    London holding roughly a fifth, mild annual growth."""
    c = frame.config
    A, S, R, T = frame.cell_shape
    age_share = {"15-34": 0.42, "35-44": 0.20, "45-59": 0.25, "60-74": 0.13}
    region_share = {"London": 0.22, "outside-London": 0.78}
    n = np.empty((A, S, R, T))
    for a, age in enumerate(c.ages):
        for s in range(S):
            for r, region in enumerate(c.regions):
                for t in range(T):
                    base = (39.6e6 * sim.pop_scale
                            * age_share.get(age, 1.0 / A)
                            * region_share.get(region, 1.0 / R) / S)
                    n[a, s, r, t] = float(round(base * 1.004 ** t))
    eth = np.empty((A, S, R))
    for r, region in enumerate(c.regions):
        eth[:, :, r] = 0.075 if region == "London" else 0.016
    return PopulationFrame(N=n, eth_frac=eth)


def survey_design(frame: Frame, sim: SimConfig) -> dict[str, int]:
    """Two-arm survey row counts (fixes the offset-vector lengths)."""
    c = frame.config
    A, _, R, T = frame.cell_shape
    has_msm = "male" in c.genders and "London" in c.regions
    both = "male" in c.genders and "female" in c.genders
    return {
        "GMSHS": A * T if has_msm and sim.gmshs_n > 0 else 0,
        "AHSS": A * R if both and sim.ahss_n > 0 else 0,
        "NHSBT": A * R * T if both and sim.nhsbt_n > 0 else 0,
    }


@dataclass
class TruthScenario:
    """Ground truth: the full parameter vector plus everything needed to
    regenerate data from it."""

    theta: np.ndarray
    frame: Frame
    pop: PopulationFrame
    config: ModelConfig
    sim: SimConfig
    seed: int

    def graph(self, clinic_weights: dict | None = None) -> ModelGraph:
        return build_graph(self.frame, self.pop, self.config,
                           clinic_weights=clinic_weights,
                           n_offsets=survey_design(self.frame, self.sim))

    def basic(self, clinic_weights: dict | None = None):
        return self.graph(clinic_weights).materialize(self.theta)

    def functionals(self, clinic_weights: dict | None = None):
        return derive_functionals(self.basic(clinic_weights), self.pop)


def draw_truth(frame: Frame, config: ModelConfig, sim: SimConfig,
               seed: int) -> TruthScenario:
    """Truth sampled from exactly the model's prior."""
    pop = synth_population(frame, sim)
    graph = build_graph(frame, pop, config,
                        n_offsets=survey_design(frame, sim))
    theta = graph.sample_prior(rngmod.make_stream(seed, rngmod.TRUTH))
    return TruthScenario(theta=theta, frame=frame, pop=pop, config=config,
                         sim=sim, seed=seed)


def _largest_remainder_split(total: int, shares) -> list[int]:
    raw = [total * w for w in shares]
    base = [int(x) for x in raw]
    short = total - sum(base)
    order = sorted(range(len(raw)), key=lambda j: raw[j] - base[j], reverse=True)
    for j in order[:short]:
        base[j] += 1
    return base


def _agg(flat_field: np.ndarray, flats: list[int]) -> float:
    return float(flat_field[flats].sum())


def _guarded_logit(q: float) -> float:
    if q <= 0.0:
        return -np.inf
    if q >= 1.0:
        return np.inf
    return float(np.log(q) - np.log1p(-q))


def _expit(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return float(e / (1.0 + e))


def generate_bundle(truth: TruthScenario, out_dir: Path,
                    state_override=None):
    """Sample every source table at the truth values and write the complete
    CSV bundle + manifest; returns (bundle, manifest_path).

    state_override, when given, replaces the materialized BasicParameters
    (used by edge-case tests, e.g. zero prevalence everywhere).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame, pop, sim = truth.frame, truth.pop, truth.sim
    c = frame.config
    A, S, R, T = frame.cell_shape
    theta = truth.theta
    male = c.genders.index("male") if "male" in c.genders else None
    files: dict[str, str] = {}

    def stream(k: int):
        return rngmod.make_stream(truth.seed, rngmod.TABLES, k)

    def dense(g, a, s, r, t):
        return frame.dense_flat(g, a, s, r, t)

    # ONS
    rows = []
    for a, age in enumerate(c.ages):
        for s, gender in enumerate(c.genders):
            for r, region in enumerate(c.regions):
                for t, year in enumerate(c.years):
                    rows.append([age, gender, region, year,
                                 int(pop.N[a, s, r, t])])
    write_source_csv("ONS", rows, out_dir / "population.csv")
    files["ONS"] = "population.csv"

    # stage 1: group sizes (rho does not depend on the clinic pathway data)
    graph0 = truth.graph()
    rho = graph0.materialize_rho(theta)
    if state_override is not None:
        rho = state_override.rho
    rho_flat = rho.reshape(-1)
    n_cell = pop.N

    # GUMCAD attendance + components -> pathway weights
    rng = stream(0)
    lay = graph0.layout
    lk = np.abs(theta[lay.slices["kappa_raw"]])
    attend_rows, prev_rows = [], []
    weights: dict[tuple, tuple] = {}
    fam_axes = {"MSM": ("g1_MSM", "g2_MSM"), "BA": ("g1_BA", "g2_BA"),
                "OTH": ("g1_OTH", "g2_OTH")}
    for fam, g_c in CLINIC_GROUPS_IDX.items():
        genders = [male] if fam == "MSM" else list(range(S))
        if fam == "MSM" and male is None:
            continue
        group_label = c.exposures[g_c]
        for a, age in enumerate(c.ages):
            for s in genders:
                gender = c.genders[s]
                for r, region in enumerate(c.regions):
                    for t, year in enumerate(c.years):
                        p_att = rho_flat[dense(g_c, a, s, r, t)]
                        n_att = int(rng.binomial(int(n_cell[a, s, r, t]), p_att))
                        attend_rows.append([group_label, age, gender, region,
                                            year, n_att])
                        g1name, g2name = fam_axes[fam]
                        if fam == "MSM":
                            idx1 = lay.offset(g1name, a, r, t)
                            idx2 = lay.offset(g2name, a, r, t)
                        else:
                            idx1 = lay.offset(g1name, a, s, r, t)
                            idx2 = lay.offset(g2name, a, s, r, t)
                        g1 = _expit(theta[idx1])
                        g2 = _expit(theta[idx2])
                        if state_override is not None:
                            comp = state_override
                            row_mask = ((comp.comps.cell_flat
                                         == frame.cell_flat(a, s, r, t))
                                        & (comp.comps.fam_id
                                           == list(CLINIC_GROUPS_IDX).index(fam)))
                            g1 = float(comp.comps.g1[row_mask][0])
                            g2 = float(comp.comps.g2[row_mask][0])
                        y_prev = int(rng.binomial(n_att, g1))
                        rest = n_att - y_prev
                        n_test, n_nooff, n_opt = _largest_remainder_split(
                            rest, truth.config.clinic_w)
                        y_new = int(rng.binomial(n_test, g2))
                        prev_rows.append([group_label, age, gender, region, year,
                                          n_att, y_prev, n_test, y_new,
                                          n_nooff, n_opt])
                        if rest > 0:
                            weights[(fam, a, s, r, t)] = (n_test / rest,
                                                          n_nooff / rest,
                                                          n_opt / rest)
    write_source_csv("GUMCAD-ATTEND", attend_rows, out_dir / "gumcad_attend.csv")
    files["GUMCAD-ATTEND"] = "gumcad_attend.csv"
    write_source_csv("GUMCAD-PREV", prev_rows, out_dir / "gumcad_prev.csv")
    files["GUMCAD-PREV"] = "gumcad_prev.csv"

    # stage 2: full state under the realized pathway weights
    graph = truth.graph(clinic_weights=weights)
    basic = state_override if state_override is not None else graph.materialize(theta)
    func = derive_functionals(basic, pop)
    plwh = func.plwh.reshape(-1)
    undiag = func.undiag_count.reshape(-1)
    diag_n = func.diag_count.reshape(-1)
    rho_n = func.rho_n.reshape(-1)

    def ratio(numf, denf, flats):
        den = _agg(denf, flats)
        return _agg(numf, flats) / den if den > 0 else 0.0

    # NATSAL (anchor-year MSM proportion, males); the design se is fixed on
    # the logit scale and written back through the delta method so the loader
    # recovers it exactly
    rng = stream(1)
    rows = []
    if male is not None:
        se_logit = sim.natsal_se
        for a, age in enumerate(c.ages):
            for r, region in enumerate(c.regions):
                flats = [dense(G_MSM_C, a, male, r, 0), dense(G_MSM_NC, a, male, r, 0)]
                p_true = _agg(rho_n, flats) / float(n_cell[a, male, r, 0])
                est_logit = rng.normal(_guarded_logit(max(p_true, 1e-12)), se_logit)
                p_est = _expit(est_logit)
                rows.append([age, region, float(p_est),
                             float(se_logit * p_est * (1 - p_est))])
    write_source_csv("NATSAL", rows, out_dir / "natsal.csv")
    files["NATSAL"] = "natsal.csv"

    # CENSUS: observed BA share of heterosexuals at the anchor year
    rng = stream(2)
    rows = []
    se_logit = truth.config.census_default_se
    for a, age in enumerate(c.ages):
        for s, gender in enumerate(c.genders):
            for r, region in enumerate(c.regions):
                num = [dense(G_BA_C, a, s, r, 0), dense(G_BA_NC, a, s, r, 0)]
                den = num + [dense(G_OTH_C, a, s, r, 0),
                             dense(G_OTH_NC, a, s, r, 0),
                             dense(G_LOW, a, s, r, 0)]
                den_sum = _agg(rho_n, den)
                q = _agg(rho_n, num) / den_sum if den_sum > 0 else 0.0
                est = _expit(rng.normal(_guarded_logit(max(q, 1e-12)), se_logit))
                rows.append([age, gender, region, float(est), ""])
    write_source_csv("CENSUS", rows, out_dir / "census.csv")
    files["CENSUS"] = "census.csv"

    # PWID-SIZE: log-normal around the anchor-year group counts
    rng = stream(3)
    rows = []
    for g, label in ((G_PWID_CUR, "PWID-current"), (G_PWID_EX, "PWID-ex")):
        for a, age in enumerate(c.ages):
            for s, gender in enumerate(c.genders):
                for r, region in enumerate(c.regions):
                    count = _agg(rho_n, [dense(g, a, s, r, 0)])
                    est = float(np.exp(rng.normal(np.log(max(count, 1e-6)),
                                                  sim.pwid_se_log)))
                    rows.append([label, age, gender, region, est,
                                 float(sim.pwid_se_log)])
    write_source_csv("PWID-SIZE", rows, out_dir / "pwid_size.csv")
    files["PWID-SIZE"] = "pwid_size.csv"

    # GMSHS: two-arm undiagnosed prevalence among London MSM
    rng = stream(4)
    rows = []
    design = survey_design(frame, sim)
    if design["GMSHS"]:
        sl = graph.layout.slices["offset_GMSHS"]
        k = 0
        r_lon = c.regions.index("London")
        for a, age in enumerate(c.ages):
            for t, year in enumerate(c.years):
                u_c = ratio(undiag, rho_n, [dense(G_MSM_C, a, male, r_lon, t)])
                u_nc = ratio(undiag, rho_n, [dense(G_MSM_NC, a, male, r_lon, t)])
                b = theta[sl.start + k]
                k += 1
                n1 = int(0.45 * sim.gmshs_n)
                n2 = sim.gmshs_n - n1
                p1 = _expit(_guarded_logit(u_c) + b)
                p2 = _expit(_guarded_logit(u_nc) + b)
                rows.append([age, year, int(rng.binomial(n1, p1)), n1,
                             int(rng.binomial(n2, p2)), n2])
    write_source_csv("GMSHS", rows, out_dir / "gmshs.csv")
    files["GMSHS"] = "gmshs.csv"

    # UAM: prevalence and awareness among current injectors
    rng = stream(5)
    rows = []
    for a, age in enumerate(c.ages):
        for s, gender in enumerate(c.genders):
            for r, region in enumerate(c.regions):
                for t, year in enumerate(c.years):
                    flats = [dense(G_PWID_CUR, a, s, r, t)]
                    p = ratio(plwh, rho_n, flats)
                    d = ratio(diag_n, plwh, flats)
                    n = sim.uam_sampled
                    pos = int(rng.binomial(n, p))
                    aware = int(rng.binomial(pos, d)) if pos else 0
                    rows.append([age, gender, region, year, n, pos, aware])
    write_source_csv("UAM", rows, out_dir / "uam.csv")
    files["UAM"] = "uam.csv"

    # NSHPC: diagnoses in pregnancy vs live births (non-PWID women under 45);
    # birth counts are a fixed design derived from the population frame's
    # ethnicity fractions, never from the truth parameters
    rng = stream(6)
    rows = []
    if "female" in c.genders:
        s_f = c.genders.index("female")
        eth_groups = {"BA": (G_BA_C, G_BA_NC),
                      "OTH": (G_OTH_C, G_OTH_NC, G_LOW)}
        for eth, groups in eth_groups.items():
            for age in UNDER45_AGES:
                if age not in c.ages:
                    continue
                a = c.ages.index(age)
                for r, region in enumerate(c.regions):
                    eth_share = float(pop.eth_frac[a, s_f, r])
                    share = eth_share if eth == "BA" else 1.0 - eth_share
                    for t, year in enumerate(c.years):
                        flats = [dense(g, a, s_f, r, t) for g in groups]
                        u = ratio(undiag, rho_n, flats)
                        births = int(round(n_cell[a, s_f, r, t] * share
                                           * sim.birth_rate))
                        y = int(rng.binomial(births, u)) if births else 0
                        rows.append([eth, age, region, year, y, births])
    write_source_csv("NSHPC", rows, out_dir / "nshpc.csv")
    files["NSHPC"] = "nshpc.csv"

    # AHSS: male:female diagnosed proportion in black-African heterosexuals
    rng = stream(7)
    rows = []
    if design["AHSS"]:
        sl = graph.layout.slices["offset_AHSS"]
        k = 0
        s_f = c.genders.index("female")
        t_mid = (len(c.years) - 1) // 2
        for a, age in enumerate(c.ages):
            for r, region in enumerate(c.regions):
                m_flats = [dense(G_BA_C, a, male, r, t_mid),
                           dense(G_BA_NC, a, male, r, t_mid)]
                f_flats = [dense(G_BA_C, a, s_f, r, t_mid),
                           dense(G_BA_NC, a, s_f, r, t_mid)]
                b = theta[sl.start + k]
                k += 1
                p_m = _expit(_guarded_logit(ratio(diag_n, plwh, m_flats)) + b)
                p_f = _expit(_guarded_logit(ratio(diag_n, plwh, f_flats)) + b)
                n = sim.ahss_n
                rows.append([age, region, c.years[t_mid],
                             int(rng.binomial(n, p_m)), n,
                             int(rng.binomial(n, p_f)), n])
    write_source_csv("AHSS", rows, out_dir / "ahss.csv")
    files["AHSS"] = "ahss.csv"

    # NHSBT: male:female prevalence in non-clinic heterosexuals (blood donors)
    rng = stream(8)
    rows = []
    if design["NHSBT"]:
        sl = graph.layout.slices["offset_NHSBT"]
        k = 0
        s_f = c.genders.index("female")
        nc_groups = (G_BA_NC, G_OTH_NC, G_LOW)
        for a, age in enumerate(c.ages):
            for r, region in enumerate(c.regions):
                for t, year in enumerate(c.years):
                    m_flats = [dense(g, a, male, r, t) for g in nc_groups]
                    f_flats = [dense(g, a, s_f, r, t) for g in nc_groups]
                    b = theta[sl.start + k]
                    k += 1
                    p_m = _expit(_guarded_logit(ratio(plwh, rho_n, m_flats)) + b)
                    p_f = _expit(_guarded_logit(ratio(plwh, rho_n, f_flats)) + b)
                    n = sim.nhsbt_n
                    rows.append([age, region, year,
                                 int(rng.binomial(n, p_m)), n,
                                 int(rng.binomial(n, p_f)), n])
    write_source_csv("NHSBT", rows, out_dir / "nhsbt.csv")
    files["NHSBT"] = "nhsbt.csv"

    # HARS: diagnosed register counts per stratum
    rng = stream(9)
    rows = []
    for g, group in enumerate(c.exposures):
        for a, age in enumerate(c.ages):
            for s, gender in enumerate(c.genders):
                if group.startswith("MSM") and gender != "male":
                    continue
                for r, region in enumerate(c.regions):
                    for t, year in enumerate(c.years):
                        lam = diag_n[dense(g, a, s, r, t)]
                        rows.append([group, age, gender, region, year,
                                     int(rng.poisson(lam))])
    write_source_csv("HARS", rows, out_dir / "hars.csv")
    files["HARS"] = "hars.csv"

    manifest_path = out_dir / "manifest.json"
    write_manifest(files, manifest_path)
    bundle = load_bundle(manifest_path, frame, truth.config)
    return bundle, manifest_path


def write_truth(truth: TruthScenario, path: Path) -> None:
    """Truth file for later scoring: theta (named), seed, materialized state."""
    graph = truth.graph()
    basic = graph.materialize(truth.theta)
    payload = {
        "seed": truth.seed,
        "theta": {name: float(v) for name, v in zip(graph.names, truth.theta)},
        "rho": basic.rho.tolist(),
        "pi": basic.pi.tolist(),
        "delta": basic.delta.tolist(),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n",
                          encoding="utf-8")


def england_undiag_by_year(truth: TruthScenario) -> np.ndarray:
    func = truth.functionals()
    return func.undiag_count.sum(axis=(0, 1, 2, 3))


def scenario_halving(base: TruthScenario) -> TruthScenario:
    """Scenario in which the diagnosed fraction rises over the years so the
    final-year England undiagnosed total is exactly half the first year's,
    with prevalence drifting so diagnosed PLWH rise."""
    frame = base.frame
    T = len(frame.config.years)
    if T < 2:
        raise ConfigError("halving scenario needs at least two years")
    graph = base.graph()
    lay = graph.layout

    def adjusted(s: float) -> np.ndarray:
        theta = base.theta.copy()
        ramp = s * np.arange(T) / (T - 1)
        for name in ("g1_MSM", "g1_BA", "g1_OTH"):
            sl, shape = lay.slices[name], lay.shapes[name]
            if sl.stop > sl.start:
                theta[sl] = (theta[sl].reshape(shape) + ramp).reshape(-1)
        for name in ("g2_MSM", "g2_BA", "g2_OTH"):
            sl, shape = lay.slices[name], lay.shapes[name]
            if sl.stop > sl.start:
                theta[sl] = (theta[sl].reshape(shape) - ramp).reshape(-1)
        sl, shape = lay.slices["pwid_delta"], lay.shapes["pwid_delta"]
        theta[sl] = (theta[sl].reshape(shape) + ramp).reshape(-1)
        return theta

    def ratio(s: float) -> float:
        trial = replace(base, theta=adjusted(s))
        totals = england_undiag_by_year(trial)
        return float(totals[-1] / totals[0])

    # ratio(s) decreases in s; bracket [lo, hi] with ratio(lo) > 0.5 >= ratio(hi)
    if ratio(0.0) > 0.5:
        lo, hi = 0.0, 1.0
        while ratio(hi) > 0.5:
            hi *= 2.0
            if hi > 64:
                raise DataError("halving scenario infeasible: diagnosed fraction "
                                "cannot rise enough to halve the undiagnosed count")
    else:
        lo, hi = -1.0, 0.0
        while ratio(lo) <= 0.5:
            lo *= 2.0
            if lo < -64:
                raise DataError("halving scenario infeasible for this base")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if ratio(mid) > 0.5:
            lo = mid
        else:
            hi = mid
    return replace(base, theta=adjusted(hi))
