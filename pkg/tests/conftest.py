import numpy as np
import pytest

from evisynth.inference import SamplerConfig, run_chains
from evisynth.likelihoods import build_model
from evisynth.model import ModelConfig
from evisynth.simulator import SimConfig, draw_truth, generate_bundle
from evisynth.strata import Frame, StrataConfig

# tight, well-conditioned priors for synthetic-data tests (mirrors
# configs/sbc_small.cfg)
CAL_KW = dict(rho_alpha_sd=0.8, g1_sd=1.0, g2_sd=1.0, pwid_pi_sd=1.0,
              pwid_delta_sd=0.8, msm_clinic_sd=1.0, msm_nonclinic_sd=0.8,
              pwid_alpha_sd=0.7, or_mean_sd=0.7, mf_or_sd=0.7,
              sigma_scale=0.4, kappa_scale=0.5, eps_sd=0.7, offset_sd=1.5)


@pytest.fixture(scope="session")
def small_frame():
    return Frame(StrataConfig(ages=("15-34", "35-44"), years=(2012, 2013)))


@pytest.fixture(scope="session")
def cal_config():
    return ModelConfig(**CAL_KW)


@pytest.fixture(scope="session")
def small_truth(small_frame, cal_config):
    return draw_truth(small_frame, cal_config, SimConfig(pop_scale=0.05),
                      seed=7)


@pytest.fixture(scope="session")
def small_bundle(small_truth, tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle")
    bundle, manifest_path = generate_bundle(small_truth, out)
    return bundle, manifest_path


@pytest.fixture(scope="session")
def small_model(small_frame, cal_config, small_bundle):
    bundle, _ = small_bundle
    return build_model(small_frame, bundle.pop, bundle.tables, cal_config)


@pytest.fixture(scope="session")
def small_fit(small_model):
    cfg = SamplerConfig(n_chains=2, n_warmup=500, n_keep=400, seed=5,
                        hmc_steps=24)
    post, diag = run_chains(small_model, cfg)
    return post, diag


@pytest.fixture(scope="session")
def full_frame():
    return Frame(StrataConfig())


def rng(seed=0):
    return np.random.default_rng(seed)
