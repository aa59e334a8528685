"""Frame enumeration, index arithmetic, denominators."""

import numpy as np
import pytest

from evisynth.errors import ConfigError, ShapeError
from evisynth.strata import (EXPOSURES, Frame, PopulationFrame, StratumKey,
                             StrataConfig, enumerate_strata)


def test_default_frame_count():
    # 4 ages x 2 genders x 2 regions x 6 years x 9 exposures,
    # minus the MSM x female cells: 4*2*2*6*9 - 4*1*2*6*2 = 768
    keys = enumerate_strata(StrataConfig())
    assert len(keys) == 768


def test_single_cell_male_has_all_nine():
    cfg = StrataConfig(ages=("15-34",), genders=("male",),
                       regions=("London",), years=(2012,))
    assert len(enumerate_strata(cfg)) == 9


def test_zero_years_is_config_error():
    with pytest.raises(ConfigError):
        StrataConfig(years=())


def test_noncontiguous_years_rejected():
    with pytest.raises(ConfigError):
        StrataConfig(years=(2012, 2014))


def test_flat_index_roundtrip():
    frame = Frame(StrataConfig(ages=("15-34", "35-44"), years=(2012, 2013)))
    for i, key in enumerate(frame.keys):
        assert frame.flat_index(key) == i
    assert frame.flat_index(frame.keys[0]) == 0
    assert frame.flat_index(frame.keys[-1]) == len(frame.keys) - 1


def test_out_of_frame_key_is_index_error():
    frame = Frame(StrataConfig(ages=("15-34",), years=(2012,)))
    with pytest.raises(IndexError):
        frame.flat_index(StratumKey("MSM-clinic", "45-59", "male", "London", 2012))


def test_no_msm_female_cells():
    for key in Frame(StrataConfig()).keys:
        if key.exposure.startswith("MSM"):
            assert key.gender == "male"


def test_valid_mask_matches_enumeration():
    frame = Frame(StrataConfig())
    assert int(frame.valid_mask().sum()) == len(frame.keys)


def test_regional_additivity():
    """Any additive quantity aggregates as England = London + outside."""
    frame = Frame(StrataConfig())
    g = np.random.default_rng(3)
    values = np.where(frame.valid_mask(), g.random(frame.shape), 0.0)
    by_region = values.sum(axis=(0, 1, 2, 4))
    assert np.allclose(values.sum(), by_region[0] + by_region[1])


def test_resolve_margin_aliases():
    frame = Frame(StrataConfig())
    pairs = frame.resolve_margin("MSM", "15-34", "male", "London", "2012")
    assert len(pairs) == 2
    assert not frame.resolve_margin("MSM", "15-34", "female", "London", "2012")
    all_groups = frame.resolve_margin("ALL", "15-34", "ALL", "London", "2012")
    assert len(all_groups) == 9 + 7  # male block + female block


def test_population_frame_validation():
    with pytest.raises(ShapeError):
        PopulationFrame(N=np.zeros((1, 1, 1, 1)), eth_frac=np.zeros((1, 1, 1)))
    with pytest.raises(ShapeError):
        PopulationFrame(N=np.ones((1, 1, 1, 1)),
                        eth_frac=np.full((1, 1, 1), 1.5))
    pop = PopulationFrame(N=np.ones((2, 2, 2, 2)),
                          eth_frac=np.full((2, 2, 2), 0.1))
    frame = Frame(StrataConfig(ages=("15-34", "35-44"), years=(2012, 2013)))
    pop.check_frame(frame)
    with pytest.raises(ShapeError):
        pop.check_frame(Frame(StrataConfig()))


def test_exposure_enum_is_canonical():
    assert len(EXPOSURES) == 9
    assert EXPOSURES[-1] == "lowest-risk"
