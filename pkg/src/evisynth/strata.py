"""Stratification frame: exposure/age/gender/region/year keys and denominators.

The frame is immutable after construction and safe to share across threads.
Dense model arrays use shape (G, A, S, R, T) with a validity mask that
excludes the structurally absent MSM x female cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import config as cfg
from .errors import ConfigError, ShapeError

EXPOSURES = (
    "MSM-clinic",
    "MSM-nonclinic",
    "PWID-current",
    "PWID-ex",
    "BAhet-clinic",
    "BAhet-nonclinic",
    "OTHhet-clinic",
    "OTHhet-nonclinic",
    "lowest-risk",
)
(G_MSM_C, G_MSM_NC, G_PWID_CUR, G_PWID_EX,
 G_BA_C, G_BA_NC, G_OTH_C, G_OTH_NC, G_LOW) = range(9)

MSM_GROUPS = ("MSM-clinic", "MSM-nonclinic")
PWID_GROUPS = ("PWID-current", "PWID-ex")
CLINIC_GROUPS = ("MSM-clinic", "BAhet-clinic", "OTHhet-clinic")

# family -> (clinic group, non-clinic group); drives the OR linkage structure
CLINIC_FAMILIES = {
    "MSM": ("MSM-clinic", "MSM-nonclinic"),
    "BA": ("BAhet-clinic", "BAhet-nonclinic"),
    "OTH": ("OTHhet-clinic", "OTHhet-nonclinic"),
}

# margin shorthands accepted in observation CSVs (exposure column)
EXPOSURE_ALIASES = {
    "MSM": MSM_GROUPS,
    "PWID": PWID_GROUPS,
    "BA-het": ("BAhet-clinic", "BAhet-nonclinic"),
    "OTH-het": ("OTHhet-clinic", "OTHhet-nonclinic", "lowest-risk"),
    "all-het": ("BAhet-clinic", "BAhet-nonclinic", "OTHhet-clinic",
                "OTHhet-nonclinic", "lowest-risk"),
    "nonclinic-het": ("BAhet-nonclinic", "OTHhet-nonclinic", "lowest-risk"),
}

GENDERS = ("male", "female")
DEFAULT_AGES = ("15-34", "35-44", "45-59", "60-74")
DEFAULT_REGIONS = ("London", "outside-London")
DEFAULT_YEARS = tuple(range(2012, 2018))

UNDER45_AGES = ("15-34", "35-44")


class StratumKey(NamedTuple):
    exposure: str
    age: str
    gender: str
    region: str
    year: int


@dataclass(frozen=True)
class StrataConfig:
    ages: tuple[str, ...] = DEFAULT_AGES
    genders: tuple[str, ...] = GENDERS
    regions: tuple[str, ...] = DEFAULT_REGIONS
    years: tuple[int, ...] = DEFAULT_YEARS
    exposures: tuple[str, ...] = EXPOSURES

    def __post_init__(self):
        for name in ("ages", "genders", "regions", "years", "exposures"):
            if len(getattr(self, name)) == 0:
                raise ConfigError(f"strata config: empty {name} list")
            if len(set(getattr(self, name))) != len(getattr(self, name)):
                raise ConfigError(f"strata config: repeated {name} entries")
        for g in self.genders:
            if g not in GENDERS:
                raise ConfigError(f"unknown gender {g!r}")
        for e in self.exposures:
            if e not in EXPOSURES:
                raise ConfigError(f"unknown exposure group {e!r}")
        years = self.years
        if list(years) != list(range(years[0], years[-1] + 1)):
            raise ConfigError("year range must be contiguous and ascending")

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "StrataConfig":
        return cls(
            ages=tuple(cfg.get_list(kv, "ages", list(DEFAULT_AGES))),
            genders=tuple(cfg.get_list(kv, "genders", list(GENDERS))),
            regions=tuple(cfg.get_list(kv, "regions", list(DEFAULT_REGIONS))),
            years=tuple(cfg.get_int_list(kv, "years", list(DEFAULT_YEARS))),
            exposures=tuple(cfg.get_list(kv, "exposures", list(EXPOSURES))),
        )

    @classmethod
    def from_file(cls, path) -> "StrataConfig":
        return cls.from_kv(cfg.parse_kv_file(path))


def _applicable(exposure: str, gender: str) -> bool:
    return not (exposure in MSM_GROUPS and gender != "male")


def enumerate_strata(config: StrataConfig) -> list[StratumKey]:
    """All frame keys in documented order.

    Ordering: exposure (config order), then age, gender, region, year,
    with year varying fastest. MSM x female cells are excluded.
    """
    keys = []
    for e in config.exposures:
        for a in config.ages:
            for s in config.genders:
                if not _applicable(e, s):
                    continue
                for r in config.regions:
                    for t in config.years:
                        keys.append(StratumKey(e, a, s, r, t))
    return keys


@dataclass(frozen=True)
class Frame:
    """Indexed view of a StrataConfig with dense-array coordinates."""

    config: StrataConfig
    keys: tuple[StratumKey, ...] = field(init=False)
    _key_pos: dict = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "keys", tuple(enumerate_strata(self.config)))
        object.__setattr__(self, "_key_pos",
                           {k: i for i, k in enumerate(self.keys)})

    # axis sizes
    @property
    def n_groups(self) -> int:
        return len(self.config.exposures)

    @property
    def shape(self) -> tuple[int, int, int, int, int]:
        c = self.config
        return (len(c.exposures), len(c.ages), len(c.genders),
                len(c.regions), len(c.years))

    @property
    def cell_shape(self) -> tuple[int, int, int, int]:
        return self.shape[1:]

    def axis_index(self, axis: str, label) -> int:
        levels = {
            "exposure": self.config.exposures,
            "age": self.config.ages,
            "gender": self.config.genders,
            "region": self.config.regions,
            "year": self.config.years,
        }[axis]
        try:
            return levels.index(label)
        except ValueError:
            raise IndexError(f"{axis} level {label!r} not in frame") from None

    def flat_index(self, key: StratumKey) -> int:
        """Position of key in enumerate_strata order; bijective."""
        try:
            return self._key_pos[key]
        except KeyError:
            raise IndexError(f"stratum {key!r} outside the configured frame") from None

    def cell_flat(self, a: int, s: int, r: int, t: int) -> int:
        """Row-major offset into the (A, S, R, T) cell space."""
        _, S, R, T = self.cell_shape
        return ((a * S + s) * R + r) * T + t

    def dense_flat(self, g: int, a: int, s: int, r: int, t: int) -> int:
        """Row-major offset into the dense (G, A, S, R, T) space."""
        A, S, R, T = self.cell_shape
        return (((g * A + a) * S + s) * R + r) * T + t

    def valid_mask(self) -> np.ndarray:
        """(G, A, S, R, T) boolean; False marks structural MSM x female zeros."""
        G, A, S, R, T = self.shape
        mask = np.ones(self.shape, dtype=bool)
        for gi, e in enumerate(self.config.exposures):
            if e in MSM_GROUPS:
                for si, s in enumerate(self.config.genders):
                    if s != "male":
                        mask[gi, :, si, :, :] = False
        return mask

    def dense_index(self, key: StratumKey) -> tuple[int, int, int, int, int]:
        return (self.axis_index("exposure", key.exposure),
                self.axis_index("age", key.age),
                self.axis_index("gender", key.gender),
                self.axis_index("region", key.region),
                self.axis_index("year", key.year))

    def resolve_margin(self, exposure: str, age: str, gender: str,
                       region: str, year: str) -> list[tuple[int, int, int, int, int]]:
        """Expand a margin row (each field a level, alias, or 'ALL') to dense indices.

        Returns only applicable cells; an empty result means the margin does
        not touch the frame and is a data error at the caller.
        """
        def levels(axis, value, all_levels):
            if value == "ALL":
                return list(all_levels)
            if axis == "exposure":
                if value in EXPOSURE_ALIASES:
                    return [e for e in EXPOSURE_ALIASES[value]
                            if e in self.config.exposures]
                return [tok.strip() for tok in value.split("|")]
            return [value]

        c = self.config
        out = []
        for e in levels("exposure", exposure, c.exposures):
            if e not in c.exposures:
                continue
            for a in levels("age", age, c.ages):
                if a not in c.ages:
                    continue
                for s in levels("gender", gender, c.genders):
                    if s not in c.genders or not _applicable(e, s):
                        continue
                    for r in levels("region", region, c.regions):
                        if r not in c.regions:
                            continue
                        for t in levels("year", year, [str(y) for y in c.years]):
                            try:
                                yi = int(t)
                            except ValueError:
                                continue
                            if yi not in c.years:
                                continue
                            out.append(self.dense_index(
                                StratumKey(e, a, s, r, yi)))
        return out


@dataclass(frozen=True)
class PopulationFrame:
    """Known denominators: N per (age, gender, region, year) and the
    black-African fraction of heterosexuals per (age, gender, region)."""

    N: np.ndarray          # (A, S, R, T), persons
    eth_frac: np.ndarray   # (A, S, R), in [0, 1]

    def __post_init__(self):
        if np.any(self.N <= 0):
            raise ShapeError("population frame: all N must be > 0")
        if np.any((self.eth_frac < 0) | (self.eth_frac > 1)):
            raise ShapeError("population frame: ethnicity fractions must lie in [0, 1]")

    def check_frame(self, frame: Frame) -> None:
        if self.N.shape != frame.cell_shape:
            raise ShapeError(
                f"population N shape {self.N.shape} != frame cells {frame.cell_shape}")
        if self.eth_frac.shape != frame.cell_shape[:3]:
            raise ShapeError(
                f"ethnicity fraction shape {self.eth_frac.shape} != "
                f"frame (A,S,R) {frame.cell_shape[:3]}")
