"""Reading, validating and normalizing source CSVs into a DatasetBundle.

The only module that touches the filesystem for data. One CSV schema per
source (documented in README and SOURCE_HEADERS); headers are mandatory,
columns are matched by name, encoding is UTF-8. Margins use literal level
names, registered aliases (MSM, PWID, BA-het, OTH-het, all-het,
nonclinic-het), pipe-separated lists, or ALL.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .likelihoods import SOURCES, ObservationTable
from .model import ModelConfig
from .strata import UNDER45_AGES, Frame, PopulationFrame

_I64 = np.int64

SOURCE_HEADERS = {
    "ONS": ["age", "gender", "region", "year", "N"],
    "CENSUS": ["age", "gender", "region", "frac_black_african", "se"],
    "NATSAL": ["age", "region", "estimate", "se"],
    "PWID-SIZE": ["exposure", "age", "gender", "region", "estimate", "se_log"],
    "GUMCAD-ATTEND": ["exposure", "age", "gender", "region", "year", "attendees"],
    "GUMCAD-PREV": ["exposure", "age", "gender", "region", "year", "attendees",
                    "prev_diag", "tested", "new_diag", "not_offered", "opted_out"],
    "GMSHS": ["age", "year", "y_clinic", "n_clinic", "y_nonclinic", "n_nonclinic"],
    "UAM": ["age", "gender", "region", "year", "sampled", "positive", "aware"],
    "NSHPC": ["ethnicity", "age", "region", "year", "diagnoses", "births"],
    "AHSS": ["age", "region", "year", "y_male", "n_male", "y_female", "n_female"],
    "NHSBT": ["age", "region", "year", "y_male", "n_male", "y_female", "n_female"],
    "HARS": ["exposure", "age", "gender", "region", "year", "diagnosed"],
}

NSHPC_ETHNICITY = {
    "BA": "BAhet-clinic|BAhet-nonclinic",
    "OTH": "OTHhet-clinic|OTHhet-nonclinic|lowest-risk",
}


@dataclass
class DatasetBundle:
    """Validated observation tables plus load provenance; immutable by
    convention after load."""

    tables: dict[str, ObservationTable]
    pop: PopulationFrame
    manifest: dict[str, str]
    checksums: dict[str, str]
    report: list = field(default_factory=list)

    def fingerprint(self) -> dict[str, str]:
        return dict(sorted(self.checksums.items()))


def _entry(severity, source, message, path="", row=None):
    return {"severity": severity, "source": source, "message": message,
            "file": str(path), "row": row}


def _read_rows(path: Path, source: str) -> list[dict]:
    optional = {"CENSUS": {"se"}}.get(source, set())
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise DataError(f"{path}: empty file (header row is mandatory)")
            required = [c for c in SOURCE_HEADERS[source] if c not in optional]
            missing = [c for c in required if c not in reader.fieldnames]
            if missing:
                raise DataError(f"{path}: missing columns {missing} for {source}")
            return list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _num(row, col, path, i, kind=float):
    raw = (row.get(col) or "").strip()
    if raw == "":
        raise DataError(f"{path}: row {i}: empty value in column {col!r}")
    try:
        value = kind(raw)
    except ValueError:
        raise DataError(f"{path}: row {i}: column {col!r} is not a number: {raw!r}"
                        ) from None
    if value < 0:
        raise DataError(f"{path}: row {i}: column {col!r} is negative")
    return value


def _resolve(frame: Frame, path, i, exposure, age, gender, region, year
             ) -> list[tuple]:
    pairs = frame.resolve_margin(exposure, age, gender, region, year)
    if not pairs:
        raise DataError(f"{path}: row {i}: margin ({exposure}, {age}, {gender}, "
                        f"{region}, {year}) resolves to no frame strata")
    return pairs


def _flats(frame: Frame, pairs) -> np.ndarray:
    return np.asarray([frame.dense_flat(*p) for p in pairs], dtype=_I64)


def _cells(frame: Frame, pairs) -> np.ndarray:
    return np.asarray(sorted({frame.cell_flat(a, s, r, t)
                              for (_, a, s, r, t) in pairs}), dtype=_I64)


def _logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


# ---------------------------------------------------------------------------
# per-source parsers

def parse_population(path: Path, frame: Frame) -> np.ndarray:
    rows = _read_rows(path, "ONS")
    c = frame.config
    n = np.full(frame.cell_shape, np.nan)
    for i, row in enumerate(rows, start=2):
        pairs = _resolve(frame, path, i, "lowest-risk", row["age"], row["gender"],
                         row["region"], row["year"])
        _, a, s, r, t = pairs[0]
        if not np.isnan(n[a, s, r, t]):
            raise DataError(f"{path}: row {i}: duplicate population cell")
        n[a, s, r, t] = _num(row, "N", path, i)
    if np.isnan(n).any():
        raise DataError(f"{path}: population does not cover every frame cell")
    if np.any(n <= 0):
        raise DataError(f"{path}: population N must be > 0 in every cell")
    return n


def parse_census(path: Path, frame: Frame, config: ModelConfig
                 ) -> tuple[np.ndarray, ObservationTable]:
    rows = _read_rows(path, "CENSUS")
    A, S, R, _ = frame.cell_shape
    frac = np.full((A, S, R), np.nan)
    margins, margins2, cells, est, se = [], [], [], [], []
    for i, row in enumerate(rows, start=2):
        pairs = _resolve(frame, path, i, "lowest-risk", row["age"], row["gender"],
                         row["region"], str(frame.config.years[0]))
        _, a, s, r, _ = pairs[0]
        p = _num(row, "frac_black_african", path, i)
        if not 0.0 <= p <= 1.0:
            raise DataError(f"{path}: row {i}: frac_black_african outside [0, 1]")
        if not np.isnan(frac[a, s, r]):
            raise DataError(f"{path}: row {i}: duplicate ethnicity cell")
        frac[a, s, r] = p
        raw_se = (row.get("se") or "").strip()
        if raw_se:
            sp = float(raw_se)
            se_logit = sp / max(p * (1 - p), 1e-12)
        else:
            se_logit = config.census_default_se
        # the split is structurally constant across years (non-clinic het
        # shares carry no year axis), so one anchor-year term identifies it
        year = str(frame.config.years[0])
        num_pairs = _resolve(frame, path, i, "BA-het", row["age"],
                             row["gender"], row["region"], year)
        den_pairs = _resolve(frame, path, i, "all-het", row["age"],
                             row["gender"], row["region"], year)
        margins.append(_flats(frame, num_pairs))
        margins2.append(_flats(frame, den_pairs))
        cells.append(_cells(frame, num_pairs))
        est.append(_logit(min(max(p, 1e-9), 1 - 1e-9)))
        se.append(se_logit)
    if np.isnan(frac).any():
        raise DataError(f"{path}: ethnicity fractions do not cover every (age, "
                        f"gender, region) cell")
    table = ObservationTable(
        source="CENSUS",
        columns={"est_logit": np.asarray(est), "se": np.asarray(se)},
        margins=margins, cells=cells, margins2=margins2, path=str(path))
    return frac, table


def parse_natsal(path: Path, frame: Frame) -> ObservationTable:
    rows = _read_rows(path, "NATSAL")
    margins, cells, est, se = [], [], [], []
    anchor_year = str(frame.config.years[0])
    for i, row in enumerate(rows, start=2):
        pairs = _resolve(frame, path, i, "MSM", row["age"], "male",
                         row["region"], anchor_year)
        p = _num(row, "estimate", path, i)
        sp = _num(row, "se", path, i)
        if not 0.0 < p < 1.0 or sp <= 0:
            raise DataError(f"{path}: row {i}: need 0 < estimate < 1 and se > 0")
        margins.append(_flats(frame, pairs))
        cells.append(_cells(frame, pairs))
        est.append(_logit(p))
        se.append(sp / (p * (1 - p)))  # delta method to the logit scale
    return ObservationTable(
        source="NATSAL",
        columns={"est_logit": np.asarray(est), "se": np.asarray(se)},
        margins=margins, cells=cells, path=str(path))


def parse_pwid_size(path: Path, frame: Frame) -> ObservationTable:
    rows = _read_rows(path, "PWID-SIZE")
    margins, cells, est, se = [], [], [], []
    anchor_year = str(frame.config.years[0])
    for i, row in enumerate(rows, start=2):
        if row["exposure"] not in ("PWID-current", "PWID-ex", "PWID"):
            raise DataError(f"{path}: row {i}: exposure must be a PWID group")
        pairs = _resolve(frame, path, i, row["exposure"], row["age"],
                         row["gender"], row["region"], anchor_year)
        m = _num(row, "estimate", path, i)
        s = _num(row, "se_log", path, i)
        if m <= 0 or s <= 0:
            raise DataError(f"{path}: row {i}: need estimate > 0 and se_log > 0")
        margins.append(_flats(frame, pairs))
        cells.append(_cells(frame, pairs))
        est.append(m)
        se.append(s)
    return ObservationTable(
        source="PWID-SIZE",
        columns={"estimate": np.asarray(est), "se_log": np.asarray(se)},
        margins=margins, cells=cells, path=str(path))


def parse_gumcad_attend(path: Path, frame: Frame) -> ObservationTable:
    rows = _read_rows(path, "GUMCAD-ATTEND")
    margins, cells, y, strata = [], [], [], []
    for i, row in enumerate(rows, start=2):
        if not row["exposure"].endswith("-clinic"):
            raise DataError(f"{path}: row {i}: exposure must be a clinic group")
        pairs = _resolve(frame, path, i, row["exposure"], row["age"],
                         row["gender"], row["region"], row["year"])
        if len(pairs) != 1:
            raise DataError(f"{path}: row {i}: attendance rows must name one stratum")
        margins.append(_flats(frame, pairs))
        cells.append(_cells(frame, pairs))
        strata.append(pairs[0])
        y.append(_num(row, "attendees", path, i, int))
    return ObservationTable(
        source="GUMCAD-ATTEND", columns={"attendees": np.asarray(y, dtype=float)},
        margins=margins, cells=cells, row_stratum=strata, path=str(path))


def parse_gumcad_prev(path: Path, frame: Frame) -> ObservationTable:
    rows = _read_rows(path, "GUMCAD-PREV")
    cols = {k: [] for k in ("attendees", "prev_diag", "tested", "new_diag",
                            "not_offered", "opted_out")}
    margins, cells, strata = [], [], []
    for i, row in enumerate(rows, start=2):
        if not row["exposure"].endswith("-clinic"):
            raise DataError(f"{path}: row {i}: exposure must be a clinic group")
        pairs = _resolve(frame, path, i, row["exposure"], row["age"],
                         row["gender"], row["region"], row["year"])
        if len(pairs) != 1:
            raise DataError(f"{path}: row {i}: component rows must name one stratum")
        vals = {k: _num(row, k, path, i, int) for k in cols}
        parts = (vals["prev_diag"] + vals["tested"] + vals["not_offered"]
                 + vals["opted_out"])
        if parts != vals["attendees"]:
            raise DataError(
                f"{path}: row {i}: prev_diag + tested + not_offered + opted_out "
                f"({parts}) must equal attendees ({vals['attendees']})")
        for k, v in vals.items():
            cols[k].append(v)
        margins.append(_flats(frame, pairs))
        cells.append(_cells(frame, pairs))
        strata.append(pairs[0])
    return ObservationTable(
        source="GUMCAD-PREV",
        columns={k: np.asarray(v, dtype=float) for k, v in cols.items()},
        margins=margins, cells=cells, row_stratum=strata, path=str(path))


def _parse_two_arm(source: str, path: Path, frame: Frame) -> ObservationTable:
    rows = _read_rows(path, source)
    margins, margins2, cells, cells2 = [], [], [], []
    y1, n1, y2, n2 = [], [], [], []
    for i, row in enumerate(rows, start=2):
        if source == "GMSHS":
            arm1 = _resolve(frame, path, i, "MSM-clinic", row["age"], "male",
                            "London", row["year"])
            arm2 = _resolve(frame, path, i, "MSM-nonclinic", row["age"], "male",
                            "London", row["year"])
            ys = ("y_clinic", "n_clinic", "y_nonclinic", "n_nonclinic")
        else:
            exposure = "BA-het" if source == "AHSS" else "nonclinic-het"
            arm1 = _resolve(frame, path, i, exposure, row["age"], "male",
                            row["region"], row["year"])
            arm2 = _resolve(frame, path, i, exposure, row["age"], "female",
                            row["region"], row["year"])
            ys = ("y_male", "n_male", "y_female", "n_female")
        vals = [_num(row, c, path, i, int) for c in ys]
        if vals[0] > vals[1] or vals[2] > vals[3]:
            raise DataError(f"{path}: row {i}: positives exceed arm total")
        margins.append(_flats(frame, arm1))
        cells.append(_cells(frame, arm1))
        margins2.append(_flats(frame, arm2))
        cells2.append(_cells(frame, arm2))
        y1.append(vals[0])
        n1.append(vals[1])
        y2.append(vals[2])
        n2.append(vals[3])
    return ObservationTable(
        source=source,
        columns={"y1": np.asarray(y1, dtype=float), "n1": np.asarray(n1, dtype=float),
                 "y2": np.asarray(y2, dtype=float), "n2": np.asarray(n2, dtype=float)},
        margins=margins, cells=cells, margins2=margins2, cells2=cells2,
        path=str(path))


def parse_uam(path: Path, frame: Frame) -> ObservationTable:
    rows = _read_rows(path, "UAM")
    margins, cells = [], []
    sampled, positive, aware = [], [], []
    for i, row in enumerate(rows, start=2):
        pairs = _resolve(frame, path, i, "PWID-current", row["age"],
                         row["gender"], row["region"], row["year"])
        n = _num(row, "sampled", path, i, int)
        y = _num(row, "positive", path, i, int)
        k = _num(row, "aware", path, i, int)
        if y > n:
            raise DataError(f"{path}: row {i}: positive > sampled")
        if k > y:
            raise DataError(f"{path}: row {i}: aware > positive")
        margins.append(_flats(frame, pairs))
        cells.append(_cells(frame, pairs))
        sampled.append(n)
        positive.append(y)
        aware.append(k)
    return ObservationTable(
        source="UAM",
        columns={"sampled": np.asarray(sampled, dtype=float),
                 "positive": np.asarray(positive, dtype=float),
                 "aware": np.asarray(aware, dtype=float)},
        margins=margins, cells=cells, path=str(path))


def parse_nshpc(path: Path, frame: Frame) -> ObservationTable:
    rows = _read_rows(path, "NSHPC")
    margins, cells, diagnoses, births = [], [], [], []
    for i, row in enumerate(rows, start=2):
        if row["age"] not in UNDER45_AGES:
            raise DataError(f"{path}: row {i}: NSHPC rows are restricted to ages "
                            f"{UNDER45_AGES} (got {row['age']!r})")
        eth = row["ethnicity"]
        if eth not in NSHPC_ETHNICITY:
            raise DataError(f"{path}: row {i}: ethnicity must be one of "
                            f"{sorted(NSHPC_ETHNICITY)}")
        pairs = _resolve(frame, path, i, NSHPC_ETHNICITY[eth], row["age"],
                         "female", row["region"], row["year"])
        y = _num(row, "diagnoses", path, i, int)
        n = _num(row, "births", path, i, int)
        if y > n:
            raise DataError(f"{path}: row {i}: diagnoses > births")
        margins.append(_flats(frame, pairs))
        cells.append(_cells(frame, pairs))
        diagnoses.append(y)
        births.append(n)
    return ObservationTable(
        source="NSHPC",
        columns={"diagnoses": np.asarray(diagnoses, dtype=float),
                 "births": np.asarray(births, dtype=float)},
        margins=margins, cells=cells, path=str(path))


def parse_hars(path: Path, frame: Frame) -> ObservationTable:
    rows = _read_rows(path, "HARS")
    margins, cells, d, keys = [], [], [], []
    for i, row in enumerate(rows, start=2):
        pairs = _resolve(frame, path, i, row["exposure"], row["age"],
                         row["gender"], row["region"], row["year"])
        margins.append(_flats(frame, pairs))
        cells.append(_cells(frame, pairs))
        d.append(_num(row, "diagnosed", path, i, int))
        keys.append((row["exposure"], row["age"], row["gender"], row["region"],
                     row["year"]))
    table = ObservationTable(
        source="HARS", columns={"diagnosed": np.asarray(d, dtype=float)},
        margins=margins, cells=cells, path=str(path))
    table.columns["_keys"] = np.asarray(keys, dtype=object)
    return table


_PARSERS = {
    "NATSAL": parse_natsal,
    "PWID-SIZE": parse_pwid_size,
    "GUMCAD-ATTEND": parse_gumcad_attend,
    "GUMCAD-PREV": parse_gumcad_prev,
    "UAM": parse_uam,
    "NSHPC": parse_nshpc,
    "HARS": parse_hars,
}


# ---------------------------------------------------------------------------
# bundle assembly

def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_bundle(manifest_path, frame: Frame,
                config: ModelConfig | None = None,
                strict: bool = True) -> DatasetBundle:
    """Load and validate every table a manifest references.

    The manifest is JSON: {"sources": {source-name: csv-path}} with paths
    relative to the manifest file. ONS is required (denominators); every
    other source is optional and its absence is a warning. `strict` raises
    on any error-severity cross-check finding.
    """
    config = config or ModelConfig()
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    sources = manifest.get("sources", {})
    unknown = sorted(set(sources) - set(SOURCES))
    if unknown:
        raise DataError(f"{manifest_path}: unknown sources {unknown}")
    base = manifest_path.parent
    report: list = []
    checksums: dict[str, str] = {}
    tables: dict[str, ObservationTable] = {}

    if "ONS" not in sources:
        raise DataError(f"{manifest_path}: ONS population table is required")
    ons_path = base / sources["ONS"]
    n = parse_population(ons_path, frame)
    checksums["ONS"] = _sha256(ons_path)

    if "CENSUS" in sources:
        census_path = base / sources["CENSUS"]
        frac, census_table = parse_census(census_path, frame, config)
        checksums["CENSUS"] = _sha256(census_path)
        tables["CENSUS"] = census_table
    else:
        frac = np.zeros(frame.cell_shape[:3])
        report.append(_entry("warning", "CENSUS", "source inactive: not in manifest"))
    pop = PopulationFrame(N=n, eth_frac=frac)

    for source in SOURCES:
        if source in ("ONS", "CENSUS"):
            continue
        if source not in sources:
            report.append(_entry("warning", source,
                                 "source inactive: not in manifest"))
            continue
        path = base / sources[source]
        if source in ("GMSHS", "AHSS", "NHSBT"):
            tables[source] = _parse_two_arm(source, path, frame)
        else:
            tables[source] = _PARSERS[source](path, frame)
        checksums[source] = _sha256(path)

    bundle = DatasetBundle(tables=tables, pop=pop,
                           manifest={k: str(v) for k, v in sources.items()},
                           checksums=checksums, report=report)
    report.extend(validate_cross(bundle, frame))
    errors = [e for e in report if e["severity"] == "error"]
    if strict and errors:
        raise DataError("bundle failed cross-table validation: "
                        + "; ".join(e["message"] for e in errors))
    return bundle


def validate_cross(bundle: DatasetBundle, frame: Frame) -> list:
    """Inter-source consistency checks; report-only with severity levels."""
    findings: list = []
    n_flat = bundle.pop.N.reshape(-1)

    hars = bundle.tables.get("HARS")
    if hars is not None:
        totals: dict[tuple, float] = {}
        group_sums: dict[tuple, float] = {}
        for i in range(hars.n_rows):
            cells = hars.cells[i]
            pop_n = float(n_flat[cells].sum())
            d = float(hars.columns["diagnosed"][i])
            if d > pop_n:
                findings.append(_entry(
                    "error", "HARS",
                    f"row {i + 2}: diagnosed count {d:.0f} exceeds population "
                    f"{pop_n:.0f} for its margin", hars.path, i + 2))
            exposure, age, gender, region, year = hars.columns["_keys"][i]
            key = (age, gender, region, year)
            if exposure == "ALL":
                totals[key] = totals.get(key, 0.0) + d
            else:
                group_sums[key] = group_sums.get(key, 0.0) + d
        for key, total in totals.items():
            if key in group_sums and abs(group_sums[key] - total) > 0.5:
                findings.append(_entry(
                    "error", "HARS",
                    f"exposure distribution for {key} sums to "
                    f"{group_sums[key]:.0f} but the ALL row records {total:.0f}",
                    hars.path))

    gumcad = bundle.tables.get("GUMCAD-PREV")
    if gumcad is not None:
        cols = gumcad.columns
        for i in range(gumcad.n_rows):
            if cols["new_diag"][i] > cols["tested"][i]:
                findings.append(_entry(
                    "error", "GUMCAD-PREV",
                    f"row {i + 2}: newly diagnosed ({cols['new_diag'][i]:.0f}) "
                    f"exceeds tested ({cols['tested'][i]:.0f})",
                    gumcad.path, i + 2))
            if cols["tested"][i] > cols["attendees"][i]:
                findings.append(_entry(
                    "error", "GUMCAD-PREV",
                    f"row {i + 2}: tested exceeds attendees", gumcad.path, i + 2))

    attend = bundle.tables.get("GUMCAD-ATTEND")
    if attend is not None:
        for i in range(attend.n_rows):
            pop_n = float(n_flat[attend.cells[i]].sum())
            if attend.columns["attendees"][i] > pop_n:
                findings.append(_entry(
                    "error", "GUMCAD-ATTEND",
                    f"row {i + 2}: attendees exceed population", attend.path, i + 2))
    return findings


# ---------------------------------------------------------------------------
# canonical CSV writing (simulator output, bundle round-trips)

def write_source_csv(source: str, rows: list[list], path: Path) -> None:
    header = SOURCE_HEADERS[source]
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise DataError(f"{source}: row width {len(row)} != header {len(header)}")
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_manifest(sources: dict[str, str], path: Path) -> None:
    payload = {"sources": dict(sorted(sources.items()))}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n",
                          encoding="utf-8")
