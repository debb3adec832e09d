"""Volumetric agreement and diagnostic-group statistics on subfield tables.

The cohort table has one row per subject x hemisphere x subfield with
columns ``COHORT_COLUMNS``. Volumes are in mm^3; a missing volume is an
empty cell. QC flags select which rows enter each image type's analysis.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats as sps

from .errors import DataError

COHORT_COLUMNS = (
    "subject_id", "hemisphere", "subfield", "volume_acquired", "volume_synth",
    "group", "icv", "age", "sex", "qc_acquired", "qc_synth",
)
HEMISPHERES = ("left", "right")
SUBFIELDS = ("CA1", "CA2+CA3", "DG", "SUB", "ERC", "Tail", "Whole Hipp.")
GROUPS = ("CN", "SMC", "MCI", "AD")
IMAGE_TYPES = {"acquired": ("volume_acquired", "qc_acquired"), "synth": ("volume_synth", "qc_synth")}
GROUP_TEST_COLUMNS = ("hemisphere", "subfield", "image_type", "H", "p_fdr", "epsilon_sq", "n")
AGREEMENT_COLUMNS = ("hemisphere", "subfield", "mean_acq", "mean_synth", "pct_diff", "r", "n", "t", "p_fdr")


def percent_diff(v_synth, v_acq):
    """``(v_synth - v_acq) / v_acq * 100``; works elementwise on arrays."""
    v_acq_arr = np.asarray(v_acq, dtype=np.float64)
    if np.any(v_acq_arr <= 0):
        raise DataError("acquired volume must be > 0")
    out = (np.asarray(v_synth, dtype=np.float64) - v_acq_arr) / v_acq_arr * 100.0
    return float(out) if out.ndim == 0 else out


def pearson_r(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("pearson_r needs two 1D samples of equal length")
    if len(x) < 3:
        raise DataError("pearson_r needs at least 3 observations")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(dx, dx), np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        raise DataError("zero variance: correlation undefined")
    return float(np.clip(np.dot(dx, dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def paired_t(xs, ys) -> tuple[float, float]:
    """Paired Student t-test; two-sided p with ``n - 1`` degrees of freedom."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise DataError("paired_t needs two 1D samples of equal length >= 2")
    d = x - y
    sd = d.std(ddof=1)
    if sd == 0:
        raise DataError("degenerate paired test: differences have zero variance")
    t = d.mean() / (sd / math.sqrt(len(d)))
    return float(t), float(2.0 * sps.t.sf(abs(t), len(d) - 1))


def _sex_code(values) -> np.ndarray:
    s = pd.Series(values)
    if s.dtype == object:
        mapped = s.astype(str).str.upper().map({"M": 1.0, "F": 0.0, "1": 1.0, "0": 0.0})
        if mapped.isna().any():
            raise DataError(f"sex must be M/F, got {sorted(set(s[mapped.isna()]))}")
        return mapped.to_numpy(dtype=np.float64)
    return s.to_numpy(dtype=np.float64)


def adjust_covariates(table: pd.DataFrame, covariates: Sequence[str] = ("icv", "age", "sex"),
                      column: str = "volume") -> np.ndarray:
    """Regress ``column`` on covariates (with intercept); return residual + grand mean.

    ``sex`` is coded M=1, F=0. The fit uses every row of ``table``.
    """
    y = table[column].to_numpy(dtype=np.float64)
    cols = [np.ones(len(table))]
    for cov in covariates:
        if cov not in table:
            raise DataError(f"missing covariate column {cov!r}")
        values = _sex_code(table[cov]) if cov == "sex" else table[cov].to_numpy(dtype=np.float64)
        if np.any(~np.isfinite(values)):
            raise DataError(f"covariate {cov!r} has missing values")
        cols.append(values)
    X = np.column_stack(cols)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DataError("rank-deficient covariate design")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    return y - X @ beta + y.mean()


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> tuple[float, float]:
    """Tie-corrected Kruskal-Wallis H and its chi-square p-value (k - 1 df)."""
    samples = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(samples) < 2 or any(len(g) == 0 for g in samples):
        raise DataError("Kruskal-Wallis needs at least two non-empty groups")
    pooled = np.concatenate(samples)
    n = len(pooled)
    ranks = sps.rankdata(pooled)
    _, ties = np.unique(pooled, return_counts=True)
    correction = 1.0 - np.sum(ties ** 3 - ties) / (n ** 3 - n)
    if correction <= 0:
        raise DataError("all values identical: Kruskal-Wallis undefined")
    bounds = np.cumsum([0] + [len(g) for g in samples])
    rank_term = sum(ranks[lo:hi].sum() ** 2 / (hi - lo) for lo, hi in zip(bounds[:-1], bounds[1:]))
    h = (12.0 / (n * (n + 1)) * rank_term - 3.0 * (n + 1)) / correction
    h = max(h, 0.0)
    return float(h), float(sps.chi2.sf(h, len(samples) - 1))


def epsilon_squared(H: float, n: int, k: int) -> float:
    """Effect size ``(H - k + 1) / (n - k)``, floored at zero."""
    if n <= k:
        raise DataError(f"epsilon-squared needs n > k (n={n}, k={k})")
    return max(0.0, (H - k + 1) / (n - k))


def bh_fdr(pvals) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(pvals, dtype=np.float64).ravel()
    if np.any((p < 0) | (p > 1) | ~np.isfinite(p)):
        raise DataError("p-values must lie in [0, 1]")
    m = len(p)
    if m == 0:
        return p
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    q = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(q, 1.0)
    return out


@dataclass
class GroupTestResult:
    hemisphere: str
    subfield: str
    image_type: str
    H: float
    p_raw: float
    p_fdr: float
    epsilon_sq: float
    n: int
    k: int

    def as_row(self) -> dict:
        return asdict(self)


def _ordered_keys(table: pd.DataFrame):
    present = set(zip(table["hemisphere"], table["subfield"]))
    sf_rank = {s: i for i, s in enumerate(SUBFIELDS)}
    return sorted(present, key=lambda hs: (HEMISPHERES.index(hs[0]) if hs[0] in HEMISPHERES else 9,
                                           sf_rank.get(hs[1], len(SUBFIELDS)), hs[1]))


def analyzed_rows(table: pd.DataFrame, image_type: str) -> pd.DataFrame:
    """Rows passing QC with a volume present for ``image_type``."""
    if image_type not in IMAGE_TYPES:
        raise DataError(f"image_type must be one of {tuple(IMAGE_TYPES)}, got {image_type!r}")
    vol_col, qc_col = IMAGE_TYPES[image_type]
    keep = table[qc_col].astype(bool) & table[vol_col].notna()
    if "group" in table:
        keep &= table["group"].notna()
    return table.loc[keep]


def group_analysis(table: pd.DataFrame, image_type: str = "synth") -> list[GroupTestResult]:
    """Covariate-adjusted Kruskal-Wallis per hemisphere x subfield, BH-corrected as one family."""
    vol_col, _ = IMAGE_TYPES.get(image_type, (None, None))
    rows = analyzed_rows(table, image_type)
    results = []
    for hemi, sf in _ordered_keys(rows):
        sub = rows[(rows["hemisphere"] == hemi) & (rows["subfield"] == sf)]
        adjusted = adjust_covariates(sub, column=vol_col)
        labels = sub["group"].to_numpy()
        present = [g for g in GROUPS if np.any(labels == g)] + sorted(set(labels) - set(GROUPS))
        samples = [adjusted[labels == g] for g in present]
        H, p = kruskal_wallis(samples)
        n, k = len(sub), len(samples)
        results.append(GroupTestResult(hemi, sf, image_type, H, p, float("nan"), epsilon_squared(H, n, k), n, k))
    if results:
        for r, q in zip(results, bh_fdr([r.p_raw for r in results])):
            r.p_fdr = float(q)
    return results


def agreement_analysis(table: pd.DataFrame) -> pd.DataFrame:
    """Synthesized-vs-acquired agreement per hemisphere x subfield.

    ``pct_diff`` is the mean of per-subject percent differences; paired
    t-test p-values are BH-corrected across the table.
    """
    both = table[table["qc_acquired"].astype(bool) & table["qc_synth"].astype(bool)
                 & table["volume_acquired"].notna() & table["volume_synth"].notna()]
    records = []
    for hemi, sf in _ordered_keys(both):
        sub = both[(both["hemisphere"] == hemi) & (both["subfield"] == sf)]
        acq = sub["volume_acquired"].to_numpy(dtype=np.float64)
        syn = sub["volume_synth"].to_numpy(dtype=np.float64)
        t, p = paired_t(syn, acq)
        records.append({
            "hemisphere": hemi, "subfield": sf,
            "mean_acq": float(acq.mean()), "mean_synth": float(syn.mean()),
            "pct_diff": float(np.mean(percent_diff(syn, acq))),
            "r": pearson_r(acq, syn), "n": len(sub), "t": t, "p_raw": p,
        })
    out = pd.DataFrame.from_records(records, columns=[*AGREEMENT_COLUMNS[:-1], "p_raw"])
    out["p_fdr"] = bh_fdr(out["p_raw"].to_numpy()) if len(out) else []
    return out[list(AGREEMENT_COLUMNS)]


def group_results_frame(results: Sequence[GroupTestResult]) -> pd.DataFrame:
    return pd.DataFrame([r.as_row() for r in results], columns=list(GroupTestResult.__annotations__))


# -- I/O and simulation ------------------------------------------------------------

_TRUE = {"1", "true", "pass", "yes", "t", "y"}
_FALSE = {"0", "false", "fail", "no", "f", "n"}


def _parse_flag(value) -> bool:
    s = str(value).strip().lower()
    if s in _TRUE:
        return True
    if s in _FALSE:
        return False
    raise DataError(f"unrecognized QC flag {value!r}")


def validate_cohort(table: pd.DataFrame) -> pd.DataFrame:
    missing = [c for c in COHORT_COLUMNS if c not in table.columns]
    if missing:
        raise DataError(f"cohort table missing columns: {missing}")
    table = table.copy()
    for col in ("qc_acquired", "qc_synth"):
        if table[col].isna().any():
            raise DataError(f"QC flag {col} missing for some rows")
        table[col] = [v if isinstance(v, (bool, np.bool_)) else _parse_flag(v) for v in table[col]]
    for col in ("volume_acquired", "volume_synth", "icv", "age"):
        table[col] = pd.to_numeric(table[col], errors="raise")
    for col in ("volume_acquired", "volume_synth"):
        if (table[col].dropna() <= 0).any():
            raise DataError(f"{col} must be > 0 where present")
    bad_hemi = set(table["hemisphere"]) - set(HEMISPHERES)
    if bad_hemi:
        raise DataError(f"unknown hemisphere values {sorted(bad_hemi)}")
    table["subject_id"] = table["subject_id"].astype(str)
    return table


def read_cohort(path) -> pd.DataFrame:
    try:
        table = pd.read_csv(path, dtype={"subject_id": str, "group": str, "sex": str})
    except FileNotFoundError as exc:
        raise DataError(f"missing file: {path}") from exc
    return validate_cohort(table)


def write_cohort(table: pd.DataFrame, path) -> None:
    from .io_utils import atomic_path

    out = table[list(COHORT_COLUMNS)].copy()
    for col in ("qc_acquired", "qc_synth"):
        out[col] = np.where(out[col].astype(bool), "pass", "fail")
    with atomic_path(path) as tmp:
        out.to_csv(tmp, index=False, float_format="%.6f")


_BASE_VOLUME = {"CA1": 620.0, "CA2+CA3": 55.0, "DG": 720.0, "SUB": 460.0, "ERC": 560.0, "Tail": 360.0}
_SYNTH_BIAS = {"CA1": -0.03, "CA2+CA3": 0.08, "DG": 0.04, "SUB": 0.03, "ERC": 0.01, "Tail": -0.02}
_WHOLE = ("CA1", "CA2+CA3", "DG", "SUB", "Tail")


def simulate_cohort(n_subjects: int, seed: int, group_probs: Mapping[str, float] | None = None,
                    group_effects: Mapping[str, float] | None = None,
                    affected: Sequence[str] | None = None,
                    qc_rates: Mapping[str, float] | None = None) -> pd.DataFrame:
    """Synthetic subfield-volume cohort in the cohort-table schema.

    ``group_effects`` scales true volumes of ``affected`` subfields (all
    when None) for the named groups, e.g. ``{"AD": 0.8}``. Covariates act
    on every subject through ICV scaling, age slope and a sex offset; the
    synthesized volume carries a per-subfield bias and extra noise.
    """
    rng = np.random.default_rng(seed)
    group_probs = dict(group_probs or {"CN": 0.59, "SMC": 0.03, "MCI": 0.31, "AD": 0.07})
    group_effects = dict(group_effects or {})
    qc_rates = dict(qc_rates or {"acquired": 0.67, "synth": 0.89})
    names = list(group_probs)
    probs = np.array([group_probs[g] for g in names], dtype=np.float64)
    groups = rng.choice(names, size=n_subjects, p=probs / probs.sum())
    sex = rng.choice(["M", "F"], size=n_subjects)
    age = rng.uniform(55, 90, size=n_subjects)
    icv = rng.normal(1.45e6, 1.2e5, size=n_subjects) + np.where(sex == "M", 1.0e5, 0.0)
    rows = []
    for i in range(n_subjects):
        qc_acq = bool(rng.random() < qc_rates["acquired"])
        qc_syn = bool(rng.random() < qc_rates["synth"])
        for hemi in HEMISPHERES:
            true_vols, acq_vols, syn_vols = {}, {}, {}
            for sf, base in _BASE_VOLUME.items():
                scale = (icv[i] / 1.45e6) * (1.0 - 0.004 * (age[i] - 72.0))
                if affected is None or sf in affected:
                    scale *= group_effects.get(groups[i], 1.0)
                v = base * scale * float(np.exp(rng.normal(0.0, 0.08)))
                true_vols[sf] = v
                acq_vols[sf] = v * (1.0 + rng.normal(0.0, 0.03))
                syn_vols[sf] = v * (1.0 + _SYNTH_BIAS[sf] + rng.normal(0.0, 0.04))
            acq_vols["Whole Hipp."] = sum(acq_vols[s] for s in _WHOLE)
            syn_vols["Whole Hipp."] = sum(syn_vols[s] for s in _WHOLE)
            for sf in SUBFIELDS:
                rows.append({
                    "subject_id": f"sub-{i:04d}", "hemisphere": hemi, "subfield": sf,
                    "volume_acquired": acq_vols[sf], "volume_synth": syn_vols[sf],
                    "group": groups[i], "icv": icv[i], "age": age[i], "sex": sex[i],
                    "qc_acquired": qc_acq, "qc_synth": qc_syn,
                })
    return pd.DataFrame(rows, columns=list(COHORT_COLUMNS))
