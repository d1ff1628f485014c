"""Rule-based packet labelling and per-subcategory subsampling."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

SUBCATEGORIES: tuple[str, ...] = (
    "normal",
    "ddos_http", "ddos_tcp", "ddos_udp",
    "dos_http", "dos_tcp", "dos_udp",
    "os_fingerprint", "service_scan",
    "data_exfiltration", "keylogging",
)

CATEGORY_OF: dict[str, str] = {
    "normal": "normal",
    "ddos_http": "ddos", "ddos_tcp": "ddos", "ddos_udp": "ddos",
    "dos_http": "dos", "dos_tcp": "dos", "dos_udp": "dos",
    "os_fingerprint": "reconnaissance", "service_scan": "reconnaissance",
    "data_exfiltration": "theft", "keylogging": "theft",
}

CATEGORIES = ("normal", "ddos", "dos", "reconnaissance", "theft")
LABEL_COLUMNS = ("label_category", "label_subcategory", "binary_label")


class EmptyClass(ValueError):
    """A subcategory required downstream has no rows."""


@dataclass(frozen=True)
class LabelRule:
    subcategory: str
    attacker_ips: frozenset
    time_window: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if self.subcategory not in CATEGORY_OF:
            raise ValueError(f"unknown subcategory {self.subcategory!r}")
        if self.subcategory == "normal" and self.attacker_ips:
            raise ValueError("the normal rule takes no attacker addresses")
        object.__setattr__(self, "attacker_ips", frozenset(self.attacker_ips))

    @property
    def category(self) -> str:
        return CATEGORY_OF[self.subcategory]


def read_rules(path) -> list[LabelRule]:
    """Parse a rules file: one JSON object per line, ``#`` comments allowed."""
    rules = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            obj = json.loads(line)
            start, end = obj.get("start"), obj.get("end")
            window = None if start is None and end is None else (
                float("-inf") if start is None else float(start),
                float("inf") if end is None else float(end))
            rules.append(LabelRule(obj["subcategory"], frozenset(obj.get("ips", ())), window))
    return rules


def write_rules(rules: Iterable[LabelRule], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rules:
            obj = {"subcategory": r.subcategory, "ips": sorted(r.attacker_ips)}
            if r.time_window is not None:
                obj["start"], obj["end"] = r.time_window
            fh.write(json.dumps(obj) + "\n")


def records_frame(records) -> pd.DataFrame:
    """Columnar table of packet records using the export column names."""
    from .capture import COLUMNS, FLOAT_COLUMNS, INT_COLUMNS

    if isinstance(records, pd.DataFrame):
        return records
    rows = [r.values() for r in records]
    df = pd.DataFrame.from_records(rows, columns=list(COLUMNS)) if rows else \
        pd.DataFrame({c: [] for c in COLUMNS})
    for c in COLUMNS:
        if c in INT_COLUMNS:
            df[c] = df[c].astype("Int64")
        elif c in FLOAT_COLUMNS:
            df[c] = pd.to_numeric(df[c], errors="coerce").astype("float64")
        else:
            df[c] = df[c].astype("object")
    return df


def label_records(records, rules: Sequence[LabelRule]) -> pd.DataFrame:
    """Attach category/subcategory/binary labels; first matching rule wins."""
    df = records_frame(records).copy()
    n = len(df)
    sub = np.full(n, "normal", dtype=object)
    unlabeled = np.ones(n, dtype=bool)
    t = df["frame.time_epoch"].to_numpy(dtype=float)
    addrs = [df[c].fillna("").astype(str).to_numpy()
             for c in ("ip.src", "ip.dst", "ipv6.src", "ipv6.dst")]
    for rule in rules:
        if rule.subcategory == "normal" or not rule.attacker_ips:
            continue
        ips = list(rule.attacker_ips)
        hit = np.zeros(n, dtype=bool)
        for col in addrs:
            hit |= np.isin(col, ips)
        if rule.time_window is not None:
            lo, hi = rule.time_window
            hit &= (t >= lo) & (t <= hi)
        hit &= unlabeled
        sub[hit] = rule.subcategory
        unlabeled &= ~hit
    df["label_subcategory"] = sub
    df["label_category"] = [CATEGORY_OF[s] for s in sub]
    df["binary_label"] = (df["label_category"] != "normal").astype("int64")
    return df[[c for c in df.columns if c not in LABEL_COLUMNS] + list(LABEL_COLUMNS)]


def subsample_stratified(table: pd.DataFrame, cap: int, normal_fraction: float,
                         seed: int) -> pd.DataFrame:
    """Keep small subcategories whole; Bernoulli-sample large ones at cap/N.

    Realised counts of sampled subcategories fluctuate around ``cap``.  Row
    order of the input is preserved.
    """
    if cap <= 0:
        raise ValueError("cap must be positive")
    if not 0 < normal_fraction <= 1:
        raise ValueError("normal_fraction must be in (0, 1]")
    rng = np.random.default_rng(seed)
    subs = table["label_subcategory"].to_numpy()
    keep = np.zeros(len(table), dtype=bool)
    for s in SUBCATEGORIES:
        idx = np.flatnonzero(subs == s)
        if len(idx) == 0:
            log.warning("subcategory %s has no rows", s)
            continue
        if s == "normal":
            frac = normal_fraction
        elif len(idx) <= cap:
            frac = 1.0
        else:
            frac = cap / len(idx)
        draw = rng.random(len(idx))
        keep[idx] = True if frac >= 1.0 else draw < frac
    return table[keep]


def read_labeled(path) -> pd.DataFrame:
    """Load a labelled CSV, restoring column dtypes."""
    from .capture import COLUMNS, FLOAT_COLUMNS, INT_COLUMNS

    dtypes = {c: ("Int64" if c in INT_COLUMNS else "float64" if c in FLOAT_COLUMNS else "object")
              for c in COLUMNS}
    dtypes.update(label_category="object", label_subcategory="object", binary_label="int64")
    df = pd.read_csv(path, dtype=dtypes, keep_default_na=False, na_values={
        c: [""] for c in COLUMNS if c not in ("ip.src", "ip.dst", "ipv6.src", "ipv6.dst")})
    for c, dt in dtypes.items():
        if dt == "object":
            df[c] = df[c].astype(object).where(df[c].notna(), None)
    return df


def write_labeled(table: pd.DataFrame, path) -> None:
    table.to_csv(path, index=False, float_format=None)
