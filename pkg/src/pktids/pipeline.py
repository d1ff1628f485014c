"""Feature preprocessing: labelled packet table -> model-ready numeric blocks.

The intermediate table produced by :func:`preprocess` keeps one row per
distinct packet.  Encoders (one-hot dictionaries, min/max scaling) are fitted
on training rows only and applied to every split with :func:`encode`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .capture import COLUMNS
from .httpmethods import METHOD_INDEX, MISSING_METHOD
from .labeling import LABEL_COLUMNS, SUBCATEGORIES
from .store import file_sha256

log = logging.getLogger(__name__)

DROPPED = ("frame.time_epoch", "ip.src", "ip.dst", "ipv6.src", "ipv6.dst")
MERGED = (
    ("src.port", "tcp.srcport", "udp.srcport"),
    ("dst.port", "tcp.dstport", "udp.dstport"),
    ("length", "tcp.len", "udp.length"),
    ("stream", "tcp.stream", "udp.stream"),
)
SPLIT = ("ip.ttl", "ip.id", "ip.hdr_len", "ip.len")
ONEHOT = ("ip.proto", "tcp.flags", "ip.flags.df", "http.response.code")
PORT_COLUMNS = ("src.port", "dst.port")
METHOD_COLUMN = "http.request.method"
MAX_PLUS_ONE = ("ip.flags.df", "tcp.flags")

PORT_MISSING = 65536
PORT_VOCAB = PORT_MISSING + 1

INTERMEDIATE_COLUMNS: tuple[str, ...] = (
    "frame.len", "ip.proto",
    "ip.ttl", "ip.ttl_embedded", "ip.id", "ip.id_embedded",
    "ip.hdr_len", "ip.hdr_len_embedded", "ip.len", "ip.len_embedded",
    "ip.flags.df", "src.port", "dst.port", "stream",
    "tcp.time_delta", "tcp.time_relative", "tcp.analysis.initial_rtt",
    "tcp.flags", "tcp.window_size_value", "tcp.hdr_len", "length",
    "http.response.code", "http.request.method", "http.content_length",
)
NUMERIC_COLUMNS: tuple[str, ...] = tuple(
    c for c in INTERMEDIATE_COLUMNS
    if c not in ONEHOT and c not in PORT_COLUMNS and c != METHOD_COLUMN
)

CLASS_NAMES = ("normal", "ddos_dos", "theft", "reconnaissance")
CLASS_OF_CATEGORY = {"normal": 0, "ddos": 1, "dos": 1, "theft": 2, "reconnaissance": 3}
SUBCATEGORY_CODE = {s: i for i, s in enumerate(SUBCATEGORIES)}


class SchemaMismatch(ValueError):
    pass


class TooFewRows(ValueError):
    pass


class ZeroClass(ValueError):
    pass


# ------------------------------------------------------------ preprocessing

def _to_number(values: pd.Series) -> pd.Series:
    out = pd.to_numeric(values, errors="coerce")
    bad = out.isna() & values.notna()
    if bad.any():
        # hex-formatted fields from other exporters, e.g. ip.id "0x1a2b"
        def conv(v):
            try:
                return float(int(str(v).strip(), 0))
            except ValueError:
                return np.nan
        out[bad] = values[bad].map(conv)
    return out.astype("float64")


def _split_pair(values: pd.Series, name: str) -> tuple[pd.Series, pd.Series]:
    text = values.astype("string")
    parts = text.str.split(",")
    n_parts = parts.str.len()
    deep = int((n_parts > 2).sum())
    if deep:
        log.warning("%s: %d value(s) with more than one comma truncated to two parts", name, deep)
    base = parts.str[0]
    inner = parts.str[1]
    return _to_number(base.astype(object).where(base.notna(), None)), \
        _to_number(inner.astype(object).where(inner.notna(), None))


def _category_text(values: pd.Series) -> pd.Series:
    """Canonical text for one-hot columns: integers without a decimal part."""
    def canon(v):
        if v is None or (isinstance(v, float) and np.isnan(v)) or v is pd.NA:
            return None
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            return str(int(v)) if float(v).is_integer() else repr(float(v))
        s = str(v).strip()
        return s or None
    return values.astype(object).map(canon)


def is_intermediate(table: pd.DataFrame) -> bool:
    return all(c in table.columns for c in INTERMEDIATE_COLUMNS)


def preprocess(table: pd.DataFrame) -> pd.DataFrame:
    """Drop, merge, split, fill and deduplicate.

    Accepts either the labelled 29-column table or an already-preprocessed
    table (in which case only the fill and dedup steps apply, both no-ops).
    """
    missing_labels = [c for c in LABEL_COLUMNS if c not in table.columns]
    if missing_labels:
        raise SchemaMismatch(f"missing label columns {missing_labels}")

    if is_intermediate(table):
        df = table[list(INTERMEDIATE_COLUMNS) + list(LABEL_COLUMNS)].copy()
    else:
        absent = [c for c in COLUMNS if c not in table.columns]
        if absent:
            raise SchemaMismatch(f"missing capture columns {absent}")
        src = table
        df = pd.DataFrame(index=src.index)
        df["frame.len"] = _to_number(src["frame.len"])
        df["ip.proto"] = _category_text(src["ip.proto"])
        for name in SPLIT:
            df[name], df[name + "_embedded"] = _split_pair(src[name], name)
        df["ip.flags.df"] = _to_number(src["ip.flags.df"])
        for out, tcp, udp in MERGED:
            a, b = _to_number(src[tcp]), _to_number(src[udp])
            both = int((a.notna() & b.notna()).sum())
            if both:
                log.warning("%s: %d row(s) carry both %s and %s; keeping %s", out, both, tcp, udp, tcp)
            df[out] = a.where(a.notna(), b)
        for c in ("tcp.time_delta", "tcp.time_relative", "tcp.analysis.initial_rtt",
                  "tcp.flags", "tcp.window_size_value", "tcp.hdr_len",
                  "http.response.code", "http.content_length"):
            df[c] = _to_number(src[c])
        df["http.request.method"] = src["http.request.method"].astype(object)
        df = df[list(INTERMEDIATE_COLUMNS)]
        for c in LABEL_COLUMNS:
            df[c] = src[c].to_numpy()

    # fill missing values
    for c in MAX_PLUS_ONE:
        col = pd.to_numeric(df[c], errors="coerce")
        if col.isna().any():
            top = col.max()
            col = col.fillna(0.0 if pd.isna(top) else top + 1)
        df[c] = col.astype("int64")
    for c in PORT_COLUMNS:
        df[c] = pd.to_numeric(df[c], errors="coerce").fillna(PORT_MISSING).astype("int64")
    df["http.response.code"] = pd.to_numeric(df["http.response.code"], errors="coerce") \
        .fillna(0).astype("int64")
    method = df[METHOD_COLUMN].astype(object)
    df[METHOD_COLUMN] = method.where(method.notna() & (method.astype(str) != ""), MISSING_METHOD) \
        .astype(str)
    proto = df["ip.proto"].astype(object)
    df["ip.proto"] = proto.where(proto.notna(), "0").astype(str)
    for c in NUMERIC_COLUMNS:
        df[c] = pd.to_numeric(df[c], errors="coerce").fillna(0.0).astype("float64")
    df["binary_label"] = df["binary_label"].astype("int64")

    before = len(df)
    df = df.drop_duplicates(keep="first").reset_index(drop=True)
    log.info("preprocess: %d -> %d rows after dropping duplicates", before, len(df))
    return df


def dedup_stats(raw: pd.DataFrame, processed: pd.DataFrame) -> pd.DataFrame:
    """Per-subcategory row counts before/after preprocessing."""
    before = raw["label_subcategory"].value_counts()
    after = processed["label_subcategory"].value_counts()
    out = pd.DataFrame({"before": before, "after": after}).fillna(0).astype(int)
    out = out.reindex([s for s in SUBCATEGORIES if s in out.index])
    out.loc["total"] = out.sum()
    return out


def write_intermediate(table: pd.DataFrame, path) -> None:
    table.to_csv(path, index=False)


def read_intermediate(path) -> pd.DataFrame:
    """Load a table written by :func:`write_intermediate` with its dtypes."""
    dtypes = {c: "float64" for c in NUMERIC_COLUMNS}
    dtypes.update({c: "int64" for c in PORT_COLUMNS + MAX_PLUS_ONE + ("http.response.code",)})
    dtypes.update({"ip.proto": str, METHOD_COLUMN: str, "label_category": str,
                   "label_subcategory": str, "binary_label": "int64"})
    df = pd.read_csv(path, dtype=dtypes, keep_default_na=False)
    if not is_intermediate(df):
        raise SchemaMismatch(f"{path}: not a preprocessed table")
    return df


# ------------------------------------------------------------ encoders

def _category_sort_key(token: str):
    try:
        return (0, tuple(int(p) for p in token.split(",")), token)
    except ValueError:
        return (1, (), token)


@dataclass
class EncodingMeta:
    numeric_columns: list[str]
    mins: dict[str, float]
    maxs: dict[str, float]
    categories: dict[str, list[str]]

    @property
    def dense_columns(self) -> list[str]:
        cols = list(self.numeric_columns)
        for c in ONEHOT:
            cols.extend(f"{c}={v}" for v in self.categories[c])
        return cols

    @property
    def dense_width(self) -> int:
        return len(self.numeric_columns) + sum(len(v) for v in self.categories.values())

    def to_dict(self) -> dict:
        return {
            "numeric_columns": self.numeric_columns,
            "mins": self.mins, "maxs": self.maxs,
            "categories": self.categories,
            "onehot_order": list(ONEHOT),
            "dense_columns": self.dense_columns,
            "port_missing": PORT_MISSING,
            "method_vocab_size": len(METHOD_INDEX),
            "class_names": list(CLASS_NAMES),
            "subcategories": list(SUBCATEGORIES),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncodingMeta":
        return cls(list(d["numeric_columns"]), dict(d["mins"]), dict(d["maxs"]),
                   {k: list(v) for k, v in d["categories"].items()})


def fit_encoders(train: pd.DataFrame) -> EncodingMeta:
    if len(train) == 0:
        raise ValueError("cannot fit encoders on zero rows")
    mins, maxs = {}, {}
    for c in NUMERIC_COLUMNS:
        col = train[c].to_numpy(dtype=np.float64)
        mins[c], maxs[c] = float(col.min()), float(col.max())
    cats = {}
    for c in ONEHOT:
        values = set(_category_text(train[c]).dropna())
        cats[c] = sorted(values, key=_category_sort_key)
    return EncodingMeta(list(NUMERIC_COLUMNS), mins, maxs, cats)


def scale(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map [lo, hi] onto [-1, 1]; constant columns map to 0; clamps outliers."""
    if hi <= lo:
        return np.zeros_like(x, dtype=np.float64)
    return np.clip(2.0 * (x - lo) / (hi - lo) - 1.0, -1.0, 1.0)


@dataclass
class EncodedDataset:
    dense: np.ndarray            # (n, D) float32
    ports: np.ndarray            # (n, 2) uint32
    methods: np.ndarray          # (n, 1) uint32
    labels_multiclass: np.ndarray
    labels_binary: np.ndarray
    labels_subcategory: np.ndarray
    meta: EncodingMeta = field(repr=False)

    def __len__(self):
        return len(self.dense)

    def take(self, idx) -> "EncodedDataset":
        idx = np.asarray(idx)
        return EncodedDataset(self.dense[idx], self.ports[idx], self.methods[idx],
                              self.labels_multiclass[idx], self.labels_binary[idx],
                              self.labels_subcategory[idx], self.meta)

    def inputs(self, idx=None):
        if idx is None:
            return self.dense, self.ports, self.methods
        return self.dense[idx], self.ports[idx], self.methods[idx]


def encode_labels(table: pd.DataFrame) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cat = table["label_category"].map(CLASS_OF_CATEGORY)
    if cat.isna().any():
        raise SchemaMismatch("unknown label_category value")
    sub = table["label_subcategory"].map(SUBCATEGORY_CODE)
    if sub.isna().any():
        raise SchemaMismatch("unknown label_subcategory value")
    return (cat.to_numpy(dtype=np.int64), table["binary_label"].to_numpy(dtype=np.int64),
            sub.to_numpy(dtype=np.int64))


def encode(rows: pd.DataFrame, meta: EncodingMeta) -> EncodedDataset:
    n = len(rows)
    blocks = []
    for c in meta.numeric_columns:
        x = rows[c].to_numpy(dtype=np.float64)
        blocks.append(scale(x, meta.mins[c], meta.maxs[c])[:, None])
    for c in ONEHOT:
        cats = meta.categories[c]
        lookup = {v: i for i, v in enumerate(cats)}
        codes = _category_text(rows[c]).map(lambda v: lookup.get(v, -1)).to_numpy(dtype=np.int64)
        hot = np.zeros((n, len(cats)), dtype=np.float64)
        ok = codes >= 0
        hot[np.flatnonzero(ok), codes[ok]] = 1.0
        blocks.append(hot)
    dense = np.hstack(blocks).astype(np.float32) if blocks else np.zeros((n, 0), np.float32)
    ports = np.column_stack([
        np.clip(rows[c].to_numpy(dtype=np.int64), 0, PORT_MISSING) for c in PORT_COLUMNS
    ]).astype(np.uint32)
    methods = rows[METHOD_COLUMN].map(lambda m: METHOD_INDEX.get(str(m), 0)) \
        .to_numpy(dtype=np.uint32).reshape(n, 1)
    multi, binary, sub = encode_labels(rows)
    return EncodedDataset(dense, ports, methods, multi, binary, sub, meta)


# ------------------------------------------------------------ splits & weights

@dataclass
class SplitIndices:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def restrict(self, mask: np.ndarray) -> "SplitIndices":
        """Keep only indices whose row satisfies ``mask``."""
        return SplitIndices(*(ix[mask[ix]] for ix in (self.train, self.validation, self.test)))


def split_stratified(labels, ratios: Sequence[float] = (0.64, 0.16, 0.20),
                     seed: int = 0) -> SplitIndices:
    """Stratified three-way split.

    Rows of each class are shuffled and given evenly spaced positions in
    [0, 1); merging all classes on that position and cutting at the ratio
    boundaries gives split sizes within one row of the targets. Per-class
    counts are within one row of their share in the two outer parts and
    within two rows in the middle one, which sits between two cuts.
    """
    labels = np.asarray(labels)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three fractions summing to 1")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    small = classes[counts < 5]
    if len(small):
        raise TooFewRows(f"classes {small.tolist()} have fewer than 5 rows")
    keys, cls_rank, rows = [], [], []
    for r, c in enumerate(classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        keys.append((np.arange(len(idx)) + 0.5) / len(idx))
        cls_rank.append(np.full(len(idx), r))
        rows.append(idx)
    keys, cls_rank, rows = map(np.concatenate, (keys, cls_rank, rows))
    order = rows[np.lexsort((cls_rank, keys))]
    n = len(labels)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    return SplitIndices(np.sort(order[:n_train]), np.sort(order[n_train:n_train + n_val]),
                        np.sort(order[n_train + n_val:]))


@dataclass
class ClassWeights:
    ratios: dict[int, Fraction]

    def as_array(self, dtype=np.float64) -> np.ndarray:
        k = max(self.ratios) + 1
        out = np.zeros(k, dtype=dtype)
        for c, w in self.ratios.items():
            out[c] = float(w)
        return out

    def to_dict(self) -> dict:
        return {str(c): [w.numerator, w.denominator] for c, w in sorted(self.ratios.items())}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassWeights":
        return cls({int(c): Fraction(n, m) for c, (n, m) in d.items()})


def class_weights(train_labels, n_classes: Optional[int] = None) -> ClassWeights:
    """weight_c = max_count / count_c."""
    y = np.asarray(train_labels, dtype=np.int64)
    k = int(y.max()) + 1 if n_classes is None else n_classes
    counts = np.bincount(y, minlength=k)[:k]
    if (counts == 0).any():
        raise ZeroClass(f"classes {np.flatnonzero(counts == 0).tolist()} absent from training labels")
    top = int(counts.max())
    return ClassWeights({c: Fraction(top, int(n)) for c, n in enumerate(counts)})


# ------------------------------------------------------------ serialisation

_BLOCKS = (
    ("dense", "dense.f32", "<f4"),
    ("ports", "ports.u32", "<u4"),
    ("methods", "methods.u32", "<u4"),
)


def save_dataset(ds: EncodedDataset, out_dir) -> Path:
    """Write meta, the three blocks, labels and a manifest with checksums."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "meta.json").write_text(json.dumps(ds.meta.to_dict(), indent=1, sort_keys=True) + "\n")
    for attr, name, dt in _BLOCKS:
        np.ascontiguousarray(getattr(ds, attr), dtype=dt).tofile(out / name)
    labels = np.column_stack([ds.labels_multiclass, ds.labels_binary, ds.labels_subcategory])
    np.ascontiguousarray(labels, dtype="<u4").tofile(out / "labels.u32")
    lines = [f"rows {len(ds)}", f"dense_width {ds.dense.shape[1]}"]
    for _, name, _ in _BLOCKS + (("labels", "labels.u32", "<u4"),):
        lines.append(f"sha256 {name} {file_sha256(out / name)}")
    lines.append(f"sha256 meta.json {file_sha256(out / 'meta.json')}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out


def _read_manifest(path: Path) -> dict:
    info = {"sha256": {}}
    for line in path.read_text().splitlines():
        parts = line.split()
        if parts[0] == "sha256":
            info["sha256"][parts[1]] = parts[2]
        elif len(parts) == 2:
            info[parts[0]] = int(parts[1])
    return info


def load_dataset(in_dir, verify: bool = True) -> EncodedDataset:
    d = Path(in_dir)
    info = _read_manifest(d / "manifest.txt")
    if verify:
        for name, digest in info["sha256"].items():
            if file_sha256(d / name) != digest:
                raise ValueError(f"{d / name}: checksum mismatch")
    meta = EncodingMeta.from_dict(json.loads((d / "meta.json").read_text()))
    n, width = info["rows"], info["dense_width"]
    dense = np.fromfile(d / "dense.f32", dtype="<f4").reshape(n, width).astype(np.float32)
    ports = np.fromfile(d / "ports.u32", dtype="<u4").reshape(n, 2).astype(np.uint32)
    methods = np.fromfile(d / "methods.u32", dtype="<u4").reshape(n, 1).astype(np.uint32)
    labels = np.fromfile(d / "labels.u32", dtype="<u4").reshape(n, 3).astype(np.int64)
    return EncodedDataset(dense, ports, methods, labels[:, 0], labels[:, 1], labels[:, 2], meta)


def save_splits(splits: SplitIndices, path) -> None:
    Path(path).write_text(json.dumps({
        "train": splits.train.tolist(), "validation": splits.validation.tolist(),
        "test": splits.test.tolist()}) + "\n")


def load_splits(path) -> SplitIndices:
    d = json.loads(Path(path).read_text())
    return SplitIndices(*(np.asarray(d[k], dtype=np.int64) for k in ("train", "validation", "test")))


@dataclass
class Prepared:
    table: pd.DataFrame
    dataset: EncodedDataset
    splits: SplitIndices
    weights: ClassWeights


def prepare(labeled: pd.DataFrame, seed: int = 0) -> Prepared:
    """preprocess -> stratified split -> fit encoders on train -> encode all rows."""
    table = preprocess(labeled)
    multi, _, _ = encode_labels(table)
    splits = split_stratified(multi, seed=seed)
    meta = fit_encoders(table.iloc[splits.train])
    ds = encode(table, meta)
    return Prepared(table, ds, splits, class_weights(multi[splits.train], n_classes=len(CLASS_NAMES)))
