"""Datasets: loading, vertical feature splits, alignment, sharding.

A record is (id, dense feature vector, optional label).  LIBSVM files carry
no ids, so rows get their zero-based row index as a decimal ASCII id, which
both parties reproduce independently.  The active party keeps the labels;
the passive party's records carry label None.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class Record:
    id: bytes
    features: np.ndarray
    label: int | None = None


def load_libsvm(path, n_features=None):
    """Parse a LIBSVM file into dense records.

    Labels -1/+1 map to 0/1 (0/1 pass through).  Feature indices are
    1-based and must be strictly increasing within a line.  The dense width
    is the maximum index seen, unless ``n_features`` pins it.
    """
    rows = []
    max_idx = 0
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            try:
                raw_label = float(parts[0])
            except ValueError:
                raise DataError("%s:%d: bad label %r" % (path, lineno, parts[0]))
            if raw_label in (-1.0, 0.0):
                label = 0
            elif raw_label == 1.0:
                label = 1
            else:
                raise DataError("%s:%d: label %r not in {-1,+1,0,1}"
                                % (path, lineno, parts[0]))
            feats = []
            prev = 0
            for tok in parts[1:]:
                try:
                    idx_s, val_s = tok.split(":", 1)
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError:
                    raise DataError("%s:%d: malformed feature %r" % (path, lineno, tok))
                if idx < 1:
                    raise DataError("%s:%d: index %d is not 1-based" % (path, lineno, idx))
                if idx <= prev:
                    raise DataError("%s:%d: indices not strictly increasing at %r"
                                    % (path, lineno, tok))
                prev = idx
                feats.append((idx, val))
            if feats:
                max_idx = max(max_idx, feats[-1][0])
            rows.append((label, feats))
    width = n_features if n_features is not None else max_idx
    records = []
    for i, (label, feats) in enumerate(rows):
        vec = np.zeros(width, dtype=np.float64)
        for idx, val in feats:
            if idx > width:
                raise DataError("%s: row %d has index %d beyond width %d"
                                % (path, i, idx, width))
            vec[idx - 1] = val
        records.append(Record(str(i).encode(), vec, label))
    return records


def write_csv(path, records, with_labels):
    """id,label,f0..  for the active side; id,f0..  for the passive side."""
    if not records:
        raise DataError("refusing to write an empty dataset")
    width = records[0].features.size
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["id"] + (["label"] if with_labels else []) + \
               ["f%d" % i for i in range(width)]
        w.writerow(cols)
        for r in records:
            row = [r.id.decode()]
            if with_labels:
                if r.label is None:
                    raise DataError("record %r has no label" % r.id)
                row.append(str(r.label))
            row.extend(repr(float(v)) for v in r.features)
            w.writerow(row)


def load_csv(path, with_labels):
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("%s: empty file" % path)
        expect = ["id"] + (["label"] if with_labels else [])
        if header[:len(expect)] != expect:
            raise DataError("%s: header starts with %r, expected %r"
                            % (path, header[:len(expect)], expect))
        skip = len(expect)
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                label = int(row[1]) if with_labels else None
                feats = np.array([float(v) for v in row[skip:]], dtype=np.float64)
            except ValueError as e:
                raise DataError("%s:%d: %s" % (path, lineno, e))
            records.append(Record(row[0].encode(), feats, label))
    return records


def parse_col_range(spec, width):
    """Column spec "a:b" (half-open) or "i,j,k" into a sorted index list."""
    try:
        if ":" in spec:
            lo_s, hi_s = spec.split(":", 1)
            lo, hi = int(lo_s), int(hi_s)
            cols = list(range(lo, hi))
        else:
            cols = sorted({int(t) for t in spec.split(",") if t != ""})
    except ValueError:
        raise DataError("bad column spec %r" % spec)
    if not cols or cols[0] < 0 or cols[-1] >= width:
        raise DataError("column spec %r outside width %d" % (spec, width))
    return cols


@dataclass
class VerticalSplitSpec:
    """Disjoint, covering assignment of feature columns to the two parties."""

    active_cols: list
    passive_cols: list

    @classmethod
    def from_active(cls, active_cols, width):
        active = sorted(set(active_cols))
        passive = [c for c in range(width) if c not in set(active)]
        spec = cls(active, passive)
        spec.validate(width)
        return spec

    def validate(self, width):
        a, p = set(self.active_cols), set(self.passive_cols)
        if a & p:
            raise DataError("parties share columns: %s" % sorted(a & p)[:5])
        if a | p != set(range(width)):
            raise DataError("split does not cover all %d columns" % width)
        if not a or not p:
            raise DataError("each party needs at least one column")


def vertical_split(records, spec):
    """Project one joined table into the two party-local tables."""
    if not records:
        return [], []
    width = records[0].features.size
    spec.validate(width)
    a_idx = np.array(spec.active_cols, dtype=np.intp)
    p_idx = np.array(spec.passive_cols, dtype=np.intp)
    active, passive = [], []
    for r in records:
        active.append(Record(r.id, r.features[a_idx].copy(), r.label))
        passive.append(Record(r.id, r.features[p_idx].copy(), None))
    return active, passive


def align_to_intersection(records, id_set):
    """Keep only records whose id is in the set, bytewise-sorted by id."""
    kept = [r for r in records if r.id in id_set]
    kept.sort(key=lambda r: r.id)
    return kept


def sequential_partition(records, n_shards):
    """Contiguous shards; the first len % n shards absorb the remainder.

    Both parties apply this to identically ordered aligned tables, so shard i
    holds the same ids on each side.
    """
    if n_shards < 1:
        raise ValueError("need at least one shard")
    total = len(records)
    base, extra = divmod(total, n_shards)
    shards = []
    start = 0
    for i in range(n_shards):
        size = base + (1 if i < extra else 0)
        shards.append(records[start:start + size])
        start += size
    return shards


def replicate_records(records, factor):
    """Copy the dataset ``factor`` times with distinct ids (bench scaling)."""
    if factor <= 1:
        return list(records)
    out = []
    for rep in range(factor):
        for r in records:
            rid = r.id if rep == 0 else r.id + b"#%d" % rep
            out.append(Record(rid, r.features, r.label))
    return out


def synthesize_adult_like(n_rows, seed, n_fields=14, n_features=123):
    """Deterministic stand-in for a one-hot census-style binary dataset.

    Rows activate one column per categorical field (so every row has
    ``n_fields`` ones over ``n_features`` binary columns).  Labels come from
    a sparse logistic teacher plus Gaussian noise, tuned so a small model
    tops out in the mid-0.8 accuracy range with roughly a quarter of rows
    positive.
    """
    rng = np.random.default_rng(seed)
    # carve the columns into contiguous categorical fields
    cuts = np.sort(rng.choice(np.arange(1, n_features), size=n_fields - 1,
                              replace=False))
    bounds = np.concatenate(([0], cuts, [n_features]))
    field_cols = [np.arange(bounds[i], bounds[i + 1]) for i in range(n_fields)]
    # skewed category popularity inside each field
    choosers = []
    for cols in field_cols:
        w = rng.dirichlet(np.full(len(cols), 0.6))
        choosers.append(w)
    teacher = rng.normal(0.0, 1.0, size=n_features)
    X = np.zeros((n_rows, n_features), dtype=np.float64)
    for j, cols in enumerate(field_cols):
        picks = rng.choice(cols, size=n_rows, p=choosers[j])
        X[np.arange(n_rows), picks] = 1.0
    score = X @ teacher
    # noise sets the Bayes accuracy; the offset sets the positive rate
    noisy = score + rng.normal(0.0, 1.1, size=n_rows)
    threshold = np.quantile(noisy, 0.75)
    y = (noisy > threshold).astype(int)
    return [Record(str(i).encode(), X[i], int(y[i])) for i in range(n_rows)]
