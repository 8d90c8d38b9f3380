"""Dataset ingestion, encoding, splitting, MCAR injection, standardization.

A dataset is an N x D float64 matrix with NaN marking pre-existing missing
entries, plus per-column metadata (name, kind, one-hot group). Injected
missingness is tracked separately in a :class:`MissingMask` that remembers
the blanked truth values for scoring.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ContractError, InjectionError, ParseError, SchemaError

log = logging.getLogger(__name__)

# Row/column expectations for the benchmark datasets, keyed by canonical name.
KNOWN_DATASETS = {
    "protein": (45730, 10),
    "keggd": (53414, 23),
    "keggud": (65554, 28),
    "parkinson": (1040, 24),
}


@dataclass
class Column:
    name: str
    kind: str  # "continuous" or "one-hot-member"
    group: int | None = None  # one-hot group id, None for continuous


@dataclass
class Dataset:
    values: np.ndarray
    columns: list
    name: str | None = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def groups(self):
        """One-hot group id -> member column indices."""
        out = {}
        for idx, col in enumerate(self.columns):
            if col.group is not None:
                out.setdefault(col.group, []).append(idx)
        return out

    def fingerprint(self):
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.values).tobytes())
        digest.update("|".join(c.name for c in self.columns).encode())
        return digest.hexdigest()[:16]


def load_csv(path, schema=None, name=None):
    """Read a CSV with a header row into an encoded numeric Dataset.

    ``schema`` may be a path to a JSON file or a dict with a ``columns``
    list of {name, kind} entries (kinds: continuous / categorical); without
    one, numeric columns are continuous and the rest categorical.
    Empty-string and NA cells become NaN. Categorical columns are expanded
    into one-hot groups (a missing category blanks its whole group).
    """
    frame = pd.read_csv(path, dtype=object, keep_default_na=True)
    frame.columns = [str(c) for c in frame.columns]
    if schema is not None:
        if isinstance(schema, (str, bytes)):
            with open(schema) as handle:
                schema = json.load(handle)
        declared = schema.get("columns", [])
        name = name or schema.get("dataset")
        if len(declared) != frame.shape[1]:
            raise SchemaError(
                f"schema declares {len(declared)} columns, file has {frame.shape[1]}"
            )
        kinds = {str(c["name"]): c.get("kind", "continuous") for c in declared}
        unknown = set(kinds) - set(frame.columns)
        if unknown:
            raise SchemaError(f"schema names absent from file header: {sorted(unknown)}")
    else:
        kinds = {}
        for col in frame.columns:
            numeric = pd.to_numeric(frame[col], errors="coerce")
            fresh_nan = numeric.isna() & frame[col].notna()
            kinds[col] = "categorical" if fresh_nan.any() else "continuous"
    arrays = []
    columns = []
    group_id = 0
    for col in frame.columns:
        raw = frame[col]
        if kinds[col] == "continuous":
            numeric = pd.to_numeric(raw, errors="coerce")
            bad = numeric.isna() & raw.notna()
            if bad.any():
                row = int(np.nonzero(bad.to_numpy())[0][0])
                raise ParseError(
                    f"non-numeric value {raw.iloc[row]!r} in continuous column {col!r} at row {row}",
                    row=row,
                    column=col,
                )
            arrays.append(numeric.to_numpy(dtype=np.float64))
            columns.append(Column(name=col, kind="continuous"))
        else:
            present = raw.notna()
            levels = sorted(raw[present].astype(str).unique())
            for level in levels:
                indicator = np.where(present, (raw.astype(str) == level).astype(float), np.nan)
                arrays.append(indicator.astype(np.float64))
                columns.append(Column(name=f"{col}={level}", kind="one-hot-member", group=group_id))
            group_id += 1
    values = np.column_stack(arrays) if arrays else np.empty((len(frame), 0))
    dataset = Dataset(values=values, columns=columns, name=name)
    if name and name.lower() in KNOWN_DATASETS:
        exp_n, exp_d = KNOWN_DATASETS[name.lower()]
        got_n = frame.shape[0]
        got_d = frame.shape[1]
        if (got_n, got_d) != (exp_n, exp_d):
            log.warning(
                "dataset %s: expected %dx%d (rows x raw columns), file has %dx%d",
                name,
                exp_n,
                exp_d,
                got_n,
                got_d,
            )
    return dataset


def split_indices(n_rows, train_frac, seed):
    """Seeded uniform row permutation; first ceil(frac * N) rows train."""
    if not 0.0 < train_frac < 1.0:
        raise ContractError(f"train_frac must be in (0, 1), got {train_frac}")
    order = np.random.default_rng(seed).permutation(n_rows)
    n_train = math.ceil(train_frac * n_rows)
    return order[:n_train], order[n_train:]


def split(dataset, train_frac, seed):
    """Row-split a Dataset into (train, test) Datasets."""
    tr, te = split_indices(dataset.values.shape[0], train_frac, seed)
    make = lambda idx: Dataset(values=dataset.values[idx].copy(), columns=dataset.columns, name=dataset.name)
    return make(tr), make(te)


@dataclass
class MissingMask:
    """Injected-missingness record: mask, blanked truths, provenance."""

    mask: np.ndarray  # True = injected missing
    truth: np.ndarray  # original values at masked cells, NaN elsewhere
    rate: float
    seed: int
    fingerprint: str = ""

    def restore(self, values):
        """Put the truth back onto masked cells (bit-exact round trip)."""
        out = values.copy()
        out[self.mask] = self.truth[self.mask]
        return out


def inject_mcar(values, rate, seed, groups=None):
    """Blank a uniform sample of observed cells, remembering their values.

    The number of masked cells is round(rate * observed-cell count). Cells
    in the same one-hot group row are masked jointly. Every column keeps at
    least one observed cell; violating draws are re-drawn (logged), and an
    InjectionError is raised when that is impossible.
    """
    values = np.asarray(values, dtype=np.float64)
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"rate must be in [0, 1), got {rate}")
    if rate not in (0.0, 0.1, 0.2, 0.3, 0.4):
        log.warning("missing rate %.3f is outside the benchmark grid", rate)
    rng = np.random.default_rng(seed)
    observed = ~np.isnan(values)
    n, d = values.shape
    target = int(round(rate * int(observed.sum())))
    mask = np.zeros((n, d), dtype=bool)
    truth = np.full((n, d), np.nan)
    if target == 0:
        return MissingMask(mask=mask, truth=truth, rate=rate, seed=seed)

    col_group = {}
    if groups:
        for gid, cols in groups.items():
            for c in cols:
                col_group[c] = list(cols)

    # Sampling units: single cells for continuous columns, whole rows of a
    # one-hot group for categorical ones (so a category is missing jointly).
    unit_cells = []
    seen_groups = set()
    for c in range(d):
        if c in col_group:
            key = tuple(col_group[c])
            if key in seen_groups:
                continue
            seen_groups.add(key)
            for r in range(n):
                cells = [(r, cc) for cc in key if observed[r, cc]]
                if cells:
                    unit_cells.append(cells)
        else:
            rows = np.nonzero(observed[:, c])[0]
            unit_cells.extend([(int(r), c)] for r in rows)

    order = rng.permutation(len(unit_cells))
    col_observed = observed.sum(axis=0).astype(int)
    masked = 0
    redraws = 0
    for idx in order:
        if masked >= target:
            break
        cells = unit_cells[idx]
        if any(col_observed[c] <= 1 for _, c in cells):
            redraws += 1
            continue
        for r, c in cells:
            mask[r, c] = True
            truth[r, c] = values[r, c]
            col_observed[c] -= 1
            masked += 1
    if redraws:
        log.info("inject_mcar: re-drew %d units to keep every column observed", redraws)
    if masked < target:
        raise InjectionError(
            f"cannot mask {target} cells at rate {rate} while keeping every column observed"
        )
    return MissingMask(mask=mask, truth=truth, rate=rate, seed=seed)


def apply_mask(values, mask):
    """Blank the masked cells of ``values`` with NaN."""
    out = np.asarray(values, dtype=np.float64).copy()
    out[mask.mask] = np.nan
    return out


@dataclass
class Standardization:
    """Per-column affine transform fitted on observed training cells."""

    means: np.ndarray
    stds: np.ndarray

    def apply(self, values):
        return (values - self.means) / self.stds

    def invert(self, values):
        return values * self.stds + self.means


def standardize(train_values, test_values=None):
    """Z-score both splits with statistics from observed training cells only.

    Population (divide-by-count) standard deviations; constant columns get
    std clamped to 1 so they map to zero.
    """
    train_values = np.asarray(train_values, dtype=np.float64)
    d = train_values.shape[1]
    means = np.empty(d)
    stds = np.empty(d)
    for col in range(d):
        observed = train_values[~np.isnan(train_values[:, col]), col]
        if observed.size == 0:
            raise ContractError(f"column {col} has no observed training values")
        means[col] = observed.mean()
        std = observed.std()
        stds[col] = std if std > 0 else 1.0
    params = Standardization(means=means, stds=stds)
    train_std = params.apply(train_values)
    test_std = params.apply(np.asarray(test_values, dtype=np.float64)) if test_values is not None else None
    return train_std, test_std, params


def save_mask(mask, path):
    """Persist a mask as (row, col, truth) triplets under a JSON header."""
    with open(path, "w") as handle:
        header = {
            "rate": mask.rate,
            "seed": mask.seed,
            "fingerprint": mask.fingerprint,
            "shape": list(mask.mask.shape),
        }
        handle.write(json.dumps(header) + "\n")
        handle.write("row,col,truth\n")
        for r, c in zip(*np.nonzero(mask.mask)):
            handle.write(f"{int(r)},{int(c)},{float(mask.truth[r, c])!r}\n")


def load_mask(path):
    """Inverse of :func:`save_mask`; bit-exact for float64 truths."""
    with open(path) as handle:
        header = json.loads(handle.readline())
        column_line = handle.readline().strip()
        if column_line != "row,col,truth":
            raise ParseError(f"unexpected mask column header {column_line!r}")
        shape = tuple(header["shape"])
        mask = np.zeros(shape, dtype=bool)
        truth = np.full(shape, np.nan)
        for lineno, line in enumerate(handle, start=3):
            line = line.strip()
            if not line:
                continue
            try:
                r_s, c_s, t_s = line.split(",")
                r, c = int(r_s), int(c_s)
                truth_val = float(t_s)
            except ValueError as err:
                raise ParseError(f"malformed mask line {lineno}: {line!r}", row=lineno) from err
            mask[r, c] = True
            truth[r, c] = truth_val
    return MissingMask(
        mask=mask,
        truth=truth,
        rate=float(header["rate"]),
        seed=int(header["seed"]),
        fingerprint=header.get("fingerprint", ""),
    )
