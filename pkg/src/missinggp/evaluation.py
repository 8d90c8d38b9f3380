"""Scoring, aggregation and statistical comparison of imputation methods."""

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.stats import rankdata

from .errors import AggregationError, ContractError

# Two-tailed studentized-range quantiles divided by sqrt(2), for the
# critical-distance rule CD = q * sqrt(k (k + 1) / (6 N)). Standard table
# for k = 2..20 methods at the two conventional significance levels.
NEMENYI_Q = {
    0.05: [
        1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164,
        3.219, 3.268, 3.313, 3.354, 3.391, 3.426, 3.458, 3.489, 3.517, 3.544,
    ],
    0.10: [
        1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920,
        2.978, 3.030, 3.077, 3.120, 3.159, 3.196, 3.230, 3.261, 3.291, 3.319,
    ],
}


def rmse(truth, imputed, mask):
    """Root of the dimension-averaged per-dimension mean squared error.

    Each dimension's squared errors are averaged over that dimension's
    missing cells; dimensions with no missing cells are excluded from the
    outer average.
    """
    truth = np.asarray(truth, dtype=np.float64)
    imputed = np.asarray(imputed, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("rmse needs at least one masked cell")
    per_dim = []
    for col in range(mask.shape[1]):
        rows = mask[:, col]
        if rows.any():
            diff = truth[rows, col] - imputed[rows, col]
            per_dim.append(np.mean(diff**2))
    return float(np.sqrt(np.mean(per_dim)))


@dataclass
class Record:
    method: str
    dataset: str
    rate: float
    split: int
    rmse: float
    seconds: float = 0.0
    fingerprint: str = ""
    error: str | None = None

    def key(self):
        return (self.method, self.dataset, self.rate, self.split)


@dataclass
class ResultsTable:
    """One record per (method, dataset, rate, split); later inserts win."""

    records: list = field(default_factory=list)

    def add(self, record):
        self.records = [r for r in self.records if r.key() != record.key()]
        self.records.append(record)

    def ok_records(self):
        return [r for r in self.records if r.error is None and r.rmse is not None]

    def methods(self):
        return sorted({r.method for r in self.ok_records()})

    def datasets(self):
        return sorted({r.dataset for r in self.ok_records()})

    def rates(self):
        return sorted({r.rate for r in self.ok_records()})

    def cell(self, method, dataset, rate):
        """Mean and standard error over splits for one table cell."""
        values = [
            r.rmse for r in self.ok_records() if (r.method, r.dataset, r.rate) == (method, dataset, rate)
        ]
        if not values:
            return None, None
        mean = float(np.mean(values))
        if len(values) < 2:
            return mean, 0.0
        return mean, float(np.std(values, ddof=1) / math.sqrt(len(values)))

    def save(self, path):
        with open(path, "w") as handle:
            for r in self.records:
                handle.write(json.dumps(asdict(r)) + "\n")

    @classmethod
    def load(cls, path):
        table = cls()
        with open(path) as handle:
            for lineno, line in enumerate(handle, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    payload = json.loads(line)
                    table.add(Record(**payload))
                except (json.JSONDecodeError, TypeError) as err:
                    from .errors import ParseError

                    raise ParseError(f"malformed record at line {lineno}", row=lineno) from err
        return table


def average_ranks(table, methods=None, per_rate=None):
    """Mean rank of each method over (dataset, split, rate) cells.

    Rank 1 is the best RMSE in a cell; ties share the average rank. With
    ``per_rate`` set, only that missing rate's (dataset, split) cells count.
    Missing records raise AggregationError listing the holes.
    """
    records = table.ok_records()
    if per_rate is not None:
        records = [r for r in records if r.rate == per_rate]
    methods = list(methods) if methods else sorted({r.method for r in records})
    cells = sorted({(r.dataset, r.rate, r.split) for r in records})
    by_key = {(r.method, r.dataset, r.rate, r.split): r.rmse for r in records}
    holes = [
        (m, *cell) for cell in cells for m in methods if (m, *cell) not in by_key
    ]
    if holes:
        raise AggregationError(f"{len(holes)} missing records", holes=holes)
    if not cells:
        raise AggregationError("no records to rank")
    totals = np.zeros(len(methods))
    for cell in cells:
        scores = np.array([by_key[(m, *cell)] for m in methods])
        totals += rankdata(scores, method="average")
    return {m: float(t / len(cells)) for m, t in zip(methods, totals)}


def nemenyi_cd(n_methods, n_datasets, alpha=0.05):
    """Critical distance q_alpha * sqrt(k (k + 1) / (6 N)) for rank gaps."""
    if alpha not in NEMENYI_Q:
        raise ContractError(f"alpha must be one of {sorted(NEMENYI_Q)}, got {alpha}")
    if not 2 <= n_methods <= 20:
        raise ContractError(f"embedded constants cover 2..20 methods, got {n_methods}")
    if n_datasets < 1:
        raise ContractError(f"need at least one dataset, got {n_datasets}")
    q = NEMENYI_Q[alpha][n_methods - 2]
    return float(q * math.sqrt(n_methods * (n_methods + 1) / (6.0 * n_datasets)))


def _format_table(table, rate):
    methods = table.methods()
    datasets = table.datasets()
    best = {}
    for ds in datasets:
        means = {m: table.cell(m, ds, rate)[0] for m in methods}
        known = {m: v for m, v in means.items() if v is not None}
        if known:
            best[ds] = min(known, key=known.get)
    width = max([len(m) for m in methods] + [6])
    lines = [f"RMSE at {int(rate * 100)}% missing (mean(se) over splits; * = best mean)"]
    header = " " * (width + 2) + "  ".join(f"{ds:>16s}" for ds in datasets)
    lines.append(header)
    for m in methods:
        parts = [f"{m:<{width}s}"]
        for ds in datasets:
            mean, se = table.cell(m, ds, rate)
            if mean is None:
                parts.append(f"{'-':>16s}")
            else:
                flag = "*" if best.get(ds) == m else " "
                parts.append(f"{mean:>9.3f}({se:.3f}){flag}")
        lines.append("  ".join(parts))
    return "\n".join(lines)


def emit_report(table, out_dir, alpha=0.05):
    """Write per-rate text tables, a CSV, the record dump and a rank summary.

    Returns the list of files written. The critical distance uses the count
    of (dataset, split) pairs, matching the benchmark's rank protocol.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    written = []

    dump = os.path.join(out_dir, "records.jsonl")
    table.save(dump)
    written.append(dump)

    csv_path = os.path.join(out_dir, "rmse.csv")
    with open(csv_path, "w") as handle:
        handle.write("method,dataset,rate,split,rmse,seconds\n")
        for r in sorted(table.ok_records(), key=lambda r: r.key()):
            handle.write(f"{r.method},{r.dataset},{r.rate},{r.split},{r.rmse!r},{r.seconds!r}\n")
    written.append(csv_path)

    text_path = os.path.join(out_dir, "tables.txt")
    with open(text_path, "w") as handle:
        for rate in table.rates():
            handle.write(_format_table(table, rate) + "\n\n")
    written.append(text_path)

    ranks_path = os.path.join(out_dir, "ranks.txt")
    with open(ranks_path, "w") as handle:
        records = table.ok_records()
        if records:
            try:
                ranks = average_ranks(table)
            except AggregationError as err:
                handle.write(f"rank aggregation skipped: {err}\n")
            else:
                k = len(ranks)
                pairs = {(r.dataset, r.split) for r in records}
                handle.write("average ranks over (dataset, rate, split) cells\n")
                for method, rank in sorted(ranks.items(), key=lambda kv: kv[1]):
                    handle.write(f"{method:>12s}  {rank:.3f}\n")
                if 2 <= k <= 20:
                    cd = nemenyi_cd(k, len(pairs), alpha)
                    handle.write(
                        f"critical distance (k={k}, N={len(pairs)}, alpha={alpha}): {cd:.3f}\n"
                    )
        else:
            handle.write("no records\n")
    written.append(ranks_path)
    return written
