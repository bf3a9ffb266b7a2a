"""Long-format CSV reading and writing for datasets.

Header: ``subject,trial,<payload columns>``; one row per trial, UTF-8, dot
decimal separator.
"""

from __future__ import annotations

import csv
from collections import OrderedDict

import numpy as np

from .base import Dataset, HierarchicalModel, SubjectData

_STRING_COLUMNS = {"condition"}


def write_dataset(dataset: Dataset, path, model: HierarchicalModel) -> None:
    cols = list(model.payload_columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "trial", *cols])
        for subj in dataset.subjects:
            for t in range(subj.n_trials):
                row = [subj.subject_id, t + 1]
                for c in cols:
                    val = subj.trials[c][t]
                    if c in _STRING_COLUMNS:
                        row.append(str(val))
                    elif c in ("response", "choice"):
                        row.append(int(val))
                    else:
                        row.append(repr(float(val)))
                w.writerow(row)


def read_dataset(path, model: HierarchicalModel) -> Dataset:
    """Read a long-format CSV, validating the payload columns for ``model``."""
    cols = list(model.payload_columns)
    groups: "OrderedDict[str, dict[str, list]]" = OrderedDict()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in ["subject", "trial", *cols] if c not in header]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for line, row in enumerate(reader, start=2):
            g = groups.setdefault(row["subject"], {c: [] for c in cols})
            for c in cols:
                raw = row[c]
                if c in _STRING_COLUMNS:
                    g[c].append(raw)
                else:
                    try:
                        g[c].append(float(raw))
                    except ValueError as exc:
                        raise ValueError(f"{path}:{line}: column {c!r} is not numeric") from exc
    subjects = []
    for sid, g in groups.items():
        trials = {
            c: (np.array(v, dtype=object) if c in _STRING_COLUMNS else np.array(v, dtype=float))
            for c, v in g.items()
        }
        subjects.append(SubjectData(sid, trials))
    ds = Dataset(subjects)
    model.prepare(ds)  # validates payload values
    return ds
