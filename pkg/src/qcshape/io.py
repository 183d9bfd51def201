"""Plain-text artifact writers (JSON and CSV) with stable formatting."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dumps(obj):
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def write_json(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps(obj))


def write_rows(header, rows, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def write_csv_matrix(values, labels, names, path):
    values = np.asarray(values)
    header = ["subject", "label"] + [f"v{k}" for k in range(values.shape[1])]
    names = names if names and all(names) else [f"subject_{i:03d}" for i in range(len(values))]
    rows = ([n, lab] + list(row) for n, lab, row in zip(names, labels, values))
    write_rows(header, rows, path)


def write_index_csv(indices, path):
    write_rows(["vertex"], ([int(i)] for i in indices), path)


def write_pvalues(p, path):
    write_rows(["vertex", "p_value"], ([k, float(v)] for k, v in enumerate(p)), path)


def load_schema(name):
    """One of the JSON schemas shipped with the package: param, map, report, plotdata."""
    from importlib import resources

    return json.loads(resources.files("qcshape").joinpath("schemas", f"{name}.schema.json").read_text())
