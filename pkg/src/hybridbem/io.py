"""CSV and JSON writers with provenance.

Every CSV starts with a comment line ``# config_hash=... seed=... version=...``
followed by a header row. JSON is written with sorted keys and no timestamps
so that reruns are byte-identical.
"""

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from . import __version__

# fields that change where or how fast a run happens but not what it computes
VOLATILE_KEYS = ("workers", "out")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def config_hash(raw):
    """SHA-256 prefix of the canonical JSON of a resolved config, minus volatile keys."""
    def strip(d):
        if isinstance(d, dict):
            return {k: strip(v) for k, v in d.items() if k not in VOLATILE_KEYS}
        return d

    blob = json.dumps(_plain(strip(raw)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class Provenance:
    def __init__(self, raw, seed):
        self.hash = config_hash(raw)
        self.seed = int(seed)
        self.version = __version__

    def line(self):
        return f"# config_hash={self.hash} seed={self.seed} version={self.version}"

    def to_dict(self):
        return {"config_hash": self.hash, "seed": self.seed, "version": self.version}


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def write_csv(path, header, rows, provenance):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(provenance.line() + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path):
    """Header and float rows of a CSV written by :func:`write_csv`."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    return header, [[float(v) for v in row] for row in reader]


def write_json(path, payload, provenance=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = dict(_plain(payload))
    if provenance is not None:
        data["provenance"] = provenance.to_dict()
    with open(path, "w") as fh:
        json.dump(data, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def dumps(payload):
    return json.dumps(_plain(payload), sort_keys=True, indent=2)


def trajectory_rows(traj):
    return traj.rows()


def trajectory_header(n):
    return ["k", "t"] + [f"x{j + 1}" for j in range(n)] + ["regime"]


def snapshot_rows(snap):
    return [(int(pid), *map(float, x), int(r)) for pid, x, r in zip(snap.path_ids, snap.x, snap.regimes)]


def snapshot_header(n):
    return ["path_id"] + [f"x{j + 1}" for j in range(n)] + ["regime"]


def chain_rows(path):
    return path.rows()
