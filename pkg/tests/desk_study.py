"""Desk-scale study used by the acceptance suite, cached on disk.

The cache key hashes the study configuration together with the sources of
the modules the study uses, so a change there forces a fresh run.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import pandas as pd

import itevalid
from itevalid.simulation import PRESETS, SimulationResult, run_study

CACHE_DIR = Path(os.environ.get("ITEVALID_CACHE", Path(__file__).resolve().parent.parent / ".acceptance_cache"))

# modules the study result depends on
STUDY_MODULES = (
    "__init__.py",
    "calibration.py",
    "concordance.py",
    "data.py",
    "glm.py",
    "matching.py",
    "resampling.py",
    "simulation.py",
)

# the bootstrap is only read at n=500, so it is skipped at the other sizes
DESK = dataclasses.replace(PRESETS["paper-desk"], bootstrap_sizes=(500,))


def cache_key(config) -> str:
    h = hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode())
    src = Path(itevalid.__file__).parent
    for f in sorted(src / m for m in STUDY_MODULES):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def load_or_run(config=DESK, verbose=False) -> SimulationResult:
    path = CACHE_DIR / f"study_{cache_key(config)}.csv.gz"
    if path.exists():
        return SimulationResult(config, pd.read_csv(path))
    t0 = time.time()

    def progress(k, total):
        if verbose and (k % 10 == 0 or k == total):
            print(f"{k}/{total} cells, {time.time() - t0:.0f}s", file=sys.stderr, flush=True)

    res = run_study(config, progress=progress)
    if res.failures:
        print(f"{len(res.failures)} failed runs: {res.failures}", file=sys.stderr)
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    res.records.to_csv(tmp, index=False, compression="gzip")
    tmp.replace(path)
    return res


if __name__ == "__main__":
    load_or_run(verbose=True)
