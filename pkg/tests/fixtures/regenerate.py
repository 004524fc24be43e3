"""Rebuild the shipped fixtures.

Run from the repository root with ``python3 tests/fixtures/regenerate.py``.
The golden fit report is produced by the CLI itself; regenerate it only
after a deliberate change to the fitting algorithm.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from robustmm.cli import main, write_long_csv
from robustmm.sim import Design, SimConfig, generate_dataset
from robustmm.structures import build_lme

HERE = Path(__file__).resolve().parent
K = 4
XI = [[1.0, float(t)] for t in range(K)]
STRUCTURE = {"kind": "lme", "Z": [[[1.0]] * K]}


def regenerate() -> None:
    struct = build_lme([np.ones((K, 1))])
    cfg = SimConfig(struct, (2.0, 1.0), (1.0, 0.5), 80, Design("fixed", tuple(map(tuple, XI))), seed=2024)
    write_long_csv(generate_dataset(cfg), str(HERE / "lme_clean.csv"))
    (HERE / "lme_structure.json").write_text(json.dumps(STRUCTURE, indent=2) + "\n")
    variance = {
        "study": "variance",
        "structure": {"kind": "unstructured", "k": 2},
        "beta": [0.0, 0.0],
        "theta": [1.0, 0.3, 2.0],
        "n": 400,
        "replications": 40,
        "seed": 7,
        "fast_s": {"n_sub": 20, "n_best": 2, "n_csteps": 1},
    }
    (HERE / "simconfig_variance.json").write_text(json.dumps(variance, indent=2) + "\n")
    main([
        "fit", str(HERE / "lme_clean.csv"), "--structure", str(HERE / "lme_structure.json"),
        "--c1", "5.0", "--seed", "3", "-o", str(HERE / "lme_golden_report.json"),
    ])


if __name__ == "__main__":
    regenerate()
