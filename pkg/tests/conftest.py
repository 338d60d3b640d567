import sys
from pathlib import Path

import numpy as np
import pytest

from saver_cascade.ingest import PairedDataset

sys.path.insert(0, str(Path(__file__).parent))

# (sample_id, conf_s, correct_s, correct_b)
REFERENCE_ROWS = [
    ("s1", 0.9, True, True),
    ("s2", 0.8, True, False),
    ("s3", 0.6, False, True),
    ("s4", 0.5, True, True),
    ("s5", 0.3, False, True),
]


@pytest.fixture
def reference():
    ids, conf, cs, cb = zip(*REFERENCE_ROWS)
    return PairedDataset.from_arrays(conf, cs, cb, ids)


def random_dataset(rng, m=None, levels=None):
    """Random paired dataset. ``levels`` quantizes confidences to force ties."""
    if m is None:
        m = int(rng.integers(1, 65))
    if levels:
        conf = rng.integers(0, levels + 1, m) / levels
    else:
        conf = rng.random(m)
    cs = rng.random(m) < rng.random()
    cb = rng.random(m) < rng.random()
    return PairedDataset.from_arrays(conf, cs, cb)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def write_log(path, model_id, split, rows, header=True):
    """rows: (sample_id, confidence, correct)."""
    import json

    with open(path, "w") as fh:
        if header:
            fh.write(json.dumps({"model_id": model_id, "split": split}) + "\n")
        for sid, conf, ok in rows:
            fh.write(json.dumps({"sample_id": sid, "confidence": conf, "correct": ok}) + "\n")
    return path


def write_profile(path, model_id, cost, accuracy=None):
    import json

    obj = {"model_id": model_id, "cost_gflops": cost}
    if accuracy is not None:
        obj["accuracy"] = accuracy
    Path(path).write_text(json.dumps(obj))
    return path


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
        terminalreporter.write_line(line)
