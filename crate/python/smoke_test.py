"""Smoke test for the Python bindings.

Run after `pip install --no-build-isolation ./crates/py`.
"""

import json
import math
import random
import subprocess
import sys
import tempfile
from pathlib import Path

import seed_cl

CONFIG = """
seed = 3
[scenario]
source = "blobs"
[scenario.blobs]
classes = 6
input_dim = 5
spread = 3.0
cov_scale = 1.0
train_per_class = 40
test_per_class = 20
[scenario.split]
kind = "equal"
tasks = 3
[model]
input_dim = 5
trunk_layers = [16]
head_layers = [16]
embed_dim = 4
[training]
experts = 2
epochs = 3
batch_size = 16
lr = 0.01
milestones = []
"""


def check(cond, what):
    if not cond:
        sys.exit(f"FAIL: {what}")
    print(f"ok   {what}")


def main():
    rng = random.Random(0)
    a = [[rng.gauss(0, 1), rng.gauss(0, 2)] for _ in range(200)]
    b = [[rng.gauss(3, 1), rng.gauss(0, 1)] for _ in range(200)]
    ga = seed_cl.fit_gaussian(a)
    gb = seed_cl.fit_gaussian(b, "full", 1e-4)
    check(len(ga.mean) == 2 and len(ga.cov) == 2, "fit_gaussian shapes")
    check(abs(seed_cl.sym_kl(ga, gb) - seed_cl.sym_kl(gb, ga)) < 1e-9, "sym_kl symmetric")
    check(seed_cl.sym_kl(ga, ga) < 1e-12, "sym_kl zero on itself")
    check(abs(seed_cl.overlap([ga, gb]) - seed_cl.sym_kl(ga, gb)) < 1e-9, "overlap of a pair")
    check(math.isfinite(seed_cl.log_likelihood(ga, [0.0, 0.0])), "log_likelihood finite")
    check(seed_cl.fit_gaussian(a, "prototype").cov is None, "prototype has no covariance")
    p = seed_cl.temp_softmax([1.0, 2.0, 3.0], 3.0)
    check(abs(sum(p) - 1.0) < 1e-12 and p[2] > p[0], "temp_softmax")

    report = json.loads(seed_cl.run(CONFIG))
    check(report["tasks"] == 3 and len(report["accuracy_matrix"]) == 3, "run report")
    check(0.0 <= report["avg_inc_accuracy"] <= 1.0, "accuracy in range")

    try:
        seed_cl.run(CONFIG.replace("experts = 2", "experts = 0"))
    except ValueError:
        check(True, "config error raises ValueError")
    else:
        check(False, "config error raises ValueError")

    # The CLI writes the state file that the Ensemble class loads.
    with tempfile.TemporaryDirectory() as tmp:
        cfg = Path(tmp) / "run.toml"
        cfg.write_text(CONFIG)
        cli = Path(__file__).resolve().parent.parent / "target" / "release" / "seed-cl"
        if cli.exists():
            out = Path(tmp) / "out"
            subprocess.run([str(cli), "run", "--config", str(cfg), "--out-dir", str(out)], check=True)
            ens = seed_cl.Ensemble.load(str(out / "state.bin"))
            check(ens.tasks == 3 and ens.experts == 2, "Ensemble metadata")
            x = [0.0] * 5
            check(ens.predict(x) in ens.classes, "Ensemble.predict")
            trace = json.loads(ens.explain(x, task=1))
            check(abs(sum(trace["averaged"]) - 1.0) < 1e-12, "Ensemble.explain")
            check(0.0 <= ens.evaluate([x, x], [0, 1]) <= 1.0, "Ensemble.evaluate")
        else:
            print("skip Ensemble checks: build the CLI with `cargo build --release` first")
    print("smoke test passed")


if __name__ == "__main__":
    main()
