"""
Base model against the adapted model
====================================

Trains both variants on one small synthetic world and compares sliced
ranking quality and the gap between displayed and never-displayed item
features.  Runs in under a minute on one core.
"""

import tempfile
from pathlib import Path

from esam.cli import main
from esam.experiment import load_config, run_diagnose, run_train

root = Path(tempfile.mkdtemp(prefix="esam-demo-"))
configs = Path(__file__).resolve().parents[1] / "configs"

# A world a quarter of the acceptance size keeps the demo short.
main(["synth", "--out", str(root / "world"), "--queries", "500", "--items", "1500", "--seed", "7"])

results = {}
for name in ("base", "esam"):
    cfg = load_config(configs / f"synth_{name}.json")
    cfg.update(data_path=str(root / "world"), seed=7, split_seed=7)
    _, metrics, out = run_train(cfg, out_dir=root / name, echo=lambda line: None)
    results[name] = (metrics, out)
    print(f"== {name}\n{metrics.report()}")

# Source-target feature distance relative to source-source distance.  A
# large ratio means never-displayed items sit in a different region of
# feature space than the items the model was trained on.
for name, (_, out) in results.items():
    paths = run_diagnose(out / "checkpoint.npz", out / "diagnostics", echo=lambda line: None)
    ss, tt, st = (float(x) for x in paths["domain_distance"].read_text().splitlines()[1].split("\t"))
    print(f"{name}: source-target / source-source = {st / ss:.1f}")

# The adapted model shrinks the ratio on the full-size acceptance worlds.
# On a world this small the ratio and the long-tail ordering can go either
# way; compare with the five-seed results in test_output.txt.
print("run directories under", root)
