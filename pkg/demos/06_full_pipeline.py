# The whole pipeline through the stage runner: generate -> quantize ->
# store -> train -> evaluate, with manifest-based caching. Rerunning this
# script is a no-op unless the config (or a file) changed.

import os
import sys

from foresight import pipeline
from foresight.config import load_config

config_path = os.path.join(os.path.dirname(__file__), "..", "configs", "demo.ini")
cfg = load_config(config_path)
print(f"workdir: {cfg.workdir} | global seed: {cfg.seed}")
print(f"semantic config hash: {cfg.config_hash()[:16]}...")

for outcome in pipeline.run_all(cfg):
    status = "ran" if outcome.ran else "cached"
    print(f"  stage {outcome.name:<16} {status}")

paths = pipeline.Paths(cfg.workdir)
print()
sys.stdout.write(open(paths.report_txt).read())
print(f"machine-readable copy: {paths.report_tsv}")
