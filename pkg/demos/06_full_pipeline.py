"""
The whole pipeline from one config
==================================

Run every stage on a reduced config and print the metrics. The same run is
available from the shell as ``drivesynth run --config cfg.txt --out DIR``.
"""
from __future__ import annotations

import json
import sys
import tempfile

from drivesynth.pipeline import run_pipeline, validate_config

cfg, warnings = validate_config("""
seed = 7
lidar_azimuths = 180
n_views = 6
train_steps = 100
""")
out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="drivesynth_")
manifest = run_pipeline(cfg, out)
print("artifacts in", out)
for name, paths in manifest["artifacts"].items():
    print(f"  {name:12s} {len(paths)} files")
print(json.dumps(manifest["metrics"], indent=1))
