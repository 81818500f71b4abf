"""
The command-line pipeline end to end
====================================

Runs the same steps as

    terravario synth --quick --seed 7 --output-dir OUT
    terravario preprocess --config OUT/quick_config.json
    terravario evaluate   --config OUT/quick_config.json --scenario 1
    terravario evaluate   --config OUT/quick_config.json --scenario 2
    terravario variogram  --config OUT/quick_config.json
    terravario report     --config OUT/quick_config.json

and prints the resulting summary table. Takes under a minute.

    python demos/cli_pipeline.py [output_dir]
"""

import sys
from pathlib import Path

from terravario.cli import main

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output") / "pipeline"
cfg = str(out / "quick_config.json")

steps = [["synth", "--quick", "--seed", "7", "--output-dir", str(out)],
         ["preprocess", "--config", cfg],
         ["evaluate", "--config", cfg, "--scenario", "1"],
         ["evaluate", "--config", cfg, "--scenario", "2"],
         ["variogram", "--config", cfg],
         ["report", "--config", cfg]]
for argv in steps:
    code = main(argv + ["-v"])
    if code:
        sys.exit(code)

print((out / "report" / "summary_metrics.md").read_text())
print((out / "report" / "summary_variogram.md").read_text())
print("figures:", *sorted(p.name for p in (out / "report" / "figures").iterdir()), sep="\n  ")
