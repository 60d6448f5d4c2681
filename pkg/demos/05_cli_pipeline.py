"""
The command-line experiment pipeline
====================================

Every step of a study is a subcommand: generate replication files, train
across them, rescore checkpoints, run the ablation grid, and export
representations for external plotting.  Each run writes its effective
config next to the outputs so it can be reproduced exactly.

All invocations here call cli.main in-process; the installed `cbre`
entry point accepts the same arguments.
"""

import json
import tempfile
from pathlib import Path

from cbre import cli

root = Path(tempfile.mkdtemp())
data, run, ablation, export = (root / k for k in ("data", "run", "ablation", "exp"))

SMALL = [
    "--set", "model.rep_dim=16", "--set", "model.noise_dim=16",
    "--set", "model.enc_hidden=16", "--set", "model.disc_hidden=16",
    "--set", "model.dec_hidden=16", "--set", "model.pred_hidden=16",
    "--set", "model.enc_depth=2", "--set", "model.disc_depth=2",
    "--set", "model.dec_depth=2", "--set", "model.pred_depth=2",
    "--set", "trainer.max_iterations=400", "--set", "trainer.batch_size=50",
    "--set", "trainer.eval_every=20", "--set", "trainer.patience=10",
]

print("== make-synthetic: two replication files ==")
cli.main(["make-synthetic", "--n", "400", "--p", "6", "--tau-const", "2.0",
          "--seed", "13", "--reps", "0..1", "--out", str(data), "--name", "demo"])

print("\n== train across both replications ==")
cli.main(["train", "--seed", "13", "--reps", "0..1", "--out", str(run),
          "--set", f'dataset.path="{data / "demo"}"',
          "--set", 'dataset.name="demo"'] + SMALL)

report = json.loads((run / "report.json").read_text())
agg = report["regimes"]["out-sample"]["aggregate"]
print(f"\nout-sample aggregate over {len(report['replications'])} replications:")
for metric, stats in agg.items():
    print(f"  {metric}: {stats['mean']:.3f} +- {stats['stderr']:.3f}")

print("\n== evaluate: rescore the saved checkpoints from the snapshot ==")
cli.main(["evaluate", "--out", str(run), "--reps", "0..1"])

print("\n== ablate: full objective vs prediction-only ==")
cli.main(["ablate", "--seed", "13", "--reps", "0..0", "--out", str(ablation),
          "--variants", "total,lp_only",
          "--set", f'dataset.path="{data / "demo"}"',
          "--set", 'dataset.name="demo"'] + SMALL)

print("\n== export-repr: encoded representations for external plotting ==")
cli.main(["export-repr", "--checkpoint", str(run / "rep_0" / "checkpoint.bin"),
          "--data", str(data / "demo" / "rep_0.csv"), "--out", str(export)])
header, first = (export / "repr.csv").read_text().split("\n")[:2]
print(f"repr.csv columns: {header}")

print("\n== gradcheck: the numerical acceptance suite ==")
cli.main(["gradcheck", "--trials", "5", "--seed", "0"])

print(f"\nartifacts under {root}")
for path in sorted(root.rglob("*")):
    if path.is_file():
        print(" ", path.relative_to(root))
