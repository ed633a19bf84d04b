"""
A short MovieLens-100K run through the command-line front end
=============================================================

Writes the config, per-round metrics, a summary and a checkpoint under
``runs/demo``, re-scores the checkpoint with ``eval`` and runs the client
K-Means diagnostic on it. Pass the path of ``u.data`` as the first argument.
Ten rounds take a few minutes on one core; the full reproduction uses 100.
"""
import sys
from pathlib import Path

from cofedrec.cli import main

data = sys.argv[1] if len(sys.argv) > 1 else "/root/data/ml-100k/u.data"
out = Path("runs/demo")
common = ["--data-path", data, "--data-format", "dat", "--output-dir", str(out)]

main(["prepare", *common])
main(["run", *common, "--rounds", "10", "--scl-max-items", "256"])

ckpt = next(out.glob("checkpoint-*"))
main(["eval", "--checkpoint", str(ckpt)])
for k in (2, 10):
    main(["diagnose", "--checkpoint", str(ckpt), "--k", str(k)])
