"""Train the four covariance variants and the BLSTM mask baseline, then tabulate SDR.

Takes roughly 7 minutes on one CPU core. Pass an output directory as the
first argument (default ./ablation).
"""

import sys
from pathlib import Path

from gmmsep.datagen import generate_manifest, synthetic_bank
from gmmsep.evaluation import ablation_report
from gmmsep.trainer import desk_config, fit, prepare_examples

out = Path(sys.argv[1] if len(sys.argv) > 1 else "ablation")

banks = {s: synthetic_bank(out / "stems", s, n, 4.0, 16000, seed=0)
         for s, n in (("train", 8), ("val", 4), ("test", 4))}
train = generate_manifest(banks["train"], 200, 1.0, 1, 16000, partial_prob=0.3)
val = generate_manifest(banks["val"], 20, 1.0, 2, 16000)
test = generate_manifest(banks["test"], 20, 1.0, 3, 16000)

fe = desk_config().frontend()
train_x, val_x = prepare_examples(train, fe), prepare_examples(val, fe)   # featurise once

checkpoints = []
for name in ("baseline", "diag", "diag-tied", "sphr", "sphr-tied"):
    cfg = desk_config(baseline=name == "baseline",
                      covariance="sphr-tied" if name == "baseline" else name)
    print("training", name)
    checkpoints.append(fit(None, None, cfg, out / name, train_data=train_x, val_data=val_x))

ablation_report(checkpoints, test, out / "table.csv", out / "table.txt")
print((out / "table.txt").read_text())
