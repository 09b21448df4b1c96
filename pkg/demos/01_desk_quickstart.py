"""Train a small tied-spherical model on synthetic stems and score it.

Runs in a couple of minutes on one CPU core. Everything is written under
./desk_run (override with the first command-line argument).
"""

import sys
import warnings
from pathlib import Path

import torch

from gmmsep.datagen import generate_manifest, render_mixture, synthetic_bank
from gmmsep.evaluation import evaluate_testset, mixture_as_estimate
from gmmsep.separator import load_model, separate
from gmmsep.trainer import desk_config, fit, prepare_examples
from gmmsep.wavio import write_wav

out = Path(sys.argv[1] if len(sys.argv) > 1 else "desk_run")
torch.manual_seed(0)

# Four synthetic instruments, each in its own frequency region:
# vocals ~600-1200 Hz, drums are noise bursts at 3-7 kHz, bass below 300 Hz,
# "other" is a chord around 1.5-2.5 kHz.
banks = {split: synthetic_bank(out / "stems", split, n, 4.0, 16000, seed=0)
         for split, n in (("train", 8), ("val", 4), ("test", 4))}

# 1 s mixtures. A third of the training mixtures keep only some of their
# sources, so the network also sees instruments on their own.
train = generate_manifest(banks["train"], 200, 1.0, seed=1, sample_rate=16000, partial_prob=0.3)
val = generate_manifest(banks["val"], 20, 1.0, seed=2, sample_rate=16000)
test = generate_manifest(banks["test"], 20, 1.0, seed=3, sample_rate=16000)

cfg = desk_config(covariance="sphr-tied")
fe = cfg.frontend()
print(f"training {cfg.covariance} for up to {cfg.max_epochs} epochs ...")
best = fit(None, None, cfg, out / "model",
           train_data=prepare_examples(train, fe), val_data=prepare_examples(val, fe))
model = load_model(best)

gmm = model.gaussian_params().detach()
print(f"learned variance {gmm.variances.item():.3f}  priors {gmm.priors.numpy().round(3)}")

# Mean SDR over the held-out mixtures, against doing nothing at all.
ours = evaluate_testset(test, model).mean()
floor = mixture_as_estimate(test, model.classes).mean()
for c in model.classes:
    print(f"{c:>7}: {ours[c]:6.2f} dB   (mixture as estimate {floor[c]:6.2f} dB)")

# Listen to one of them.
mix, _ = render_mixture(test[0])
write_wav(out / "example_mixture.wav", mix)
for name, clip in separate(mix, model).items():
    write_wav(out / f"example_{name}.wav", clip)
print(f"wrote {out}/example_*.wav")
