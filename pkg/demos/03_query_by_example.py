"""Pull drum-like content out of a mixture using nothing but a drum recording.

Needs a trained checkpoint, e.g. from 01_desk_quickstart.py:

    python demos/03_query_by_example.py desk_run/model/best.npz
"""

import sys

import numpy as np

from gmmsep.datagen import drum_band, synth_stem
from gmmsep.dsp import AudioClip
from gmmsep.separator import load_model, query_gaussian, query_separate

model = load_model(sys.argv[1] if len(sys.argv) > 1 else "desk_run/model/best.npz")
sr = model.frontend.sample_rate

# A mixture of all four synthetic instruments, and a separate drum clip that
# the model has never heard.
stems = {c: synth_stem(c, 2.0, sr, seed=4242 + i) for i, c in enumerate(model.classes)}
mix = AudioClip(sum(s.samples for s in stems.values()), sr)
query = synth_stem("drums", 1.0, sr, seed=31337)

# The query's embeddings are summarised by one Gaussian...
g = query_gaussian(query, model)
print("query mean  ", g.means[0].numpy().round(2))
print("query var   ", g.variances[0].numpy().round(3))

# ...and each mixture bin is kept in proportion to its likelihood under it.
out = query_separate(query, mix, model)

lo, hi = drum_band(sr)
f = np.fft.rfftfreq(mix.num_samples, 1 / sr)
band = (f >= lo) & (f <= hi)
P_mix = np.abs(np.fft.rfft(mix.samples[0])) ** 2
P_out = np.abs(np.fft.rfft(out.samples[0])) ** 2
print(f"energy kept inside the drum band  {P_out[band].sum() / P_mix[band].sum():.1%}")
print(f"energy kept outside the drum band {P_out[~band].sum() / P_mix[~band].sum():.1%}")
