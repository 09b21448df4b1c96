"""Export the embedding space of one mixture for plotting elsewhere.

    python demos/04_inspect_embeddings.py desk_run/model/best.npz views/

pca.csv holds one row per audible time-mel bin (two principal components
and the most likely class); dim_<k>.csv holds each raw embedding dimension
as a mel x frame grid; gaussians.json holds the learned class Gaussians.
"""

import sys
from collections import Counter

from gmmsep.datagen import synth_stem
from gmmsep.dsp import AudioClip
from gmmsep.separator import export_embedding_views, load_model

model = load_model(sys.argv[1] if len(sys.argv) > 1 else "desk_run/model/best.npz")
out = sys.argv[2] if len(sys.argv) > 2 else "views"
sr = model.frontend.sample_rate

mix = AudioClip(sum(synth_stem(c, 1.0, sr, seed=7 + i).samples
                    for i, c in enumerate(model.classes)), sr)
views = export_embedding_views(mix, model, out)

share = views.explained[:2].sum() / views.explained.sum()
print(f"{len(views.labels)} audible bins; first two components explain {share:.0%} of the variance")
for c, n in sorted(Counter(views.classes[i] for i in views.labels).items()):
    print(f"  {c:>7}: {n} bins")
print("wrote", out)
