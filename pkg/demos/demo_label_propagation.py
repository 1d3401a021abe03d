"""
Pseudo-labels by graph diffusion
================================

A few labeled embeddings spread their species over a k-nearest-neighbor
cosine graph. Every unlabeled embedding gets the best-scoring species and a
certainty between 0 (scores spread evenly) and 1 (one species takes all).
"""

import numpy as np

from canopy_miner.evaluation import classification_metrics, render_report
from canopy_miner.propagation import EmbeddingTable, PropagationConfig, propagate

rng = np.random.default_rng(1)
species = ["pinus_pinaster", "quercus_ilex", "eucalyptus_globulus"]
centers = rng.normal(size=(3, 16)) * 2

ids, vectors, labels, truth = [], [], [], []
for i in range(300):
    k = i % 3
    ids.append(f"d{i:06d}")
    vectors.append(centers[k] + rng.normal(0, 2.5, 16))
    truth.append(species[k])
    labels.append(species[k] if i < 30 else None)  # 10% labeled

table = EmbeddingTable(ids, np.array(vectors), labels)
pseudo = propagate(table, PropagationConfig(k=10, alpha=0.99))

unlabeled = [i for i, l in zip(ids, labels) if l is None]
pred = [pseudo.labels[i][0] for i in unlabeled]
ref = [t for t, l in zip(truth, labels) if l is None]
print(render_report(classification_metrics(pred, ref), label="pseudo-labels"), end="")

certainty = np.array([pseudo.labels[i][1] for i in unlabeled])
print(f"certainty: mean {certainty.mean():.3f}, min {certainty.min():.3f}")
print("class weights:", {k: round(v, 3) for k, v in pseudo.class_weights.items()})
