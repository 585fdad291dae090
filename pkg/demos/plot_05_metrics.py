"""
Fidelity and diversity metrics
==============================

Precision, recall, density and coverage from k-nearest-neighbour balls, plus
train-on-synthetic AUC and a feature-name overlap report.
"""

# %%
import numpy as np

from mixtable.embedding import Embedder, HashProvider
from mixtable.metrics import downstream_auc, feature_overlap, knn_radii, prdc
from mixtable.toy import table_a, table_b, table_c

# Three real points on a line and two synthetic ones near the ends.
real, synth = [[0.0], [1.0], [2.0]], [[0.1], [1.9]]
print("radii", knn_radii(real, 1), "->", prdc(real, synth, k=1))

# %%
# A shifted cloud loses fidelity first; a shrunken one loses coverage.
rng = np.random.default_rng(0)
x = rng.standard_normal((500, 2))
for label, y in (("same", rng.standard_normal((500, 2))), ("shifted", rng.standard_normal((500, 2)) + 1.5), ("shrunk", 0.3 * rng.standard_normal((500, 2)))):
    r = prdc(x, y, k=5)
    print(f"{label:8s} P {r.precision:.2f} R {r.recall:.2f} D {r.density:.2f} C {r.coverage:.2f}")

# %%
# Labels that depend on the features give AUC well above one half.
print("AUC group|score:", round(downstream_auc(table_a(1000, seed=1), table_a(1000, seed=2), "group"), 3))

# %%
# Feature names of C against those of A and B.
rep = feature_overlap([table_a(5), table_b(5)], [table_c(5)], Embedder(HashProvider(256)))
print(rep.target_names, "vs", rep.source_names)
print(np.round(rep.similarity, 2), "dissimilar fraction", rep.dissimilar_fraction)
