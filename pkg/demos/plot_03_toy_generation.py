"""
Training on two tables and sampling from each
=============================================

Two small tables with different columns share one model. After training, each
table's metadata alone steers generation.
"""

# %%
import time

import numpy as np

from mixtable.data import MetaDataset, fit_normalization
from mixtable.embedding import Embedder, HashProvider
from mixtable.metrics import evaluate
from mixtable.model import ModelConfig, context_for, sample_rows
from mixtable.toy import TABLE_A_TRUTH, TABLE_B_TRUTH, table_a, table_b
from mixtable.training import TrainConfig, train

emb = Embedder(HashProvider(32))


def split(table, n=1000):
    full = table(2 * n, seed=0)
    fitted = fit_normalization(full, np.arange(n))
    return fitted.take(np.arange(n)), fitted.take(np.arange(n, 2 * n))


(a_train, a_test), (b_train, b_test) = split(table_a), split(table_b)
print(a_train.id, [f.name for f in a_train.features], "|", b_train.id, [f.name for f in b_train.features])

# %%
# A short run; the acceptance suite trains the same model longer.
config = ModelConfig(d_h=64, d_f=32, n_layers=2, n_heads=4, T_train=200, T_infer=50)
start = time.perf_counter()
result = train(MetaDataset((a_train, b_train)), config, TrainConfig(epochs=20, lr0=2e-3, seed=0), emb)
print(f"trained in {time.perf_counter() - start:.0f}s")
for row in result.curve[::5]:
    print(f"epoch {row['epoch']:2d}  loss {row['train_loss']:.4f}  lr {row['lr']:.2e}")

# %%
# Compare generated marginals with the generating process.
for tr, te, truth in ((a_train, a_test, TABLE_A_TRUTH), (b_train, b_test, TABLE_B_TRUTH)):
    synth = sample_rows(result.model, context_for(tr, emb), 1000, seed=1).denormalized()
    num, cat = tr.features
    mu, sd = truth[num.name]
    freq = np.bincount(synth.columns[1], minlength=len(cat.categories)) / synth.n_rows
    print(f"{tr.id}: {num.name} mean {synth.columns[0].mean():.2f} (truth {mu:.2f}, sd {sd:.2f})")
    print(f"       {cat.name} freq {np.round(freq, 3)} (truth {truth[cat.name]})")
    print("      ", evaluate(te.denormalized(), synth, k=5))
