"""
Zero-shot versus few-shot on an unseen table
============================================

A model trained on tables A and B meets table C, whose two numerical columns
move together. Zero-shot generation only sees C's metadata; finetuning also
sees 100 of its rows.
"""

# %%
import numpy as np

from mixtable.data import MetaDataset, fit_normalization
from mixtable.embedding import Embedder, HashProvider
from mixtable.metrics import evaluate
from mixtable.model import ModelConfig, context_for, sample_rows
from mixtable.toy import table_a, table_b, table_c
from mixtable.training import TrainConfig, finetune, train

emb = Embedder(HashProvider(32))
config = ModelConfig(d_h=64, d_f=32, n_layers=2, n_heads=4, T_train=200, T_infer=50)
meta = MetaDataset((fit_normalization(table_a(1000)), fit_normalization(table_b(1000))))
pre = train(meta, config, TrainConfig(epochs=20, lr0=2e-3, seed=0), emb).model

# %%
# Statistics for C are known up front; the rows are not.
c = table_c(2000, seed=7)
fitted = fit_normalization(c, np.arange(1000))
pool, test = fitted.take(np.arange(1000)), fitted.take(np.arange(1000, 2000)).denormalized()
ctx = context_for(pool, emb)

zero = sample_rows(pre, ctx, 1000, seed=0).denormalized()
tuned = finetune(pre, pool, 100, TrainConfig(epochs=50, lr0=2e-3, seed=0), emb).model
few = sample_rows(tuned, ctx, 1000, seed=0).denormalized()

for name, synth in (("zero-shot", zero), ("finetuned", few)):
    corr = np.corrcoef(synth.columns[0], synth.columns[1])[0, 1]
    print(f"{name:10s} corr(temperature, pressure) {corr:+.2f}  ", evaluate(test, synth, k=5))
print("real       corr(temperature, pressure)", round(float(np.corrcoef(test.columns[0], test.columns[1])[0, 1]), 2))
