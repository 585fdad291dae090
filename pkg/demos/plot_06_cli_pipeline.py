"""
The command-line pipeline
=========================

ingest, cache-embeddings, train, generate and evaluate, run in a temporary
directory through the same entry point as the ``mixtable`` command.
"""

# %%
import json
import tempfile
from pathlib import Path

from mixtable.cli import main
from mixtable.data import write_bundle
from mixtable.toy import table_b

work = Path(tempfile.mkdtemp())
write_bundle(table_b(1500, seed=3), work / "raw")
main(["ingest", "--schema", str(work / "raw/schema.json"), "--csv", str(work / "raw/data.csv"), "--out", str(work / "ds"), "--seed", "0"])

# %%
config = {"d_f": 32, "d_h": 64, "n_layers": 2, "n_heads": 4, "T_train": 200, "T_infer": 50, "epochs": 15, "lr0": 2e-3}
(work / "run.json").write_text(json.dumps(config))
main(["cache-embeddings", "--data", str(work / "ds/train"), "--cache", str(work / "emb.bin"), "--d-f", "32"])
main(["train", "--config", str(work / "run.json"), "--data", str(work / "ds/train"), "--val", str(work / "ds/val"), "--cache", str(work / "emb.bin"), "--out", str(work / "run")])

# %%
main(["generate", "--checkpoint", str(work / "run/checkpoint.ltbl"), "--schema", str(work / "ds/train/schema.json"), "--n", "150", "--seed", "1", "--out", str(work / "gen.csv")])
print((work / "gen.csv").read_text().splitlines()[:4])
main(["evaluate", "--real", str(work / "ds/test/data.csv"), "--synth", str(work / "gen.csv"), "--k", "5", "--label", "colour"])
print("outputs in", work)
