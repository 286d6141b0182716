"""
Datasets, checkpoints and the command line
==========================================

IDX files are read directly, runs are checkpointed in a small binary format,
and the kevo command drives whole experiments from a YAML config.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from kevo import graph as G
from kevo.checkpoint import load_checkpoint, save_checkpoint
from kevo.cli import main
from kevo.data import load_idx_pair, write_idx
from kevo.splitting import kels_split

work = Path(tempfile.mkdtemp())

# IDX pair: 10 images of 28x28 plus labels
write_idx(work / "images.idx", np.random.default_rng(0).integers(0, 256, (10, 28, 28), dtype=np.uint8))
write_idx(work / "labels.idx", np.arange(10, dtype=np.uint8) % 2)
digits = load_idx_pair(work / "images.idx", work / "labels.idx")
print("IDX samples:", digits.x.shape, "labels:", digits.y)

# checkpoint round trip
net = G.build_architecture("toy-resnet", 3, (2, 8, 8))
params = G.init_params(net, seed=0)
save_checkpoint(work / "demo.kevo", params, {"current": kels_split(net, 0.5)}, {"generation": 1})
back = load_checkpoint(work / "demo.kevo")
print("bitwise equal:", all(back.params[k].tobytes() == v.tobytes() for k, v in params.items()))

# a full run through the CLI (same as `kevo evolve --config ...` in a shell)
config = Path(__file__).with_name("desk.yaml")
out = work / "run"
main(["evolve", "--config", str(config), "--out", str(out), "--override", "train.generations=2"])
main(["extract", "--config", str(config), "--out", str(out)])
main(["analyze", "--config", str(config), "--out", str(out)])
print(sorted(p.name for p in out.iterdir()))
print(json.dumps(load_checkpoint(out / "generation-002.kevo").meta["logs"][-1]["dense_metric"]))
