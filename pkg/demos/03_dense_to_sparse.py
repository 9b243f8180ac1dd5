"""Turning a dense network into a sparse one and watching the experts drift apart.

Run: python3 demos/03_dense_to_sparse.py
"""
import numpy as np

from moeheat import nn
from moeheat.data import Batch

rng = np.random.default_rng(0)
cfg = nn.ModelConfig(vocab=16, dim=8, hidden=16, blocks=4, num_tasks=3, experts=4)
dense = nn.init_dense(cfg, rng)
print("dense model, blocks:", [type(b).__name__ for b in dense.blocks])

sparse = nn.sparsify(dense, num_experts=4, seed=1, gate_scale=0.1)
print("after sparsify:     ", [type(b).__name__ for b in sparse.blocks])
print("expert blocks sit at positions", sparse.moe_layers)

# Every expert starts as an exact copy of the dense feed-forward block it replaced.
blk = sparse.blocks[1]
same = all(np.array_equal(e.w1, dense.blocks[1].w1) for e in blk.experts)
print("experts are bitwise copies of the dense block:", same)
print("gate vectors are new and random, norms:", np.round(np.linalg.norm(blk.gates, axis=1), 3).tolist())
print()

# Each token visits one expert, so each expert's gradient comes from a different subset of tokens.
tasks = rng.integers(0, 3, 16)
batch = Batch(tasks, rng.integers(0, 16, 16), rng.integers(0, 16, 16), tasks)


def spread(model):
    """Largest pairwise distance between expert first-layer weights, per expert block."""
    out = []
    for i in model.moe_layers:
        ws = [e.w1 for e in model.blocks[i].experts]
        out.append(max(np.abs(a - b).max() for a in ws for b in ws))
    return out


for step in range(6):
    loss, grads, fwd = nn.loss_and_grad(sparse, batch)
    if step == 0:
        print("token -> expert in block 1:", fwd.routes[0].expert_of.tolist())
    nn.apply_update(sparse, grads, 0.5)
    print(f"step {step}: loss {loss:.4f}, max expert weight gap per block {np.round(spread(sparse), 5).tolist()}")
