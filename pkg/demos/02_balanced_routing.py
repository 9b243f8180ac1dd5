"""Balanced versus greedy token routing on a small affinity matrix.

Greedy argmax routing piles tokens on whichever expert scores highest.
Balanced routing solves a capacitated assignment so every expert gets
floor or ceil of tokens/experts, while keeping the total score as high as possible.

Run: python3 demos/02_balanced_routing.py
"""
import numpy as np

from moeheat.routing import assignment_score, balanced_assign, brute_force_assign, greedy_assign

rng = np.random.default_rng(0)
scores = rng.normal(size=(8, 4))
scores[:, 2] += 1.0  # expert 2 looks attractive to everyone

greedy = greedy_assign(scores)
balanced = balanced_assign(scores)
print("affinity matrix (tokens x experts):")
print(np.array2string(scores, precision=2, suppress_small=True))
print()
print("greedy   experts:", greedy.expert_of.tolist(), "loads:", greedy.loads.tolist(),
      f"score {assignment_score(scores, greedy.expert_of):.3f}")
print("balanced experts:", balanced.expert_of.tolist(), "loads:", balanced.loads.tolist(),
      f"score {assignment_score(scores, balanced.expert_of):.3f}")

# Exhaustive search over every capacity-respecting assignment agrees.
oracle = brute_force_assign(scores)
print("exhaustive search agrees:", oracle.expert_of.tolist() == balanced.expert_of.tolist())
print()

# When every score is equal, all balanced assignments tie. The router then
# returns the lexicographically smallest one, so results never depend on solver internals.
flat = balanced_assign(np.zeros((6, 4)))
print("all-zero scores, 6 tokens on 4 experts ->", flat.expert_of.tolist(), "loads", flat.loads.tolist())

# Larger problems go through the linear assignment solver.
big = rng.normal(size=(256, 8))
print("256 tokens on 8 experts, balanced loads:", balanced_assign(big).loads.tolist())
print("                          greedy loads:  ", greedy_assign(big + np.arange(8) * 0.3).loads.tolist(),
      "(with a mild per-expert bias)")
