"""How temperature reshapes a skewed task distribution, and how heating moves it over time.

Run: python3 demos/01_temperature_heating.py
"""
import numpy as np

from moeheat.data import zipf_sizes
from moeheat.schedule import HeatingConfig, kl_to_uniform, rescale, schedule_table

# Twelve tasks whose sizes follow a Zipf law. Task 0 is the largest.
sizes = np.array(zipf_sizes(12, 1.2, 300))
p = sizes / sizes.sum()
print("task sizes:", sizes.tolist())
print()

# Raising T flattens the distribution. T below 1 sharpens it towards the big tasks.
print(f"{'T':>5}  {'p(largest)':>10}  {'p(smallest)':>11}  {'KL to uniform':>13}")
for T in (0.5, 0.8, 1.0, 2.0, 5.0, 100.0):
    q = rescale(p, T)
    print(f"{T:>5}  {q[0]:>10.4f}  {q[-1]:>11.4f}  {kl_to_uniform(q):>13.4f}")
print()

# Heating starts at t_s and grows with the epoch; k sets how fast.
cfg = HeatingConfig(t_s=0.8, k=1.0, C=20)
print("heating schedule, t_s=0.8, k=1, C=20")
for epoch, T in schedule_table(cfg)[::4]:
    q = rescale(p, T)
    share = q[6:].sum()
    print(f"  epoch {epoch:>2}: T={T:.3f}  smallest six tasks get {share:.1%} of the batches")

# A faster conduction rate reaches the same temperature sooner.
for k in (0.5, 1.0, 3.0):
    T_end = schedule_table(HeatingConfig(0.8, k, 20))[-1][1]
    print(f"k={k}: final temperature {T_end:.3f}")
