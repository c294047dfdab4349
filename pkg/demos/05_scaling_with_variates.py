"""Forward-pass cost as the number of variates grows.

Run with ``python demos/05_scaling_with_variates.py``.
"""
# %% [markdown]
# Each step attends over its N variate tokens with a single query, so the
# cost should grow roughly linearly in N at fixed length and width.

# %%
from misstsm.evaluation import scaling_benchmark

rows = scaling_benchmark([25, 50, 100, 200, 400], T=336, D=16, reps=5)
base_n, base_t = rows[0]
for n, t in rows:
    print(f"N={n:4d}  {t * 1e3:7.2f} ms  x{t / base_t:5.2f} (N ratio x{n / base_n:.0f})")
