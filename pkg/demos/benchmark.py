"""Time naive, factored and selected relation kernels at the full-size grid.

Run: python demos/benchmark.py
"""
from afrn.bench import bench_grid

for row in bench_grid([9, 81], [16], [64], [27, 442], repeats=3):
    print(f"N={row['N']:3d} K={row['K']:4d}  naive {row['naive_s'] * 1e3:8.3f} ms  "
          f"full {row['full_s'] * 1e3:7.3f} ms  selected {row['selected_s'] * 1e3:7.3f} ms  "
          f"MAC ratio {row['mac_ratio']:6.2f}")
