"""Train once per pair budget K and compare against the model without selection.

Run: python demos/k_sweep.py   (about half a minute)
"""
from afrn.training import config_from_dict, k_sweep

# heavy per-sample noise so accuracy is not pinned at 1.0
cfg = config_from_dict({"seed": 1, "data": {"noise": 1.0}}, "toy")
rows = k_sweep(cfg, [3, 9, 27, 81])
print("K    accuracy  threshold")
for r in rows:
    tag = "  (no selection)" if r["reference"] else ""
    print(f"{r['K']:<4d} {r['accuracy']:.3f}     {r['threshold']:.3f}{tag}")
