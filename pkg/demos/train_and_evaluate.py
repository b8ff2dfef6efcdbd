"""Train the toy model on synthetic identities and score held-out verification pairs.

Run: python demos/train_and_evaluate.py   (a few seconds)
"""
from afrn.metrics import all_pairs, tar_at_far, verification_accuracy
from afrn.training import embed, toy_config, train

cfg = toy_config(seed=0)
res = train(cfg)
print(f"{res.steps} optimizer steps in {res.seconds:.1f}s")
for rec in res.epochs[:: max(1, len(res.epochs) // 6)]:
    print(f"  epoch {rec.epoch:3d}  lr {rec.lr:.1e}  loss {rec.total:.4f}  "
          f"|g| {rec.grad_norm:.3f}")
print(f"balanced held-out accuracy {res.val_accuracy:.3f} at threshold {res.val_threshold:.3f}")

pairs = all_pairs(embed(res.params, res.validation.grids), res.validation.labels)
acc, thr = verification_accuracy(pairs)
print(f"all-pairs accuracy {acc:.3f} over {len(pairs.distances)} pairs (threshold {thr:.3f})")
for p in tar_at_far(pairs, [0.0, 1e-2, 1e-1]):
    print(f"  TAR {p.tar:.3f} at FAR {p.far:.4f} (target {p.target})")
