"""Run the finite-difference gradient suite, then show it catching a sign flip.

Run: python demos/gradient_check.py
"""
from afrn.gradcheck import run_suite

print("clean backward passes:")
for rep in run_suite():
    print(" ", rep.line())

print("\nwith the softmax gradient sign flipped:")
failed = [rep for rep in run_suite(fault="softmax_flat") if not rep.passed]
for rep in failed:
    print(" ", rep.line())
