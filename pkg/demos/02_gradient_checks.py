"""Finite-difference verification of every differentiable path.

Each report compares the tape gradient of a random weighted-sum loss
against central differences at f64. The suite covers both attention
score functions, masked rows included, and an end-to-end encoder pass.
"""

import time

from slimformer import verify

start = time.perf_counter()
reports = verify.run_grad_check_suite(ops="all")
elapsed = time.perf_counter() - start

for report in reports:
    print(report)

worst = max(r.max_rel_err for r in reports)
passed = sum(r.passed for r in reports)
print(f"\n{passed}/{len(reports)} checks passed, "
      f"worst relative error {worst:.2e}, {elapsed:.1f}s")
