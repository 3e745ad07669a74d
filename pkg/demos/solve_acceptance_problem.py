"""Solve the reference doubly reflected problem and print a few diagnostics.

Run with ``python demos/solve_acceptance_problem.py``.
"""

import time

import numpy as np

from rbsdelab.chain import build_chain
from rbsdelab.data import DeterministicTau, acceptance_cost, assemble
from rbsdelab.model import acceptance_model
from rbsdelab.solver import check_invariants, kplus_density_check, paste_tau, solve


def main():
    model = acceptance_model()
    for steps, nodes in ((50, 100), (100, 200), (200, 400)):
        t0 = time.perf_counter()
        chain = build_chain(model, steps, (20.0, 300.0), nodes)
        data = assemble("R2BSDE", acceptance_cost(model), model, chain=chain)
        sol = solve(chain, data)
        print(f"M={steps:4d} nodes={nodes:4d}  Y0={sol.Y0:.6f}  ({time.perf_counter() - t0:.2f} s)")

    diag = check_invariants(sol)
    print("invariants:", {k: diag[k] for k in ("nodes", "max_constraint_violation", "minimality_residual")})
    print("K+ pushes:", int((sol.dKplus > 0).sum()), " K- pushes:", int((sol.dKminus > 0).sum()))
    rep = kplus_density_check(sol, data)
    print("K+ density bound:", rep["status"], "worst margin", rep["worst_margin"])

    pasted = paste_tau(chain, data, DeterministicTau(0.5))
    S = chain.n_states
    print("pasting at t=0.5, max |Y_pasted - Y| on the base layer:",
          float(np.max(np.abs(pasted.Y[:, :S] - sol.Y))))


if __name__ == "__main__":
    main()
