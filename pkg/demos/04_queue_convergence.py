"""
The queue under the diffusion-optimal policy
============================================

The n-th queue admits arrivals with probability ``1 - u*(Vhat)/sqrt(n)``
where ``u*`` is the diffusion feedback and ``Vhat = sqrt(n) V`` is the scaled
offered waiting time. As ``n`` grows its discounted cost should approach
``Q(0)``. This is a quick version of the convergence study (1000 paths per n).
"""

import math

import numpy as np

from queuecontrol import (
    DcpParams,
    FeedbackFromSolution,
    QueueParams,
    estimate_queue_cost,
    make_exponential_cost,
    shoot_r_star,
    simulate_queue_path,
)

params = DcpParams(sigma=1.0, theta=0.5, alpha=0.5, p=1.0, cost=make_exponential_cost(5.0))
sol = shoot_r_star(params)
fb = FeedbackFromSolution(sol)

###############################################################################
# A single trajectory at ``n = 100``: the event log has every candidate arrival,
# whether it was thinned out, joined, or abandoned.

tr = simulate_queue_path(QueueParams(100, params, fb), T=5.0, seed=0)
print(f"n=100, T=5: {tr.candidates} candidates, {tr.joined} joined, {tr.abandoned} abandoned, "
      f"idle time {tr.idle_time:.3f} (Lhat = {tr.Lhat_T:.3f})")
t = np.linspace(0, 5, 11)
print("Vhat on a grid:", np.round(math.sqrt(100) * tr.V_at(t), 3))

###############################################################################
# Costs for growing n.

print(f"\nQ(0) = {sol.Q[0]:.4f}")
for j, n in enumerate((25, 100, 400)):
    e = estimate_queue_cost(QueueParams(n, params, fb), T=40.0, n_paths=1000, base_seed=j * 10**7)
    print(f"n = {n:5d}: {e.mean:.4f} +- {e.se:.4f}   idle share {e.extras['idle_cost_share']:.2f}   "
          f"E[Lhat(T)^2] = {e.extras['mean_Lhat_T_sq']:.1f}")
