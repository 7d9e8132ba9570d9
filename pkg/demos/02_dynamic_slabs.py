"""A time-periodic environment: two slabs that alternate forever.

Here nothing is explicit.  The harmonic coordinate solves a backward
equation in time; we check the PDE residual, compare the variance formula
with Monte Carlo and with the quadratic variation of Phi(t, X_t), and
look at the martingale increments.
"""
import numpy as np

from dynrcm.corrector import pde_residual, solve, variance_formula
from dynrcm.env import periodic_static_field, slab_field
from dynrcm.stats import estimate_sigma2, martingale_residual, qv_match, sample_ensemble

# slab 1 lasts 1.0, slab 2 lasts 0.5; short patterns are tiled to L = 8
field = slab_field([1.0, 0.5], [[1.0, 2.0, 3.0, 0.5], [2.0, 0.7]], L=8)
starts, values = field.slabs()
print("slab starts:", starts, " period:", field.period)
print(values)

table = solve(field)
formula = variance_formula(table)
print("PDE residual: %.2e" % pde_residual(table))
print("sigma^2 formula: %.5f" % formula)

times = [float(t) for t in range(1, 21)] + [2000.0]
ens = sample_ensemble(field, times, 20000, seed=7)
s2, se = estimate_sigma2(ens, 2000.0)
emp, _, ratio = qv_match(ens, table, 2000.0)
print("Var(X_t)/t      : %.4f +- %.4f" % (s2, se))
print("E[(dM)^2]/t     : %.4f  (ratio to formula %.4f)" % (emp, ratio))

# increments of M_t = Phi(t, X_t) average to zero; the position itself need not
for lag, mean, err in martingale_residual(ens, table, [1.0, 5.0]):
    print("lag %4.1f: mean increment %+.5f  (z = %+.2f)" % (lag, mean, mean / err))

# a wrong slope breaks the martingale property wherever the position has a
# drift; on a two-phase ring that happens at the interface where walkers start
two_phase = periodic_static_field([1.0] * 16 + [4.0] * 16)
ens = sample_ensemble(two_phase, times[:20], 20000, seed=8)
bad = solve(two_phase).with_slope(1.1)
for lag, mean, err in martingale_residual(ens, bad, [1.0], window_starts=np.arange(5.0)):
    print("two-phase ring, slope 1.1, lag %.1f: z = %+.1f" % (lag, mean / err))
