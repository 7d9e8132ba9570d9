"""Sublinearity of the corrector and the space-time norm toolkit.

The corrector chi = x - Phi is periodic-plus-linear on a finite cell, so
chi / n shrinks as the box grows.  We watch that on Markov-switching
fields, then evaluate a few space-time norms and the integrability
conditions on (p, q).
"""
import io

import numpy as np

from dynrcm import norms
from dynrcm.corrector import sublinearity_profile
from dynrcm.env import EnvironmentModel, Marginal, build_environment, constant_field

model = EnvironmentModel("markov-switching", Marginal("uniform", low=0.5, high=4.0), switch_rate=0.5)

# L grows with n and the time period with n^2, as in diffusive scaling
rows = []
for n in (4, 8, 16):
    field = build_environment(model, 2 * n, float(n * n), seed=1)
    rows += sublinearity_profile(field, [n])
print(" n   max|chi/n|   mean|chi/n|")
for n, linf, l1 in rows:
    print("%2d   %9.5f   %10.5f" % (n, linf, l1))
logn = np.log([r[0] for r in rows])
print("log-log slope of the maximum: %.3f" % np.polyfit(logn, np.log([r[1] for r in rows]), 1)[0])

# space-time norms: a function equal to 1 then 2 on [0, 1) and [1, 3)
box = norms.SpaceTimeBox(0.0, 3.0, -2, 2)
u = lambda t, x: np.full(len(x), 1.0 if t < 1 else 2.0)
for spec in [(1, 1), (2, 2), (2, norms.INF)]:
    print("||u||_%s = %.5f" % (spec, norms.st_norm(u, spec, box, breakpoints=[1.0])))

# a discrete Sobolev check with the delta function at the origin
res = norms.sobolev_check(constant_field(8), lambda t, x: (np.asarray(x) == 0) * 1.0,
                          norms.SpaceTimeBox(0.0, 1.0, -1, 1), 1.0)
print("Sobolev: lhs = %g, rhs = %g, holds = %s" % res)

# where does the one-dimensional moment condition hold?
for p in (2.0, 3.0, 3.5, 4.0):
    print("p = %.1f: condition holds for q > %.3f" % (p, norms.q_threshold(p)))
buf = io.StringIO()
norms.write_condition_grid(norms.condition_grid([1.5, 2.5, 3.5, 4.5, 6.0], [1.0, 2.0, 4.0, 6.0]), buf)
print(buf.getvalue())
