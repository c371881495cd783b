"""2-modulus of the left-to-right grid paths in [0, a] x [0, 1]; the continuum value is 1/a."""
from metricbv.modulus import horizontal_family, p_modulus
from metricbv.space import uniform_grid

for a in (1, 2, 4):
    sp = uniform_grid([[0, a], [0, 1]], 0.02)
    res = p_modulus(sp, horizontal_family(sp), 2)
    print(f"a={a}  Mod_2 = {res.value:.4f}  (1/a = {1 / a:.4f})  converged {res.converged}")
