"""x2 + a unit jump across x2 = 1/2: the kappa-weighted Lipschitz number stays
bounded while the plain one blows up like 1/r on the jump row."""
from metricbv.numbers import L_f
from metricbv.scenarios import generate, measure

sc = generate("dirac-5.2", 0.005)
print("sup Lip^(kappa,2):", measure(sc, "Lip_kappa2_sup"))
x = sc.space.index_of((0.5, 0.5))
for r in (0.04, 0.02, 0.01, 0.005):
    print(f"r={r:<6g} L_f(x,r)/r = {L_f(sc.mapping, x, r) / r:.2f}")
