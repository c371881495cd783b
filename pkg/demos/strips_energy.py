"""Reflected strips accumulating at x1 = 0: Lip = H = 1 away from the strip
edges, yet the gradient energies of the BV construction keep growing."""
from metricbv.certify import equi_integrability_probe
from metricbv.scenarios import generate, strips_energies

sc = generate("strips-3.1", 0.002)
cert = strips_energies(sc)
for row in cert.energy_table:
    print(f"j={row['j']:3d}  energy {row['energy']:.2f}")
pr = equi_integrability_probe(sc.space, cert._sequence)
print("concentrated integrals (rows: levels, cols: mass fraction)")
print(pr.table.round(3))
print("non-decaying:", pr.non_decaying)
