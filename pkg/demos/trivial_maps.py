"""Fields and certificates for the identity, a dilation and a constant map."""
import numpy as np

from metricbv.certify import certify
from metricbv.numbers import SampledMapping, asymptotic_field
from metricbv.scenarios import field_schedule
from metricbv.space import uniform_grid

sp = uniform_grid([[0, 1], [0, 1]], 0.01)
sch = field_schedule(sp)
maps = {"identity": sp.coords.copy(), "scaling x2": 2 * sp.coords, "constant": np.zeros((sp.n, 2))}
for name, vals in maps.items():
    f = SampledMapping(sp, vals)
    lip = asymptotic_field(f, "Lip", sch).on()
    print(f"{name:12s} Lip in [{lip.min():.3f}, {lip.max():.3f}]")

f = SampledMapping(sp, sp.coords.copy(), injective=True)
for th in ("T4.1-BV", "T4.2-Sobolev-Lip", "T4.3-Sobolev-H", "T4.3-p=Q"):
    print(certify(f, th, h=1.0).summary_text())
    print()
