"""Witten deformation d_t = d + t·ω∧ and the low spectrum of its Laplacian.

For large t each degree q splits into #Cr_q tiny eigenvalues and a bulk
that climbs linearly in t.  On the Novikov form the tiny ones really decay.
"""

from novikov_lab.manifold import cosine_model
from novikov_lab.spectral import verify_gap

m = cosine_model((0.1, 0.0), 0.3)
rep = verify_gap(m, None, (8.0, 12.0, 16.0, 20.0), 48)
print(rep.to_text())

for q in range(3):
    d = rep.decay[q]
    print(f"q={q}: small count at t=20 is {rep.small_counts[(q, 20.0)]} (expected {rep.expected[q]}), "
          f"decay {d['status']}, bulk slope {rep.growth[q]['slope']:.3f}")
