"""Points on spheres and tori, the exponential-map retraction, and W2 between empirical measures."""
# %%
import numpy as np

from kvflows.fields import skew
from kvflows.geometry import FlatTorus, Sphere
from kvflows.measure import CapSampler, EmpiricalMeasure, UniformSampler, sample_iid, wasserstein2

rng = np.random.default_rng(0)
S2 = Sphere(2)
T2 = FlatTorus(2)

# %% (1) manifolds live inside R^N as blocks of unit spheres
print("(1) ambient dims: sphere", S2.ambient_dim, " torus", T2.ambient_dim)
x = S2.project_to_manifold([3.0, 4.0, 0.0])
print("    projection of (3, 4, 0):", x)
v = S2.project_to_tangent(x, [1.0, 1.0, 1.0])
print("    tangent part of (1, 1, 1):", v, " <x, v> =", float(x @ v))

# %% (2) a quarter turn along a great circle
y = S2.retract(np.array([1.0, 0.0, 0.0]), np.array([0.0, np.pi / 2, 0.0]))
print("(2) retract e1 by pi/2 e2 ->", np.round(y, 15))
print("    geodesic distance e1 -> -e1:", float(S2.geodesic_distance([1.0, 0, 0], [-1.0, 0, 0])))

# %% (3) chordal vs geodesic distance on the torus
a, b = T2.sample_uniform(5, rng), T2.sample_uniform(5, rng)
chord = np.linalg.norm(a - b, axis=1)
geo = T2.geodesic_distance(a, b)
print("(3) chord <= geodesic <= (pi/2) chord:")
for c, g in zip(chord, geo):
    print(f"    {c:.4f} <= {g:.4f} <= {np.pi / 2 * c:.4f}")

# %% (4) W2 is exact for small supports and invariant under rotations
mu = sample_iid(CapSampler(S2, (1.0, 0.0, 0.0), 0.5), 40, rng)
nu = sample_iid(UniformSampler(S2), 40, rng)
axis = np.array([0.3, -0.2, 0.9])
K = skew(axis / np.linalg.norm(axis))
R = np.eye(3) + np.sin(1.0) * K + (1 - np.cos(1.0)) * K @ K
rot = lambda p: S2.project_to_manifold(p @ R.T)  # noqa: E731
print("(4) W2(cap, uniform) =", round(wasserstein2(mu, nu), 6),
      " after a common rotation:", round(wasserstein2(mu.pushforward(rot), nu.pushforward(rot)), 6))

# %% (5) empirical measures approach their law as n grows
for n in (25, 100, 400):
    d = [wasserstein2(sample_iid(UniformSampler(S2), n, rng), sample_iid(UniformSampler(S2), n, rng))
         for _ in range(5)]
    print(f"(5) n={n:4d}: median W2 between two samples {np.median(d):.4f}")

delta = EmpiricalMeasure.delta(S2, [0.0, 0.0, 1.0])
print("    a Dirac mass integrates x_3 to", delta.integrate(lambda p: p[:, 2]))
