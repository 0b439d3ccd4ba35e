"""Reference models used by the tests, demos and bundled configs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import AlignmentKernel, FieldSystem, KernelField, constant_field, rotation_field
from .geometry import EmbeddedManifold, Euclidean, Sphere
from .measure import CapSampler, EmpiricalMeasure, sample_iid
from .rng import derive_stream
from .solver import SolverConfig


@dataclass(frozen=True)
class Model:
    name: str
    mu0: EmpiricalMeasure
    system: FieldSystem
    cfg: SolverConfig

    @property
    def manifold(self) -> EmbeddedManifold:
        return self.system.manifold


def additive_gaussian(dt: float = 1e-2, start: float = 0.0) -> Model:
    """One particle on the line, ``dx = dB``: ``x_t = start + B_t``."""
    M = Euclidean(1)
    system = FieldSystem(M, None, (constant_field(M, [1.0]),))
    return Model("additive-gaussian", EmpiricalMeasure.delta(M, [start]), system, SolverConfig(dt=dt))


def alignment_system(kappa: float = 1.0, noise: float = 0.5, n_noise: int = 2) -> FieldSystem:
    """Alignment drift on the 2-sphere with up to two noise fields.

    ``V_1`` rotates about ``e_3`` (measure-free); ``V_2`` is a scaled copy of
    the alignment field, so the noise itself depends on the measure.
    """
    M = Sphere(2)
    drift = KernelField(M, AlignmentKernel(kappa))
    diff = (rotation_field(M, scale=noise), KernelField(M, AlignmentKernel(noise)))[:n_noise]
    return FieldSystem(M, drift, diff)


def alignment_sphere(particles: int = 100, kappa: float = 1.0, noise: float = 0.5, n_noise: int = 2,
                     spread: float = 0.8, dt: float = 1e-2, seed: int = 0) -> Model:
    """Alignment model with i.i.d. initial particles in a cap around ``e_1``."""
    M = Sphere(2)
    rng = np.random.default_rng(derive_stream(seed, "initial-measure"))
    mu0 = sample_iid(CapSampler(M, (1.0, 0.0, 0.0), spread), particles, rng)
    return Model("alignment-sphere", mu0, alignment_system(kappa, noise, n_noise), SolverConfig(dt=dt))
