"""facelight: forward and inverse rendering with spherical-harmonics
lighting, low-rank prefiltered specular BRDFs, and signed-distance volume
rendering, plus the Monte-Carlo oracles that validate every closed form.
"""

from . import autodiff, geometry, material, metrics, oracle, optim, render, \
    rng, sceneio, sh, synthetic, validate, vec  # noqa: F401

__version__ = "0.1.0"
