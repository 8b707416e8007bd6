"""SparseCraft: desk-scale SDF + radiance reconstruction from sparse views.

Learns a signed-distance field and radiance field from a few posed
images via volumetric rendering, regularized by noisy multi-view-stereo
cues through Taylor-expansion linearization losses and progressive hash
encoding.  Verified against analytic-scene oracles.
"""

__version__ = "0.1.0"
