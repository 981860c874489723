"""Prior-guided neural implicit 3D head reconstruction.

Learns a latent-conditioned SDF auto-decoder prior from raw surface point
clouds, then reconstructs a surface from a few posed, masked images by
differentiable sphere-traced rendering with a two-stage (frozen prior,
then fine-tuned) optimization schedule.
"""

__version__ = "0.1.0"
