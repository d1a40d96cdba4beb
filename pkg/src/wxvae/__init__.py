"""Controllable variational-autoencoder weather generator.

Train on daily precipitation cubes, then steer synthesis toward wetter or
drier fields by sampling chosen regions of the latent prior. Everything runs
on numpy: the autodiff engine, 3-D convolutions and the optimizer are local.
"""

__version__ = "0.1.0"
