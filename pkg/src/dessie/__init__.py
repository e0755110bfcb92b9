"""Disentangled 3D quadruped mesh recovery trained on synthetic renders.

Submodules: body_model, camera, renderer, synthpipe, network, losses,
training, evaluation and the ``dessie`` command line in cli.
"""

__version__ = "0.1.0"
