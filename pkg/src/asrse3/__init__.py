"""Augmented-state Q cascades for factored pick-and-place action spaces.

Modules: ``mdp_core`` (factored MDPs, augmentation, exact solvers),
``blockworld`` (grid construction simulator), ``encoding`` (crop and
voxel encodings), ``qmodel`` (cascades, greedy selection, targets),
``losses``, ``expert`` (deconstruction demonstrations), ``training`` and
``cli``.
"""

__version__ = "0.1.0"
