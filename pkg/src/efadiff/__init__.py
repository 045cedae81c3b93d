"""Entanglement-free attention on a desk-scale diffusion generator.

Submodules are imported explicitly (``efadiff.tensor``, ``efadiff.diffusion``,
...) rather than re-exported here: the CLI needs to apply ``EFA_NUM_THREADS``
before numpy loads, so this package root stays import-free.
"""

__version__ = "0.1.0"
