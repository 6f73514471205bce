"""bpct: biplanar projection images to CT volume reconstruction.

Library + CLI for reconstructing small CT volumes from two orthogonal
parallel-ray projections, with a from-scratch reverse-mode engine so every
gradient in the pipeline is checkable against finite differences.
"""

__version__ = "0.1.0"

from .volcore import CtVolume, DrrImage, PhantomSpec, View, make_phantom, random_spec

__all__ = [
    "CtVolume",
    "DrrImage",
    "PhantomSpec",
    "View",
    "make_phantom",
    "random_spec",
    "__version__",
]
