"""Leveled approximate homomorphic arithmetic with packed slots."""

from .context import CkksCiphertext, CkksContext, setup
from .params import CkksParams
from .serial import dump_vector, load_vector

__all__ = [
    "CkksCiphertext",
    "CkksContext",
    "CkksParams",
    "setup",
    "dump_vector",
    "load_vector",
]
