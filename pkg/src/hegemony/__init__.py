"""Homomorphic evaluation of small CNNs and threshold-Paillier federated averaging.

Two independent pipelines share this package:

* an approximate-arithmetic lattice backend (``hegemony.ckks``) plus slot
  kernels (``hegemony.enc_tensor``) that evaluate convolutional models on
  encrypted images (``hegemony.model``), and
* an additively homomorphic Paillier stack with threshold decryption
  (``hegemony.paillier``, ``hegemony.threshold_paillier``) driving a
  federated averaging simulation (``hegemony.fedsim``) over fixed-point
  packed weight vectors (``hegemony.packing``).

``hegemony.cli`` exposes both as subcommands; ``hegemony.acceptance``
bundles the end-to-end checks the test suite and ``hegemony verify`` run.
"""

__version__ = "0.1.0"

from .errors import HegemonyError

__all__ = ["HegemonyError", "__version__"]
