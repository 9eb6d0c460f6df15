"""CT-volume COVID-19 diagnosis with a modified Xception slice classifier.

The package is organized bottom-up:

- ``tensor_core``: numpy CNN kernels plus forward/backward for the head
- ``xception``: the 36-conv-layer backbone and its parameter registry
- ``weights_io``: the NTC checkpoint format
- ``ingest``: dataset discovery and slice preprocessing
- ``diagnosis`` / ``metrics``: slice labeling, per-volume vote, evaluation
- ``trainer``: head-only training with Adam and LR-on-plateau
- ``cli``: the ``ct-diag`` command line
"""

__version__ = "0.1.0"
