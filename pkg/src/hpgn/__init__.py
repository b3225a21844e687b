"""Spatial-graph pyramid network for re-identification.

Library surface: grid graphs (:mod:`hpgn.gridgraph`), the reverse-mode tensor
engine (:mod:`hpgn.autodiff`), composite layers (:mod:`hpgn.layers`), model
assembly (:mod:`hpgn.model`), losses, training, evaluation protocols, and the
synthetic data generator.  The ``hpgn`` console command drives the full
workflow.
"""

__version__ = "0.1.0"
