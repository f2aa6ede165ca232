"""transferlab: a desk-scale lab for weight transfer experiments.

Small conv-batchnorm-relu networks, deterministic initialization schemes
(including donor-derived and synthetic Gabor variants), layer-wise weight
transfusion and freezing, CCA-based representation comparison, and a
reproducible experiment harness, all on plain numpy.
"""

__version__ = "0.1.0"
