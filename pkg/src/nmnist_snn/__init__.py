"""Unsupervised STDP spiking network for N-MNIST event recordings.

Modules: ``aer`` (binary event codec and dataset index), ``preprocess``
(saccade slicing, collapsed frames, PSTH), ``network`` (LIF winner-take-all
simulator and checkpoints), ``plasticity`` (trace, fixed-post-time and
PSTH-derived STDP), ``trainer`` (training, labels, evaluation, ensembles),
``dse`` (grid search) and ``cli``.
"""

__version__ = "0.1.0"
