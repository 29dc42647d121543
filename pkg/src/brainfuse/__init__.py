"""Multimodal brain-graph fusion pipeline.

Learns joint latent representations of structural connectivity, functional
time-series features, and a per-subject semantic vector through adversarial
training against an estimated latent prior, fuses them with a hypergraph
perceptual network into a per-subject united connectivity matrix, and runs
the downstream group statistics (classification metrics, ROI importance,
abnormal-connection detection).
"""

__version__ = "0.1.0"
