"""Occlusion-robust 3D hand mesh regression at desk scale.

A from-scratch stack: numpy-backed autodiff engine, a small conv backbone
that splits features into hand-primary and occluder-secondary streams, a
gated cross-attention block that injects primary information back into the
occluded regions, a self-enhancement block, a simplified articulated hand
model, a synthetic occluded-hand data generator, and a training/ablation
harness with Procrustes-aligned metrics.
"""

__version__ = "0.1.0"
