"""Differentiable rasterisation and rendering losses."""
from .losses import (
    GradientBuffer,
    LossWeights,
    UnlabeledViewWarning,
    accumulation_target,
    cross_entropy,
    segmentation_distribution,
    ssim,
    total_loss,
)
from .rasterizer import (
    GaussianTensors,
    RenderOutput,
    project,
    project_gaussian,
    rasterize,
    render,
    render_parts,
    render_tensors,
    semantic_probabilities,
)
