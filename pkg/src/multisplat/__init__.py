"""Differentiable multimodal Gaussian splatting on the CPU."""
