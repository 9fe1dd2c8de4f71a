"""Tri-plane hybrid explicit-implicit neural fields with a differentiable volume renderer."""

from .decoder import FieldDecoder, decode, decode_backward, fourier_encode
from .fields import TriPlane, VoxelGrid, param_count, triplane_query, triplane_query_backward, voxel_query
from .model import NeuralField, build_field
from .renderer import Camera, RenderConfig, composite, composite_backward, generate_rays, render_image
from .tape import GradientTape

__all__ = [
    "Camera", "FieldDecoder", "GradientTape", "NeuralField", "RenderConfig", "TriPlane", "VoxelGrid",
    "build_field", "composite", "composite_backward", "decode", "decode_backward", "fourier_encode",
    "generate_rays", "param_count", "render_image", "triplane_query", "triplane_query_backward", "voxel_query",
]

__version__ = "0.1.0"
