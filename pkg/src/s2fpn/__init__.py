"""Icosahedral spherical meshes, PDO-based mesh convolutions, and spherical
feature pyramid networks, implemented on numpy/scipy."""

from .icomesh import (IcoMesh, MeshGeometry, build_icosahedron, build_mesh,
                      compute_geometry, export_mesh, ring_neighborhood,
                      subdivide, vertex_count)
from .signal import MeshSignal
from .sphops import (SparseOperator, TangentFrames, apply, assemble_gradients,
                     assemble_laplacian, tangent_frames)
from .resample import (ResampleSpec, assemble_downsample, assemble_upsample,
                       sample_equirectangular)
from .nn import (BatchNorm, Conv1x1, DownBlock, LevelOps, MeshConv, ReLU,
                 ResBlock, receptive_ring)
from .model import Model, ModelSpec, build_level_ops, build_model
from .train import (AdamState, CapsDataset, MetricReport, TrainConfig,
                    adam_step, evaluate, fit, lr_schedule, synth_caps_dataset,
                    weighted_cross_entropy)

__version__ = "0.1.0"

__all__ = [
    "IcoMesh", "MeshGeometry", "build_icosahedron", "build_mesh",
    "compute_geometry", "export_mesh", "ring_neighborhood", "subdivide",
    "vertex_count", "MeshSignal", "SparseOperator", "TangentFrames", "apply",
    "assemble_gradients", "assemble_laplacian", "tangent_frames",
    "ResampleSpec", "assemble_downsample", "assemble_upsample",
    "sample_equirectangular", "BatchNorm", "Conv1x1", "DownBlock", "LevelOps",
    "MeshConv", "ReLU", "ResBlock", "receptive_ring", "Model", "ModelSpec",
    "build_level_ops", "build_model", "AdamState", "CapsDataset",
    "MetricReport", "TrainConfig", "adam_step", "evaluate", "fit",
    "lr_schedule", "synth_caps_dataset", "weighted_cross_entropy",
]
