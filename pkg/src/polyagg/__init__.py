"""Agglomeration of 2D polygonal meshes by recursive graph bisection."""

from polyagg.errors import (
    GraphError,
    MeshError,
    MeshFormatError,
    ModelFormatError,
    NumericalError,
)
from polyagg.graph import Graph
from polyagg.mesh import PolyMesh, generate_mesh, load_mesh, save_mesh

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "GraphError",
    "MeshError",
    "MeshFormatError",
    "ModelFormatError",
    "NumericalError",
    "PolyMesh",
    "generate_mesh",
    "load_mesh",
    "save_mesh",
]
