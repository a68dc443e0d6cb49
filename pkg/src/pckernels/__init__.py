"""Kernels between attributed point-cloud graphs.

The package computes positive-definite tree-walk kernels between graphs
whose vertices carry positions and attribute vectors.  Position similarity
is measured by Bhattacharyya kernels between kernel (covariance) matrices,
factorized over decomposable graphical models so that the sum over an
exponential number of tree-walks collapses to a polynomial dynamic
program.  A brute-force enumeration oracle provides the reference
semantics, and a small SVM stack supports end-to-end handwritten
character classification.
"""

from .graphs import PointCloudGraph, build_neighborhood_graph, load_graph, save_graph
from .covkernels import (
    DecomposableModel,
    KernelScaleParams,
    NotPositiveDefiniteError,
    attribute_kernel,
    bhattacharyya,
    conditional_covariance,
    kernel_b0_model,
    kernel_b_conditional,
    kernel_b_model,
    logdet_projection,
    logdet_projection_rooted,
    position_kernel_matrix,
    project_onto_model,
)
from .treewalk import (
    SubtreePattern,
    TreeStructure,
    WalkParams,
    build_augmented_graph,
    build_model_for_tree,
    build_patterns,
    enumerate_labellings,
    enumerate_tree_structures,
    penalization,
    tree_equivalent,
)
from .engine import (
    GramMatrix,
    KernelConfig,
    brute_force_kernel,
    dp_kernel,
    dp_restricted_kernel,
    gram_matrix,
)

__version__ = "0.1.0"
