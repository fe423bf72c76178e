"""Rough paths and rough differential equations on embedded manifolds."""
from .errors import (
    ConditioningError,
    ConfigError,
    DomainError,
    ExplosionError,
    MembershipError,
    NumericError,
    OffManifoldError,
    RoughManifoldError,
    UsageError,
)
from .tensor import GridRoughPath, T2Element, rough_distance, signature_lift
from .manifolds import EmbeddedManifold, frame_bundle, manifold_from_key, sphere, special_orthogonal
from .constrained import ManifoldRoughPath, membership_defect, project_to_manifold, solve_constrained_rde
from .development import FramePath, holonomy, horizontality_defect, parallel_transport, roll, unroll

__version__ = "0.1.0"

__all__ = [
    "ConditioningError",
    "ConfigError",
    "DomainError",
    "EmbeddedManifold",
    "ExplosionError",
    "FramePath",
    "GridRoughPath",
    "ManifoldRoughPath",
    "MembershipError",
    "NumericError",
    "OffManifoldError",
    "RoughManifoldError",
    "T2Element",
    "UsageError",
    "frame_bundle",
    "holonomy",
    "horizontality_defect",
    "manifold_from_key",
    "membership_defect",
    "parallel_transport",
    "project_to_manifold",
    "rough_distance",
    "roll",
    "signature_lift",
    "solve_constrained_rde",
    "special_orthogonal",
    "sphere",
    "unroll",
]
