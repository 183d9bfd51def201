"""Landmark-matching Teichmuller maps and quasi-conformal shape classification."""

__version__ = "0.1.0"

from .conformal import ParameterizationError, PlanarEmbedding, disk_conformal, disk_to_rectangle, rectangular_param
from .diffgeo import BeltramiField, CurvatureField, FoldError, beltrami_from_map, compose_beltrami, cotan_laplacian, curvatures
from .estimators import ShapeIndexClassifier, SphericalMarchingSearch, TeichmullerFeaturizer
from .mesh import Dataset, LandmarkSet, MeshError, Subject, TriMesh, load_landmarks, load_manifest, load_mesh, write_mesh
from .shape import (
    ClassificationError,
    ClassificationReport,
    FeatureMatrix,
    ShapeIndexParams,
    build_feature_matrix,
    classify,
    mean_surface,
    run_pipeline,
    shape_index,
    significant_vertices,
    sms_search,
)
from .synth import SynthSpec, gen_dataset, gen_surface, preset
from .teichmuller import QCOptions, SurfaceMap, landmark_tmap, teichmuller_distance

__all__ = [name for name in dir() if not name.startswith("_")]
