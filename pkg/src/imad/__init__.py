"""Interpretable static malware detection.

The package combines a hierarchical star-topology transformer over assembly
code with static PE features (printable strings, imports, header numerics)
and an interpretable feed-forward classifier whose predictions decompose
into per-feature impact scores.
"""

from .attention import (
    LayerNorm,
    MultiHeadAttention,
    StarLayer,
    StarPlusEncoder,
    StarPlusLayer,
    positional_encoding,
)
from .detector import Detector
from .features import (
    FeatureSchema,
    FeatureStandardizer,
    HeaderFeaturizer,
    ImportFeaturizer,
    SegmentedFeatureVector,
    StringFeaturizer,
    assemble_feature_vector,
    build_vocabulary,
    extract_printable_strings,
)
from .galaxy import (
    AssemblyFunction,
    BasicBlock,
    ExecutableCode,
    GalaxyConfig,
    GalaxyModel,
    Instruction,
    Vocabulary,
)
from .gradcheck import grad_check, gradcheck_suite
from .iffnn import AttributionReport, IffnnClassifier, IffnnModel, attribute, train_iffnn
from .optim import Adam, AdamState, adam_step
from .pe import PEFormatError, parse_pe, shannon_entropy
from .pipeline import (
    StageOrderError,
    TrainConfig,
    TrainingPipeline,
    feature_importance_analysis,
    train_clone,
    train_mam,
    train_toplevel,
)
from .tensor import Initializer, Tensor, forward_op, grad_enabled, no_grad

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AdamState",
    "AssemblyFunction",
    "AttributionReport",
    "BasicBlock",
    "Detector",
    "ExecutableCode",
    "FeatureSchema",
    "FeatureStandardizer",
    "GalaxyConfig",
    "GalaxyModel",
    "HeaderFeaturizer",
    "IffnnClassifier",
    "IffnnModel",
    "ImportFeaturizer",
    "Initializer",
    "Instruction",
    "LayerNorm",
    "MultiHeadAttention",
    "PEFormatError",
    "SegmentedFeatureVector",
    "StageOrderError",
    "StarLayer",
    "StarPlusEncoder",
    "StarPlusLayer",
    "StringFeaturizer",
    "Tensor",
    "TrainConfig",
    "TrainingPipeline",
    "Vocabulary",
    "adam_step",
    "assemble_feature_vector",
    "attribute",
    "build_vocabulary",
    "extract_printable_strings",
    "feature_importance_analysis",
    "forward_op",
    "grad_check",
    "gradcheck_suite",
    "grad_enabled",
    "no_grad",
    "parse_pe",
    "positional_encoding",
    "shannon_entropy",
    "train_clone",
    "train_iffnn",
    "train_mam",
    "train_toplevel",
]
