from .interaction import InteractionBlock, TokenEmbed, global_context
from .segnet import FeatureMap, HierarchicalEncoder, MlpDecoder, SegNet, SemanticTaps
from .fusion import DilatedResidualDenseBlock, DrdbExtractor, FuseDecoder, FusionSystem

__all__ = [
    "DilatedResidualDenseBlock",
    "DrdbExtractor",
    "FeatureMap",
    "FuseDecoder",
    "FusionSystem",
    "HierarchicalEncoder",
    "InteractionBlock",
    "MlpDecoder",
    "SegNet",
    "SemanticTaps",
    "TokenEmbed",
    "global_context",
]
