from .base import DifferentiableLM, ParamLayout, ParamSegment
from .tabular import TabularLM
from .transformer import TinyTransformer, TransformerConfig

__all__ = [
    "DifferentiableLM",
    "ParamLayout",
    "ParamSegment",
    "TabularLM",
    "TinyTransformer",
    "TransformerConfig",
]
