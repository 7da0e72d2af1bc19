from .attention import (
    AdditiveAttention,
    AdditiveAttentionParams,
    SelfAttention,
    SelfAttentionParams,
    additive_attention,
    self_attention,
)
from .zoo import (
    FAMILIES,
    LSTUR,
    NAML,
    NRMS,
    ModelSpec,
    NewsFeatures,
    NewsRecModel,
    build_model,
    create_model,
    glorot_limit,
    score,
)
from ..numeric import ParamStore

__all__ = [
    "AdditiveAttention", "AdditiveAttentionParams", "SelfAttention", "SelfAttentionParams",
    "additive_attention", "self_attention", "FAMILIES", "LSTUR", "NAML", "NRMS", "ModelSpec",
    "NewsFeatures", "NewsRecModel", "ParamStore", "build_model", "create_model", "glorot_limit",
    "score",
]
