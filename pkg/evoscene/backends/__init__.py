from evoscene.backends.base import (
    Backends,
    CompletionRequest,
    CompletionResponse,
    DepthEstimate,
    DepthEstimator,
    ImageCrop,
    SceneCompleter,
    SynthesisRequest,
    SynthesisResponse,
    ViewSynthesizer,
)

__all__ = [
    "Backends",
    "CompletionRequest",
    "CompletionResponse",
    "DepthEstimate",
    "DepthEstimator",
    "ImageCrop",
    "SceneCompleter",
    "SynthesisRequest",
    "SynthesisResponse",
    "ViewSynthesizer",
]
