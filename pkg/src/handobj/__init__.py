"""Hand-object pose estimation core: geometry, MANO-lite hand model, contextual
reasoning attention, object pose decoding, pseudo-label filtering and metrics."""

__version__ = "0.1.0"
