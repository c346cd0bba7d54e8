"""Long-video scene and act segmentation toolkit.

Multimodal bottleneck-fusion models over shot features, EM-based
shot-to-synopsis synchronization, and a distillation pipeline that
transfers synopsis supervision onto shot-level act predictions, plus
a synthetic-movie generator with planted ground truth for end-to-end
verification.
"""

__version__ = "0.1.0"
