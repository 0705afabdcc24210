"""crossview: desk-scale dual-view detection with cross-attention RoI fusion.

Subpackages are organized by pipeline stage:

- ``autograd``: tape-based reverse-mode differentiation on float64 arrays
- ``fusion``: bidirectional multi-head co-attention over RoI sets
- ``synthetic``: deterministic paired-view study generator and dataset files
- ``detector``: siamese toy detector (patch encoder, proposals, RoI head, losses)
- ``froc``: IoU / NMS / greedy matching / FROC curves and recall at FPPI
- ``attribution``: gradient-weighted attention relevance and registration metrics
- ``config``: run configuration with JSON round-trip
- ``cli``: one entry point for generation, training, evaluation, and experiments
"""

from .autograd import (
    AdamState,
    Tensor,
    adam_step,
    backward,
    load_checkpoint,
    max_relative_gradient_error,
    no_grad,
    reset_tape,
    save_checkpoint,
    zero_grads,
)
from .fusion import (
    AttentionRecord,
    CrossTransformerConfig,
    RoISet,
    bidirectional_fuse,
    cross_transformer_block,
    multi_head_co_attention,
    positional_encoding_2d,
)
from .froc import FrocCurve, froc_curve, iou, match_detections, nms, recall_at_fppi
from .synthetic import GeneratorConfig, StudyPair, generate_study, mask_masses

__version__ = "0.1.0"
