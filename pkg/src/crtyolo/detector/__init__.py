from .assign import AssignmentResult, task_aligned_assign
from .decode import decode_predictions, nms_detections
from .loss import DetectionLoss, LossWeights, bce_loss, ciou_loss, dfl_loss
from .model import (
    ABLATIONS,
    Backbone,
    CRTYolo,
    DecoupledHead,
    HeadOutput,
    ModelConfig,
    backbone_forward,
    build_variant,
    model_forward,
)
