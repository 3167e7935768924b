"""Online-adapting interactive segmentation.

A promptable segmentation model is corrected by a user during inference and
adapts on the fly: corrections train low-rank adapters attached to the frozen
decoder, and the adapted model is consulted on later errors so recurring
mistakes stop costing clicks. The same loop drives a streaming classification
task. Everything runs on a small deterministic model so protocols, ablations
and cost accounting are fully testable on a CPU.
"""

try:  # BLAS thread pools slow these small matmuls down; keep them serial
    from threadpoolctl import threadpool_limits as _threadpool_limits
    _BLAS_LIMIT = _threadpool_limits(limits=1, user_api="blas")
except ImportError:  # pragma: no cover
    _BLAS_LIMIT = None

from .adapters import (Adam, LoraAdapter, LoraConfig, MemoryAdapter, UpdateReport,
                       lora_apply, lora_init, memory_adapter_forward, reset,
                       train_on_correction)
from .autodiff import DimensionError, GraphError, Tensor, backward, finite_diff_grad
from .controller import (MethodVariant, StreamSession, TriggerMode, audit_event_log,
                         resolve_trigger, run_class_stream, run_video_stream)
from .data import (ClassStream, ClassStreamSpec, ScenarioSpec, VideoBundle,
                   generate_class_stream, generate_video, load_bundle, save_bundle)
from .losses import ClassLossConfig, SegLossConfig, class_loss, dice_loss, focal_loss, seg_loss
from .metrics import aggregate, boundary_f, iou, report_digest
from .model import (BaseWeights, Frame, MaskPrediction, PretrainConfig, PromptState,
                    decode_mask, extract_features, pretrain_base)
from .oracle import (Correction, ProtocolConfig, TimeModel, detect_error, place_click,
                     simulate_correction, validate_adapter_proposal)

__version__ = "0.1.0"
