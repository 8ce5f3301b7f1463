"""groundling: a desk-scale unified dense transformer for promptable
instance grounding.

One autoregressive stack ingests image patches and prompt text under a
hybrid attention mask, emits per-instance coord -> size -> seg token
triplets with Fourier re-injection of decoded values, and produces masks by
dotting seg-token states with cross-attention-upsampled visual features.
Training, the matched-F1 metric protocol, a Pass@k harness and a synthetic
shapes corpus are included; everything runs on numpy.
"""

from .geometry import (
    Center, QuantConfig, Size2D, box_corners, box_iou, dequantize_coord,
    dequantize_size, mask_iou, mask_to_box, quantize_coord, quantize_size,
    rle_decode, rle_encode,
)
from .seqformat import (
    AttentionSpec, Instance, PackedBatch, TokenSequence, Vocab, attends,
    attention_mask, loss_mask, pack, parse_generated, raster_order,
    serialize_sample,
)
from .posenc import FourierConfig, RopeConfig, fourier_features, ggrope_directions
from .model import (
    DecodeResult, ModelConfig, decode, forward, init_params, load_checkpoint,
    predict_mask, save_checkpoint, upsample_features,
)
from .losses import LossWeights, coord_loss, gram_loss, lm_loss, seg_loss, size_loss, total_loss
from .training import (
    AdamW, OptimizerConfig, StageConfig, TrainSample, default_stages,
    mup_lr_transfer, train,
)
from .evalkit import (
    EvalInstance, EvalRecord, MetricReport, cgf1, evaluate, hungarian_match,
    il_mcc, load_records, macro_f1, pass_at_k, pmf1, write_report,
)
from .synthdata import QuerySpec, SceneSpec, emit_dataset, generate_queries, generate_scene

__version__ = "0.1.0"
