"""Object-aligned paragraph captioning toolkit.

Library surface for the pipeline stages: dataset loading and validation,
object-to-sentence alignment, combined-object composition, the ordering
decoder with its occurrence penalty, and caption evaluation metrics.
"""

from .alignment import (
    AlignmentRecord,
    EmbeddingTable,
    align_dataset,
    align_image,
    cosine,
    embed_label,
    load_embeddings,
)
from .dataset import (
    BBox,
    CaptionSet,
    Dataset,
    DetectedObject,
    ImageRecord,
    concat_object_feature,
    load_captions,
    load_dataset,
    split_sentences,
    tokenize,
    validate,
    write_dataset,
)
from .errors import ParacapError, PixelFormatError, SchemaError
from .geometry import (
    CompositeCanvas,
    CompositeSpec,
    batch_canvas_dims,
    compose,
    compose_dataset,
    enlarge_if_sparse,
    extract_baseline_features,
    make_composite_spec,
    union_bbox,
)
from .metrics import MetricsReport, bleu, cider, detect_mentions, evaluate, object_metrics
from .ordering import (
    DecodeLimits,
    DecodeState,
    ObjectSequence,
    OrderingConfig,
    OrderingModel,
    apply_penalty,
    decode,
    forward,
    grad_check,
    init_model,
    project_history,
    teacher_forcing_loss,
    train,
)
from .ppm import read_ppm, write_ppm

__version__ = "0.1.0"

__all__ = [
    "AlignmentRecord", "EmbeddingTable", "align_dataset", "align_image",
    "cosine", "embed_label", "load_embeddings",
    "BBox", "CaptionSet", "Dataset", "DetectedObject", "ImageRecord",
    "concat_object_feature", "load_captions", "load_dataset",
    "split_sentences", "tokenize", "validate", "write_dataset",
    "ParacapError", "PixelFormatError", "SchemaError",
    "CompositeCanvas", "CompositeSpec", "batch_canvas_dims", "compose",
    "compose_dataset", "enlarge_if_sparse", "extract_baseline_features",
    "make_composite_spec", "union_bbox",
    "MetricsReport", "bleu", "cider", "detect_mentions", "evaluate",
    "object_metrics",
    "DecodeLimits", "DecodeState", "ObjectSequence", "OrderingConfig",
    "OrderingModel", "apply_penalty", "decode", "forward", "grad_check",
    "init_model", "project_history", "teacher_forcing_loss", "train",
    "read_ppm", "write_ppm",
    "__version__",
]
