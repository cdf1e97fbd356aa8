"""Retrieval-augmented history scaling at desk scale.

Quantized vector retrieval with a diversity-aware greedy selector, context
modulation layers, and a rehearsal trainer, plus a synthetic-data experiment
harness demonstrating forgetting mitigation on non-stationary data.
"""

from .chunker import (
    Aggregation,
    DailyEmbedding,
    MementoDoc,
    chunk,
    chunk_similarity_report,
    read_daily_jsonl,
    write_daily_jsonl,
)
from .core import (
    QuantizedEmbedding,
    SimilarityKind,
    SourceId,
    cosine_similarity,
    dequantize,
    quantize_norm_int8,
    quantized_cosine,
)
from .ember import (
    AffineHead,
    EmberContext,
    QnnLayer,
    affine_backward,
    affine_forward,
    head_cost,
    pool_context,
    qnn_backward,
    qnn_forward,
)
from .errors import MementoError
from .metrics import PredictionBatch, log_loss, normalized_entropy, relative_ne
from .mmr import MmrSelection, RetrievalQuery, mmr_oracle, mmr_select, mmr_select_quantized
from .ranker import RankerConfig, ToyRanker, TwoTowerModel
from .rehearsal import (
    ReplayPolicy,
    RowChunk,
    SecondPassPlan,
    TrainingRow,
    build_chunks,
    embed_rows,
    eval_forgetting,
    second_pass_train,
    select_replay,
)
from .snapshot_io import load_docs, load_snapshot, save_docs, save_snapshot
from .vindex import (
    IndexSnapshot,
    KnnResult,
    SnapshotStore,
    build,
    flat_scan,
    knn,
    retrieve_with_mmr,
    validate_checksum,
)

__all__ = [
    "Aggregation",
    "AffineHead",
    "DailyEmbedding",
    "EmberContext",
    "IndexSnapshot",
    "KnnResult",
    "MementoDoc",
    "MementoError",
    "MmrSelection",
    "PredictionBatch",
    "QnnLayer",
    "QuantizedEmbedding",
    "RankerConfig",
    "ReplayPolicy",
    "RetrievalQuery",
    "RowChunk",
    "SecondPassPlan",
    "SimilarityKind",
    "SnapshotStore",
    "SourceId",
    "ToyRanker",
    "TrainingRow",
    "TwoTowerModel",
    "affine_backward",
    "affine_forward",
    "build",
    "build_chunks",
    "chunk",
    "chunk_similarity_report",
    "cosine_similarity",
    "dequantize",
    "embed_rows",
    "eval_forgetting",
    "flat_scan",
    "head_cost",
    "knn",
    "load_docs",
    "load_snapshot",
    "log_loss",
    "mmr_oracle",
    "mmr_select",
    "mmr_select_quantized",
    "normalized_entropy",
    "pool_context",
    "qnn_backward",
    "qnn_forward",
    "quantize_norm_int8",
    "quantized_cosine",
    "read_daily_jsonl",
    "relative_ne",
    "retrieve_with_mmr",
    "save_docs",
    "save_snapshot",
    "second_pass_train",
    "select_replay",
    "validate_checksum",
    "write_daily_jsonl",
]

__version__ = "0.1.0"
