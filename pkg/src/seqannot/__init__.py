"""Semi-automated annotation of discrete-state frame sequences."""

from seqannot.evaluation import (
    SweepFailure,
    SweepResult,
    SweepSpec,
    TradeoffPoint,
    pareto_mask,
    replay_metrics,
    sweep,
)
from seqannot.evaluation import run_metrics
from seqannot.hmm import (
    DecodeResult,
    EstimationError,
    HmmModel,
    ImpossibleObservationError,
    ObservationSequence,
    StableScore,
    StateSpace,
    estimate_emission,
    estimate_model,
    stable_state_score,
    unchanged_log_prob,
    viterbi,
)
from seqannot.pipeline import (
    AnnotationAborted,
    AnnotationPacket,
    AnnotationRun,
    AnnotatorContractError,
    ChangePoint,
    LabelRecord,
    PipelineError,
    PipelineParams,
    Segment,
    binarize_changes,
    confident_class,
    process_segment,
    run_pipeline,
    segment_frames,
    truth_annotator,
)
from seqannot.providers import (
    FrameRecord,
    RecordFormatError,
    RecordStream,
    SimConfig,
    parse_records,
    serialize_records,
    simulate_records,
)
from seqannot.pupil import (
    BinaryImage,
    GrayImage,
    NoPupilError,
    PupilFormatError,
    PupilResult,
    extract_pupil,
    parse_polygon,
    read_pgm,
    write_pgm,
)
from seqannot.journal import JournalError
from seqannot.report import run_figure, tradeoff_figure
from seqannot.service import (
    AnnotationService,
    ConflictError,
    NotFoundError,
    RejectedLabelsError,
    ServiceError,
    make_server,
)

__all__ = [
    "AnnotationAborted",
    "AnnotationPacket",
    "AnnotationRun",
    "AnnotationService",
    "AnnotatorContractError",
    "BinaryImage",
    "ChangePoint",
    "ConflictError",
    "DecodeResult",
    "EstimationError",
    "FrameRecord",
    "GrayImage",
    "HmmModel",
    "ImpossibleObservationError",
    "JournalError",
    "LabelRecord",
    "NoPupilError",
    "NotFoundError",
    "ObservationSequence",
    "PipelineError",
    "PipelineParams",
    "PupilFormatError",
    "PupilResult",
    "RecordFormatError",
    "RecordStream",
    "RejectedLabelsError",
    "Segment",
    "ServiceError",
    "SimConfig",
    "StableScore",
    "StateSpace",
    "SweepFailure",
    "SweepResult",
    "SweepSpec",
    "TradeoffPoint",
    "binarize_changes",
    "confident_class",
    "estimate_emission",
    "estimate_model",
    "extract_pupil",
    "make_server",
    "pareto_mask",
    "parse_polygon",
    "parse_records",
    "process_segment",
    "read_pgm",
    "replay_metrics",
    "run_figure",
    "run_metrics",
    "run_pipeline",
    "segment_frames",
    "serialize_records",
    "simulate_records",
    "stable_state_score",
    "sweep",
    "tradeoff_figure",
    "truth_annotator",
    "unchanged_log_prob",
    "viterbi",
    "write_pgm",
]
