"""Orthogonal continual merging of slide aggregators with task-to-class prompt inference."""
from .checkpoint import Checkpoint, load, save
from .errors import ConfigError, IOFailure, NumericalError, OCMergeError, ShapeError
from .merge import MergeState, ProjectionReport, average_merge, finalize, init_state, merge_step
from .metrics import AccuracyMatrix, MetricReport, metric_report
from .prompts import PromptBank, masked_infer, naive_infer, tcp_infer
from .stream import Stream, StreamConfig, default_config, gen_stream, load_stream, save_stream

__version__ = "0.1.0"
