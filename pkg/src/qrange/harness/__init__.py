from .config import SCHEMA, ConfigError, RunConfig, load_config, parse_config
from .data import Dataset, DatasetError, load_idx, make_digits_idx, read_idx, synth_blobs, write_idx
from .runner import JsonlSink, MetricsRecord, TrainingDiverged, read_jsonl, run_sweep, run_training
