from .config import ConfigError, RunConfig, load_config
from .datasets import load_dataset, parse_cifar_bin, parse_idx
from .trace import TraceRecord, read_trace
