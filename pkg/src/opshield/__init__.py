"""Webshell detection from PHP opcode dumps.

Dumps become operand-aware token sequences. A subword skip-gram model and
a sliding-window encoder each turn a sequence into a document vector, and a
small classifier scores their weighted mix.
"""

from .config import RunConfig, SplitSpec, load_config
from .errors import (
    DimMismatch,
    EmptyCorpus,
    EmptyDataset,
    EmptyInput,
    EmptySequence,
    FormatError,
    InvalidConfig,
    LengthMismatch,
    OpshieldError,
    SequenceTooLong,
    SingleClassDataset,
    TokenOutOfRange,
    TooFewSamples,
)
from .evaluation import gen_corpus, read_corpus, run_ablation, split_dataset, write_corpus
from .fasttext import EmbeddingModel, SubwordConfig, doc_vector, token_vector, train_skipgram
from .fusion import FusionConfig, TrainConfig, evaluate, fuse, grid_search_lambda, predict, train
from .metrics import Metrics, compute_metrics
from .odt import DecodePolicy, FilterRules, Label, Mode, TokenSequence, decode_operand, detect_encoding, extract_sequence
from .opdump import OpcodeDump, import_vld, parse_dump, serialize_dump
from .swa import EncoderConfig, encode, pool_global, window_layout

__version__ = "0.1.0"
