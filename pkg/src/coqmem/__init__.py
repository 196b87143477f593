"""Contrastive product quantization with a soft-code memory bank.

Library layout:

* ``dataio``: binary vector/codebook/code files and view augmentation
* ``quantizer``: codebooks, soft/hard quantization, codeword diversity
* ``contrastive``: vanilla, debiased and memory-augmented contrastive losses
* ``memory``: FIFO code memory
* ``trainer``: objective, Adam, training loop, checkpoints
* ``retrieval``: AQS search and MAP / precision metrics
* ``analysis``: feature drift, degeneration and ablation experiments
"""

from .dataio import AugmentationConfig, FeatureDataset, load_vectors, write_vectors
from .errors import CoqmemError, ConfigError, DataError, DivergenceError, FormatError
from .quantizer import Codebooks, QuantizerConfig, omega_c, quantize_hard, quantize_soft
from .retrieval import RetrievalIndex, encode_database, evaluate, map_at_n, search_topn
from .trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AugmentationConfig", "Codebooks", "ConfigError", "CoqmemError", "DataError",
    "DivergenceError", "FeatureDataset", "FormatError", "QuantizerConfig", "RetrievalIndex",
    "TrainConfig", "Trainer", "encode_database", "evaluate", "load_checkpoint", "load_vectors",
    "map_at_n", "omega_c", "quantize_hard", "quantize_soft", "save_checkpoint", "search_topn",
    "train", "write_vectors",
]
