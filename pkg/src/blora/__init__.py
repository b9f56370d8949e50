"""Block-wise LoRA (B-LoRA) tooling for the SDXL UNet attention layout."""

__version__ = "0.1.0"

from .adapter import (
    BLora,
    LoraAdapter,
    LoraPair,
    combine_adapters,
    combine_bloras,
    effective_delta,
    extract_blocks,
    extract_blora,
    load_adapter,
    lora_delta,
    merge,
    merge_adapter,
    save_adapter,
    scale_adapter,
)
from .checkpoint import TensorFile, TensorFileEntry, parse, read_file, serialize, write_file
from .errors import BLoraError, FormatError, InvariantError, UsageError
from .tensor import Rng, Tensor
from .topology import BlockId, LayerAddress, address_of, block_of_key, keys_of_block, layer_count, stem_for

__all__ = [
    "BLora", "BLoraError", "BlockId", "FormatError", "InvariantError", "LayerAddress", "LoraAdapter",
    "LoraPair", "Rng", "Tensor", "TensorFile", "TensorFileEntry", "UsageError", "address_of",
    "block_of_key", "combine_adapters", "combine_bloras", "effective_delta", "extract_blocks",
    "extract_blora", "keys_of_block", "layer_count", "load_adapter", "lora_delta", "merge",
    "merge_adapter", "parse", "read_file", "save_adapter", "scale_adapter", "serialize", "stem_for",
    "write_file",
]
