"""Sparse-representation KV cache compression.

Cache vectors are encoded as a few (atom index, coefficient) pairs found by
matching pursuit over a dictionary built from offline-trained atoms shared by
groups of similar layers plus online atoms sampled from the prompt.
"""

from .calib_io import (
    CaptureDataset,
    CaptureHeader,
    GaussianMixture,
    Kind,
    LayerDrift,
    PlantedDictionary,
    SyntheticSpec,
    generate_synthetic,
    read_capture,
    write_capture,
)
from .codec import (
    CodecConfig,
    Dictionary,
    SparseCode,
    desparse,
    encode_batch,
    encode_vector,
    equivalent_bits,
    matching_pursuit,
)
from .layer_merge import MergePlan, build_merge_plan, jsd
from .neural_dict import TrainConfig, train_neural_dict, train_on_merged_layers
from .offline import OfflineDictionary
from .runtime import CsrCache, MemoryReport, build_prompt_dictionary

__version__ = "0.1.0"
