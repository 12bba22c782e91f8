from .schema import (LABEL_REGISTRY, DatasetError, InstructionSample, Step, convert_shape_records,
                     counts, load_dataset, normalize, save_dataset, validate_sample)
from .splits import SplitSpec, make_splits, sample_pairs
from .synth import CATALOG, synth_generate, synth_object

__all__ = [
    "LABEL_REGISTRY", "DatasetError", "InstructionSample", "Step", "convert_shape_records", "counts",
    "load_dataset", "normalize", "save_dataset", "validate_sample", "SplitSpec", "make_splits", "sample_pairs",
    "CATALOG", "synth_generate", "synth_object",
]
