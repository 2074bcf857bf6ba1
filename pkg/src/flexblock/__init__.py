"""Block floating point training emulation and accelerator cost modelling."""
from .accel import (
    CoreGeometry,
    CostModelConfig,
    MappingPlan,
    estimate_cycles,
    estimate_energy,
    estimate_training_step,
    mapping_passes,
    peak_macs_per_cycle,
    plan_mapping,
    utilization,
)
from .bfp import (
    BfpBlock,
    BfpTensor,
    Format,
    MantissaWidth,
    ZseStats,
    block_dot,
    block_shape_for,
    block_tensor,
    dequantize_block,
    fake_quantize,
    quantize_block,
)
from .config import PRESETS, RunConfig
from .datasets import Dataset, load_dataset, make_benchmark
from .estimator import BfpNetClassifier, BfpQuantizer
from .layers import LayerKind, LayerSpec, PrecisionConfig
from .trainer import NetworkSpec, TrainConfig, default_network, train

__version__ = "0.1.0"
