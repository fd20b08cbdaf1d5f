"""Dynamic attention 3D convolution networks for hyperspectral cube classification."""

from .dac import (
    DacLayerParams,
    aggregate_kernels,
    aggregation_cost,
    attention_cost,
    attention_weights,
    conv_cost,
    dac_backward,
    dac_forward,
    init_dac_layer,
)
from .densenet3d import (
    DenseNetConfig,
    NetworkState,
    build_network,
    growth_rate,
    load_checkpoint,
    net_backward,
    net_forward,
    plan_network,
    save_checkpoint,
)
from .errors import ConfigError, DataError, NumericAbort, ShapeError, StateError
from .hsi_data import (
    HsiCube,
    PatchSet,
    SplitSpec,
    extract_patches,
    load_cube,
    pad_cube,
    save_cube,
    stratified_split,
    synth_cube,
)
from .tensor_core import ConvKernel
from .train_eval import (
    CostReport,
    Metrics,
    TrainConfig,
    audit,
    evaluate,
    lr_at_epoch,
    metrics_from_confusion,
    sgd_momentum_step,
    train,
)

__version__ = "0.1.0"
