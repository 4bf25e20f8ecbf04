"""Layer-wise distillation of dense SwiGLU FFNs into sparse mixture-of-experts blocks."""

from .capture import HiddenStateDataset, capture_layer, capture_layers, load_dataset, save_dataset
from .distill import TrainConfig, TrainReport, aux_loss, combined_loss, train_moe_block
from .model import (DenseFfn, Expert, MoeBlock, ParamFlopReport, Router, ToyTransformer, ToyTransformerConfig,
                    count_params_flops, expert_forward, ffn_forward, init_moe_block, moe_forward, route, split_ffn)
from .policy import LayerPolicy, RoutingProfile, decide_policies, dynamic_k, profile_routing, quantile
from .tensor import GradTape, Tensor2

__version__ = "0.1.0"
