"""Selective-context gating for multi-context, multi-instance recognition."""

from . import tensor
from .contexts import (BodyPartNet, BodyPartSet, ContextBundle, GlobalFeatureMap,
                       ProviderRegistry, SegmentMasks, StuffNet, provider_context,
                       ste_topk_select, surround_context)
from .gradcheck import NonDifferentiablePointError, gradcheck
from .harness import (EvalReport, ExperimentConfig, evaluate, gradient_suite,
                      marginalize, selection_report, train)
from .metrics import average_precision, instance_map
from .model import (InteractionModel, ModelConfig, classify_mil, context_only_gate,
                    embed_contexts, fuse, fusion_baseline, gate, load_model,
                    param_count, pool_context, save_model)
from .optim import OptimizerState, sgd_step
from .synth import GenConfig, SynDataset, SynImage, gen_dataset, load_dataset, save_dataset
from .tensor import Tensor, backward, bce_loss, no_grad, row_max_pool, softmax_rows

__version__ = "0.1.0"
