"""Binary stochastic forward-forward training with an energy-cost ledger.

A small training engine for layerwise forward-only learning with binary
stochastic units (software p-bits), plus an instrumented accounting of
multiplications and memory traffic against closed-form cost predictions.
"""

from .energy import CostModel, EnergyLedger, analytic_cost, mac_equivalent
from .gradients import (bgbsff_gradient, bsff_gradient, exact_joint_gradient,
                        importance_gradient, lff_gradient)
from .readout import ReadoutMatrix, inverse_link, layer_loss, natural_params
from .sampler import PbitStream, bernoulli_layer, logistic, surprise_indicator, \
    tiled_logistic_sample
from .tensor import (BnStats, KernelBank, Tensor4, absorb_bn, apply_bn,
                     batch_stats, conv2d, conv_absorbed, maxpool2x2)
from .trainer import (LayerSpec, NetSpec, TrainSchedule, adam_step, evaluate,
                      train, train_classifier_head)

__version__ = "0.1.0"
