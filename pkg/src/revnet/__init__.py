"""Reversible residual networks with activation-free backpropagation."""
from .arch import ArchSpec, NetworkPlan, build, count_params
from .coupling import (ResidualFn, ReversibleBlock, couple_forward, couple_reverse,
                       merge_channels, split_channels)
from .kernels import BatchStats, KernelParams, ShapeError
from .metrics import AngleReport, MemMeter, OpCount, counting, grad_angle
from .revgrad import (GradBundle, StackCheckpoint, block_reverse_backprop, grad_check,
                      stack_backward, stack_forward, stored_backprop)

__version__ = "0.1.0"
