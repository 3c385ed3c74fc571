"""1-bit convolution kernels and discrepancy-aware proposal distillation."""

from .binarize import optimal_scales, reconstruction_loss, sign_binarize, ste_backward
from .bitpack import BinaryTensor, OpsReport, count_ops, pack_signs, unpack_signs, xnor_popcount_conv
from .config import DistillConfig
from .loss import distill_loss_total, entropy_loss, entropy_loss_grad, total_loss
from .proposals import Region, build_pairs, channel_transform, crop_resize
from .select import mahalanobis_discrepancy, select_mask
from .tensor import ConvSpec, conv2d_ref

__version__ = "0.1.0"
