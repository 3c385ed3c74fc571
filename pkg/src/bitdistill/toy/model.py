"""Toy single-level detector with optionally binarized convolutions."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..bitpack import pack_signs, xnor_popcount_core
from ..tensor import ConvSpec
from .data import N_CLASSES

NECK_CHANNELS = 32


class SignSTE(torch.autograd.Function):
    """sign(x) with +1 for x > 0, -1 otherwise; gradient passes where |x| <= 1."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return torch.where(x > 0, 1.0, -1.0).to(x.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        return grad_out * (x.abs() <= 1).to(grad_out.dtype)


class BinaryConv2d(nn.Conv2d):
    """3x3 convolution that can switch between real and 1-bit forward.

    In binary mode both activations and weights are signed, the output is
    scaled by the per-output-channel mean ``|w|`` and borders are padded with
    -1, which keeps it bit-exact with the packed XNOR kernel.
    """

    def __init__(self, c_in, c_out, stride=1, binary=False):
        super().__init__(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.binary = binary

    def scales(self) -> torch.Tensor:
        return self.weight.abs().mean(dim=(1, 2, 3))

    def forward(self, x):
        if not self.binary:
            return super().forward(x)
        xb = F.pad(SignSTE.apply(x), (1, 1, 1, 1), value=-1.0)
        wb = SignSTE.apply(self.weight)
        out = F.conv2d(xb, wb, stride=self.stride)
        return out * self.scales().view(1, -1, 1, 1)

    def reconstruction_penalty(self) -> torch.Tensor:
        w = self.weight
        alpha = self.scales().view(-1, 1, 1, 1)
        return (w - alpha * torch.where(w > 0, 1.0, -1.0)).pow(2).mean()

    def packed_forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Run one ``(C, H, W)`` input through the XNOR/popcount kernel.

        Returns ``(integer core, scaled output)``.
        """
        w = self.weight.detach().double().numpy()
        spec = ConvSpec(self.out_channels, self.in_channels, 3, self.stride[0], 1)
        a = pack_signs(np.where(x > 0, 1, -1), axis=0)
        wb = pack_signs(np.where(w > 0, 1, -1), axis=1)
        core = xnor_popcount_core(a, wb, spec)
        alpha = self.scales().detach().double().numpy()
        return core, alpha[:, None, None] * core


class Block(nn.Module):
    """conv -> BN plus a real-valued shortcut, then PReLU.

    Downsampling blocks average-pool first so the convolution itself always
    runs at stride 1 on an exactly tiled grid.
    """

    def __init__(self, c_in, c_out, stride=1, binary=False):
        super().__init__()
        self.pool = nn.AvgPool2d(stride) if stride != 1 else nn.Identity()
        self.conv = BinaryConv2d(c_in, c_out, 1, binary)
        self.bn = nn.BatchNorm2d(c_out)
        self.act = nn.PReLU(c_out)
        shortcut = []
        if c_in != c_out:
            shortcut += [nn.Conv2d(c_in, c_out, 1, bias=False), nn.BatchNorm2d(c_out)]
        self.shortcut = nn.Sequential(*shortcut)

    def forward(self, x):
        x = self.pool(x)
        return self.act(self.bn(self.conv(x)) + self.shortcut(x))


class ToyDetector(nn.Module):
    """Real stem, three backbone blocks, one neck conv and a real 1x1 head.

    The head predicts per cell: 1 objectness logit, class logits and 4 box
    offsets. ``forward`` returns ``(neck_features, head_output)``.
    """

    def __init__(self, width: int = 32, binary_backbone: bool = False, binary_neck: bool = False):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, 2, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        self.backbone = nn.Sequential(
            Block(width, width, 2, binary_backbone),
            Block(width, width, 1, binary_backbone),
            Block(width, width, 1, binary_backbone),
        )
        self.neck = Block(width, NECK_CHANNELS, 1, binary_neck)
        self.head = nn.Conv2d(NECK_CHANNELS, 1 + N_CLASSES + 4, 1)

    def binary_convs(self):
        return [m for m in self.modules() if isinstance(m, BinaryConv2d) and m.binary]

    def set_neck_binary(self, flag: bool) -> None:
        self.neck.conv.binary = flag

    def forward(self, x):
        feat = self.neck(self.backbone(self.stem(x)))
        return feat, self.head(feat)
