"""Parameter and FLOP accounting.

FLOPs are reported as multiply-accumulate operations (one MAC counted as one
FLOP), the convention behind the usual "1.8 GFLOPs" figure for ResNet-18 at
224x224. Only convolutions and affine maps are charged; normalisation,
activations, pooling and the parameter-free mixing layers are free. Any other
leaf module type raises, so a new layer can never be silently ignored.
"""
from __future__ import annotations

from torch import nn
import torch

from .mixstyle import CGMixStyle

FREE_MODULES = (
    nn.BatchNorm2d, nn.ReLU, nn.MaxPool2d, nn.AdaptiveAvgPool2d, nn.AvgPool2d,
    nn.Identity, nn.Flatten, nn.Dropout, CGMixStyle,
)


class UnsupportedLayerError(TypeError):
    pass


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _conv_macs(m: nn.Conv2d, out: torch.Tensor) -> int:
    kh, kw = m.kernel_size
    per_output = (m.in_channels // m.groups) * kh * kw
    return out[0].numel() * per_output


def count_flops(model: nn.Module, input_hw: tuple[int, int] | int = 224) -> int:
    """MACs for one 3-channel image of size ``input_hw`` through ``model``."""
    if isinstance(input_hw, int):
        input_hw = (input_hw, input_hw)
    leaves = [m for m in model.modules() if not list(m.children())]
    unsupported = sorted({type(m).__name__ for m in leaves
                          if not isinstance(m, (nn.Conv2d, nn.Linear) + FREE_MODULES)})
    if unsupported:
        raise UnsupportedLayerError(f"cannot count FLOPs for layer types: {', '.join(unsupported)}")

    total = 0

    def hook(m, inputs, out):
        nonlocal total
        if isinstance(m, nn.Conv2d):
            total += _conv_macs(m, out)
        elif isinstance(m, nn.Linear):
            total += m.in_features * m.out_features

    handles = [m.register_forward_hook(hook) for m in leaves if isinstance(m, (nn.Conv2d, nn.Linear))]
    was_training = model.training
    model.eval()
    try:
        param = next(model.parameters(), None)
        dtype = param.dtype if param is not None else torch.float32
        with torch.no_grad():
            model(torch.zeros(1, 3, *input_hw, dtype=dtype))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return total
