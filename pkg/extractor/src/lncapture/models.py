"""Model loading for capture runs.

Model ids take the form ``torchvision/<name>`` or ``timm/<name>``, with an
optional ``:pretrained`` suffix to download published weights (requires
network access; the architectures themselves build offline).
"""

from __future__ import annotations

import torch
from torch import nn

__all__ = ["load_model", "random_batch"]


def load_model(model_id: str) -> nn.Module:
    base, _, variant = model_id.partition(":")
    pretrained = variant == "pretrained"
    if variant not in ("", "pretrained"):
        raise ValueError(f"unknown model variant {variant!r} (use ':pretrained')")
    family, _, name = base.partition("/")
    if not name:
        raise ValueError(f"model id {model_id!r} must look like 'torchvision/vit_b_16'")
    if family == "torchvision":
        import torchvision.models

        ctor = getattr(torchvision.models, name, None)
        if ctor is None:
            raise ValueError(f"torchvision has no model {name!r}")
        return ctor(weights="DEFAULT" if pretrained else None)
    if family == "timm":
        try:
            import timm
        except ImportError as exc:
            raise ImportError("timm is not installed; pip install timm") from exc
        return timm.create_model(name, pretrained=pretrained)
    raise ValueError(f"unknown model family {family!r} (torchvision or timm)")


def random_batch(input_shape: tuple[int, ...], batch_size: int, seed: int) -> torch.Tensor:
    """Standard-normal capture batch; activation statistics, not labels, drive
    the mapping shapes, so random inputs are the default image source."""
    generator = torch.Generator().manual_seed(seed)
    return torch.randn((batch_size, *input_shape), generator=generator)
