"""A tiny transformer stand-in with the ViT-B normalization layout
(12 blocks x 2 LayerNorms + a final one = 25), cheap enough for CPU tests."""

import pytest
import torch
from torch import nn


class _Block(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(),
                                 nn.Linear(2 * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TinyTransformer(nn.Module):
    """Token-level module: input (batch, tokens, dim)."""

    def __init__(self, dim=32, depth=12):
        super().__init__()
        self.blocks = nn.ModuleList([_Block(dim) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)
        self.dim = dim

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


@pytest.fixture
def tiny_model():
    torch.manual_seed(7)
    model = TinyTransformer()
    # spread affine weights/biases so the pre-affine inversion has real work to do
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.LayerNorm):
                module.weight.uniform_(0.5, 1.5)
                module.bias.normal_(0.0, 0.2)
    return model


@pytest.fixture
def tiny_batch():
    generator = torch.Generator().manual_seed(3)
    return torch.randn((4, 16, 32), generator=generator)
