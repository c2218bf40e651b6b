"""Non-equivariant comparison encoder.

A plain DGCNN-style point network on absolute coordinates.  It exposes the
same :class:`~vnafford.vn_core.Features` interface as the VN encoder but only
fills the scalar slot, so the heads fall back to feeding raw rotation entries
and predicting raw 6D vectors.
"""
from __future__ import annotations

import torch
from torch import nn

from .vn_core import Features, ModelConfig


class EdgeConv(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(2 * c_in, c_out), nn.LeakyReLU(0.2))

    def forward(self, h, edges):
        b, n, k = edges.shape
        hj = torch.gather(h, 1, edges.reshape(b, n * k, 1).expand(b, n * k, h.shape[-1])).reshape(b, n, k, -1)
        hi = h.unsqueeze(2).expand_as(hj)
        return self.mlp(torch.cat([hj - hi, hi], dim=-1)).max(dim=2).values


class PointEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        width = 4 * cfg.edge_channels
        blocks, c_in = [], 3
        for _ in range(cfg.depth):
            blocks.append(EdgeConv(c_in, width))
            c_in = width
        self.blocks = nn.ModuleList(blocks)
        cat = width * cfg.depth
        self.head = nn.Sequential(nn.Linear(2 * cat, cfg.hidden), nn.LeakyReLU(0.2), nn.Linear(cfg.hidden, cfg.d_i))

    def forward(self, points: torch.Tensor, edges: torch.Tensor) -> Features:
        h, outs = points, []
        for block in self.blocks:
            h = block(h, edges)
            outs.append(h)
        cat = torch.cat(outs, dim=-1)
        glob = cat.max(dim=1, keepdim=True).values.expand_as(cat)
        return Features(self.head(torch.cat([cat, glob], dim=-1)), None)
