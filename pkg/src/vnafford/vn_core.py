"""Vector-neuron layers and the dual-output point encoder.

Vector features are laid out ``(..., C, 3)``: ``C`` channels of 3-vectors per
point.  Every layer mixes channels only, so rotating all input vectors
rotates all outputs.  The encoder centers the cloud and feeds relative edge
vectors, which removes translation as well.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .errors import CheckpointLoadError, InsufficientPointsError
from .geometry import knn_graph

DIR_EPS = 1e-8
NORM_EPS = 1e-12
POOL_SHARPNESS = 8.0
FRAME_SOFTNESS = 0.1
CHECKPOINT_VERSION = 1


def vn_linear(weight: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    """Channel mixing ``out[j] = sum_i w[j, i] * f[i]``; coordinates never mix."""
    if weight.shape[-1] != f.shape[-2]:
        raise ValueError(f"weight expects {weight.shape[-1]} channels, feature has {f.shape[-2]}")
    return torch.einsum("oc,...cx->...ox", weight, f)


def vn_relu(f: torch.Tensor, direction_weight: torch.Tensor) -> torch.Tensor:
    """Keep ``v`` where ``v.q >= 0``, else drop its component along ``q``.

    ``q`` is a learned channel mix of ``f``; channels whose ``|q| < 1e-8`` pass
    through unchanged.
    """
    q = vn_linear(direction_weight, f)
    dot = (f * q).sum(-1, keepdim=True)
    qq = (q * q).sum(-1, keepdim=True)
    small = qq < DIR_EPS ** 2
    coef = torch.where(small, torch.zeros_like(dot), dot.clamp(max=0) / torch.where(small, torch.ones_like(qq), qq))
    return f - coef * q


def mean_max_pool(h: torch.Tensor, dim: int, sharpness: float = POOL_SHARPNESS) -> torch.Tensor:
    """Concatenate channel-wise mean and soft max-by-norm pooling over ``dim``.

    ``h`` is ``(..., K, C, 3)`` with the neighbor axis at ``dim``; the result
    has ``2C`` channels.  The max branch weights neighbors by a softmax of
    ``sharpness * |h_k| / mean_k |h_k|``.  A hard argmax over norms flips on
    float rounding whenever two neighbors nearly tie; the softmax is
    continuous, and scale- and rotation-invariant.
    """
    mean = h.mean(dim)
    norms = (h * h).sum(-1).clamp_min(NORM_EPS ** 2).sqrt()
    rel = norms / norms.mean(dim, keepdim=True)
    w = torch.softmax(sharpness * rel, dim=dim).unsqueeze(-1)
    soft = (w * h).sum(dim)
    return torch.cat([mean, soft], dim=-2)


def gather_neighbors(f: torch.Tensor, edges: torch.Tensor) -> torch.Tensor:
    """``f`` is ``(B, N, C, 3)``, ``edges`` ``(B, N, K)`` -> ``(B, N, K, C, 3)``."""
    b, n, k = edges.shape
    flat = edges.reshape(b, n * k)
    out = torch.gather(f, 1, flat[:, :, None, None].expand(b, n * k, *f.shape[2:]))
    return out.reshape(b, n, k, *f.shape[2:])


def vn_edge_conv(f: torch.Tensor, edges: torch.Tensor, weight: torch.Tensor,
                 direction_weight: torch.Tensor) -> torch.Tensor:
    """One VN edge-convolution block.

    Edge features ``[f_j - f_i, f_i]`` go through ``vn_linear`` + ``vn_relu`` and
    are pooled over each point's neighbors with :func:`mean_max_pool`.  Edge
    lists are sorted first, so neighbor order never matters.  The linear map is
    applied per point before gathering: ``W [f_j - f_i, f_i] = W1 f_j + (W2 - W1) f_i``.
    """
    edges = torch.sort(edges, dim=-1).values
    c = f.shape[-2]
    w_rel, w_ctr = weight[:, :c], weight[:, c:]
    if weight.shape[-1] != 2 * c:
        raise ValueError(f"edge weight expects {weight.shape[-1] // 2} channels, feature has {c}")
    if c < weight.shape[0]:
        rel = gather_neighbors(f, edges) - f.unsqueeze(2)
        pre = vn_linear(w_rel, rel) + vn_linear(w_ctr, f).unsqueeze(2)
    else:
        # factored form for wide inputs: W1 f_j + (W2 - W1) f_i
        pre = gather_neighbors(vn_linear(w_rel, f), edges) + vn_linear(w_ctr - w_rel, f).unsqueeze(2)
    h = vn_relu(pre, direction_weight)
    return mean_max_pool(h, dim=2)


def invariantize(f: torch.Tensor, frame_weight: torch.Tensor, mix: nn.Linear) -> torch.Tensor:
    """Rotation-invariant scalars from projections onto a learned frame.

    ``frame_weight`` maps the ``d`` channels to 3 frame vectors; each channel
    is projected onto the unit frame directions, giving ``d x 3`` scalars that
    scale linearly with the input, and these are mixed linearly to ``d_i``
    outputs.
    """
    frame = vn_linear(frame_weight, f)
    # soft unit length: frames far below the cloud's typical frame norm are
    # shrunk rather than blown up, so their unstable directions stay harmless
    fn = (frame * frame).sum(-1, keepdim=True)
    floor = FRAME_SOFTNESS ** 2 * fn.mean(dim=-3, keepdim=True) + NORM_EPS ** 2
    frame = frame / (fn + floor).sqrt()
    dots = torch.einsum("...cx,...fx->...cf", f, frame)
    return mix(dots.flatten(-2))


def _init(shape, fan_in, gen):
    # variance 1 / fan_in keeps the expected vector norm through a channel mix
    bound = np.sqrt(3.0 / fan_in)
    return nn.Parameter((torch.rand(*shape, generator=gen) * 2 - 1) * bound)


class VNLinear(nn.Module):
    def __init__(self, c_in, c_out, gen=None):
        super().__init__()
        self.weight = _init((c_out, c_in), c_in, gen)

    def forward(self, f):
        return vn_linear(self.weight, f)


class VNReLU(nn.Module):
    def __init__(self, channels, gen=None):
        super().__init__()
        self.weight = _init((channels, channels), channels, gen)

    def forward(self, f):
        return vn_relu(f, self.weight)


class VNEdgeConv(nn.Module):
    def __init__(self, c_in, c_out, gen=None):
        super().__init__()
        self.linear = VNLinear(2 * c_in, c_out, gen)
        self.relu = VNReLU(c_out, gen)

    def forward(self, f, edges):
        return vn_edge_conv(f, edges, self.linear.weight, self.relu.weight)


class Invariantize(nn.Module):
    def __init__(self, d, d_i, gen=None):
        super().__init__()
        if d < 3:
            raise ValueError("invariantize needs at least 3 channels")
        self.frame = VNLinear(d, 3, gen)
        self.mix = nn.Linear(3 * d, d_i)
        with torch.no_grad():
            bound = 1.0 / np.sqrt(3 * d)
            self.mix.weight.copy_((torch.rand(d_i, 3 * d, generator=gen) * 2 - 1) * bound)
            self.mix.bias.copy_((torch.rand(d_i, generator=gen) * 2 - 1) * bound)

    def forward(self, f):
        return invariantize(f, self.frame.weight, self.mix)


class Features(NamedTuple):
    inv: torch.Tensor  # (B, N, d_i)
    eqv: torch.Tensor | None  # (B, N, d, 3); None for non-equivariant encoders


@dataclass
class ModelConfig:
    kind: str = "vn"  # "vn" or "baseline"
    primitive: str = "pull"
    k_nn: int = 16
    d: int = 32
    d_i: int = 64
    depth: int = 3
    edge_channels: int = 16
    hidden: int = 128
    d_z: int = 8
    n_points: int = 256
    precision: str = "float32"
    seed: int = 0

    @property
    def dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.precision]


class VNEncoder(nn.Module):
    """Segmentation-style VN-DGCNN: every point gets ``(inv, eqv)`` features.

    Blocks run on a fixed geometric kNN graph; block outputs are concatenated
    with their point-wise mean (global context) before the output layers.
    """

    def __init__(self, cfg: ModelConfig, gen=None):
        super().__init__()
        c = cfg.edge_channels
        self.k_nn = cfg.k_nn
        blocks, c_in = [], 1
        for _ in range(cfg.depth):
            blocks.append(VNEdgeConv(c_in, c, gen))
            c_in = 2 * c
        self.blocks = nn.ModuleList(blocks)
        cat = 2 * c * cfg.depth
        self.fuse = VNLinear(2 * cat, 2 * cfg.d, gen)
        self.fuse_relu = VNReLU(2 * cfg.d, gen)
        self.out = VNLinear(2 * cfg.d, cfg.d, gen)
        self.invariant = Invariantize(cfg.d, cfg.d_i, gen)

    def forward(self, points: torch.Tensor, edges: torch.Tensor) -> Features:
        x = points - points.mean(dim=1, keepdim=True)
        f = x.unsqueeze(2)
        outs = []
        for block in self.blocks:
            f = block(f, edges)
            outs.append(f)
        cat = torch.cat(outs, dim=-2)
        glob = cat.mean(dim=1, keepdim=True).expand_as(cat)
        h = self.fuse_relu(self.fuse(torch.cat([cat, glob], dim=-2)))
        eqv = self.out(h)
        return Features(self.invariant(eqv), eqv)


def graph_for(points: np.ndarray, k: int) -> np.ndarray:
    if len(points) <= k:
        raise InsufficientPointsError(f"need more than k={k} points, got {len(points)}")
    return knn_graph(points, k)


def save_checkpoint(path, model: nn.Module, cfg: ModelConfig, extra: dict | None = None) -> None:
    """Write named parameter arrays plus a JSON manifest into one ``.npz`` file."""
    manifest = {"format_version": CHECKPOINT_VERSION, "config": asdict(cfg), **(extra or {})}
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__manifest__"] = np.array(json.dumps(manifest, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        manifest = json.loads(str(arrays.pop("__manifest__")))
    except Exception as exc:  # zipfile, json and key errors all mean a bad file
        raise CheckpointLoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointLoadError(f"unsupported checkpoint version {manifest.get('format_version')}")
    return manifest, arrays
