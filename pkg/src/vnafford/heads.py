"""Affordance, proposal and scoring heads plus end-to-end inference.

One :class:`AffordanceModel` is trained per primitive.  With the VN encoder
the affordance head sees only invariant scalars, the proposal head maps gated
equivariant channels to two vectors that Gram-Schmidt turns into a rotation,
and the scoring head sees the rotation only through its inner products with
the point's equivariant channels.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .baseline import PointEncoder
from .errors import CheckpointLoadError, DegenerateFrameError, NoValidProposalError
from .geometry import GS_EPS, PointCloud, as_rotation, gram_schmidt_rotation
from .simenv import PrimitiveType, primitive
from .vn_core import (Features, ModelConfig, VNEncoder, VNLinear, VNReLU, graph_for,
                      read_checkpoint, save_checkpoint)

SCORE_THRESHOLD = 0.5


def mlp(c_in, hidden, c_out=1):
    return nn.Sequential(nn.Linear(c_in, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(),
                         nn.Linear(hidden, c_out))


def gram_schmidt_torch(u: torch.Tensor, v: torch.Tensor, eps: float = GS_EPS) -> torch.Tensor:
    """Batched, differentiable Gram-Schmidt; columns ``(e1, e2, e1 x e2)``."""
    e1 = u / u.norm(dim=-1, keepdim=True).clamp_min(eps)
    w = v - (v * e1).sum(-1, keepdim=True) * e1
    e2 = w / w.norm(dim=-1, keepdim=True).clamp_min(eps)
    return torch.stack([e1, e2, torch.linalg.cross(e1, e2, dim=-1)], dim=-1)


class ProposalHead(nn.Module):
    """Noise-gated VN head: ``(eqv_p, z) -> (u, v)``.

    The noise only produces per-channel scalar gates, so equivariance holds
    for every noise value.
    """

    def __init__(self, d, d_z, hidden):
        super().__init__()
        h = hidden // 2
        self.gate = nn.Linear(d_z, d)
        self.net = nn.ModuleList([VNLinear(d, h), VNReLU(h), VNLinear(h, h), VNReLU(h)])
        self.out = VNLinear(h, 2)

    def forward(self, eqv, z):
        f = eqv * (2 * torch.sigmoid(self.gate(z))).unsqueeze(-1)
        for layer in self.net:
            f = layer(f)
        return self.out(f)  # (..., 2, 3)


class AffordanceModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.equivariant = cfg.kind == "vn"
        if self.equivariant:
            self.encoder = VNEncoder(cfg)
            self.proposal = ProposalHead(cfg.d, cfg.d_z, cfg.hidden)
            score_in = cfg.d_i + 3 * cfg.d
        elif cfg.kind == "baseline":
            self.encoder = PointEncoder(cfg)
            self.proposal = mlp(cfg.d_i + cfg.d_z, cfg.hidden, 6)
            score_in = cfg.d_i + 9
        else:
            raise ValueError(f"unknown model kind {cfg.kind!r}")
        self.affordance = mlp(cfg.d_i, cfg.hidden)
        self.scoring = mlp(score_in, cfg.hidden)

    @property
    def primitive(self) -> PrimitiveType:
        return primitive(self.cfg.primitive)

    def encode(self, points: torch.Tensor, edges: torch.Tensor) -> Features:
        return self.encoder(points, edges)

    def affordance_logits(self, inv: torch.Tensor) -> torch.Tensor:
        return self.affordance(inv).squeeze(-1)

    def proposal_vectors(self, feats: Features, z: torch.Tensor) -> torch.Tensor:
        """Raw ``(..., 2, 3)`` frame vectors for point features and noise ``z``."""
        if self.equivariant:
            return self.proposal(feats.eqv, z)
        return self.proposal(torch.cat([feats.inv, z], dim=-1)).reshape(*z.shape[:-1], 2, 3)

    def propose(self, feats: Features, z: torch.Tensor) -> torch.Tensor:
        uv = self.proposal_vectors(feats, z)
        return gram_schmidt_torch(uv[..., 0, :], uv[..., 1, :])

    def score_logits(self, feats: Features, rot: torch.Tensor) -> torch.Tensor:
        if self.equivariant:
            code = torch.einsum("...cx,...xf->...cf", feats.eqv, rot).flatten(-2)
        else:
            code = rot.flatten(-2)
        return self.scoring(torch.cat([feats.inv, code], dim=-1)).squeeze(-1)


def build_model(cfg: ModelConfig) -> AffordanceModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = AffordanceModel(cfg)
    return model.to(cfg.dtype)


def save_model(path, model: AffordanceModel, extra: dict | None = None) -> None:
    save_checkpoint(path, model, model.cfg, extra)


def load_model(path) -> AffordanceModel:
    manifest, arrays = read_checkpoint(path)
    try:
        cfg = ModelConfig(**manifest["config"])
        model = build_model(cfg)
        state = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
        model.load_state_dict(state, strict=True)
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise CheckpointLoadError(f"checkpoint {path} does not match its manifest: {exc}") from exc
    model.eval()
    return model


# ---------------------------------------------------------------- single-point API

def _t(x, model):
    return torch.as_tensor(np.asarray(x), dtype=model.cfg.dtype)


@torch.no_grad()
def encode_cloud(model: AffordanceModel, cloud: PointCloud | np.ndarray) -> Features:
    """Per-point features of one cloud, batch axis dropped."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    edges = torch.from_numpy(graph_for(pts, model.cfg.k_nn))[None]
    f = model.encode(_t(model_input(model.cfg, pts), model)[None], edges)
    return Features(f.inv[0], None if f.eqv is None else f.eqv[0])


def model_input(cfg: ModelConfig, points: np.ndarray) -> np.ndarray:
    """Network input coordinates.

    The VN encoder centers internally; doing it first in float64 keeps the
    cast to model precision from eating translation-sized rounding.  The
    baseline sees absolute coordinates.
    """
    return points - points.mean(axis=0) if cfg.kind == "vn" else points


def point_features(feats: Features, index) -> Features:
    return Features(feats.inv[index], None if feats.eqv is None else feats.eqv[index])


@torch.no_grad()
def predict_affordance(model: AffordanceModel, inv) -> np.ndarray:
    """Affordance in [0, 1] from invariant features (any leading shape)."""
    return torch.sigmoid(model.affordance_logits(_t(inv, model))).double().numpy()


@torch.no_grad()
def propose_action(model: AffordanceModel, feats: Features, noise) -> np.ndarray:
    """Rotation proposed at one point for one noise vector.

    Raises :class:`DegenerateFrameError` when the two output vectors do not
    span a frame.
    """
    uv = model.proposal_vectors(feats, _t(noise, model)).double().numpy().reshape(-1, 2, 3)
    if len(uv) != 1:
        raise ValueError("propose_action takes one point and one noise vector")
    return gram_schmidt_rotation(uv[0, 0], uv[0, 1])


@torch.no_grad()
def score_action(model: AffordanceModel, feats: Features, rotation) -> float:
    r = as_rotation(rotation)
    return float(torch.sigmoid(model.score_logits(feats, _t(r, model))))


def is_positive(score: float) -> bool:
    return score > SCORE_THRESHOLD


# ---------------------------------------------------------------- inference

@dataclass
class ActionPrediction:
    point_index: int
    rotation: np.ndarray
    score: float
    affordance: np.ndarray
    n_valid: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rotation"] = self.rotation.tolist()
        d.pop("affordance")
        return d


@torch.no_grad()
def proposals_at(model: AffordanceModel, feats: Features, noise: np.ndarray):
    """Valid proposals for a batch of noise vectors at one point.

    Returns ``(rotations (M, 3, 3) float64, kept indices)``; degenerate frames
    are skipped.
    """
    z = _t(noise, model)
    pf = Features(feats.inv.expand(len(z), -1),
                  None if feats.eqv is None else feats.eqv.expand(len(z), -1, -1))
    uv = model.proposal_vectors(pf, z).double().numpy()
    rots, kept = [], []
    for i, (u, v) in enumerate(uv):
        try:
            rots.append(gram_schmidt_rotation(u, v))
        except DegenerateFrameError:
            continue
        kept.append(i)
    return np.array(rots).reshape(-1, 3, 3), np.array(kept, dtype=int)


@torch.no_grad()
def score_logits_at(model: AffordanceModel, feats: Features, rotations: np.ndarray) -> np.ndarray:
    r = _t(rotations, model)
    pf = Features(feats.inv.expand(len(r), -1),
                  None if feats.eqv is None else feats.eqv.expand(len(r), -1, -1))
    return model.score_logits(pf, r).double().numpy()


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


@torch.no_grad()
def infer_best_action(model: AffordanceModel, cloud: PointCloud, k: int, rng: np.random.Generator,
                      prim=None) -> ActionPrediction:
    """Pick the highest-affordance point, propose ``k`` orientations, keep the best-scored.

    Ties in either argmax go to the lowest index (selection works on logits,
    which do not saturate).
    """
    if prim is not None and primitive(prim) != model.primitive:
        raise ValueError(f"model was trained for {model.primitive.value}, not {primitive(prim).value}")
    if k < 1:
        raise ValueError("k must be >= 1")
    model.eval()
    feats = encode_cloud(model, cloud)
    logits = model.affordance_logits(feats.inv).double().numpy()
    idx = int(np.argmax(logits))
    noise = rng.standard_normal((k, model.cfg.d_z))
    pf = point_features(feats, slice(idx, idx + 1))
    rots, kept = proposals_at(model, pf, noise)
    if len(kept) == 0:
        raise NoValidProposalError(f"all {k} proposals at point {idx} were degenerate")
    s = score_logits_at(model, pf, rots)
    best = int(np.argmax(s))
    return ActionPrediction(idx, rots[best], float(sigmoid(s[best])), sigmoid(logits), len(kept))
