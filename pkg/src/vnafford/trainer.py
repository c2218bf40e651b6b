"""Losses and the two-stage training loop.

Stage A fits the scoring head (balanced BCE) and the proposal head
(minimum-over-k geodesic loss on positives) together with the encoder, and
interleaves online collection.  Stage B freezes everything except the
affordance head and regresses it onto the mean of the top-j scores of
proposals drawn at each point.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datagen import Dataset, InteractionRecord, Scene, collect_online
from .errors import TrainingInfeasibleError
from .evalkit import binary_f1
from .heads import AffordanceModel, build_model, gram_schmidt_torch, model_input
from .vn_core import Features, ModelConfig, graph_for

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-7


# ---------------------------------------------------------------- losses

def loss_scoring(pred, labels) -> torch.Tensor:
    """Mean binary cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7]."""
    pred = torch.as_tensor(pred)
    labels = torch.as_tensor(labels, dtype=pred.dtype)
    if pred.shape != labels.shape:
        raise ValueError(f"length mismatch: {tuple(pred.shape)} vs {tuple(labels.shape)}")
    p = pred.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    return -(labels * torch.log(p) + (1 - labels) * torch.log1p(-p)).mean()


def geodesic_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable rotation angle of ``a^T b`` via atan2(sin, cos)."""
    m = a.transpose(-1, -2) @ b
    cos = (m.diagonal(dim1=-2, dim2=-1).sum(-1) - 1) / 2
    skew = torch.stack([m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]], -1)
    sin = torch.sqrt((skew * skew).sum(-1).clamp_min(1e-30)) / 2
    return torch.atan2(sin, cos)


def loss_proposal(candidates: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Mean over samples of the smallest geodesic distance among ``k`` candidates.

    ``candidates`` is ``(..., k, 3, 3)``, ``truth`` ``(..., 3, 3)``.  Only the
    closest candidate receives gradient.
    """
    candidates = torch.as_tensor(candidates)
    truth = torch.as_tensor(truth, dtype=candidates.dtype)
    if candidates.shape[-3] == 0:
        raise ValueError("empty candidate set")
    d = geodesic_torch(candidates, truth.unsqueeze(-3))
    return d.min(dim=-1).values.mean()


def loss_affordance(a_pred, target) -> torch.Tensor:
    a_pred = torch.as_tensor(a_pred)
    return (a_pred - torch.as_tensor(target, dtype=a_pred.dtype)).abs().mean()


@torch.no_grad()
def affordance_target(model: AffordanceModel, feats: Features, k_aff: int, j: int,
                      rng: np.random.Generator) -> torch.Tensor:
    """Mean of the top-``j`` scores among ``k_aff`` proposals, per point.

    ``feats`` holds any number of points (leading shape ``(P,)``); the result
    is ``(P,)`` and carries no gradient.  Degenerate proposals are dropped.
    """
    if j > k_aff:
        raise ValueError("j must not exceed k_aff")
    p = feats.inv.shape[0]
    z = torch.as_tensor(rng.standard_normal((p, k_aff, model.cfg.d_z)), dtype=model.cfg.dtype)
    pf = Features(feats.inv.unsqueeze(1).expand(p, k_aff, -1),
                  None if feats.eqv is None else feats.eqv.unsqueeze(1).expand(p, k_aff, -1, -1))
    uv = model.proposal_vectors(pf, z)
    rot = gram_schmidt_torch(uv[..., 0, :], uv[..., 1, :])
    scores = torch.sigmoid(model.score_logits(pf, rot))
    u, v = uv[..., 0, :], uv[..., 1, :]
    un = u.norm(dim=-1)
    vperp = (v - (v * u).sum(-1, keepdim=True) / un.clamp_min(1e-30).unsqueeze(-1) ** 2 * u).norm(dim=-1)
    valid = (un > 1e-6) & (vperp > 1e-6)
    if int(valid.sum(-1).min()) < j:
        raise ValueError(f"fewer than {j} valid proposals at some point")
    scores = torch.where(valid, scores, torch.full_like(scores, -1.0))
    return scores.topk(j, dim=-1).values.mean(-1)


# ---------------------------------------------------------------- config

@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    epochs_a: int = 20
    epochs_b: int = 10
    k_prop: int = 5
    k_aff: int = 20
    top_j: int = 3
    proposal_weight: float = 1.0
    online_per_epoch: int = 256
    online_start_epoch: int = 5
    online_total: int = 1000
    holdout: float = 0.1
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        for name in ("lr", "batch_size", "k_prop", "k_aff", "top_j"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.top_j > self.k_aff:
            raise ValueError("top_j must not exceed k_aff")
        if not 0 <= self.holdout < 1:
            raise ValueError("holdout must lie in [0, 1)")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_json(Path(path).read_text())


@dataclass
class TrainResult:
    model: AffordanceModel
    log: list[tuple[str, int, str, float]]
    online: Dataset | None = None
    heldout: list[InteractionRecord] = field(default_factory=list)

    def metric(self, stage: str, name: str) -> list[float]:
        return [v for s, _, n, v in self.log if s == stage and n == name]


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "epoch", "metric", "value"])
        for stage, epoch, name, value in rows:
            w.writerow([stage, epoch, name, repr(float(value))])


# ---------------------------------------------------------------- batching

class CloudCache:
    """Centered points and kNN edges per cloud id, built once."""

    def __init__(self, ds: Dataset, cfg: ModelConfig):
        self.cfg = cfg
        self.scenes = ds.scenes
        self._items = {}

    def add(self, scenes: dict[str, Scene]):
        self.scenes = {**self.scenes, **scenes}

    def get(self, cid):
        if cid not in self._items:
            pts = self.scenes[cid].cloud.points
            self._items[cid] = (torch.as_tensor(model_input(self.cfg, pts), dtype=self.cfg.dtype),
                                torch.from_numpy(graph_for(pts, self.cfg.k_nn)))
        return self._items[cid]

    def batch(self, cids):
        items = [self.get(c) for c in cids]
        return torch.stack([p for p, _ in items]), torch.stack([e for _, e in items])


def encode_records(model: AffordanceModel, cache: CloudCache, records: list[InteractionRecord]) -> Features:
    """Features at each record's contact point, encoding each cloud once."""
    cids = sorted({r.cloud_id for r in records})
    slot = {c: i for i, c in enumerate(cids)}
    pts, edges = cache.batch(cids)
    f = model.encode(pts, edges)
    b = torch.tensor([slot[r.cloud_id] for r in records])
    i = torch.tensor([r.point_index for r in records])
    return Features(f.inv[b, i], None if f.eqv is None else f.eqv[b, i])


@torch.no_grad()
def record_scores(model: AffordanceModel, cache: CloudCache, records: list[InteractionRecord],
                  chunk: int = 64) -> np.ndarray:
    """Predicted success probability per record."""
    model.eval()
    out = []
    for s in range(0, len(records), chunk):
        part = records[s:s + chunk]
        feats = encode_records(model, cache, part)
        rot = torch.as_tensor(np.stack([r.orientation for r in part]), dtype=model.cfg.dtype)
        out.append(torch.sigmoid(model.score_logits(feats, rot)).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def split_by_object(records: list[InteractionRecord], fraction: float, rng: np.random.Generator):
    objects = sorted({r.object_id for r in records})
    n_hold = int(round(fraction * len(objects)))
    held = set(rng.permutation(objects)[:n_hold].tolist()) if n_hold else set()
    train = [r for r in records if r.object_id not in held]
    test = [r for r in records if r.object_id in held]
    return train, test


def balanced_batches(records, batch_size, rng):
    """All positives once plus an equal-size random draw of negatives, shuffled."""
    pos = [r for r in records if r.result == 1]
    neg = [r for r in records if r.result == 0]
    take = rng.choice(len(neg), size=min(len(pos), len(neg)), replace=False)
    epoch = pos + [neg[i] for i in sorted(take)]
    order = rng.permutation(len(epoch))
    epoch = [epoch[i] for i in order]
    return [epoch[s:s + batch_size] for s in range(0, len(epoch), batch_size)]


# ---------------------------------------------------------------- training

def train(dataset: Dataset, cfg: TrainConfig, model: AffordanceModel | None = None,
          model_cfg: ModelConfig | None = None) -> TrainResult:
    """Two-stage training; returns the model, the metrics rows and online data."""
    labels = {r.result for r in dataset.records}
    if labels != {0, 1}:
        raise TrainingInfeasibleError(f"training needs both classes, dataset has {sorted(labels)}")
    rng = np.random.default_rng(cfg.seed)
    mcfg = model_cfg or cfg.model
    mcfg.primitive = dataset.primitive.value
    model = model or build_model(mcfg)
    rows: list[tuple[str, int, str, float]] = []
    if cfg.epochs_a == 0 and cfg.epochs_b == 0:
        return TrainResult(model, rows)

    train_recs, held = split_by_object(dataset.records, cfg.holdout, rng)
    if {r.result for r in train_recs} != {0, 1}:
        raise TrainingInfeasibleError("training split lost a class")
    cache = CloudCache(dataset, mcfg)
    train_ids = sorted({r.cloud_id for r in train_recs})
    train_scenes = [dataset.scenes[c] for c in train_ids]
    online = Dataset(dataset.primitive, meta={"source": "online"})
    torch.manual_seed(int(rng.integers(2 ** 31)))

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    dtype = mcfg.dtype
    for epoch in range(1, cfg.epochs_a + 1):
        model.train()
        sums = {"loss_scoring": 0.0, "loss_proposal": 0.0}
        preds, truth = [], []
        for batch in balanced_batches(train_recs, cfg.batch_size, rng):
            feats = encode_records(model, cache, batch)
            rot = torch.as_tensor(np.stack([r.orientation for r in batch]), dtype=dtype)
            y = torch.tensor([r.result for r in batch], dtype=dtype)
            prob = torch.sigmoid(model.score_logits(feats, rot))
            l_s = loss_scoring(prob, y)
            loss = l_s
            pos = y > 0.5
            l_p = torch.zeros((), dtype=dtype)
            if pos.any():
                pf = Features(feats.inv[pos], None if feats.eqv is None else feats.eqv[pos])
                n = int(pos.sum())
                z = torch.as_tensor(rng.standard_normal((n, cfg.k_prop, mcfg.d_z)), dtype=dtype)
                pf = Features(pf.inv.unsqueeze(1).expand(n, cfg.k_prop, -1),
                              None if pf.eqv is None else pf.eqv.unsqueeze(1).expand(n, cfg.k_prop, -1, -1))
                cands = model.propose(pf, z)
                l_p = loss_proposal(cands, rot[pos])
                loss = loss + cfg.proposal_weight * l_p
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["loss_scoring"] += float(l_s.detach()) * len(batch)
            sums["loss_proposal"] += float(l_p.detach()) * len(batch)
            preds.append(prob.detach().double().numpy() > 0.5)
            truth.append(y.numpy() > 0.5)
        n_seen = sum(len(p) for p in preds)
        for k, v in sums.items():
            rows.append(("A", epoch, k, v / max(n_seen, 1)))
        if preds:
            rows.append(("A", epoch, "train_f1", binary_f1(np.concatenate(preds), np.concatenate(truth))))
        if held and {r.result for r in held} == {0, 1}:
            s = record_scores(model, cache, held)
            rows.append(("A", epoch, "heldout_f1", binary_f1(s > 0.5, np.array([r.result for r in held]) == 1)))
        if epoch > cfg.online_start_epoch and len(online) < cfg.online_total and cfg.online_per_epoch > 0:
            n_new = min(cfg.online_per_epoch, cfg.online_total - len(online))
            batch_ds = collect_online(model, train_scenes, n_new, dataset.primitive, rng)
            online.extend(batch_ds)
            train_recs = train_recs + batch_ds.records
            rows.append(("A", epoch, "online_positive_rate", batch_ds.positive_rate()))
            rows.append(("A", epoch, "online_records", float(len(batch_ds))))
        log.info("stage A epoch %d: %s", epoch, {n: round(v, 4) for s, e, n, v in rows if s == "A" and e == epoch})

    if cfg.epochs_b > 0:
        rows += train_affordance(model, cache, train_ids, cfg, rng)
    model.eval()
    return TrainResult(model, rows, online, held)


def train_affordance(model: AffordanceModel, cache: CloudCache, cloud_ids: list[str], cfg: TrainConfig,
                     rng: np.random.Generator) -> list[tuple[str, int, str, float]]:
    """Stage B: fit the affordance head to frozen-model targets on every point."""
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    inv, targets = [], []
    with torch.no_grad():
        for s in range(0, len(cloud_ids), 16):
            pts, edges = cache.batch(cloud_ids[s:s + 16])
            f = model.encode(pts, edges)
            flat = Features(f.inv.reshape(-1, f.inv.shape[-1]),
                            None if f.eqv is None else f.eqv.reshape(-1, *f.eqv.shape[2:]))
            inv.append(flat.inv)
            targets.append(affordance_target(model, flat, cfg.k_aff, cfg.top_j, rng))
    inv = torch.cat(inv)
    targets = torch.cat(targets)
    head = model.affordance
    for p in head.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(head.parameters(), lr=cfg.lr)
    rows = [("B", 0, "target_mean", float(targets.mean()))]
    n_per_batch = cfg.batch_size * model.cfg.n_points
    head.train()
    for epoch in range(1, cfg.epochs_b + 1):
        order = torch.from_numpy(rng.permutation(len(inv)))
        total = 0.0
        for s in range(0, len(inv), n_per_batch):
            idx = order[s:s + n_per_batch]
            pred = torch.sigmoid(model.affordance_logits(inv[idx]))
            loss = loss_affordance(pred, targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        rows.append(("B", epoch, "loss_affordance", total / len(inv)))
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return rows
