"""Stage 2: multi-scale attention fusion with tabular covariates and a Cox
survival head.

The encoder and prototypes from stage 1 stay frozen. Pooled per-scale
features are projected to a common width d; the tabular covariate vector is
projected to an initial query which attends to each scale in ascending order
(finest first), one key/value pair per step:

    q_{i+1} = q_i + MHSA(q_i, k_i, v_i),  then  q <- q + FFN(LN(q))

With a single key the per-head attention weight is exactly 1, so the
attention contribution is the value path alone. The final query is gated by
the class prototype chosen from the pooled last-scale feature (hard argmax of
cosine similarity, soft probability mixture, or no gate), and a small MLP
maps the gated vector to a scalar log-risk trained under the negative Cox
partial log-likelihood with Breslow tie handling.

Ablation wiring mirrors the variant table: m1 scores the pooled last-scale
feature alone, m2 concatenates it with the covariates before the MLP, m3 is
attention fusion without gating, m4/m5 add the hard/soft gate, and m7/m8 are
m4 over 12-class and 2-class prototype banks.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from .backbone import FeedForward
from .checkpoint import load_archive, load_state_arrays, save_archive, state_dict_arrays
from .errors import ValidationError
from .pretrain import cosine_logits
from .rng import stream
from .survstats import concordance_index

FUSION_MODES = ("multiscale_attention", "concat", "none")
GATE_MODES = ("hard", "soft", "none")

# variant name -> (fusion_mode, gate_mode, stage-1 label scheme)
VARIANTS = {
    "m1": ("none", "none", "four_class"),
    "m2": ("concat", "none", "four_class"),
    "m3": ("multiscale_attention", "none", "four_class"),
    "m4": ("multiscale_attention", "hard", "four_class"),
    "m5": ("multiscale_attention", "soft", "four_class"),
    "m7": ("multiscale_attention", "hard", "twelve_class"),
    "m8": ("multiscale_attention", "hard", "two_class"),
}


@dataclass
class FusionConfig:
    d: int = 192
    n_heads: int = 4
    fusion_mode: str = "multiscale_attention"
    gate_mode: str = "hard"
    epochs: int = 100
    batch_size: int = 512
    learning_rate: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ValidationError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.gate_mode not in GATE_MODES:
            raise ValidationError(f"unknown gate_mode {self.gate_mode!r}")
        if self.d % self.n_heads:
            raise ValidationError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValidationError("bad training hyperparameters")


def variant_config(name: str, base: FusionConfig) -> tuple[FusionConfig, str]:
    """Config and stage-1 label scheme for an ablation row (m1..m5, m7, m8)."""
    key = name.lower()
    if key not in VARIANTS:
        raise ValidationError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    fusion_mode, gate_mode, scheme = VARIANTS[key]
    return replace(base, fusion_mode=fusion_mode, gate_mode=gate_mode), scheme


def prototype_gate(q4: torch.Tensor, f4_pooled: torch.Tensor,
                   prototypes: torch.Tensor, mode: str,
                   logit_scale: float = 1.0) -> torch.Tensor:
    """Prototype-conditioned elementwise gate with a skip connection.

    hard: u = q4 + q4 * g_s with s the argmax-cosine class (ties go to the
    lowest index). soft: the probability-weighted prototype mixture replaces
    g_s. none: u = q4 unchanged.
    """
    if mode == "none":
        return q4
    logits = cosine_logits(f4_pooled, prototypes, logit_scale)
    if mode == "hard":
        g = prototypes[logits.argmax(dim=1)]
    elif mode == "soft":
        g = torch.softmax(logits, dim=1) @ prototypes
    else:
        raise ValidationError(f"unknown gate mode {mode!r}")
    return q4 + q4 * g


def cox_loss(betas: torch.Tensor, times: torch.Tensor,
             events: torch.Tensor) -> torch.Tensor | None:
    """Negative Cox partial log-likelihood over one batch.

    Risk sets are formed within the batch; tied event times use the Breslow
    convention (every tied event sees the full tied risk set). Returns None
    when the batch has no events, which callers treat as a skip signal.
    """
    if betas.ndim != 1 or betas.shape != times.shape or betas.shape != events.shape:
        raise ValidationError("betas, times, events must be equal-length vectors")
    if len(betas) < 2:
        raise ValidationError("need at least two subjects in a batch")
    if not torch.isfinite(betas).all():
        raise ValidationError("non-finite log-risks")
    ev = events.bool()
    if not ev.any():
        return None
    order = torch.argsort(times, descending=True, stable=True)
    bs, ts, ds = betas[order], times[order], ev[order]
    lcse = torch.logcumsumexp(bs, dim=0)
    # log-denominator for each subject: cumulative sum taken at the last
    # entry sharing its event time
    neg = -ts
    last = torch.searchsorted(neg, neg, right=True) - 1
    denom = lcse[last]
    return -(bs[ds] - denom[ds]).sum()


class FusionModel(nn.Module):
    """Fusion head over precomputed pooled features; see module docstring."""

    def __init__(self, cfg: FusionConfig, scale_widths: tuple[int, int, int, int],
                 d_e: int, prototypes: torch.Tensor | None = None,
                 logit_scale: float = 1.0):
        super().__init__()
        if len(scale_widths) != 4:
            raise ValidationError("expected four scale widths")
        if cfg.gate_mode != "none":
            if cfg.fusion_mode != "multiscale_attention":
                raise ValidationError("prototype gating requires attention fusion")
            if prototypes is None:
                raise ValidationError("gate requires a prototype bank")
            if prototypes.shape[1] != cfg.d:
                raise ValidationError(
                    f"prototype width {prototypes.shape[1]} != fused width {cfg.d}")
        if cfg.fusion_mode == "multiscale_attention" and scale_widths[3] != cfg.d:
            raise ValidationError(
                f"fused width d={cfg.d} must equal the last scale width "
                f"{scale_widths[3]}")
        self.cfg = cfg
        self.d_e = d_e
        self.scale_widths = tuple(scale_widths)
        self.logit_scale = logit_scale
        d = cfg.d
        if prototypes is not None:
            self.register_buffer("prototypes", prototypes.detach().clone())
        else:
            self.prototypes = None
        if cfg.fusion_mode == "multiscale_attention":
            self.scale_proj = nn.ModuleList(nn.Linear(w, d) for w in scale_widths)
            self.w_q = nn.Linear(d_e, d, bias=False)
            self.w_k = nn.Linear(d, d, bias=False)
            self.w_v = nn.Linear(d, d, bias=False)
            self.attn_out = nn.Linear(d, d)
            self.ln = nn.LayerNorm(d, eps=1e-5)
            self.ffn = FeedForward(d)
            head_in = d
        elif cfg.fusion_mode == "concat":
            head_in = scale_widths[3] + d_e
        else:
            head_in = scale_widths[3]
        hidden = max(1, d // 2)
        self.head = nn.Sequential(nn.Linear(head_in, hidden), nn.ReLU(),
                                  nn.Linear(hidden, 1))

    def fuse_step(self, q: torch.Tensor, fbar: torch.Tensor) -> torch.Tensor:
        """One attention update against a single key/value pair."""
        b, d = q.shape
        h = self.cfg.n_heads
        dh = d // h
        k = self.w_k(fbar).view(b, h, dh)
        v = self.w_v(fbar).view(b, h, dh)
        qh = q.view(b, h, dh)
        scores = (qh * k).sum(dim=-1, keepdim=True) / math.sqrt(dh)
        attn = torch.softmax(scores, dim=-1)          # single key: exactly 1
        ctx = (attn * v).reshape(b, d)
        q = q + self.attn_out(ctx)
        return q + self.ffn(self.ln(q))

    def forward(self, pooled: tuple[torch.Tensor, ...],
                covariates: torch.Tensor) -> torch.Tensor:
        """Pooled raw features (4 of shape (B, C_i)) + covariates -> (B,) log-risk."""
        p4 = pooled[3]
        mode = self.cfg.fusion_mode
        if mode == "none":
            return self.head(p4).squeeze(-1)
        if mode == "concat":
            return self.head(torch.cat([p4, covariates], dim=1)).squeeze(-1)
        q = self.w_q(covariates)
        for proj, p in zip(self.scale_proj, pooled):
            q = self.fuse_step(q, proj(p))
        u = prototype_gate(q, p4, self.prototypes, self.cfg.gate_mode,
                           self.logit_scale)
        return self.head(u).squeeze(-1)


def forward_risk(backbone, model: FusionModel, images: torch.Tensor,
                 covariates: torch.Tensor) -> torch.Tensor:
    """Score raw images end to end; no gradient reaches the frozen encoder."""
    from .backbone import global_avg_pool
    from .pretrain import normalize_images

    backbone.eval()
    with torch.no_grad():
        feats = backbone(normalize_images(images))
        pooled = tuple(global_avg_pool(f) for f in feats.as_tuple())
    return model(pooled, covariates)


@dataclass
class Stage2Result:
    model: FusionModel
    history: list[dict]
    best_epoch: int
    best_val_c: float
    val_betas: np.ndarray


def _build_model(cfg, scale_widths, d_e, prototypes, logit_scale):
    init_seed = int(stream(cfg.seed, 0, 5).integers(2 ** 62))
    with torch.random.fork_rng():
        torch.manual_seed(init_seed)
        return FusionModel(cfg, scale_widths, d_e, prototypes, logit_scale)


def train_stage2(pooled: tuple[torch.Tensor, ...], covariates: torch.Tensor,
                 times: np.ndarray, events: np.ndarray, cfg: FusionConfig,
                 train_idx: np.ndarray, val_idx: np.ndarray,
                 prototypes: torch.Tensor | None = None,
                 logit_scale: float = 1.0,
                 verbose: bool = False) -> Stage2Result:
    """Optimize the fusion head on precomputed pooled features.

    Epochs are scored by validation C-index; the best epoch's parameters and
    its validation log-risks are returned. An all-censored validation fold is
    an immediate error because the selection metric would be undefined.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events).astype(bool)
    if not events[val_idx].any():
        raise ValidationError("all-censored validation fold; C-index undefined")
    if not events[train_idx].any():
        raise ValidationError("all-censored training fold")
    model = _build_model(cfg, tuple(p.shape[1] for p in pooled),
                         covariates.shape[1], prototypes, logit_scale)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    times_t = torch.from_numpy(times).float()
    events_t = torch.from_numpy(events.astype(np.float32))
    val_pooled = tuple(p[val_idx] for p in pooled)
    val_cov = covariates[val_idx]

    history = []
    best = {"epoch": -1, "c": -1.0, "state": None}
    for epoch in range(cfg.epochs):
        perm = stream(cfg.seed, epoch, 6).permutation(len(train_idx))
        model.train()
        epoch_loss, n_used = 0.0, 0
        for start in range(0, len(train_idx), cfg.batch_size):
            idx = train_idx[perm[start:start + cfg.batch_size]]
            if len(idx) < 2:
                continue
            betas = model(tuple(p[idx] for p in pooled), covariates[idx])
            loss = cox_loss(betas, times_t[idx], events_t[idx])
            if loss is None:
                continue
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            n_used += len(idx)
        model.eval()
        with torch.no_grad():
            val_betas = model(val_pooled, val_cov).numpy()
        val_c = concordance_index(val_betas, times[val_idx], events[val_idx])
        history.append({"epoch": epoch, "train_loss": epoch_loss / max(n_used, 1),
                        "val_c": val_c})
        if val_c > best["c"]:
            best = {"epoch": epoch, "c": val_c,
                    "state": copy.deepcopy(model.state_dict())}
        if verbose:
            print(f"epoch={epoch} loss={history[-1]['train_loss']:.4f} val_c={val_c:.4f}")
    model.load_state_dict(best["state"])
    model.eval()
    with torch.no_grad():
        val_betas = model(val_pooled, val_cov).numpy()
    return Stage2Result(model, history, best["epoch"], best["c"], val_betas)


def predict_betas(model: FusionModel, pooled: tuple[torch.Tensor, ...],
                  covariates: torch.Tensor,
                  idx: np.ndarray | None = None) -> np.ndarray:
    """Log-risk scores for the given subjects (all of them when idx is None)."""
    if idx is not None:
        pooled = tuple(p[idx] for p in pooled)
        covariates = covariates[idx]
    model.eval()
    with torch.no_grad():
        return model(pooled, covariates).numpy()


def save_stage2(path, model: FusionModel, stage1_hash: str) -> None:
    header = {
        "kind": "stage2",
        "config": {
            "d": model.cfg.d, "n_heads": model.cfg.n_heads,
            "fusion_mode": model.cfg.fusion_mode, "gate_mode": model.cfg.gate_mode,
            "epochs": model.cfg.epochs, "batch_size": model.cfg.batch_size,
            "learning_rate": model.cfg.learning_rate, "seed": model.cfg.seed,
        },
        "scale_widths": list(model.scale_widths),
        "d_e": model.d_e,
        "logit_scale": model.logit_scale,
        "stage1_hash": stage1_hash,
    }
    arrays = state_dict_arrays(model, "fusion")
    save_archive(path, arrays, header)


def load_stage2(path, expect_stage1_hash: str | None = None
                ) -> tuple[FusionModel, dict]:
    arrays, header = load_archive(path)
    if header.get("kind") != "stage2":
        raise ValidationError(f"{path} is not a stage-2 checkpoint")
    if expect_stage1_hash is not None and header["stage1_hash"] != expect_stage1_hash:
        raise ValidationError(
            "stage-2 checkpoint was trained against a different stage-1 "
            f"checkpoint (hash {header['stage1_hash'][:12]}..., "
            f"expected {expect_stage1_hash[:12]}...)")
    cfg = FusionConfig(**header["config"])
    proto = None
    if cfg.gate_mode != "none":
        proto = torch.from_numpy(arrays["fusion.prototypes"])
    model = FusionModel(cfg, tuple(header["scale_widths"]), header["d_e"],
                        proto, header["logit_scale"])
    load_state_arrays(model, arrays, "fusion")
    model.eval()
    return model, header
