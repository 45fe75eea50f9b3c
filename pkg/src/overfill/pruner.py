"""Calibration-driven channel scoring and weight slicing.

Hidden channels are scored globally (one index set shared by every layer,
the embeddings, and the norms) because the residual stream couples them
across layers; FFN intermediate channels are scored per layer. Slicing is
value-preserving: every retained scalar equals the corresponding entry of
the full model, and the attention geometry (and hence the KV cache shape)
is never touched.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .model import KVCache, LayerWeights, ModelConfig, Weights, run_block
from .tensor import Tensor


@dataclass(frozen=True)
class PruneConfig:
    p_hidden: float
    p_intermediate: float
    calib_batches: int = 8
    calib_rows: int = 16
    calib_seq_len: int = 128
    hardware_round_to: Optional[int] = None

    def validate(self) -> "PruneConfig":
        for name in ("p_hidden", "p_intermediate"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ConfigError(f"{name} must be in [0, 1), got {v}")
        if self.calib_batches <= 0 or self.calib_rows <= 0 or self.calib_seq_len <= 0:
            raise ConfigError("calibration dimensions must be positive")
        if self.hardware_round_to is not None and self.hardware_round_to <= 0:
            raise ConfigError("hardware_round_to must be positive when set")
        return self


@dataclass
class ActivationStats:
    """Raw activations at the three per-layer scoring points.

    Each list has one [batch, seq, channels] array per layer; batch spans
    all calibration batches in collection order.
    """
    pre_attn: list[np.ndarray]
    pre_ffn: list[np.ndarray]
    ffn_inner: list[np.ndarray]


@dataclass
class ImportanceScores:
    hidden_scores: np.ndarray          # [hidden_dim], global across layers
    inter_scores: list[np.ndarray]     # per layer [intermediate_dim]


@dataclass
class ChannelSelection:
    hidden_idx: np.ndarray             # sorted, strictly increasing
    inter_idx: list[np.ndarray]        # per layer, sorted
    provenance: dict = field(default_factory=dict)

    def validate_for(self, config: ModelConfig) -> "ChannelSelection":
        def check(idx, limit, what):
            idx = np.asarray(idx)
            if idx.ndim != 1 or idx.size < 1:
                raise ConfigError(f"{what}: selection must be a non-empty 1-D index list")
            if not np.all(np.diff(idx) > 0):
                raise ConfigError(f"{what}: indices must be strictly increasing")
            if idx[0] < 0 or idx[-1] >= limit:
                raise ConfigError(f"{what}: index out of range [0, {limit})")

        check(self.hidden_idx, config.hidden_dim, "hidden_idx")
        if len(self.inter_idx) != config.n_layers:
            raise ConfigError(
                f"inter_idx has {len(self.inter_idx)} layers, model has {config.n_layers}")
        for li, idx in enumerate(self.inter_idx):
            check(idx, config.intermediate_dim, f"inter_idx[{li}]")
        return self

    def to_json(self) -> str:
        doc = {
            "hidden_idx": [int(i) for i in self.hidden_idx],
            "inter_idx": [[int(i) for i in idx] for idx in self.inter_idx],
            "provenance": self.provenance,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ChannelSelection":
        try:
            doc = json.loads(text)
            return cls(
                hidden_idx=np.asarray(doc["hidden_idx"], dtype=np.int64),
                inter_idx=[np.asarray(x, dtype=np.int64) for x in doc["inter_idx"]],
                provenance=doc.get("provenance", {}),
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"malformed channel selection: {exc}") from exc

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ChannelSelection":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"selection not found: {path}")
        return cls.from_json(path.read_text())


def identity_selection(config: ModelConfig) -> ChannelSelection:
    """Keep every channel; slicing with this reproduces the model exactly."""
    return ChannelSelection(
        hidden_idx=np.arange(config.hidden_dim, dtype=np.int64),
        inter_idx=[np.arange(config.intermediate_dim, dtype=np.int64)
                   for _ in range(config.n_layers)],
        provenance={"identity": True},
    )


def compute_pruned_dims(hidden_dim: int, intermediate_dim: int,
                        cfg: PruneConfig) -> tuple[int, int]:
    """Retained widths: floor((1 - ratio) * dim), optionally rounded down
    to a hardware-friendly multiple."""
    cfg.validate()
    d_kept = math.floor((1.0 - cfg.p_hidden) * hidden_dim)
    i_kept = math.floor((1.0 - cfg.p_intermediate) * intermediate_dim)
    if cfg.hardware_round_to:
        d_kept -= d_kept % cfg.hardware_round_to
        i_kept -= i_kept % cfg.hardware_round_to
    if d_kept < 1 or i_kept < 1:
        raise ConfigError(
            f"pruned dims must be >= 1, got hidden {d_kept}, intermediate {i_kept}")
    return d_kept, i_kept


def collect_activations(w: Weights, calib: Sequence[np.ndarray]) -> ActivationStats:
    """Run calibration batches through the model, tapping the three scoring
    points per layer: post attention-norm, post FFN-norm, and the gated FFN
    inner activation just before the down projection."""
    if len(calib) == 0:
        raise DataError("calibration set is empty")
    cfg = w.config
    per_layer = {p: [[] for _ in range(cfg.n_layers)]
                 for p in ("pre_attn", "pre_ffn", "ffn_inner")}
    for batch in calib:
        batch = np.asarray(batch)
        if batch.ndim != 2:
            raise DataError(f"calibration batch must be [rows, seq], got {batch.shape}")
        rows = {p: [[] for _ in range(cfg.n_layers)] for p in per_layer}

        for row in batch:
            def tap(layer, point, act):
                rows[point][layer].append(act.copy())

            run_block(w, row, KVCache.for_config(cfg, dtype=w.token_embedding.dtype),
                      tap=tap)
        for point, layers in rows.items():
            for li, acts in enumerate(layers):
                per_layer[point][li].append(np.stack(acts))  # [rows, seq, C]
    return ActivationStats(
        pre_attn=[np.concatenate(per_layer["pre_attn"][li]) for li in range(cfg.n_layers)],
        pre_ffn=[np.concatenate(per_layer["pre_ffn"][li]) for li in range(cfg.n_layers)],
        ffn_inner=[np.concatenate(per_layer["ffn_inner"][li]) for li in range(cfg.n_layers)],
    )


def _hook_score(act: np.ndarray) -> np.ndarray:
    """L2 norm across the batch axis, then mean across sequence positions."""
    a = act.astype(np.float64)
    return np.sqrt((a * a).sum(axis=0)).mean(axis=0)


def score_channels(stats: ActivationStats) -> ImportanceScores:
    if not stats.pre_attn:
        raise DataError("activation stats are empty")
    hidden = np.zeros(stats.pre_attn[0].shape[-1], dtype=np.float64)
    for pre_attn, pre_ffn in zip(stats.pre_attn, stats.pre_ffn):
        hidden += _hook_score(pre_attn) + _hook_score(pre_ffn)
    inter = [_hook_score(a) for a in stats.ffn_inner]
    return ImportanceScores(hidden_scores=hidden, inter_scores=inter)


def _top_k_sorted(scores: np.ndarray, k: int) -> np.ndarray:
    # Stable sort on negated scores: ties resolve toward the lower index.
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k]).astype(np.int64)


def select_channels(scores: ImportanceScores, d_kept: int, i_kept: int) -> ChannelSelection:
    if d_kept > scores.hidden_scores.size:
        raise ConfigError(f"cannot keep {d_kept} of {scores.hidden_scores.size} hidden channels")
    for li, s in enumerate(scores.inter_scores):
        if i_kept > s.size:
            raise ConfigError(f"cannot keep {i_kept} of {s.size} channels in layer {li}")
    return ChannelSelection(
        hidden_idx=_top_k_sorted(scores.hidden_scores, d_kept),
        inter_idx=[_top_k_sorted(s, i_kept) for s in scores.inter_scores],
    )


def slice_model(w: Weights, sel: ChannelSelection,
                full_cfg: ModelConfig) -> tuple[Weights, ModelConfig]:
    """Materialize the pruned weights: keep selected hidden rows/columns in
    every projection, embedding, and norm; keep selected intermediate
    columns/rows in the FFN. Attention width and kv geometry are untouched."""
    if w.config != full_cfg:
        raise ConfigError("weights do not belong to the given full config")
    sel.validate_for(full_cfg)
    h = np.asarray(sel.hidden_idx)
    pruned_cfg = replace(
        full_cfg, hidden_dim=int(h.size),
        intermediate_dim=int(np.asarray(sel.inter_idx[0]).size))
    layers = []
    for li, lw in enumerate(w.layers):
        m = np.asarray(sel.inter_idx[li])
        layers.append(LayerWeights(
            attn_norm_gamma=Tensor(lw.attn_norm_gamma.data[h].copy()),
            w_q=Tensor(lw.w_q.data[h, :].copy()),
            w_k=Tensor(lw.w_k.data[h, :].copy()),
            w_v=Tensor(lw.w_v.data[h, :].copy()),
            w_o=Tensor(lw.w_o.data[:, h].copy()),
            ffn_norm_gamma=Tensor(lw.ffn_norm_gamma.data[h].copy()),
            w_gate=Tensor(lw.w_gate.data[np.ix_(h, m)].copy()),
            w_up=Tensor(lw.w_up.data[np.ix_(h, m)].copy()),
            w_down=Tensor(lw.w_down.data[np.ix_(m, h)].copy()),
        ))
    lm_head = None
    if w.lm_head is not None:
        lm_head = Tensor(w.lm_head.data[h, :].copy())
    pruned = Weights(
        config=pruned_cfg,
        token_embedding=Tensor(w.token_embedding.data[:, h].copy()),
        layers=layers,
        final_norm_gamma=Tensor(w.final_norm_gamma.data[h].copy()),
        lm_head=lm_head,
    )
    return pruned, pruned_cfg


def prune_pipeline(w: Weights, calib: Sequence[np.ndarray], cfg: PruneConfig,
                   provenance: Optional[dict] = None
                   ) -> tuple[Weights, ModelConfig, ChannelSelection]:
    """Calibrate, score, select, slice: the whole path from full weights to
    a cache-compatible pruned model."""
    d_kept, i_kept = compute_pruned_dims(
        w.config.hidden_dim, w.config.intermediate_dim, cfg)
    stats = collect_activations(w, calib)
    scores = score_channels(stats)
    sel = select_channels(scores, d_kept, i_kept)
    sel.provenance = dict(provenance or {})
    sel.provenance.update({"p_hidden": cfg.p_hidden,
                           "p_intermediate": cfg.p_intermediate})
    pruned, pruned_cfg = slice_model(w, sel, w.config)
    return pruned, pruned_cfg, sel
