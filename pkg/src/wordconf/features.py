"""Per-piece confidence features: ``[embedding; phi; log posterior; top-K]``.

The embedding slot is a subword embedding plus a learned position embedding.
Either slot of log-probability features can be dropped for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class FeatureError(ValueError):
    """Inputs do not fit the feature layout."""


@dataclass(frozen=True)
class FeatureConfig:
    use_topk: bool = True
    use_logpost: bool = True
    dedicated_emb: bool = False

    def width(self, d_emb: int, d_phi: int, K: int) -> int:
        return d_emb + d_phi + int(self.use_logpost) + (K if self.use_topk else 0)


def feature_config(use_topk: bool = True, use_logpost: bool = True,
                   dedicated_emb: bool = False, *, d_emb: int = 32, d_phi: int = 32,
                   K: int = 4) -> tuple[int, FeatureConfig]:
    """Width of ``b`` and the wiring flags for a given ablation."""
    cfg = FeatureConfig(use_topk, use_logpost, dedicated_emb)
    return cfg.width(d_emb, d_phi, K), cfg


def positions(n: int, table_size: int) -> tuple[np.ndarray, bool]:
    """Position ids ``0..n-1`` clamped to the table; flag is True if clamped."""
    pos = np.arange(n)
    return np.minimum(pos, table_size - 1), bool(n > table_size)


def assemble(wp_ids: np.ndarray, phi: np.ndarray, logpost: np.ndarray, topk: np.ndarray,
             emb_table: Tensor, pos_table: Tensor, cfg: FeatureConfig) -> Tensor:
    """Batched feature assembly.

    ``wp_ids`` is (B, M); ``phi`` (B, M, d_phi); ``logpost`` (B, M);
    ``topk`` (B, M, K). Returns a (B, M, width) tensor whose embedding
    slot is differentiable when the tables are.
    """
    wp_ids = np.asarray(wp_ids)
    if wp_ids.size and (wp_ids.min() < 0 or wp_ids.max() >= emb_table.shape[0]):
        raise FeatureError(f"piece id outside embedding table of {emb_table.shape[0]} rows")
    b, m = wp_ids.shape
    if phi.shape[:2] != (b, m) or logpost.shape != (b, m) or topk.shape[:2] != (b, m):
        raise FeatureError("hypothesis arrays are not length-consistent")
    pos, _ = positions(m, pos_table.shape[0])
    emb = ad.take_rows(emb_table, wp_ids) + ad.take_rows(pos_table, pos)
    parts = [emb, Tensor(phi)]
    if cfg.use_logpost:
        parts.append(Tensor(logpost[..., None]))
    if cfg.use_topk:
        parts.append(Tensor(topk))
    return ad.concat(parts, axis=-1)


def build_features(hyp, emb_table, pos_table, cfg: FeatureConfig = FeatureConfig()):
    """Feature matrix (M, width) for a single hypothesis plus a clamp flag."""
    m = len(hyp.wp)
    if hyp.logpost.shape != (m,) or hyp.phi.shape[0] != m or hyp.topk.shape[0] != m:
        raise FeatureError("hypothesis arrays are not length-consistent")
    emb_table = emb_table if isinstance(emb_table, Tensor) else Tensor(emb_table)
    pos_table = pos_table if isinstance(pos_table, Tensor) else Tensor(pos_table)
    out = assemble(np.asarray(hyp.wp)[None], hyp.phi[None], hyp.logpost[None],
                   hyp.topk[None], emb_table, pos_table, cfg)
    return out.data[0], positions(m, pos_table.shape[0])[1]
