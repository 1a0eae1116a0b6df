"""Single-level orthonormal Haar DWT and frequency-guided cross-attention.

Subband convention for a 2x2 block [[a, b], [c, d]] (rows are y):
LL = (a+b+c+d)/2, HL = (a-b+c-d)/2 (x detail), LH = (a+b-c-d)/2 (y detail),
HH = (a-b-c+d)/2. A horizontal step edge (variation along y) lands in LH.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class SubbandSet:
    ll: torch.Tensor
    hl: torch.Tensor
    lh: torch.Tensor
    hh: torch.Tensor
    orig_h: int
    orig_w: int

    def stack(self) -> torch.Tensor:
        return torch.stack([self.ll, self.hl, self.lh, self.hh])


def _pad_to_even(f: torch.Tensor) -> torch.Tensor:
    h, w = f.shape[-2], f.shape[-1]
    ph, pw = h % 2, w % 2
    if ph == 0 and pw == 0:
        return f
    lead = f.shape[:-2]
    x = f.reshape(-1, 1, h, w)
    # reflect needs dim >= 2; replicate covers 1-wide maps
    mode = "reflect" if h > 1 and w > 1 else "replicate"
    x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return x.reshape(*lead, h + ph, w + pw)


def dwt2(f: torch.Tensor) -> SubbandSet:
    """Orthonormal single-level Haar transform over the last two dims."""
    if f.numel() == 0:
        raise ValueError("empty feature map")
    orig_h, orig_w = f.shape[-2], f.shape[-1]
    f = _pad_to_even(f)
    a = f[..., 0::2, 0::2]
    b = f[..., 0::2, 1::2]
    c = f[..., 1::2, 0::2]
    d = f[..., 1::2, 1::2]
    return SubbandSet(
        ll=(a + b + c + d) * 0.5,
        hl=(a - b + c - d) * 0.5,
        lh=(a + b - c - d) * 0.5,
        hh=(a - b - c + d) * 0.5,
        orig_h=orig_h,
        orig_w=orig_w,
    )


def idwt2(s: SubbandSet) -> torch.Tensor:
    """Exact inverse of dwt2, cropped back to the original size."""
    if not (s.ll.shape == s.hl.shape == s.lh.shape == s.hh.shape):
        raise ValueError("subband shape mismatch")
    ll, hl, lh, hh = s.ll, s.hl, s.lh, s.hh
    a = (ll + hl + lh + hh) * 0.5
    b = (ll - hl + lh - hh) * 0.5
    c = (ll + hl - lh - hh) * 0.5
    d = (ll - hl - lh + hh) * 0.5
    lead = ll.shape[:-2]
    h2, w2 = ll.shape[-2], ll.shape[-1]
    out = torch.zeros(*lead, h2 * 2, w2 * 2, dtype=ll.dtype)
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = c
    out[..., 1::2, 1::2] = d
    return out[..., : s.orig_h, : s.orig_w]


@dataclass
class AttentionParams:
    """Bias-free projections for frequency-guided cross-attention.

    wq: (C', Cq), wk: (C', Cb), wv: (C', Cb), wo: (Cq, C'). The output
    projection maps the attended C' features back onto the query channels
    for the residual sum.
    """
    wq: torch.Tensor
    wk: torch.Tensor
    wv: torch.Tensor
    wo: torch.Tensor
    heads: int = 2

    def __post_init__(self) -> None:
        c_prime = self.wq.shape[0]
        if c_prime % self.heads != 0:
            raise ValueError(f"C'={c_prime} not divisible by heads={self.heads}")

    @property
    def c_prime(self) -> int:
        return self.wq.shape[0]

    def tensors(self) -> dict[str, torch.Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}


def init_attention(c_query: int, c_band: int, c_prime: int = 32, heads: int = 2,
                   seed: int = 0, dtype=torch.float32) -> AttentionParams:
    g = torch.Generator().manual_seed(seed)

    def lin(rows, cols):
        bound = 1.0 / math.sqrt(cols)
        return (torch.rand(rows, cols, generator=g, dtype=dtype) * 2 - 1) * bound

    return AttentionParams(wq=lin(c_prime, c_query), wk=lin(c_prime, c_band),
                           wv=lin(c_prime, c_band), wo=lin(c_query, c_prime), heads=heads)


def fgca(query_feat: torch.Tensor, band: torch.Tensor, params: AttentionParams) -> torch.Tensor:
    """Cross-attention from query features onto a frequency band, residual-added.

    query_feat: (Cq, H, W); band: (Cb, hb, wb). The query is downsampled to
    the band resolution, attended (softmax(q k^T / sqrt(C')) v per head),
    projected back to Cq, bilinearly upsampled, and added to query_feat.
    """
    cq, H, W = query_feat.shape
    cb, hb, wb = band.shape
    if params.wq.shape[1] != cq:
        raise ValueError(f"query channels {cq} != wq expects {params.wq.shape[1]}")
    if params.wk.shape[1] != cb:
        raise ValueError(f"band channels {cb} != wk expects {params.wk.shape[1]}")

    if (H, W) != (hb, wb):
        q_ds = F.interpolate(query_feat.unsqueeze(0), size=(hb, wb),
                             mode="bilinear", align_corners=False).squeeze(0)
    else:
        q_ds = query_feat
    tq = q_ds.reshape(cq, hb * wb).T      # (T, Cq)
    tb = band.reshape(cb, hb * wb).T      # (T, Cb)

    nh = params.heads
    dh = params.c_prime // nh
    q = (tq @ params.wq.T).reshape(-1, nh, dh).transpose(0, 1)  # (nh, T, dh)
    k = (tb @ params.wk.T).reshape(-1, nh, dh).transpose(0, 1)
    v = (tb @ params.wv.T).reshape(-1, nh, dh).transpose(0, 1)

    # paper formula scales by sqrt(C'), not per-head dim
    logits = q @ k.transpose(-1, -2) / math.sqrt(params.c_prime)
    attn = torch.softmax(logits, dim=-1)
    out = attn @ v                                  # (nh, T, dh)
    out = out.transpose(0, 1).reshape(-1, params.c_prime)  # (T, C')
    out = out @ params.wo.T                         # (T, Cq)
    out_map = out.T.reshape(cq, hb, wb)
    if (H, W) != (hb, wb):
        out_map = F.interpolate(out_map.unsqueeze(0), size=(H, W),
                                mode="bilinear", align_corners=False).squeeze(0)
    return out_map + query_feat
