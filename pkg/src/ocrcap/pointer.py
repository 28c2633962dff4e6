"""Pointer-generator channel: generation probability, copy distribution, mixture.

The copy term only looks at attention mass on OCR positions (rows at or after
the region count) and renormalizes it, so that both mixture components are
proper distributions and the mixture sums to one.
"""
from dataclasses import dataclass

import numpy as np

from ocrcap import autodiff as ad
from ocrcap.autodiff import Tensor


class NoCopyChannel(ValueError):
    """The image has no OCR positions to copy from."""


@dataclass(frozen=True)
class CopyLayout:
    """Where each OCR position lands in an image's extended id space.

    OCR tokens missing from the extended vocabulary get image-local ids
    ``len(ext_vocab) + k`` in order of first occurrence.
    """

    ids: tuple
    local_tokens: tuple
    size: int
    fixed_size: int

    def token_id(self, token, ext_vocab):
        i = ext_vocab.lookup(token)
        if i is not None:
            return i
        if token in self.local_tokens:
            return len(ext_vocab) + self.local_tokens.index(token)
        return None


def copy_layout(ocr_tokens, ext_vocab):
    ids, local = [], []
    for tok in ocr_tokens:
        i = ext_vocab.lookup(tok)
        if i is None:
            if tok not in local:
                local.append(tok)
            i = len(ext_vocab) + local.index(tok)
        ids.append(i)
    return CopyLayout(tuple(ids), tuple(local), len(ext_vocab) + len(local), ext_vocab.fixed_size)


@dataclass
class ExtendedDistribution:
    probs: np.ndarray
    fixed_size: int
    layout: CopyLayout = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)


def generation_probability(step, params):
    """``sigmoid(w_h . c_t + w_s . h_t + w_x . x_t + b_ptr)`` as a (1, 1) tensor."""
    for name, v in (("c_t", step.c_t), ("h_t", step.h_t), ("x_t", step.x_t)):
        if v.shape[1] != params["ptr.w_h"].shape[0]:
            raise ad.ShapeError(f"generation_probability: {name} has shape {v.shape}")
    logit = (
        step.c_t @ params["ptr.w_h"]
        + step.h_t @ params["ptr.w_s"]
        + step.x_t @ params["ptr.w_x"]
        + params["ptr.b"]
    )
    return ad.sigmoid(logit)


def copy_distribution(a_t, region_count, layout):
    """Renormalized OCR attention scattered onto extended ids, shape (1, size)."""
    n_ocr = len(layout.ids)
    if n_ocr == 0:
        raise NoCopyChannel("image has no OCR tokens; force p_gen = 1")
    if a_t.shape != (1, region_count + n_ocr):
        raise ad.ShapeError(
            f"copy_distribution: attention {a_t.shape} does not cover "
            f"{region_count} regions + {n_ocr} OCR positions"
        )
    ocr_mass = ad.slice_cols(a_t, region_count, region_count + n_ocr)
    renorm = ad.hadamard(ocr_mass, ad.reciprocal(ad.tsum(ocr_mass)))
    return ad.scatter_add_cols(renorm, layout.ids, layout.size)


def mix(p_vocab, copy_dist, p_gen, size):
    """``p_gen * P_vocab + (1 - p_gen) * copy`` over ``size`` extended ids.

    ``P_vocab`` is zero-padded above its own width; ``copy_dist=None`` means no
    copy channel, in which case ``p_gen`` must be exactly 1.
    """
    g = p_gen.item()
    pad = size - p_vocab.shape[1]
    if pad < 0:
        raise ad.ShapeError(f"mix: p_vocab width {p_vocab.shape[1]} exceeds size {size}")
    padded = p_vocab if pad == 0 else ad.concat([p_vocab, Tensor(np.zeros((1, pad)))], axis=1)
    if copy_dist is None:
        if g != 1.0:
            raise ValueError("mix: without a copy channel p_gen must be 1")
        return padded
    if not 0.0 < g < 1.0:
        raise ValueError(f"mix: p_gen must lie strictly in (0, 1), got {g}")
    if copy_dist.shape != (1, size):
        raise ad.ShapeError(f"mix: copy distribution {copy_dist.shape} != (1, {size})")
    return ad.hadamard(padded, p_gen) + ad.hadamard(copy_dist, 1.0 - p_gen)


def mix_numpy(p_vocab, copy_dist, p_gen):
    """Plain-array mixture, for callers outside the autodiff graph."""
    p_vocab = np.asarray(p_vocab, dtype=np.float64).reshape(-1)
    copy_dist = np.asarray(copy_dist, dtype=np.float64).reshape(-1)
    if not 0.0 < p_gen < 1.0:
        raise ValueError(f"mix: p_gen must lie strictly in (0, 1), got {p_gen}")
    out = (1.0 - p_gen) * copy_dist
    out[: p_vocab.size] += p_gen * p_vocab
    return out
