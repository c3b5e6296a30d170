"""Shared vector-quantization codebook for node states.

A node state is projected to a D-dim latent, snapped to the nearest of K
trainable codewords, and only the codeword index goes on the air.  Receivers
look the codeword up and run it through the projection decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Mlp, Tape, TapeError, Var, mlp_apply, mlp_forward

ENCODER = "proj_encoder"
DECODER = "proj_decoder"
CODEBOOK = "codebook"


def encoder_net(M: int, D: int) -> Mlp:
    return Mlp(ENCODER, (M, 16, D))


def decoder_net(M: int, D: int) -> Mlp:
    return Mlp(DECODER, (D, 16, M))


def init_codebook(K: int, D: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1.0 / K, 1.0 / K, size=(K, D))


def index_bits(K: int) -> int:
    """Wire width of a codeword index, ``ceil(log2 K)``."""
    if K < 1:
        raise ValueError("codebook needs at least one codeword")
    return (K - 1).bit_length()


def index_to_binary(k: int, K: int) -> str:
    width = index_bits(K)
    return format(k, f"0{width}b") if width else ""


def nearest_codeword(latents, codebook: np.ndarray) -> np.ndarray:
    """Index of the closest codeword per row (Euclidean), lowest index on ties.

    Distances come from the ``|a|^2 - 2ab + |b|^2`` expansion; rows whose best
    two candidates are within rounding of each other are re-scored exactly.
    """
    latents = np.asarray(latents, dtype=np.float64)
    single = latents.ndim == 1
    lat = np.atleast_2d(latents)
    if lat.shape[1] != codebook.shape[1]:
        raise TapeError(f"latent width {lat.shape[1]} != codeword width {codebook.shape[1]}")
    d2 = (
        np.sum(lat * lat, axis=1, keepdims=True)
        - 2.0 * lat @ codebook.T
        + np.sum(codebook * codebook, axis=1)
    )
    best = np.argmin(d2, axis=1)
    best_d = d2[np.arange(len(lat)), best]
    scale = np.sum(lat * lat, axis=1) + np.max(np.sum(codebook * codebook, axis=1)) + 1.0
    tol = 1e-9 * scale
    close = d2 <= (best_d + tol)[:, None]
    ambiguous = np.flatnonzero(close.sum(axis=1) > 1)
    for r in ambiguous:
        cand = np.flatnonzero(close[r])
        exact = np.sum((codebook[cand] - lat[r]) ** 2, axis=1)
        best[r] = cand[np.argmin(exact)]
    return int(best[0]) if single else best


def project_encode(tape: Tape, params, h: Var) -> Var:
    M = h.value.shape[1]
    D = params[CODEBOOK].shape[1]
    return mlp_forward(tape, encoder_net(M, D), params, h)


def project_decode(tape: Tape, params, v: Var) -> Var:
    M = params[f"{DECODER}.layer1.weight"].shape[0]
    D = params[CODEBOOK].shape[1]
    return mlp_forward(tape, decoder_net(M, D), params, v)


@dataclass
class Quantized:
    index: np.ndarray
    latent: Var
    codeword: Var


def quantize(tape: Tape, params, h: Var) -> Quantized:
    """Encode, snap to the codebook, and look the codeword up (differentiably)."""
    latent = project_encode(tape, params, h)
    book = tape.param(CODEBOOK, params[CODEBOOK])
    index = tape.choose(lambda: nearest_codeword(latent.value, book.value))
    return Quantized(index, latent, tape.gather(book, index))


def decode_index(index, params) -> np.ndarray:
    """Recover node states from received indices (inference, no tape)."""
    book = params[CODEBOOK]
    index = np.atleast_1d(np.asarray(index))
    if np.any(index < 0) or np.any(index >= len(book)):
        raise IndexError(f"codeword index out of range [0, {len(book)})")
    M = params[f"{DECODER}.layer1.weight"].shape[0]
    return mlp_apply(decoder_net(M, book.shape[1]), params, book[index])


@dataclass
class VqLossTerms:
    """Three 1x1 tape values, each a sum over rows of squared norms."""

    reconstruction: Var
    codebook_term: Var
    commitment_term: Var

    def values(self) -> tuple[float, float, float]:
        return (
            float(self.reconstruction.value[0, 0]),
            float(self.codebook_term.value[0, 0]),
            float(self.commitment_term.value[0, 0]),
        )


def vq_loss(tape: Tape, params, h: Var, q: Quantized, beta: float, recovered: Var | None = None) -> VqLossTerms:
    """Reconstruction, codebook and (beta-weighted) commitment terms.

    ``recovered`` is ``ProjDecoder(straight_through(latent, codeword))``; pass
    it in when the forward pass has already computed it.
    """
    if recovered is None:
        recovered = project_decode(tape, params, tape.straight_through(q.latent, q.codeword))
    reconstruction = tape.sum_squares(tape.sub(h, recovered))
    codebook_term = tape.sum_squares(tape.sub(tape.stop_gradient(q.latent), q.codeword))
    commitment = tape.scale(
        tape.sum_squares(tape.sub(q.latent, tape.stop_gradient(q.codeword))), beta
    )
    return VqLossTerms(reconstruction, codebook_term, commitment)


def codebook_utilization(indices, K: int) -> float:
    """Fraction of codewords used at least once."""
    used = np.unique(np.concatenate([np.ravel(i) for i in indices])) if len(indices) else []
    return len(used) / K


def index_entropy_bits(indices) -> float:
    counts = np.bincount(np.concatenate([np.ravel(i) for i in indices]))
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum()) if len(p) else 0.0

