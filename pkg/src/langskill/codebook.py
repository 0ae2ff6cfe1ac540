"""
Quantized skill codebook: nearest-code lookup, straight-through output, commitment
loss, exponential-moving-average updates and usage diagnostics.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from langskill import autodiff as ad
from langskill.autodiff import Tensor
from langskill.errors import GatherIndexError, NonFiniteError, ShapeError

DEFAULT_DECAY = 0.99
DEFAULT_LAPLACE_EPS = 1e-5

log = logging.getLogger(__name__)


@dataclass
class QuantizeResult:
    """
    Output of a codebook lookup.

    ``straight_through_output`` forward-equals ``code_vector`` and passes its gradient
    unchanged to the encoder output.
    """

    code_index: int
    code_vector: np.ndarray
    commitment_loss: Tensor
    straight_through_output: Tensor


class Codebook:
    """K skill codes of dimension D trained by moving averages rather than gradients."""

    def __init__(
        self,
        num_codes: int,
        code_dim: int,
        rng: Optional[np.random.Generator] = None,
        decay: float = DEFAULT_DECAY,
        laplace_eps: float = DEFAULT_LAPLACE_EPS,
    ) -> None:
        """
        Initialize the Codebook object.

        Rows are drawn from N(0, 1/D). Moving-average counts and sums start at zero; a code
        keeps its initial row until it is first assigned.

        :param num_codes: Number of codes K
        :type num_codes: int
        :param code_dim: Code dimension D
        :type code_dim: int
        :param rng: Generator for the initial rows
        :type rng: np.random.Generator, optional
        :param decay: Moving-average decay in (0, 1), defaults to 0.99
        :type decay: float, optional
        :param laplace_eps: Laplace smoothing constant, defaults to 1e-5
        :type laplace_eps: float, optional
        """
        if num_codes <= 0 or code_dim <= 0:
            raise ValueError(f"codebook needs positive K and D but K={num_codes}, D={code_dim} given")
        if not 0.0 < decay < 1.0:
            raise ValueError(f"decay must lie in (0, 1) but {decay} given")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_codes = num_codes
        self.code_dim = code_dim
        self.decay = decay
        self.laplace_eps = laplace_eps
        self.vectors = rng.normal(0.0, 1.0 / np.sqrt(code_dim), size=(num_codes, code_dim))
        self.ema_cluster_size = np.zeros(num_codes)
        self.ema_sum = np.zeros((num_codes, code_dim))

    @property
    def K(self) -> int:
        return self.num_codes

    @property
    def D(self) -> int:
        return self.code_dim

    def state_arrays(self) -> dict:
        return {
            "codebook.vectors": self.vectors,
            "codebook.ema_cluster_size": self.ema_cluster_size,
            "codebook.ema_sum": self.ema_sum,
        }

    def load_state_arrays(self, arrays: dict) -> None:
        vectors = np.asarray(arrays["codebook.vectors"], dtype=np.float64)
        if vectors.shape != self.vectors.shape:
            raise ShapeError("codebook", vectors.shape, self.vectors.shape)
        self.vectors = vectors.copy()
        self.ema_cluster_size = np.asarray(arrays["codebook.ema_cluster_size"], dtype=np.float64).copy()
        self.ema_sum = np.asarray(arrays["codebook.ema_sum"], dtype=np.float64).copy()

    def nearest(self, z_tilde: np.ndarray) -> int:
        """Index of the closest row; ``np.argmin`` returns the lowest index on ties."""
        distances = np.sum((self.vectors - z_tilde) ** 2, axis=1)
        return int(np.argmin(distances))

    def quantize(self, z_tilde: Tensor) -> QuantizeResult:
        return quantize(self, z_tilde)

    def ema_update(self, assignments: Iterable[Tuple[int, np.ndarray]]) -> None:
        ema_update(self, assignments)


def quantize(codebook: Codebook, z_tilde: Tensor) -> QuantizeResult:
    """
    Map an encoder output to its nearest code.

    :param codebook: Codebook to search
    :type codebook: Codebook
    :param z_tilde: Encoder output of length D
    :type z_tilde: Tensor
    :return: Index, code vector, commitment loss and straight-through output
    :rtype: QuantizeResult
    :raises ShapeError: If the length is not D
    :raises NonFiniteError: If the input holds NaN or infinity
    """
    if z_tilde.shape != (codebook.code_dim,):
        raise ShapeError("quantize", z_tilde.shape, (codebook.code_dim,))
    if not np.all(np.isfinite(z_tilde.values)):
        raise NonFiniteError("non-finite skill embedding", where="quantize input")
    index = codebook.nearest(z_tilde.values)
    code_vector = codebook.vectors[index].copy()
    commitment = ad.sum_(ad.square(ad.subtract(z_tilde, Tensor(code_vector))))
    return QuantizeResult(
        code_index=index,
        code_vector=code_vector,
        commitment_loss=commitment,
        straight_through_output=ad.straight_through(z_tilde, code_vector),
    )


def ema_update(codebook: Codebook, assignments: Iterable[Tuple[int, np.ndarray]]) -> None:
    """
    Move every code toward the mean of the encoder outputs assigned to it.

    Counts and sums decay for every code; the denominator is Laplace-smoothed over the
    total count so a code with no assignments never divides by zero. A code that was
    never assigned keeps its row, and an empty batch leaves every row unchanged.

    :param codebook: Codebook updated in place (single writer)
    :type codebook: Codebook
    :param assignments: (code index, z_tilde) pairs from this step's lookups
    :type assignments: iterable
    :raises GatherIndexError: If an index is outside [0, K)
    """
    assignments = list(assignments)
    if not assignments:
        log.debug("empty assignment batch, codebook unchanged")
        return
    indices = np.array([index for index, _ in assignments], dtype=np.int64)
    if indices.min() < 0 or indices.max() >= codebook.num_codes:
        raise GatherIndexError(f"code index outside [0, {codebook.num_codes})")
    points = np.stack([np.asarray(z, dtype=np.float64).reshape(codebook.code_dim) for _, z in assignments])
    counts = np.bincount(indices, minlength=codebook.num_codes).astype(np.float64)
    sums = np.zeros_like(codebook.vectors)
    np.add.at(sums, indices, points)

    decay = codebook.decay
    codebook.ema_cluster_size = decay * codebook.ema_cluster_size + (1.0 - decay) * counts
    codebook.ema_sum = decay * codebook.ema_sum + (1.0 - decay) * sums
    total = codebook.ema_cluster_size.sum()
    eps = codebook.laplace_eps
    smoothed = (codebook.ema_cluster_size + eps) / (total + codebook.num_codes * eps) * total
    used = codebook.ema_cluster_size > 0
    vectors = codebook.vectors.copy()
    vectors[used] = codebook.ema_sum[used] / smoothed[used, None]
    codebook.vectors = vectors


def perplexity(codebook: Optional[Codebook], recent_indices: Sequence[int]) -> float:
    """
    Exponentiated Shannon entropy (natural log) of the empirical code distribution.

    :param codebook: Codebook the indices point into; None skips the range check
    :type codebook: Codebook, optional
    :param recent_indices: Recently used code indices
    :type recent_indices: Sequence[int]
    :return: Value in [1, K]
    :rtype: float
    :raises ValueError: If ``recent_indices`` is empty
    :raises GatherIndexError: If an index is outside [0, K)
    """
    indices = np.asarray(list(recent_indices), dtype=np.int64)
    if indices.size == 0:
        raise ValueError("perplexity of an empty index list is undefined")
    num_codes = codebook.num_codes if codebook is not None else 0
    if codebook is not None and (indices.min() < 0 or indices.max() >= num_codes):
        raise GatherIndexError(f"code index outside [0, {num_codes})")
    counts = np.bincount(indices, minlength=num_codes)
    probs = counts[counts > 0] / indices.size
    return float(np.exp(-np.sum(probs * np.log(probs))))


def _entropy_bits(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log2(probs), 0.0)
    return -terms.sum(axis=-1)


def mi_estimate(codebook: Codebook, embeddings: np.ndarray) -> float:
    """
    Mutual information in bits between skill codes and the language/state inputs.

    Treats p(input | code) as Gaussian around each row: conditional code probabilities
    are a softmax of half the negative squared distances, the marginal is their batch
    mean, and the estimate is H(marginal) minus the mean conditional entropy.

    :param codebook: Codebook providing the rows
    :type codebook: Codebook
    :param embeddings: Pre-quantization skill embeddings of shape (B, D)
    :type embeddings: np.ndarray
    :return: Estimate in [0, log2 K]
    :rtype: float
    :raises ShapeError: If the second axis is not D or the batch is empty
    """
    z = np.asarray(embeddings.values if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != codebook.code_dim or z.shape[0] == 0:
        raise ShapeError("mi_estimate", z.shape, (codebook.code_dim,))
    codes = codebook.vectors
    distance = -(
        np.sum(z**2, axis=1, keepdims=True) - 2.0 * z @ codes.T + np.sum(codes**2, axis=1)[None, :]
    )
    logits = distance / 2.0
    logits = logits - logits.max(axis=1, keepdims=True)
    cond_probs = np.exp(logits)
    cond_probs /= cond_probs.sum(axis=1, keepdims=True)
    marginal = cond_probs.mean(axis=0)
    value = float(_entropy_bits(marginal) - _entropy_bits(cond_probs).mean())
    return max(value, 0.0) + 0.0
