"""Gaussian primitives for conditionally Gaussian classifiers.

Covers the |rho|^(3/2) deviation parametrization, parameter sampling, the
conditional output moments of the last linear layer, the closed-form binary
error probability, the two unbiased Monte-Carlo estimators of the multiclass
error probability (with their exact pathwise gradients in M and V), and the
diagonal-Gaussian KL divergence between posterior and frozen prior.

Classes are numbered from 1 throughout, matching the label convention of the
datasets module.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .rng import RngStream

__all__ = [
    "ConditionalHead",
    "GaussianParamGroup",
    "SampledLayer",
    "std_normal_cdf",
    "std_normal_pdf",
    "binary_error_prob",
    "estimator_L1",
    "estimator_L2",
    "l1_samples",
    "l2_samples",
    "argmax_error_frequency",
    "conditional_moments",
    "kl_diag_gauss",
    "sigma_of_rho",
    "sample_gaussian",
    "VARIANCE_FLOOR",
]

# Conditional variances are clamped here before any division or square root;
# training could drive the bias deviations toward zero otherwise.
VARIANCE_FLOOR = 1e-12


def std_normal_cdf(t):
    """Standard normal CDF psi(t) = (1 + erf(t/sqrt(2))) / 2, vectorized."""
    return ndtr(t)


def std_normal_pdf(t):
    return np.exp(-0.5 * np.square(t)) / math.sqrt(2.0 * math.pi)


def sigma_of_rho(rho):
    """Deviation sigma = |rho|^(3/2) and its derivative w.r.t. rho.

    The derivative is (3/2) sqrt(|rho|) sign(rho), taken as 0 at rho = 0.
    Works on scalars and arrays.
    """
    rho = np.asarray(rho, dtype=np.float64)
    a = np.abs(rho)
    sigma = a ** 1.5
    dsigma = 1.5 * np.sqrt(a) * np.sign(rho)
    if sigma.ndim == 0:
        return float(sigma), float(dsigma)
    return sigma, dsigma


@dataclass
class ConditionalHead:
    """Conditional mean M and diagonal variance V of the output layer.

    M and V have shape [..., q] with q >= 2; V is strictly positive (entries
    are floored at VARIANCE_FLOOR by the constructor path).
    """

    M: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        if self.M.shape != self.V.shape:
            raise ValueError(f"M and V shapes differ: {self.M.shape} vs {self.V.shape}")
        if self.M.shape[-1] < 2:
            raise ValueError("a conditional head needs at least two classes")
        if np.any(self.V <= 0):
            raise ValueError("conditional variances must be strictly positive")

    @property
    def q(self) -> int:
        return self.M.shape[-1]


@dataclass
class GaussianParamGroup:
    """Means and raw deviations for one layer's weight matrix and bias.

    The actual deviations are always derived as sigma = |rho|^(3/2), never
    stored. Prior copies (means and sigmas) are populated by freeze_prior and
    made read-only; the KL divergence is computed against them.
    """

    w_mean: np.ndarray
    w_rho: np.ndarray
    b_mean: np.ndarray
    b_rho: np.ndarray
    prior_w_mean: np.ndarray | None = field(default=None, repr=False)
    prior_w_sigma: np.ndarray | None = field(default=None, repr=False)
    prior_b_mean: np.ndarray | None = field(default=None, repr=False)
    prior_b_sigma: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.w_mean = np.asarray(self.w_mean, dtype=np.float64)
        self.w_rho = np.asarray(self.w_rho, dtype=np.float64)
        self.b_mean = np.asarray(self.b_mean, dtype=np.float64)
        self.b_rho = np.asarray(self.b_rho, dtype=np.float64)
        if self.w_mean.shape != self.w_rho.shape:
            raise ValueError("w_mean and w_rho shapes differ")
        if self.b_mean.shape != self.b_rho.shape:
            raise ValueError("b_mean and b_rho shapes differ")
        if self.w_mean.ndim != 2 or self.b_mean.ndim != 1:
            raise ValueError("weights must be 2-D and biases 1-D")
        if self.w_mean.shape[0] != self.b_mean.shape[0]:
            raise ValueError("weight rows and bias length differ")

    @property
    def out_dim(self) -> int:
        return self.w_mean.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w_mean.shape[1]

    @property
    def w_sigma(self) -> np.ndarray:
        return np.abs(self.w_rho) ** 1.5

    @property
    def b_sigma(self) -> np.ndarray:
        return np.abs(self.b_rho) ** 1.5

    @property
    def prior_frozen(self) -> bool:
        return self.prior_w_mean is not None

    def n_params(self) -> int:
        return self.w_mean.size + self.b_mean.size

    def freeze_prior(self) -> None:
        """Copy the current means and sigmas into the read-only prior slots."""
        for name, arr in (
            ("prior_w_mean", self.w_mean.copy()),
            ("prior_w_sigma", self.w_sigma),
            ("prior_b_mean", self.b_mean.copy()),
            ("prior_b_sigma", self.b_sigma),
        ):
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            setattr(self, name, arr)


@dataclass(frozen=True)
class SampledLayer:
    """One pathwise parameter draw theta = mean + sigma(rho) * zeta.

    Keeps the zeta draws so gradients with respect to (mean, rho) can be
    chained through the sample later.
    """

    W: np.ndarray
    b: np.ndarray
    zeta_w: np.ndarray
    zeta_b: np.ndarray


def sample_gaussian(group: GaussianParamGroup, rng: RngStream) -> SampledLayer:
    """Draw the layer's parameters from the posterior via reparametrization."""
    zeta_w = rng.child("w").normal(group.w_mean.shape)
    zeta_b = rng.child("b").normal(group.b_mean.shape)
    return SampledLayer(
        W=group.w_mean + group.w_sigma * zeta_w,
        b=group.b_mean + group.b_sigma * zeta_b,
        zeta_w=zeta_w,
        zeta_b=zeta_b,
    )


def conditional_moments(phi_h, group: GaussianParamGroup) -> ConditionalHead:
    """Output moments given the activated last-hidden values.

    M_i = sum_j w_mean_ij phi_h_j + b_mean_i
    V_i = sum_j (w_sigma_ij phi_h_j)^2 + b_sigma_i^2

    ``phi_h`` may be a single vector or a batch [B, n].
    """
    phi_h = np.asarray(phi_h, dtype=np.float64)
    if phi_h.shape[-1] != group.in_dim:
        raise ValueError(
            f"activation length {phi_h.shape[-1]} does not match layer fan-in {group.in_dim}"
        )
    M = phi_h @ group.w_mean.T + group.b_mean
    V = np.square(phi_h) @ np.square(group.w_sigma).T + np.square(group.b_sigma)
    return ConditionalHead(M=M, V=np.maximum(V, VARIANCE_FLOOR))


def binary_error_prob(head: ConditionalHead, y: int) -> float:
    """Exact conditional misclassification probability for q = 2.

    For y = 1 this is psi((M2 - M1) / sqrt(V1 + V2)); y = 2 is symmetric.
    """
    if head.q != 2 or head.M.ndim != 1:
        raise ValueError("binary_error_prob needs a single head with exactly 2 classes")
    if y not in (1, 2):
        raise ValueError(f"y must be 1 or 2, got {y}")
    denom = math.sqrt(head.V[0] + head.V[1])
    diff = head.M[1] - head.M[0] if y == 1 else head.M[0] - head.M[1]
    return float(std_normal_cdf(diff / denom))


def l1_samples(head: ConditionalHead, y: int, rng: RngStream, n: int = 1):
    """n independent draws of the L1 estimator with exact (M, V) gradients.

    L1 = psi(max_{i != y} (F_i - M_y) / sqrt(V_y)) with F_i ~ N(M_i, V_i)
    sampled for i != y. Returns (values [n], dM [n, q], dV [n, q]). The max is
    differentiated through its sampled argmax (ties break to the lowest
    index, an event of probability zero).
    """
    M, V, y0 = _check_head_label(head, y)
    q = M.size
    zeta = rng.normal((n, q))
    sqv = np.sqrt(V)
    F = M + sqv * zeta
    F[:, y0] = -np.inf
    j = np.argmax(F, axis=1)
    rows = np.arange(n)
    fmax = F[rows, j]
    sy = sqv[y0]
    z = (fmax - M[y0]) / sy
    values = std_normal_cdf(z)
    dens = std_normal_pdf(z)
    dM = np.zeros((n, q))
    dV = np.zeros((n, q))
    dM[rows, j] = dens / sy
    dV[rows, j] = dens * zeta[rows, j] / (2.0 * sqv[j] * sy)
    dM[:, y0] = -dens / sy
    dV[:, y0] = -dens * z / (2.0 * V[y0])
    return values, dM, dV


def l2_samples(head: ConditionalHead, y: int, rng: RngStream, n: int = 1):
    """n independent draws of the L2 estimator with exact (M, V) gradients.

    L2 = 1 - prod_{i != y} psi((F_y - M_i) / sqrt(V_i)) with only F_y sampled.
    Returns (values [n], dM [n, q], dV [n, q]).
    """
    M, V, y0 = _check_head_label(head, y)
    q = M.size
    zeta = rng.normal(n)
    sqv = np.sqrt(V)
    fy = M[y0] + sqv[y0] * zeta
    u = (fy[:, None] - M[None, :]) / sqv[None, :]
    psi_u = std_normal_cdf(u)
    psi_u[:, y0] = 1.0
    # Leave-one-out products via prefix/suffix cumulative products; the naive
    # full-product / psi_u ratio is unstable when a factor underflows to 0.
    left = np.ones_like(psi_u)
    right = np.ones_like(psi_u)
    left[:, 1:] = np.cumprod(psi_u[:, :-1], axis=1)
    right[:, :-1] = np.cumprod(psi_u[:, :0:-1], axis=1)[:, ::-1]
    loo = left * right
    prod = left[:, -1] * psi_u[:, -1]
    values = 1.0 - prod
    dens = std_normal_pdf(u)
    dens[:, y0] = 0.0
    w = loo * dens / sqv[None, :]
    dfy = -np.sum(w, axis=1)
    dM = w.copy()
    dV = w * u / (2.0 * sqv[None, :])
    dM[:, y0] = dfy
    dV[:, y0] = dfy * zeta / (2.0 * sqv[y0])
    return values, dM, dV


def estimator_L1(head: ConditionalHead, y: int, rng: RngStream):
    """Single L1 draw: returns (value, (dM, dV)) for one input."""
    values, dM, dV = l1_samples(head, y, rng, n=1)
    return float(values[0]), (dM[0], dV[0])


def estimator_L2(head: ConditionalHead, y: int, rng: RngStream):
    """Single L2 draw: returns (value, (dM, dV)) for one input."""
    values, dM, dV = l2_samples(head, y, rng, n=1)
    return float(values[0]), (dM[0], dV[0])


def argmax_error_frequency(head: ConditionalHead, y: int, rng: RngStream, n: int):
    """Brute-force misclassification frequency over n full output draws.

    Samples F ~ N(M, diag(V)) and counts draws where the true class fails to
    be the strict maximum (ties count as errors). Returns (frequency,
    standard_error). Independent of the psi-based estimators; used as their
    unbiasedness oracle. The standard error is the Beta(k+1, n-k+1)
    posterior deviation, which agrees with sqrt(p(1-p)/n) away from the
    endpoints but stays honest (nonzero) when every draw lands on one side.
    """
    M, V, y0 = _check_head_label(head, y)
    zeta = rng.normal((n, M.size))
    F = M + np.sqrt(V) * zeta
    fy = F[:, y0].copy()
    F[:, y0] = -np.inf
    errors = fy <= F.max(axis=1)
    k = int(np.sum(errors))
    freq = k / n
    a, b = k + 1.0, n - k + 1.0
    se = math.sqrt(a * b / ((a + b) ** 2 * (a + b + 1.0)))
    return freq, se


def kl_diag_gauss(groups) -> float:
    """KL(Q||P) for diagonal Gaussians, summed over every parameter.

    0.5 sum (s^2 - st^2)/st^2 + 0.5 sum ((m - mt)/st)^2 + sum log(st/s),
    where tilde quantities are the frozen prior copies.
    """
    total = 0.0
    for g in groups:
        if not g.prior_frozen:
            raise ValueError("prior must be frozen before computing KL(Q||P)")
        for mean, sigma, pmean, psigma in (
            (g.w_mean, g.w_sigma, g.prior_w_mean, g.prior_w_sigma),
            (g.b_mean, g.b_sigma, g.prior_b_mean, g.prior_b_sigma),
        ):
            if np.any(sigma <= 0):
                raise ValueError("posterior sigma must be strictly positive")
            if np.any(psigma <= 0):
                raise ValueError("prior sigma must be strictly positive")
            r2 = np.square(sigma / psigma)
            total += 0.5 * float(np.sum(r2 - 1.0))
            total += 0.5 * float(np.sum(np.square((mean - pmean) / psigma)))
            total += float(np.sum(np.log(psigma) - np.log(sigma)))
    return max(total, 0.0)


def _check_head_label(head: ConditionalHead, y: int):
    if head.M.ndim != 1:
        raise ValueError("estimators take a single (unbatched) head")
    if not 1 <= y <= head.q:
        raise ValueError(f"label {y} outside 1..{head.q}")
    V = np.maximum(head.V, VARIANCE_FLOOR)
    if V[y - 1] <= 0:
        raise ValueError("V_y must be strictly positive")
    return head.M.astype(np.float64), V, y - 1
