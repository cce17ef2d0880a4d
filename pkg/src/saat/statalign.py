"""Statistic-alignment losses between feature maps.

A feature map is an (N, M) matrix: N channels by M spatial positions, with
an optional leading batch axis. Every loss here is differentiable w.r.t. the
source map when it is given as a recorded :class:`~saat.tensor.Tensor`, and
returns one value per batch item.

Sample sets come from splitting a map into vectors. ``point_wise`` takes the
M columns (one N-dim vector per position); ``channel_wise`` takes the N rows.
"""

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .tensor import TakeRows, Tensor, as_tensor

POINT_WISE = "point_wise"
CHANNEL_WISE = "channel_wise"
STRATEGIES = (POINT_WISE, CHANNEL_WISE)

SIGMA2_FLOOR = 1e-8

MapLike = Union[Tensor, np.ndarray]


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and hyperparameters.

    ``sigma2=None`` means the Gaussian bandwidth is set from the data as the
    mean squared distance over the pairs the estimator touches.
    """

    family: str = "polynomial"
    c: float = 0.0
    d: int = 2
    sigma2: Optional[float] = None

    def __post_init__(self):
        if self.family not in ("linear", "polynomial", "gaussian"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.family == "polynomial":
            if int(self.d) != self.d or self.d < 1:
                raise ValueError(f"polynomial power must be an integer >= 1, got {self.d}")
            if self.c < 0:
                raise ValueError(f"polynomial bias must be >= 0, got {self.c}")
        if self.family == "gaussian" and self.sigma2 is not None and not self.sigma2 > 0:
            raise ValueError(f"gaussian sigma2 must be > 0, got {self.sigma2}")


LINEAR = KernelSpec("linear")


@dataclass
class SampleSet:
    vectors: np.ndarray  # (count, dim), or a Tensor with leading batch axes
    strategy: str

    def __len__(self):
        return self.vectors.shape[-2]

    @property
    def dim(self) -> int:
        return self.vectors.shape[-1]


@dataclass
class MomentSummary:
    means: np.ndarray
    variances: np.ndarray


def _values(fm) -> MapLike:
    return getattr(fm, "values", fm)


def _check_map(x) -> None:
    if x.ndim < 2:
        raise ValueError(f"feature map must be at least 2-d (channels x positions), got shape {x.shape}")
    if x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ValueError(f"empty feature map {x.shape}")


def split(fm, strategy: str = POINT_WISE) -> SampleSet:
    """Split an (…, N, M) map into a sample set of vectors."""
    x = _values(fm)
    _check_map(x)
    if strategy == POINT_WISE:
        v = x.swapaxes(-1, -2)
    elif strategy == CHANNEL_WISE:
        v = x
    else:
        raise ValueError(f"unknown splitting strategy {strategy!r}")
    return SampleSet(v, strategy)


def kernel_eval(k: KernelSpec, s, t) -> float:
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if s.shape != t.shape:
        raise ValueError(f"kernel arguments differ in dimension: {s.size} vs {t.size}")
    if k.family == "linear":
        return float(s @ t)
    if k.family == "polynomial":
        return float((s @ t + k.c) ** k.d)
    if k.sigma2 is None:
        raise ValueError("gaussian kernel_eval needs an explicit sigma2")
    return float(np.exp(-np.sum((s - t) ** 2) / (2.0 * k.sigma2)))


def _sqnorm(a: Tensor) -> Tensor:
    return (a * a).sum(axis=-1, keepdims=True)


def kernel_matrix(k: KernelSpec, a: Tensor, b: Tensor, sigma2=None) -> Tensor:
    """Gram matrix k(a_i, b_j) for row sets a (…, m, d) and b (…, n, d)."""
    g = a @ b.swapaxes(-1, -2)
    if k.family == "linear":
        return g
    if k.family == "polynomial":
        return g if (k.d == 1 and k.c == 0) else (g + k.c) ** k.d
    d2 = _sqnorm(a) + _sqnorm(b).swapaxes(-1, -2) - 2.0 * g
    return (d2 * Tensor(-0.5 / np.asarray(sigma2, dtype=g.dtype)[..., None, None])).exp()


def kernel_rows(k: KernelSpec, a: Tensor, b: Tensor, sigma2=None) -> Tensor:
    """Row-paired kernel values k(a_i, b_i) -> (…, m)."""
    if k.family == "gaussian":
        diff = a - b
        return ((diff * diff).sum(axis=-1) * Tensor(-0.5 / np.asarray(sigma2, dtype=a.dtype)[..., None])).exp()
    g = (a * b).sum(axis=-1)
    if k.family == "linear" or (k.d == 1 and k.c == 0):
        return g
    return (g + k.c) ** k.d


def _pair_sq_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum over i, j of ||a_i - b_j||^2 without materialising the pairs."""
    na = (a * a).sum(axis=(-1, -2))
    nb = (b * b).sum(axis=(-1, -2))
    cross = (a.sum(axis=-2) * b.sum(axis=-2)).sum(axis=-1)
    return b.shape[-2] * na + a.shape[-2] * nb - 2.0 * cross


def gaussian_bandwidth(sset, tset) -> Tuple[np.ndarray, np.ndarray]:
    """Mean squared distance over all S-S, T-T and S-T pairs (self pairs included).

    Returns ``(sigma2, floored)``; sigma2 is clamped below at 1e-8 and
    ``floored`` marks where that happened. Both have the batch shape.
    """
    a = np.asarray(_vecs(sset).data if isinstance(_vecs(sset), Tensor) else _vecs(sset), dtype=np.float64)
    b = np.asarray(_vecs(tset).data if isinstance(_vecs(tset), Tensor) else _vecs(tset), dtype=np.float64)
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ValueError("gaussian_bandwidth needs non-empty sample sets")
    m, n = a.shape[-2], b.shape[-2]
    total = _pair_sq_sum(a, a) + _pair_sq_sum(b, b) + _pair_sq_sum(a, b)
    sigma2 = np.asarray(total / (m * m + n * n + m * n))
    floored = sigma2 < SIGMA2_FLOOR
    return np.where(floored, SIGMA2_FLOOR, sigma2), floored


def _vecs(s) -> MapLike:
    return s.vectors if isinstance(s, SampleSet) else s


def _use_moments(k: KernelSpec, count: int, dim: int) -> bool:
    if k.family == "linear" or (k.family == "polynomial" and k.d == 1):
        return True
    return k.family == "polynomial" and k.d == 2 and dim < count


def _resolve_sigma2(k: KernelSpec, a, b, sigma2):
    if k.family != "gaussian":
        return None
    if sigma2 is not None:
        return np.asarray(sigma2, dtype=np.float64)
    if k.sigma2 is not None:
        return np.full(a.shape[:-2], k.sigma2, dtype=np.float64)
    return gaussian_bandwidth(a, b)[0]


def mmd2_biased(S, T, k: KernelSpec, sigma2=None, method: str = "auto") -> Tensor:
    """Quadratic-time biased MMD^2 between sample sets S (…, m, d) and T (…, n, d).

    For linear kernels and polynomial kernels of power <= 2 the pair sums are
    rewritten exactly through first and second moments when that is cheaper
    (``method="auto"``); ``method="pairs"`` forces explicit Gram matrices.
    """
    a, b = as_tensor(_vecs(S)), as_tensor(_vecs(T))
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ValueError("mmd2 needs non-empty sample sets")
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"sample dimensions differ: {a.shape[-1]} vs {b.shape[-1]}")
    m, n = a.shape[-2], b.shape[-2]
    if method not in ("auto", "pairs", "moments"):
        raise ValueError(f"unknown method {method!r}")
    use_moments = method == "moments" or (method == "auto" and _use_moments(k, max(m, n), a.shape[-1]))
    if use_moments:
        return _mmd2_moments(k, a, b)
    s2 = _resolve_sigma2(k, a.data, b.data, sigma2)
    kss = kernel_matrix(k, a, a, s2).mean(axis=(-1, -2))
    ktt = kernel_matrix(k, b, b, s2).mean(axis=(-1, -2))
    kst = kernel_matrix(k, a, b, s2).mean(axis=(-1, -2))
    return kss + ktt - 2.0 * kst


def _mmd2_moments(k: KernelSpec, a: Tensor, b: Tensor) -> Tensor:
    if k.family == "linear" or k.d == 1:
        diff = a.mean(axis=-2) - b.mean(axis=-2)
        return (diff * diff).sum(axis=-1)
    if k.family != "polynomial" or k.d != 2:
        raise ValueError("moment form exists only for linear and degree <= 2 polynomial kernels")
    # mean_ij (a_i.b_j + c)^2 = <Ca, Cb>_F + 2c abar.bbar + c^2 with C = X^T X / count
    ca = (a.swapaxes(-1, -2) @ a) * (1.0 / a.shape[-2])
    cb = (b.swapaxes(-1, -2) @ b) * (1.0 / b.shape[-2])
    dc = ca - cb
    out = (dc * dc).sum(axis=(-1, -2))
    if k.c != 0:
        dm = a.mean(axis=-2) - b.mean(axis=-2)
        out = out + (dm * dm).sum(axis=-1) * (2.0 * k.c)
    return out


def mmd2_linear_time(S, T, k: KernelSpec, rng: Optional[np.random.Generator] = None,
                     sigma2=None) -> Tensor:
    """Linear-time unbiased MMD^2 from disjoint consecutive pairs.

    Both sets are shuffled with ``rng`` (identity pairing when rng is None)
    and truncated to a common even length. Leading batch axes share one
    shuffle.
    """
    a, b = as_tensor(_vecs(S)), as_tensor(_vecs(T))
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"sample dimensions differ: {a.shape[-1]} vs {b.shape[-1]}")
    m, n = a.shape[-2], b.shape[-2]
    length = 2 * (min(m, n) // 2)
    if length < 2:
        raise ValueError(f"linear-time MMD needs at least 2 samples per set, got {m} and {n}")
    ia = np.arange(m) if rng is None else rng.permutation(m)
    ib = np.arange(n) if rng is None else rng.permutation(n)
    ia, ib = ia[:length], ib[:length]
    s1, s2_ = _take(a, ia[0::2]), _take(a, ia[1::2])
    t1, t2 = _take(b, ib[0::2]), _take(b, ib[1::2])
    bw = None
    if k.family == "gaussian":
        if sigma2 is not None:
            bw = np.asarray(sigma2, dtype=np.float64)
        elif k.sigma2 is not None:
            bw = np.full(a.shape[:-2], k.sigma2)
        else:
            bw = linear_time_bandwidth(s1.data, s2_.data, t1.data, t2.data)[0]
    h = (kernel_rows(k, s1, s2_, bw) + kernel_rows(k, t1, t2, bw)
         - kernel_rows(k, s1, t2, bw) - kernel_rows(k, s2_, t1, bw))
    return h.mean(axis=-1)


def linear_time_bandwidth(s1, s2, t1, t2) -> Tuple[np.ndarray, np.ndarray]:
    """Mean squared distance over the four pairs of every block."""
    tot = 0.0
    for u, v in ((s1, s2), (t1, t2), (s1, t2), (s2, t1)):
        d = np.asarray(u, dtype=np.float64) - np.asarray(v, dtype=np.float64)
        tot = tot + (d * d).sum(axis=-1).mean(axis=-1)
    sigma2 = np.asarray(tot / 4.0)
    floored = sigma2 < SIGMA2_FLOOR
    return np.where(floored, SIGMA2_FLOOR, sigma2), floored


def _take(x: Tensor, idx: np.ndarray) -> Tensor:
    return TakeRows.apply(x, idx=idx)


def _pair_maps(Sfm, Tfm):
    s, t = as_tensor(_values(Sfm)), as_tensor(_values(Tfm))
    _check_map(s)
    _check_map(t)
    return s, t


def paa_loss(Sfm, Tfm, k: KernelSpec, strategy: str = POINT_WISE, sigma2=None) -> Tensor:
    """Pair-wise alignment loss: biased MMD^2 between the split sample sets."""
    s, t = _pair_maps(Sfm, Tfm)
    if strategy == POINT_WISE and s.shape[-2] != t.shape[-2]:
        raise ValueError(f"point-wise PAA needs equal channel counts, got {s.shape[-2]} and {t.shape[-2]}")
    if strategy == CHANNEL_WISE and s.shape[-1] != t.shape[-1]:
        raise ValueError(f"channel-wise PAA needs equal position counts, got {s.shape[-1]} and {t.shape[-1]}")
    return mmd2_biased(split(s, strategy), split(t, strategy), k, sigma2=sigma2)


def paa_bandwidth(Sfm, Tfm, strategy: str = POINT_WISE) -> Tuple[np.ndarray, np.ndarray]:
    s, t = _values(Sfm), _values(Tfm)
    s = s.data if isinstance(s, Tensor) else s
    t = t.data if isinstance(t, Tensor) else t
    return gaussian_bandwidth(split(s, strategy), split(t, strategy))


def gaa_moments(fm) -> MomentSummary:
    """Per-channel mean and population variance over positions."""
    x = _values(fm)
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    _check_map(x)
    return MomentSummary(x.mean(axis=-1), x.var(axis=-1))


def _moments(x: Tensor) -> Tuple[Tensor, Tensor]:
    mu = x.mean(axis=-1, keepdims=True)
    dev = x - mu
    var = (dev * dev).mean(axis=-1)
    return mu.reshape(mu.shape[:-1]), var


def gaa_loss(Sfm, Tfm) -> Tensor:
    """Global alignment loss: channel-averaged squared gaps of means plus of variances."""
    s, t = _pair_maps(Sfm, Tfm)
    if s.shape[-2] != t.shape[-2]:
        raise ValueError(f"GAA needs equal channel counts, got {s.shape[-2]} and {t.shape[-2]}")
    mu_s, var_s = _moments(s)
    mu_t, var_t = _moments(t)
    dm, dv = mu_s - mu_t, var_s - var_t
    return (dm * dm).mean(axis=-1) + (dv * dv).mean(axis=-1)


def gaa_terms(Sfm, Tfm) -> Tuple[np.ndarray, np.ndarray]:
    """(delta_mu, delta_sigma) as plain arrays, for reporting."""
    a, b = gaa_moments(Sfm), gaa_moments(Tfm)
    return ((a.means - b.means) ** 2).mean(axis=-1), ((a.variances - b.variances) ** 2).mean(axis=-1)


def euclid_loss(Sfm, Tfm) -> Tensor:
    """Sum of squared elementwise differences between two equally shaped maps."""
    s, t = _pair_maps(Sfm, Tfm)
    if s.shape[-2:] != t.shape[-2:]:
        raise ValueError(f"euclid_loss needs identical map shapes, got {s.shape} and {t.shape}")
    d = s - t
    return (d * d).sum(axis=(-1, -2))
