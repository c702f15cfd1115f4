"""State-space kernels in diagonal form: ZOH discretization, the linear
recurrence, its convolutional kernel, and the input-dependent S6 scan."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LtiSsm:
    A_diag: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: float


@dataclass(frozen=True)
class DiscreteSsm:
    Abar_diag: np.ndarray
    Bbar: np.ndarray
    C: np.ndarray


def _vec(name: str, v) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty vector, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def discretize_zoh(ssm: LtiSsm, exact: bool = False) -> DiscreteSsm:
    """Abar = exp(delta*A); Bbar = delta*B.

    ``exact=True`` uses the full ZOH input matrix (exp(delta*A) - 1)/A * B and
    is meant for diagnostics only.
    """
    A, B, C = _vec("A_diag", ssm.A_diag), _vec("B", ssm.B), _vec("C", ssm.C)
    if not (A.size == B.size == C.size):
        raise ValueError(f"state sizes differ: A={A.size}, B={B.size}, C={C.size}")
    delta = float(ssm.delta)
    if not np.isfinite(delta):
        raise ValueError("delta must be finite")
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    Abar = np.exp(delta * A)
    if exact:
        safe = np.where(A == 0, 1.0, A)
        Bbar = np.where(A == 0, delta * B, np.expm1(delta * A) / safe * B)
    else:
        Bbar = delta * B
    return DiscreteSsm(Abar, Bbar, C.copy())


def ssm_recurrence(d: DiscreteSsm, x) -> np.ndarray:
    """Run h_t = Abar*h_{t-1} + Bbar*x_t, y_t = C.h_t from h_0 = 0, left to right."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("ssm_recurrence: empty input sequence")
    h = np.zeros_like(d.Abar_diag)
    y = np.empty_like(x)
    for t, xt in enumerate(x):
        h = d.Abar_diag * h + d.Bbar * xt
        y[t] = d.C @ h
    return y


def ssm_conv_kernel(d: DiscreteSsm, L: int) -> np.ndarray:
    """K[j] = sum_i C[i] * Abar[i]**j * Bbar[i] for j < L."""
    if L < 1:
        raise ValueError(f"kernel length must be >= 1, got {L}")
    powers = d.Abar_diag[None, :] ** np.arange(L)[:, None]
    return powers @ (d.C * d.Bbar)


def ssm_conv_apply(x, kernel) -> np.ndarray:
    """Causal convolution y_t = sum_{j<=t} kernel[j] * x[t-j]; length preserved."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    kernel = np.asarray(kernel, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("ssm_conv_apply: empty input sequence")
    if kernel.size < x.size:
        raise ValueError(f"kernel length {kernel.size} shorter than sequence length {x.size}")
    return np.convolve(x, kernel[:x.size])[:x.size]


# ---------------------------------------------------------------------- S6

@dataclass
class S6Params:
    """Selective-scan parameters for D feature channels and N states.

    A is stored as ``A_log`` with ``A = -exp(A_log)`` so it stays negative under
    training. The step size uses a rank-1 projection D -> 1 -> D plus a
    per-channel bias, then softplus.
    """

    A_log: Tensor       # (D, N)
    W_B: Tensor         # (N, D)
    b_B: Tensor         # (N,)
    W_C: Tensor         # (N, D)
    b_C: Tensor         # (N,)
    W_dt_down: Tensor   # (1, D)
    W_dt_up: Tensor     # (D, 1)
    dt_bias: Tensor     # (D,)

    FIELDS = ("A_log", "W_B", "b_B", "W_C", "b_C", "W_dt_down", "W_dt_up", "dt_bias")

    @property
    def feature_size(self) -> int:
        return self.A_log.shape[0]

    @property
    def state_size(self) -> int:
        return self.A_log.shape[1]

    @property
    def A_diag(self) -> np.ndarray:
        return -np.exp(self.A_log.data)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + f: getattr(self, f) for f in self.FIELDS}

    def check(self) -> None:
        D, N = self.feature_size, self.state_size
        want = {"A_log": (D, N), "W_B": (N, D), "b_B": (N,), "W_C": (N, D), "b_C": (N,),
                "W_dt_down": (1, D), "W_dt_up": (D, 1), "dt_bias": (D,)}
        for f, shape in want.items():
            got = getattr(self, f).shape
            if got != shape:
                raise ValueError(f"S6Params.{f} has shape {got}, expected {shape}")


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def init_s6(D: int, N: int, rng: np.random.Generator,
            dt_min: float = 1e-3, dt_max: float = 1e-1) -> S6Params:
    """A = -(i+1) per state; initial softplus step log-uniform in [dt_min, dt_max]."""
    bound = 1.0 / np.sqrt(D)
    A_log = np.tile(np.log(np.arange(1, N + 1, dtype=np.float64)), (D, 1))
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), D))
    return S6Params(
        A_log=Tensor(A_log, True),
        W_B=Tensor(rng.uniform(-bound, bound, (N, D)), True),
        b_B=Tensor(np.zeros(N), True),
        W_C=Tensor(rng.uniform(-bound, bound, (N, D)), True),
        b_C=Tensor(np.zeros(N), True),
        W_dt_down=Tensor(rng.uniform(-bound, bound, (1, D)), True),
        W_dt_up=Tensor(rng.uniform(-0.1, 0.1, (D, 1)), True),
        dt_bias=Tensor(inverse_softplus(dt), True),
    )


def s6_projections(x: Tensor, p: S6Params) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent (delta, B, C) for x of shape (..., L, D)."""
    B = ad.linear(x, p.W_B, p.b_B)
    C = ad.linear(x, p.W_C, p.b_C)
    delta = ad.softplus(ad.linear(ad.linear(x, p.W_dt_down), p.W_dt_up, p.dt_bias))
    return delta, B, C


def s6_forward(x, p: S6Params) -> Tensor:
    """Differentiable S6 over a batch of sequences x with shape (n, L, D)."""
    x = ad.as_tensor(x)
    if x.ndim != 3 or x.shape[1] == 0:
        raise ValueError(f"s6: expected (n, L, D) input with L >= 1, got {x.shape}")
    if x.shape[2] != p.feature_size:
        raise ValueError(f"s6: input feature size {x.shape[2]} != parameter feature size {p.feature_size}")
    delta, B, C = s6_projections(x, p)
    A = ad.neg(ad.exp(p.A_log))
    return ad.selective_scan(x, delta, A, B, C)


def s6_selective_scan(x, params: S6Params) -> np.ndarray:
    """Scan one L x D sequence; returns an L x D array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"s6_selective_scan: expected non-empty L x D input, got {x.shape}")
    return s6_forward(Tensor(x[None]), params).data[0]


def _s6_op(x, *tensors):
    return s6_forward(x, S6Params(*tensors))


def _s6_inputs(shapes, rng):
    (n, L, D), N = shapes[0], shapes[1][1]
    p = init_s6(D, N, rng, dt_min=0.05, dt_max=0.5)
    arrays = [rng.standard_normal(shapes[0])]
    for f in S6Params.FIELDS:
        a = getattr(p, f).data
        # nonzero biases and larger up-projection keep every gradient path active
        if f in ("b_B", "b_C"):
            a = rng.standard_normal(a.shape)
        if f == "W_dt_up":
            a = rng.uniform(-0.5, 0.5, a.shape)
        arrays.append(a)
    return arrays


ad.register_op("s6", _s6_op,
               [(2, 5, 3), (3, 4), (4, 3), (4,), (4, 3), (4,), (1, 3), (3, 1), (3,)], _s6_inputs)
