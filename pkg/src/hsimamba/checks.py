"""Self-checks run by ``hsimamba scan-check``: kernel equivalences and gradient checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .routes import Route, build_route_sequences, n_branches, revert, scan_and_merge
from .ssm import (LtiSsm, discretize_zoh, init_s6, s6_selective_scan, ssm_conv_apply,
                  ssm_conv_kernel, ssm_recurrence)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def random_lti(N: int, rng: np.random.Generator) -> LtiSsm:
    return LtiSsm(-rng.uniform(0.01, 2.0, N), rng.standard_normal(N), rng.standard_normal(N),
                  float(rng.uniform(0.01, 1.0)))


def check_kernel_equivalence(draws: int = 100, N: int = 16, L: int = 64, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        d = discretize_zoh(random_lti(N, rng))
        x = rng.standard_normal(L)
        rec = ssm_recurrence(d, x)
        conv = ssm_conv_apply(x, ssm_conv_kernel(d, L))
        worst = max(worst, np.abs(rec - conv).max() / np.abs(rec).max())
    return CheckResult("recurrence == convolution", worst < 1e-8, f"max rel err {worst:.2e}")


def check_lti_reduction(cases: int = 20, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        L, D, N = rng.integers(4, 24), rng.integers(1, 5), rng.integers(1, 6)
        p = init_s6(D, N, rng)
        for t in (p.W_B, p.W_C, p.W_dt_down, p.W_dt_up):
            t.data = np.zeros_like(t.data)
        p.b_B.data = rng.standard_normal(N)
        p.b_C.data = rng.standard_normal(N)
        p.dt_bias.data = rng.uniform(-3, 1, D)
        x = rng.standard_normal((L, D))
        y = s6_selective_scan(x, p)
        delta = np.logaddexp(0, p.dt_bias.data)
        for c in range(D):
            ref = ssm_recurrence(discretize_zoh(LtiSsm(p.A_diag[c], p.b_B.data, p.b_C.data, delta[c])), x[:, c])
            worst = max(worst, np.abs(y[:, c] - ref).max() / max(np.abs(ref).max(), 1e-300))
    return CheckResult("S6 with frozen projections == LTI recurrence", worst < 1e-10, f"max rel err {worst:.2e}")


def check_zoh_limits() -> CheckResult:
    d0 = discretize_zoh(LtiSsm(np.array([-1.0, -3.0]), np.array([2.0, 1.0]), np.ones(2), 0.0))
    d1 = discretize_zoh(LtiSsm(np.array([-1.0]), np.array([1.0]), np.array([1.0]), np.log(2)))
    ok = (np.abs(d0.Abar_diag - 1).max() <= 1e-15 and not d0.Bbar.any()
          and abs(d1.Abar_diag[0] - 0.5) <= 1e-12)
    return CheckResult("ZOH limits", bool(ok), f"Abar(delta=0)={d0.Abar_diag}, Abar(ln2)={d1.Abar_diag[0]!r}")


def check_routes(max_pk: int = 8) -> CheckResult:
    for P in range(1, max_pk + 1):
        for K in range(1, max_pk + 1):
            batch = np.arange(P * P * K, dtype=float).reshape(1, P, P, K) + 1
            for route in Route:
                seqs = build_route_sequences(batch, route)
                for s in seqs:
                    if len({tuple(r) for r in s.index_map}) != P * P * K:
                        return CheckResult("route geometry", False, f"index map not bijective at P={P} K={K}")
                    back = revert(revert(s))
                    if not (np.array_equal(back.values, s.values) and np.array_equal(back.index_map, s.index_map)):
                        return CheckResult("route geometry", False, "revert is not an involution")
                out = scan_and_merge(batch, route, [None] * n_branches(route), scan=lambda x, p: x)
                if not np.array_equal(out, n_branches(route) * batch):
                    return CheckResult("route geometry", False, f"identity merge wrong for {route.slug}")
    return CheckResult("route geometry", True, f"all routes, 1 <= P, K <= {max_pk}")


def check_gradients(seeds=range(5), tol: float = 1e-4) -> CheckResult:
    from . import blocks  # noqa: F401  (registers composite ops)

    worst, worst_op = 0.0, ""
    for name in ad.OPS:
        for s in seeds:
            e = ad.grad_check(name, seed=s)
            if e > worst:
                worst, worst_op = e, name
    return CheckResult("gradient checks", worst < tol, f"{len(ad.OPS)} ops, worst {worst:.2e} ({worst_op})")


def run_all(quick: bool = False) -> list[CheckResult]:
    seeds = range(2) if quick else range(5)
    return [check_kernel_equivalence(), check_lti_reduction(), check_zoh_limits(),
            check_routes(), check_gradients(seeds)]
