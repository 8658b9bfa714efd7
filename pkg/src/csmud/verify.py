"""Self-checks on the solvers, shared by ``csmud verify`` and the test suite."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .complexity import reconcile
from .model import SystemConfig, synthesize_frame
from .solvers import (
    CacheMissError,
    SolverParams,
    detect,
    objective,
    run_bcd,
    run_cr_ebcd,
    run_ebcd,
)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def __post_init__(self):
        self.passed = bool(self.passed)


@dataclass
class VerifyReport:
    checks: list[Check] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def format(self) -> str:
        lines = [f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}" for c in self.checks]
        lines.append(f"{'OK' if self.ok else 'FAILED'} ({len(self.checks)} checks, {self.seconds:.1f} s)")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "seconds": self.seconds,
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks],
        }


def small_instance(rng: np.random.Generator, k_max: int = 10, n_max: int | None = None, j_max: int = 4):
    """A random small scenario with a pruning schedule that fits it."""
    K = int(rng.integers(4, k_max + 1))
    N = int(rng.integers(2, min(K - 1, n_max or K) + 1))
    J = int(rng.integers(1, j_max + 1))
    hi = int(rng.integers(1, N + 1))
    cfg = SystemConfig(K=K, N=N, J=J, sparsity_range=(max(hi - 1, 0), hi), snr_db=float(rng.uniform(0, 10)))
    T = int(rng.integers(2, 7))
    T_b = int(rng.integers(1, T + 1))
    final = int(rng.integers(max(hi, 1), K + 1))
    params = SolverParams.for_final_size(K, final, T_b, T=T)
    frame = synthesize_frame(cfg, rng)
    return cfg, params, frame


def w_brute_force_error(frame, params: SolverParams, disable_cache: bool = False) -> float:
    """Largest relative gap between the recursive ``W`` and a direct sum, over every (t, i).

    The gap is measured against the larger of the sum's norm and the summed
    norms of its terms, so a sum that cancels to ~0 is not judged on rounding.
    """
    G = frame.G
    col_norms = np.linalg.norm(G, axis=0)
    worst = [0.0]

    def probe(t, i, omega, W, X):
        k = omega[i]
        others = np.asarray([l for l in omega if l != k], dtype=int)
        ref = G[:, others] @ X[others] if len(others) else np.zeros_like(W)
        terms = float(np.sum(col_norms[omega] * np.linalg.norm(X[omega], axis=1)))
        scale = max(np.linalg.norm(ref), terms, 1e-300)
        worst[0] = max(worst[0], np.linalg.norm(W - ref) / scale)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        run_cr_ebcd(frame.Y, G, params, probe=probe, disable_cache=disable_cache)
    return worst[0]


def ebcd_gap(frame, params: SolverParams, disable_cache: bool = False) -> tuple[float, bool]:
    """Relative Frobenius difference of final estimates and whether the support histories match."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = run_ebcd(frame.Y, frame.G, params)
        b = run_cr_ebcd(frame.Y, frame.G, params, disable_cache=disable_cache)
    denom = max(np.linalg.norm(a.x_hat), 1e-12)
    same = len(a.omega_history) == len(b.omega_history) and all(
        np.array_equal(u, v) for u, v in zip(a.omega_history, b.omega_history)
    )
    return float(np.linalg.norm(a.x_hat - b.x_hat) / denom), same


def max_objective_increase(frame, params: SolverParams) -> float:
    """Largest rise of the objective across single BCD coordinate updates (should be ~0)."""
    Y, G, lam = frame.Y, frame.G, params.lambda0
    prev = [objective(Y, G, np.zeros((G.shape[1], Y.shape[1]), dtype=complex), lam)]
    worst = [0.0]

    def probe(t, i, omega, X):
        f = objective(Y, G, X, lam)
        worst[0] = max(worst[0], (f - prev[0]) / max(abs(prev[0]), 1e-12))
        prev[0] = f

    run_bcd(Y, G, params.without_pruning(), probe=probe)
    return worst[0]


def ridge_solution(Y: np.ndarray, G: np.ndarray, lambda0: float) -> np.ndarray:
    """Exact minimizer of ``0.5||Y - G X||^2 + 0.5 lambda0 ||X||^2``."""
    K = G.shape[1]
    A = G.conj().T @ G + lambda0 * np.eye(K)
    return np.linalg.solve(A, G.conj().T @ Y)


def convex_gap(frame, params: SolverParams, sweeps: int = 400) -> float:
    """Relative objective gap of long-run BCD against the exact minimizer."""
    p = SolverParams(params.lambda0, sweeps, 0, ())
    X = run_bcd(frame.Y, frame.G, p, method="residual").x_hat
    f = objective(frame.Y, frame.G, X, params.lambda0)
    f_star = objective(frame.Y, frame.G, ridge_solution(frame.Y, frame.G, params.lambda0), params.lambda0)
    return (f - f_star) / max(abs(f_star), 1e-12)


def reconcile_all(frame, params: SolverParams, constellation=None) -> dict[str, float]:
    """Total-count deviation from the closed forms for each instrumented solver."""
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for algo in ("bcd", "ebcd", "cr-ebcd"):
            det = detect(frame.Y, frame.G, algo, params, constellation)
            rep = reconcile(det.ledger)
            out[algo] = max(dev for _, _, _, dev in rep.rows)
    return out


def _guard(name: str, fn) -> Check:
    try:
        return fn()
    except CacheMissError as exc:
        return Check(name, False, f"cache miss: {exc}")


def run_checks(small: bool = False, inject_fault: bool = False, seed: int = 0, n_instances: int | None = None) -> VerifyReport:
    """Run every check; ``inject_fault`` zeroes the W product cache, which must be caught."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    n = n_instances or (20 if small else 100)
    instances = [small_instance(rng) for _ in range(n)]
    report = VerifyReport()

    def w_check():
        worst = max(w_brute_force_error(f, p, inject_fault) for _, p, f in instances)
        return Check("w-recursion", worst <= 1e-9, f"max relative W error {worst:.2e} over {n} instances")

    def equiv_check():
        gaps, mismatched = [], 0
        for _, p, f in instances:
            gap, same = ebcd_gap(f, p, inject_fault)
            gaps.append(gap)
            mismatched += not same
        worst = max(gaps)
        return Check(
            "ebcd-equivalence",
            worst <= 1e-9 and mismatched == 0,
            f"max relative gap {worst:.2e}, {mismatched} support histories differ",
        )

    def mono_check():
        worst = max(max_objective_increase(f, p) for _, p, f in instances)
        return Check("objective-monotone", worst <= 1e-12, f"largest relative increase {worst:.2e}")

    def convex_check():
        worst = max(convex_gap(f, p) for _, p, f in instances[:50])
        return Check("convex-oracle", worst <= 1e-6, f"largest objective gap {worst:.2e}")

    def counter_check():
        worst = 0.0
        for cfg, p, f in instances[:10]:
            worst = max(worst, max(reconcile_all(f, p, cfg.constellation).values()))
        if not small:
            cfg = SystemConfig(seed=seed)
            devs = reconcile_all(synthesize_frame(cfg, seed), SolverParams(), cfg.constellation)
            worst = max(worst, max(devs.values()))
        return Check("counter-reconcile", worst <= 0.05, f"largest phase deviation {worst:.2e}")

    for name, fn in [
        ("w-recursion", w_check),
        ("ebcd-equivalence", equiv_check),
        ("objective-monotone", mono_check),
        ("convex-oracle", convex_check),
        ("counter-reconcile", counter_check),
    ]:
        report.checks.append(_guard(name, fn))

    if not small:
        cfg = SystemConfig(seed=seed)
        gaps = []
        for trial in range(5):
            gap, same = ebcd_gap(synthesize_frame(cfg, seed + trial), SolverParams(), inject_fault)
            gaps.append(gap if same else np.inf)
        worst = max(gaps)
        report.checks.append(Check("ebcd-equivalence-full", worst <= 1e-9, f"max relative gap {worst:.2e} at K=200"))

    report.seconds = time.perf_counter() - start
    return report
