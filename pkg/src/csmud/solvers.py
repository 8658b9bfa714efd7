"""Block coordinate descent detectors for the joint-sparse model ``Y = G X + V``.

Three solvers share one coordinate update (exact minimisation of one row of
``X`` with the others fixed):

* :func:`run_bcd` sweeps every user, ``T`` times.
* :func:`run_ebcd` additionally discards the ``psi[t]`` lowest-energy users
  after each of the first ``T_b`` sweeps and zeroes their rows.
* :func:`run_cr_ebcd` performs the same iterations as EBCD but maintains the
  interference sum ``W`` incrementally, so each coordinate update costs a
  couple of rank-one products instead of a full matrix product.

Users are 0-based indices throughout; candidate sets are kept in ascending
index order, which fixes the order the incremental recursions walk through.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .complexity import ComplexityLedger, ComplexityParams
from .model import Constellation, get_constellation

# relative band inside which two row energies count as tied when pruning
TIE_TOL = 1e-12


class DegenerateInputError(ValueError):
    pass


class ScheduleError(ValueError):
    pass


class CacheMissError(RuntimeError):
    """A cached rank-one product needed by the W recursion is unavailable."""


class RankError(ValueError):
    pass


@dataclass(frozen=True)
class SolverParams:
    lambda0: float = 0.7
    T: int = 12
    T_b: int = 8
    psi_schedule: tuple[int, ...] = (20,) * 8
    v_th: float = 0.73
    oracle: bool = False

    def __post_init__(self):
        object.__setattr__(self, "psi_schedule", tuple(int(p) for p in self.psi_schedule))
        if self.lambda0 < 0:
            raise ScheduleError("lambda0 must be non-negative")
        if self.T < 0:
            raise ScheduleError("T must be non-negative")
        if not 0 <= self.T_b <= self.T:
            raise ScheduleError(f"need 0 <= T_b <= T (T_b={self.T_b}, T={self.T})")
        if len(self.psi_schedule) != self.T_b:
            raise ScheduleError(f"psi_schedule needs T_b={self.T_b} entries, got {len(self.psi_schedule)}")
        if any(p < 0 for p in self.psi_schedule):
            raise ScheduleError("psi entries must be non-negative")

    @classmethod
    def for_final_size(cls, K: int, final_size: int, T_b: int, **kw) -> "SolverParams":
        """Spread ``K - final_size`` discards as evenly as possible over ``T_b`` sweeps."""
        total = K - final_size
        if T_b == 0:
            if total:
                raise ScheduleError("T_b = 0 cannot reach a final size below K")
            return cls(T_b=0, psi_schedule=(), **kw)
        q, r = divmod(total, T_b)
        psi = tuple(q + (1 if t < r else 0) for t in range(T_b))
        return cls(T_b=T_b, psi_schedule=psi, **kw)

    def final_size(self, K: int) -> int:
        return K - sum(self.psi_schedule)

    def check_schedule(self, K: int, min_fraction: float | None = 0.2) -> None:
        """Reject schedules that prune past zero; warn below ``min_fraction * K``."""
        kb = self.final_size(K)
        if kb < 0:
            raise ScheduleError(f"schedule {self.psi_schedule} discards more than K={K} users")
        if min_fraction is not None and kb < min_fraction * K:
            warnings.warn(
                f"final candidate set {kb} is below {min_fraction:g}*K; active users may be discarded",
                stacklevel=3,
            )

    def without_pruning(self) -> "SolverParams":
        return SolverParams(self.lambda0, self.T, 0, (), self.v_th, self.oracle)


@dataclass
class CandidateState:
    omega: np.ndarray  # ascending user indices
    x_hat: np.ndarray  # K x J, zero outside omega
    w_cache: np.ndarray | None = None

    @property
    def k_a(self) -> int:
        return len(self.omega)


@dataclass
class SolverOutput:
    x_hat: np.ndarray
    omega_history: list[np.ndarray]  # Omega^(1), ..., Omega^(T_b + 1)
    ledger: ComplexityLedger

    @property
    def final_omega(self) -> np.ndarray:
        return self.omega_history[-1]


@dataclass
class DetectionResult:
    gamma_hat: tuple[int, ...]
    x_refined: np.ndarray
    decisions: np.ndarray
    ledger: ComplexityLedger
    x_raw: np.ndarray | None = field(default=None, repr=False)
    rank_deficient: bool = False


def objective(Y: np.ndarray, G: np.ndarray, X: np.ndarray, lambda0: float) -> float:
    """``0.5 ||Y - G X||_F^2 + (lambda0 / 2) sum_k ||x_k||^2``."""
    E = Y - G @ X
    return 0.5 * float(np.vdot(E, E).real) + 0.5 * lambda0 * float(np.vdot(X, X).real)


def row_energies(X: np.ndarray) -> np.ndarray:
    return np.einsum("kj,kj->k", X.real, X.real) + np.einsum("kj,kj->k", X.imag, X.imag)


def closed_form_update(g: np.ndarray, R: np.ndarray, lambda0: float, ledger: ComplexityLedger | None = None) -> np.ndarray:
    """Minimiser of ``0.5 ||R - g x^T||^2 + (lambda0/2) ||x||^2``: ``g^H R / (g^H g + lambda0)``."""
    denom = float(np.vdot(g, g).real) + lambda0
    if denom == 0.0:
        raise DegenerateInputError("zero channel column with lambda0 = 0")
    if ledger is not None:
        ledger.counted["sweeps"] += g.shape[0] * (R.shape[1] + 1)
    return (g.conj() @ R) / denom


def residual_for_user(Y: np.ndarray, G: np.ndarray, x_hat: np.ndarray, omega, k: int) -> np.ndarray:
    """``Y - sum_{l in omega, l != k} g_l x_l^T``."""
    omega = np.asarray(omega)
    if k not in set(omega.tolist()):
        raise ValueError(f"user {k} is not in the candidate set")
    others = omega[omega != k]
    return Y - G[:, others] @ x_hat[others]


def _check_shapes(Y: np.ndarray, G: np.ndarray) -> None:
    if Y.ndim != 2 or G.ndim != 2 or Y.shape[0] != G.shape[0]:
        raise ValueError(f"shape mismatch: Y {Y.shape}, G {G.shape}")


def _direct_sweep(Y, G, X, omega, lambda0, ledger, probe, t):
    """One Gauss-Seidel pass over ``omega`` recomputing each residual in full."""
    ka = len(omega)
    if ka == 0:
        return
    N, J = Y.shape
    Gw = G[:, omega]
    Xw = X[omega]
    for i in range(ka):
        Xw[i] = 0.0  # drops user i from the interference sum
        R = Y - Gw @ Xw
        if ledger is not None:
            ledger.counted["sweeps"] += N * J * (ka - 1)
        Xw[i] = closed_form_update(Gw[:, i], R, lambda0, ledger)
        X[omega[i]] = Xw[i]
        if probe is not None:
            probe(t, i, omega, X)


def _new_ledger(algorithm: str, ledger: ComplexityLedger | None) -> ComplexityLedger:
    if ledger is None:
        ledger = ComplexityLedger()
    ledger.algorithm = algorithm
    return ledger


def run_bcd(
    Y,
    G,
    params: SolverParams,
    ledger: ComplexityLedger | None = None,
    probe=None,
    method: str = "direct",
) -> SolverOutput:
    """``params.T`` cyclic sweeps over all users from ``X = 0``; no pruning.

    ``method="direct"`` rebuilds every residual from scratch, the textbook
    cost the closed-form count describes. ``method="residual"`` keeps
    ``Y - G X`` updated instead: same iterates up to rounding, about ``K``
    times cheaper, and its ledger (algorithm ``bcd-residual``) counts what it
    actually does. ``probe(t, i, omega, X)`` runs after every direct update.
    """
    _check_shapes(Y, G)
    K = G.shape[1]
    X = np.zeros((K, Y.shape[1]), dtype=complex)
    omega = np.arange(K)
    if method == "residual":
        if probe is not None:
            raise ValueError("probes need method='direct'")
        ledger = _new_ledger("bcd-residual", ledger)
        Yc = np.ascontiguousarray(Y, dtype=complex)
        GT = np.ascontiguousarray(G.T, dtype=complex)
        ledger.counted["sweeps"] += _kernels.bcd_residual_sweeps(Yc, GT, X, Yc.copy(), params.T, params.lambda0)
        return SolverOutput(X, [omega], ledger)
    if method != "direct":
        raise ValueError(f"unknown method {method!r}")
    ledger = _new_ledger("bcd", ledger)
    for t in range(1, params.T + 1):
        _direct_sweep(Y, G, X, omega, params.lambda0, ledger, probe, t)
    return SolverOutput(X, [omega], ledger)


def prune(state: CandidateState, psi_t: int, ledger: ComplexityLedger | None = None, tie_tol: float = TIE_TOL) -> CandidateState:
    """Discard the ``psi_t`` lowest-energy candidates and zero their rows.

    Energies within ``tie_tol`` (relative to the largest) of the cut-off are
    treated as tied, and ties keep the smaller user index.
    """
    omega = np.asarray(state.omega)
    ka = len(omega)
    if psi_t < 0 or psi_t > ka:
        raise ScheduleError(f"cannot discard {psi_t} of {ka} candidates")
    if ledger is not None:
        ledger.counted["pruning"] += 2 * ka
    if psi_t == 0:
        return CandidateState(omega.copy(), state.x_hat.copy())
    keep = ka - psi_t
    e = row_energies(state.x_hat[omega])
    order = np.lexsort((omega, -e))
    if keep == 0:
        kept = np.array([], dtype=omega.dtype)
    else:
        cut = e[order[keep - 1]]
        band = tie_tol * float(e.max()) if e.size else 0.0
        sure = np.flatnonzero(e > cut + band)
        tied = np.flatnonzero(np.abs(e - cut) <= band)
        tied = tied[np.argsort(omega[tied], kind="stable")]
        kept = np.concatenate([sure, tied[: keep - len(sure)]])
        kept = omega[kept]
    new_omega = np.sort(kept)
    X = state.x_hat.copy()
    dropped = np.setdiff1d(omega, new_omega, assume_unique=True)
    X[dropped] = 0.0
    return CandidateState(new_omega, X)


def run_ebcd(Y, G, params: SolverParams, ledger: ComplexityLedger | None = None, probe=None) -> SolverOutput:
    """BCD over a shrinking candidate set, recomputing each residual in full."""
    _check_shapes(Y, G)
    K = G.shape[1]
    params.check_schedule(K)
    ledger = _new_ledger("ebcd", ledger)
    X = np.zeros((K, Y.shape[1]), dtype=complex)
    omega = np.arange(K)
    history = [omega]
    for t in range(1, params.T + 1):
        _direct_sweep(Y, G, X, omega, params.lambda0, ledger, probe, t)
        if t <= params.T_b:
            state = prune(CandidateState(omega, X), params.psi_schedule[t - 1], ledger)
            omega, X = state.omega, state.x_hat
            history.append(omega)
    return SolverOutput(X, history, ledger)


class ProductCache:
    """Rank-one products ``g_l x_l^T`` keyed by user and the sweep that produced ``x_l``.

    Sweep 0 is the all-zero starting point, so its products are zero and free.
    Backed by dense arrays so the compiled sweep can share it.
    """

    def __init__(self, K: int, shape: tuple[int, int], disabled: bool = False):
        self.products = np.zeros((K,) + tuple(shape), dtype=complex)
        self.tags = np.zeros(K, dtype=np.int64)
        self.disabled = disabled
        self._zero = np.zeros(shape, dtype=complex)

    def put(self, user: int, sweep: int, product: np.ndarray) -> None:
        self.products[user] = product
        self.tags[user] = sweep

    def get(self, user: int, sweep: int) -> np.ndarray:
        if sweep == 0 or self.disabled:
            return self._zero
        if self.tags[user] != sweep:
            raise CacheMissError(f"no cached product for user {user} from sweep {sweep}")
        return self.products[user]


@dataclass
class SweepMemory:
    """What the next sweep's first ``W`` needs from the sweep just finished."""

    w_last: np.ndarray | None = None  # W for the last candidate of the finished sweep
    last_user: int | None = None
    dropped: tuple[int, ...] = ()  # users pruned after the finished sweep


def w_first(
    t: int,
    T_b: int,
    omega: np.ndarray,
    G: np.ndarray,
    x_hat: np.ndarray,
    cache: ProductCache,
    memory: SweepMemory,
    ledger: ComplexityLedger | None = None,
) -> np.ndarray:
    """Interference sum for the first candidate of sweep ``t``.

    * ``t == 1``: zero, since every row starts at zero.
    * ``2 <= t <= T_b``: the set changed, so the sum over ``omega[1:]`` is formed
      from scratch and each product is cached for this sweep's recursion.
    * ``t > T_b``: the last ``W`` of the previous sweep plus the last
      candidate's fresh product, minus the cached product of ``omega[0]``.
      Users pruned right after the previous sweep (only at ``t = T_b + 1``) are
      removed with their cached products too.
    """
    N, J = cache._zero.shape
    if t == 1:
        return np.zeros((N, J), dtype=complex)
    if t <= T_b:
        rest = omega[1:]
        P = G[:, rest].T[:, :, None] * x_hat[rest][:, None, :]  # (ka-1) x N x J
        if ledger is not None:
            ledger.counted["sweeps"] += N * J * len(rest)
        cache.products[rest] = P
        cache.tags[rest] = t - 1
        return P.sum(axis=0)
    if memory.w_last is None:
        raise CacheMissError(f"sweep {t} needs the W of a completed previous sweep")
    last = memory.last_user
    P_last = np.outer(G[:, last], x_hat[last])
    if ledger is not None:
        ledger.counted["sweeps"] += N * J
    cache.put(last, t - 1, P_last)
    W = memory.w_last + P_last
    for user in memory.dropped:
        W = W - cache.get(user, t - 1)
    return W - cache.get(omega[0], t - 1)


def w_step(
    w_prev: np.ndarray,
    g_prev: np.ndarray,
    x_new_prev: np.ndarray,
    old_product: np.ndarray,
    ledger: ComplexityLedger | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Advance ``W`` from candidate ``i-1`` to ``i`` within a sweep.

    ``old_product`` is the cached ``g_i x_i^T`` from the previous sweep; the only
    new product is ``g_{i-1} x_{i-1}^T``, which is returned for caching.
    """
    P = np.outer(g_prev, x_new_prev)
    if ledger is not None:
        ledger.counted["sweeps"] += P.size
    return w_prev + P - old_product, P


def _cr_sweep_python(Y, G, X, omega, W, cache, t, lam, ledger, probe):
    for i in range(len(omega)):
        k = omega[i]
        if i > 0:
            prev = omega[i - 1]
            W, P = w_step(W, G[:, prev], X[prev], cache.get(k, t - 1), ledger)
            cache.put(prev, t, P)
        if probe is not None:
            probe(t, i, omega, W, X)
        X[k] = closed_form_update(G[:, k], Y - W, lam, ledger)
    return W


def run_cr_ebcd(
    Y,
    G,
    params: SolverParams,
    ledger: ComplexityLedger | None = None,
    probe=None,
    disable_cache: bool = False,
    compiled: bool = True,
) -> SolverOutput:
    """EBCD with the interference sum carried from one coordinate to the next.

    ``probe(t, i, omega, W, X)`` sees each ``W`` before the update it feeds
    (this forces the pure Python sweep). ``disable_cache`` replaces every
    cached product by zero, for fault injection.
    """
    _check_shapes(Y, G)
    K = G.shape[1]
    N, J = Y.shape
    params.check_schedule(K)
    ledger = _new_ledger("cr-ebcd", ledger)
    lam = params.lambda0
    Y = np.ascontiguousarray(Y, dtype=complex)
    GT = np.ascontiguousarray(G.T, dtype=complex)
    X = np.zeros((K, J), dtype=complex)
    omega = np.arange(K)
    history = [omega]
    cache = ProductCache(K, (N, J), disabled=disable_cache)
    memory = SweepMemory()
    fast = compiled and probe is None
    for t in range(1, params.T + 1):
        W = None
        if len(omega):
            W = w_first(t, params.T_b, omega, G, X, cache, memory, ledger)
            if fast:
                W = np.ascontiguousarray(W)
                n = _kernels.cr_sweep(Y, GT, X, omega, W, cache.products, cache.tags, t, lam, disable_cache)
                if n < 0:
                    raise CacheMissError(f"no cached product for user {omega[-n - 1]} from sweep {t - 1}")
                ledger.counted["sweeps"] += n
            else:
                W = _cr_sweep_python(Y, G, X, omega, W, cache, t, lam, ledger, probe)
        memory = SweepMemory(W, int(omega[-1]) if len(omega) else None)
        if t <= params.T_b:
            state = prune(CandidateState(omega, X), params.psi_schedule[t - 1], ledger)
            memory.dropped = tuple(np.setdiff1d(omega, state.omega).tolist())
            omega, X = state.omega, state.x_hat
            history.append(omega)
    return SolverOutput(X, history, ledger)


SOLVERS = {"bcd": run_bcd, "ebcd": run_ebcd, "cr-ebcd": run_cr_ebcd}


def threshold_support(x_hat: np.ndarray, v_th: float) -> tuple[int, ...]:
    """Users whose row energy strictly exceeds ``v_th``."""
    if not v_th > 0:
        raise ValueError("v_th must be positive")
    return tuple(np.flatnonzero(row_energies(x_hat) > v_th).tolist())


def oracle_support(x_hat: np.ndarray, s_true: int) -> tuple[int, ...]:
    """The ``s_true`` highest-energy rows, ties to the smaller index."""
    K = x_hat.shape[0]
    if not 0 <= s_true <= K:
        raise ValueError(f"s_true must lie in [0, {K}]")
    e = row_energies(x_hat)
    order = np.lexsort((np.arange(K), -e))
    return tuple(sorted(order[:s_true].tolist()))


def ls_refine(Y: np.ndarray, G: np.ndarray, gamma_hat) -> tuple[np.ndarray, bool]:
    """Least-squares symbols on the detected support, zero elsewhere.

    Returns the K x J estimate and whether ``G[:, gamma_hat]`` was numerically
    rank deficient (the minimum-norm solution is used then).
    """
    gamma = list(gamma_hat)
    K = G.shape[1]
    X = np.zeros((K, Y.shape[1]), dtype=complex)
    if not gamma:
        return X, False
    if len(gamma) > G.shape[0]:
        raise RankError(f"support size {len(gamma)} exceeds N={G.shape[0]}")
    Z, _, rank, _ = np.linalg.lstsq(G[:, gamma], Y, rcond=None)
    deficient = rank < len(gamma)
    if deficient:
        warnings.warn(f"G restricted to the support has rank {rank} < {len(gamma)}", stacklevel=2)
    X[gamma] = Z
    return X, deficient


def demap(x_refined: np.ndarray, gamma_hat, constellation: Constellation | None = None) -> np.ndarray:
    """Nearest-symbol decisions on support rows, 0 elsewhere.

    Equidistant points go to the lexicographically smallest ``(re, im)`` symbol.
    """
    if constellation is None:
        constellation = get_constellation("qpsk")
    pts = constellation.symbols  # already sorted lexicographically
    out = np.zeros_like(x_refined, dtype=complex)
    gamma = list(gamma_hat)
    if not gamma:
        return out
    z = x_refined[gamma]
    d = np.abs(z[..., None] - pts) ** 2
    dmin = d.min(axis=-1, keepdims=True)
    near = d <= dmin * (1 + 1e-12) + 1e-300
    out[gamma] = pts[np.argmax(near, axis=-1)]
    return out


def detect(
    Y,
    G,
    algorithm: str,
    params: SolverParams,
    constellation: Constellation | None = None,
    s_true: int | None = None,
    raw: SolverOutput | None = None,
) -> DetectionResult:
    """Run a solver, pick the support, refine by LS and demap.

    With ``params.oracle`` the support is the ``s_true`` strongest rows instead
    of the energy threshold. A precomputed ``raw`` output may be passed to
    share one solver run between the adaptive and oracle variants; its ledger
    is copied, not modified.
    """
    if raw is None:
        raw = SOLVERS[algorithm](Y, G, params)
    ledger = ComplexityLedger(raw.ledger.algorithm, dict(raw.ledger.counted))
    K = G.shape[1]
    N, J = Y.shape
    n_scored = K if algorithm == "bcd" else len(raw.final_omega)
    ledger.charge("threshold", 2 * n_scored)
    if params.oracle:
        if s_true is None:
            raise ValueError("oracle detection needs the true sparsity")
        gamma_hat = oracle_support(raw.x_hat, s_true)
    else:
        gamma_hat = threshold_support(raw.x_hat, params.v_th)
    if len(gamma_hat) > N:
        # keep the N strongest rows so LS stays overdetermined
        gamma_hat = oracle_support(raw.x_hat, N)
    s = len(gamma_hat)
    x_ref, deficient = ls_refine(Y, G, gamma_hat)
    ledger.charge("ls", J * (2 * N * s**2 + s**3))
    if algorithm == "bcd":
        ledger.params = ComplexityParams(K, N, J, params.T, 0, (), s)
    else:
        ledger.params = ComplexityParams(K, N, J, params.T, params.T_b, params.psi_schedule, s)
    decisions = demap(x_ref, gamma_hat, constellation)
    return DetectionResult(gamma_hat, x_ref, decisions, ledger, raw.x_hat, deficient)
