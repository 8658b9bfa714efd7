"""Complex-multiplication accounting for the BCD family of detectors.

Counting convention: one unit per scalar complex product. Additions,
comparisons and division by an already computed scalar are free. A row energy
``||x_k||^2`` is charged 2 units regardless of J, and LS refinement is charged
``J (2 N s^2 + s^3)``; both follow the closed-form totals so that measured and
predicted figures are directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

PHASES = ("sweeps", "pruning", "threshold", "ls")


@dataclass(frozen=True)
class ComplexityParams:
    K: int
    N: int
    J: int
    T: int
    T_b: int = 0
    psi_schedule: tuple[int, ...] = ()
    s: int = 0

    def __post_init__(self):
        object.__setattr__(self, "psi_schedule", tuple(int(p) for p in self.psi_schedule))
        if min(self.K, self.N, self.J) < 1 or self.T < 0 or self.s < 0:
            raise ValueError("K, N, J must be positive; T and s non-negative")
        if self.s > self.N:
            raise ValueError(f"LS needs s <= N (s={self.s}, N={self.N})")
        if len(self.psi_schedule) != self.T_b:
            raise ValueError(f"psi_schedule needs T_b={self.T_b} entries, got {len(self.psi_schedule)}")
        if self.T_b > self.T:
            raise ValueError("T_b must not exceed T")
        if any(p < 0 for p in self.psi_schedule):
            raise ValueError("psi entries must be non-negative")
        if self.final_size < 0:
            raise ValueError(f"pruning schedule removes more than K={self.K} users")

    @property
    def final_size(self) -> int:
        return self.K - sum(self.psi_schedule)

    def candidate_sizes(self) -> list[int]:
        """``K_a`` for iterations 1..T_b (sizes before each pruning step)."""
        sizes, ka = [], self.K
        for psi in self.psi_schedule:
            sizes.append(ka)
            ka -= psi
        return sizes


def _ls_cost(p: ComplexityParams) -> int:
    return p.J * (2 * p.N * p.s**2 + p.s**3)


def analytic_bcd(p: ComplexityParams) -> int:
    return p.T * p.K * (p.K * p.N * p.J + p.N) + 2 * p.K + _ls_cost(p)


def analytic_ebcd(p: ComplexityParams) -> int:
    N, J = p.N, p.J
    kb = p.final_size
    pruned = sum(ka * (ka * N * J + N) + 2 * ka for ka in p.candidate_sizes())
    return pruned + (p.T - p.T_b) * kb * (kb * N * J + N) + 2 * kb + _ls_cost(p)


def analytic_cr_ebcd(p: ComplexityParams) -> int:
    N, J, K = p.N, p.J, p.K
    kb = p.final_size
    sizes = p.candidate_sizes()
    # The first sweep has its own closed form; with T_b = 0 the first sweep is
    # already one of the fixed-set sweeps and only (2NJ + N) K_a is charged.
    if p.T_b >= 1:
        first = 2 * N * J * K + N * K - N * J + 2 * K
        middle = sum(3 * ka * N * J + ka * N - 2 * N * J + 2 * ka for ka in sizes[1:])
        tail = (p.T - p.T_b) * (2 * N * J + N) * kb
    else:
        first = middle = 0
        tail = p.T * (2 * N * J + N) * kb - (N * J if p.T >= 1 else 0)
    return first + middle + tail + 2 * kb + _ls_cost(p)


ANALYTIC = {"bcd": analytic_bcd, "ebcd": analytic_ebcd, "cr-ebcd": analytic_cr_ebcd}


def analytic_phases(algorithm: str, p: ComplexityParams) -> dict[str, int]:
    """Per-phase split of the closed-form totals (phases as in :data:`PHASES`)."""
    total = ANALYTIC[algorithm](p)
    if algorithm == "bcd":
        pruning, threshold = 0, 2 * p.K
    else:
        pruning, threshold = 2 * sum(p.candidate_sizes()), 2 * p.final_size
    ls = _ls_cost(p)
    return {
        "sweeps": total - pruning - threshold - ls,
        "pruning": pruning,
        "threshold": threshold,
        "ls": ls,
    }


@dataclass
class ComplexityLedger:
    """Per-run multiplication tallies, filled in by the instrumented solvers."""

    algorithm: str = ""
    counted: dict[str, int] = field(default_factory=lambda: dict.fromkeys(PHASES, 0))
    params: ComplexityParams | None = None

    def charge(self, phase: str, n: int) -> None:
        self.counted[phase] += int(n)

    @property
    def total(self) -> int:
        return sum(self.counted.values())

    @property
    def analytic(self) -> dict[str, int] | None:
        if self.params is None or self.algorithm not in ANALYTIC:
            return None
        return analytic_phases(self.algorithm, self.params)

    def to_dict(self) -> dict:
        d = {"algorithm": self.algorithm, "counted": dict(self.counted), "total": self.total}
        if self.params is not None:
            p = self.params
            d["params"] = {
                "K": p.K, "N": p.N, "J": p.J, "T": p.T, "T_b": p.T_b,
                "psi_schedule": list(p.psi_schedule), "s": p.s,
            }
            d["analytic"] = self.analytic
            d["analytic_total"] = ANALYTIC[self.algorithm](p)
        return d


@dataclass
class ReconcileReport:
    algorithm: str
    rows: list[tuple[str, int, int, float]]  # phase, counted, analytic, relative deviation
    tolerance: float

    @property
    def total_deviation(self) -> float:
        return self.rows[-1][3]

    @property
    def flagged(self) -> list[str]:
        return [name for name, _, _, dev in self.rows if dev > self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.flagged

    def format(self) -> str:
        lines = [f"{self.algorithm}: phase counted analytic deviation"]
        for name, c, a, dev in self.rows:
            flag = "  <-- exceeds tolerance" if dev > self.tolerance else ""
            lines.append(f"  {name:<10} {c:>14d} {a:>14d} {dev:9.2e}{flag}")
        return "\n".join(lines)


def _rel(c: int, a: int) -> float:
    if a == 0:
        return 0.0 if c == 0 else float("inf")
    return abs(c - a) / a


def reconcile(ledger: ComplexityLedger, params: ComplexityParams | None = None, tolerance: float = 0.05) -> ReconcileReport:
    """Compare counted tallies against the closed forms, phase by phase."""
    p = params or ledger.params
    if p is None:
        raise ValueError("ledger carries no parameter snapshot to reconcile against")
    if ledger.params is not None and params is not None and params != ledger.params:
        raise ValueError("params do not match the ledger's snapshot")
    if ledger.algorithm not in ANALYTIC:
        raise ValueError(f"no closed form for algorithm {ledger.algorithm!r}")
    predicted = analytic_phases(ledger.algorithm, p)
    rows = [(ph, ledger.counted[ph], predicted[ph], _rel(ledger.counted[ph], predicted[ph])) for ph in PHASES]
    total_a = sum(predicted.values())
    rows.append(("total", ledger.total, total_a, _rel(ledger.total, total_a)))
    return ReconcileReport(ledger.algorithm, rows, tolerance)
