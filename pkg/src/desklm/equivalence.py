"""Cross-checks between the naive and efficient attention kernels.

Two independent implementations of the same scores are only useful if
something compares them routinely.  This module holds that machinery:

  * AllocationMeter, a tiny high-water-mark counter the kernels call
    into when handed a meter,
  * run_equivalence_suite, which sweeps shapes and term combinations
    and compares scores and gradients between kernels,
  * run_allocation_audit, which runs both kernels under the meter and
    checks the efficient kernel's peak against its O(k d) budget.

The suite accepts a fault name so it can demonstrate that it would
catch a mis-oriented position-to-content gather; a passing suite with
the fault injected is itself a failure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionParams, scores_efficient, scores_naive
from .errors import ConfigError
from .relpos import build_delta_matrix
from .seeding import rng_for, truncated_normal
from .tensor import Tape, Tensor


class AllocationMeter:
    """Tracks live float64 counts on the position pathway.

    The kernels report allocation and release of every array that holds
    relative-position embedding data: the projected tables K_r and Q_r,
    the naive kernel's per-pair gathered rows, and the efficient
    kernel's (n, 2k) reuse products.  Content projections and the
    (n, n) score matrices exist identically under both kernels and are
    excluded, so the meter isolates exactly the cost the efficient
    kernel claims to remove.  Counts are float64 elements, not bytes.
    """

    def __init__(self) -> None:
        self.current = 0
        self.peak = 0
        self.total_allocated = 0

    def alloc(self, count: int) -> None:
        self.current += int(count)
        self.total_allocated += int(count)
        if self.current > self.peak:
            self.peak = self.current

    def release(self, count: int) -> None:
        self.current -= int(count)
        if self.current < 0:
            raise ConfigError("allocation meter released more than it allocated")


def efficient_peak_budget(n: int, k: int, d: int) -> int:
    """Permitted peak for the efficient kernel: both projected tables
    resident plus one (n, 2k) reuse buffer."""
    return n * 2 * k + 2 * (2 * k * d)


def _make_params(d: int, heads: int, seed: int, share: bool,
                 enable_c2p: bool, enable_p2c: bool) -> AttentionParams:
    def w(name):
        return Tensor(truncated_normal(rng_for(seed, f"equiv/{name}"), (d, d)),
                      requires_grad=True)

    kwargs = dict(
        heads=heads,
        w_qc=w("w_qc"), w_kc=w("w_kc"), w_vc=w("w_vc"), w_o=w("w_o"),
        enable_c2p=enable_c2p, enable_p2c=enable_p2c,
        share_projection=share,
    )
    if not share and (enable_c2p or enable_p2c):
        kwargs["_w_qr"] = w("w_qr")
        kwargs["_w_kr"] = w("w_kr")
    return AttentionParams(**kwargs)


@dataclass
class EquivalenceCase:
    n: int
    k: int
    d: int
    heads: int
    share: bool
    enable_c2p: bool
    enable_p2c: bool
    max_score_diff: float
    max_grad_diff: float
    passed: bool
    seed: int = 0


@dataclass
class EquivalenceReport:
    score_tol: float
    grad_tol: float
    fault: str | None
    cases: list[EquivalenceCase] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    @property
    def failures(self) -> list[EquivalenceCase]:
        return [c for c in self.cases if not c.passed]

    @property
    def worst_score_diff(self) -> float:
        return max((c.max_score_diff for c in self.cases), default=0.0)

    @property
    def worst_grad_diff(self) -> float:
        return max((c.max_grad_diff for c in self.cases), default=0.0)


def _grad_map(params: AttentionParams, table: Tensor) -> dict[str, np.ndarray]:
    tensors = {
        "w_qc": params.w_qc, "w_kc": params.w_kc, "table": table,
    }
    if not params.share_projection and params._w_qr is not None:
        tensors["w_qr"] = params._w_qr
        tensors["w_kr"] = params._w_kr
    out = {}
    for name, t in tensors.items():
        out[name] = None if t.grad is None else t.grad.copy()
        t.grad = None
    return out


_TERM_COMBOS = [(True, True), (True, False), (False, True), (False, False)]

# Hand-picked edges the randomized sweep might miss: single token,
# n < 2k (clipping never saturates), n > 2k (both bins heavily used),
# ragged sizes, single head.
_EDGE_SHAPES = [
    (1, 2, 8, 1),
    (4, 2, 8, 1),
    (12, 4, 8, 2),
    (24, 16, 16, 4),
    (48, 8, 16, 4),
    (33, 5, 12, 3),
]


def _run_case(n, k, d, heads, share, enable_c2p, enable_p2c, case_seed,
              score_tol, grad_tol, fault) -> EquivalenceCase:
    params = _make_params(d, heads, case_seed, share, enable_c2p, enable_p2c)
    table = Tensor(
        truncated_normal(rng_for(case_seed, "equiv/table"), (2 * k, d)),
        requires_grad=True,
    )
    h = Tensor(rng_for(case_seed, "equiv/h").normal(0.0, 1.0, (n, d)))
    dm = build_delta_matrix(n, k)
    # A fixed random functional of the scores; any nonzero choice
    # exposes gradient disagreements.
    probe = rng_for(case_seed, "equiv/probe").normal(0.0, 1.0, (n, n))

    diffs, gdiffs = [], []
    grads = {}
    ref = None
    for kernel in ("naive", "efficient"):
        with Tape() as tape:
            if kernel == "naive":
                scores = scores_naive(h, params, table, dm)
            else:
                scores = scores_efficient(h, params, table, dm, fault=fault)
            parts = []
            for hd in range(heads):
                parts.append(T.sum_all(T.mul(scores.combined[hd],
                                             T.constant(probe))))
            loss = parts[0]
            for p in parts[1:]:
                loss = T.add(loss, p)
        tape.backward(loss)
        grads[kernel] = _grad_map(params, table)
        if kernel == "naive":
            ref = [c.data.copy() for c in scores.combined]
        else:
            for hd in range(heads):
                diffs.append(np.max(np.abs(scores.combined[hd].data - ref[hd])))

    for name, gn in grads["naive"].items():
        ge = grads["efficient"][name]
        if gn is None and ge is None:
            continue
        if gn is None or ge is None:
            gdiffs.append(np.inf)
            continue
        gdiffs.append(np.max(np.abs(gn - ge)))

    max_s = float(max(diffs, default=0.0))
    max_g = float(max(gdiffs, default=0.0))
    return EquivalenceCase(
        n=n, k=k, d=d, heads=heads, share=share,
        enable_c2p=enable_c2p, enable_p2c=enable_p2c,
        max_score_diff=max_s, max_grad_diff=max_g,
        passed=(max_s <= score_tol and max_g <= grad_tol),
        seed=case_seed,
    )


def run_equivalence_suite(seed: int = 0, score_tol: float = 1e-10,
                          grad_tol: float = 1e-8,
                          fault: str | None = None,
                          n_seeds: int = 0) -> EquivalenceReport:
    """Sweep kernel configurations; compare scores and gradients.

    For each case the combined scores from both kernels are compared
    entrywise, and the gradients of an identical scalar functional of
    the scores with respect to every shared parameter are compared.
    Fixed edge shapes cover the single-token case and lengths on both
    sides of the 2k boundary; n_seeds > 0 adds that many randomized
    draws with n in [1, 64], d in {8, 16}, k in {2, 4, 8}, and every
    case runs all four term combinations.  Failed cases carry the seed
    that reproduces them.
    """
    report = EquivalenceReport(score_tol=score_tol, grad_tol=grad_tol, fault=fault)

    case_no = 0
    for n, k, d, heads in _EDGE_SHAPES:
        for share in (False, True):
            for enable_c2p, enable_p2c in _TERM_COMBOS:
                case_no += 1
                report.cases.append(_run_case(
                    n, k, d, heads, share, enable_c2p, enable_p2c,
                    case_seed=seed * 1000 + case_no,
                    score_tol=score_tol, grad_tol=grad_tol, fault=fault))

    for s in range(n_seeds):
        draw = rng_for(seed, f"equiv/sweep/{s}")
        n = int(draw.integers(1, 65))
        d = int(draw.choice([8, 16]))
        k = int(draw.choice([2, 4, 8]))
        heads = int(draw.choice([1, 2, 4]))
        share = bool(draw.integers(0, 2))
        for enable_c2p, enable_p2c in _TERM_COMBOS:
            report.cases.append(_run_case(
                n, k, d, heads, share, enable_c2p, enable_p2c,
                case_seed=seed * 1_000_000 + 1000 + s,
                score_tol=score_tol, grad_tol=grad_tol, fault=fault))
    return report


@dataclass
class AuditRow:
    n: int
    k: int
    d: int
    naive_peak: int
    efficient_peak: int
    budget: int
    within_budget: bool


def run_allocation_audit(ns=(32, 64, 128), k: int = 8, d: int = 16,
                         seed: int = 0) -> list[AuditRow]:
    """Meter both kernels across sequence lengths.

    Single-head on purpose: the budget formula describes the one-head
    kernel, and extra heads only interleave identical smaller buffers.
    Runs without a tape; the meter audits forward allocations only.
    """
    rows = []
    params = _make_params(d, 1, seed, share=False, enable_c2p=True, enable_p2c=True)
    table = Tensor(truncated_normal(rng_for(seed, "audit/table"), (2 * k, d)))
    for n in ns:
        h = Tensor(rng_for(seed, f"audit/h{n}").normal(0.0, 1.0, (n, d)))
        dm = build_delta_matrix(n, k)
        with T.no_grad():
            m_naive = AllocationMeter()
            scores_naive(h, params, table, dm, meter=m_naive)
            m_eff = AllocationMeter()
            scores_efficient(h, params, table, dm, meter=m_eff)
        budget = efficient_peak_budget(n, k, d)
        rows.append(AuditRow(
            n=n, k=k, d=d,
            naive_peak=m_naive.peak,
            efficient_peak=m_eff.peak,
            budget=budget,
            within_budget=m_eff.peak <= budget,
        ))
    return rows
