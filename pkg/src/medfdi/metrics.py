"""Evaluation quantities: precision, scenario accuracy, and effort savings.

All reported percentages are rounded half-up to one decimal place. The
effort model compares manual triage time in minutes (2 minutes per CVE plus
10 per relevant CVE) against automated runtime in seconds (5 seconds per CVE
plus 12 per relevant CVE).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

from .errors import DivisionDomainError
from .tech_identifier import TechnologyFactor, TechnologyList, normalize_keyword


def round_percent(value: float | Fraction) -> float:
    """Half-up rounding to one decimal, e.g. 36/57 -> 63.2."""
    quantized = Decimal(str(float(value) * 100)).quantize(
        Decimal("0.1"), rounding=ROUND_HALF_UP
    )
    return float(quantized)


def precision(tp: int, selected: int) -> Fraction:
    """Exact ratio of true positives among selected items."""
    if selected == 0:
        raise DivisionDomainError("precision undefined for zero selected items")
    if not 0 <= tp <= selected:
        raise ValueError(f"tp={tp} must be within [0, {selected}]")
    return Fraction(tp, selected)


def precision_percent(tp: int, selected: int) -> float:
    return round_percent(precision(tp, selected))


def asg_average(per_device: list[float]) -> float:
    """Unweighted mean of per-device scenario accuracies, one decimal."""
    if not per_device:
        raise ValueError("need at least one per-device accuracy")
    for value in per_device:
        if not 0.0 <= value <= 100.0:
            raise ValueError(f"accuracy {value} outside [0, 100]")
    mean = sum(per_device) / len(per_device)
    return float(Decimal(str(mean)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class EffortInputs:
    """x: total CVE count for the device; y: CVEs relevant to injection."""

    x: int
    y: int

    def __post_init__(self):
        if self.x < 0 or not 0 <= self.y <= self.x:
            raise ValueError(f"need 0 <= y <= x, got x={self.x}, y={self.y}")


@dataclass(frozen=True)
class EffortEstimate:
    manual_minutes: int
    automated_seconds: int


def effort_estimate(e: EffortInputs) -> EffortEstimate:
    return EffortEstimate(
        manual_minutes=2 * e.x + 10 * e.y,
        automated_seconds=5 * e.x + 12 * e.y,
    )


@dataclass(frozen=True)
class PrecisionRecall:
    precision: float
    recall: float
    false_positives: tuple[tuple[str, TechnologyFactor], ...]
    false_negatives: tuple[tuple[str, TechnologyFactor], ...]


def tech_precision_recall(
    extracted: TechnologyList,
    ground_truth: set[tuple[str, TechnologyFactor]],
) -> PrecisionRecall:
    """Precision/recall of extraction against an annotated technology set.

    Both sides are compared as (normalized keyword, factor) pairs. An empty
    denominator counts as a vacuous 1.0.
    """
    extracted_pairs = {
        (normalize_keyword(entry.keyword), entry.factor) for entry in extracted.entries
    }
    truth_pairs = {(normalize_keyword(k), f) for k, f in ground_truth}

    tp = extracted_pairs & truth_pairs
    fp = sorted(extracted_pairs - truth_pairs)
    fn = sorted(truth_pairs - extracted_pairs)

    p = len(tp) / len(extracted_pairs) if extracted_pairs else 1.0
    r = len(tp) / len(truth_pairs) if truth_pairs else 1.0
    return PrecisionRecall(
        precision=p,
        recall=r,
        false_positives=tuple(fp),
        false_negatives=tuple(fn),
    )


@dataclass
class DeviceCounts:
    """One per-device row of the run summary table."""

    device: str
    retrieved: int = 0
    auto_cve: int = 0
    verified_cve: int | None = None
    scenarios_total: int = 0
    scenarios_accepted: int = 0
    scenarios_unjudgeable: int = 0
    tech_counts: dict[TechnologyFactor, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.verified_cve is not None and self.verified_cve > self.auto_cve:
            raise ValueError("verified_cve cannot exceed auto_cve")
        if self.scenarios_accepted > self.scenarios_total:
            raise ValueError("scenarios_accepted cannot exceed scenarios_total")

    def judged(self) -> int:
        return self.scenarios_total - self.scenarios_unjudgeable

    def asg_accuracy_percent(self) -> float | None:
        """Accepted share of judged scenarios; None when nothing was judged.

        Unjudgeable scenarios are excluded from the denominator and reported
        separately.
        """
        judged = self.judged()
        if judged == 0:
            return None
        return round_percent(Fraction(self.scenarios_accepted, judged))


@dataclass
class CountTable:
    rows: list[DeviceCounts]

    def total_retrieved(self) -> int:
        return sum(r.retrieved for r in self.rows)

    def total_auto_cve(self) -> int:
        return sum(r.auto_cve for r in self.rows)

    def total_verified_cve(self) -> int:
        return sum(r.verified_cve or 0 for r in self.rows)

    def total_tech_entries(self) -> int:
        return sum(sum(r.tech_counts.values()) for r in self.rows)

    def average_asg_accuracy(self) -> float | None:
        values = [
            acc for r in self.rows
            if (acc := r.asg_accuracy_percent()) is not None
        ]
        if not values:
            return None
        return asg_average(values)
