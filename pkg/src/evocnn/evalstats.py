"""Binary-classifier contingency table and every ratio derived from it.

Ratios whose denominator is zero come back as None ("undefined") instead of
raising or returning infinities; report renderers print them as "undef".
Internally everything is kept at full float precision; percent formatting
rounds to four significant digits only at the rendering edge.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterable


class EmptyPopulation(ValueError):
    pass


@dataclass(frozen=True)
class ContingencyTable:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("contingency counts must be non-negative")
        if self.population == 0:
            raise EmptyPopulation("contingency table has zero population")

    @property
    def population(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def predicted_positive(self) -> int:
        return self.tp + self.fp

    @property
    def predicted_negative(self) -> int:
        return self.fn + self.tn

    @property
    def confirmed_positive(self) -> int:
        return self.tp + self.fn

    @property
    def confirmed_negative(self) -> int:
        return self.fp + self.tn


@dataclass(frozen=True)
class DiagnosticStats:
    accuracy: float | None
    prevalence: float | None
    true_positive_rate: float | None
    false_negative_rate: float | None
    false_positive_rate: float | None
    true_negative_rate: float | None
    positive_predictive_value: float | None
    negative_predictive_value: float | None
    false_discovery_rate: float | None
    false_omission_rate: float | None
    positive_likelihood_ratio: float | None
    negative_likelihood_ratio: float | None
    diagnostic_odds_ratio: float | None

    def as_dict(self) -> dict[str, float | None]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def tabulate(pairs: Iterable[tuple[int, int]]) -> ContingencyTable:
    """Count (predicted, actual) pairs; both values must be 0 or 1."""
    tp = fp = fn = tn = 0
    seen = False
    for predicted, actual in pairs:
        seen = True
        if predicted not in (0, 1) or actual not in (0, 1):
            raise ValueError(f"predictions must be binary, got ({predicted}, {actual})")
        if predicted == 1 and actual == 1:
            tp += 1
        elif predicted == 1 and actual == 0:
            fp += 1
        elif predicted == 0 and actual == 1:
            fn += 1
        else:
            tn += 1
    if not seen:
        raise EmptyPopulation("no predictions to tabulate")
    return ContingencyTable(tp=tp, fp=fp, fn=fn, tn=tn)


def _ratio(num: float, den: float) -> float | None:
    if den == 0:
        return None
    return num / den


def stats(t: ContingencyTable) -> DiagnosticStats:
    """All diagnostic ratios of a contingency table; None where undefined."""
    tpr = _ratio(t.tp, t.confirmed_positive)
    fnr = _ratio(t.fn, t.confirmed_positive)
    fpr = _ratio(t.fp, t.confirmed_negative)
    tnr = _ratio(t.tn, t.confirmed_negative)
    ppv = _ratio(t.tp, t.predicted_positive)
    npv = _ratio(t.tn, t.predicted_negative)
    plr = _ratio(tpr, fpr) if tpr is not None and fpr is not None else None
    nlr = _ratio(fnr, tnr) if fnr is not None and tnr is not None else None
    dor = _ratio(plr, nlr) if plr is not None and nlr is not None else None
    return DiagnosticStats(
        accuracy=(t.tp + t.tn) / t.population,
        prevalence=t.confirmed_positive / t.population,
        true_positive_rate=tpr,
        false_negative_rate=fnr,
        false_positive_rate=fpr,
        true_negative_rate=tnr,
        positive_predictive_value=ppv,
        negative_predictive_value=npv,
        false_discovery_rate=None if ppv is None else 1.0 - ppv,
        false_omission_rate=None if npv is None else 1.0 - npv,
        positive_likelihood_ratio=plr,
        negative_likelihood_ratio=nlr,
        diagnostic_odds_ratio=dor,
    )


# ---------------------------------------------------------------------------
# Report rendering

_PERCENT_FIELDS = {
    "accuracy", "prevalence",
    "true_positive_rate", "false_negative_rate",
    "false_positive_rate", "true_negative_rate",
    "positive_predictive_value", "negative_predictive_value",
    "false_discovery_rate", "false_omission_rate",
    "negative_likelihood_ratio",
}

_LABELS = {
    "accuracy": "Accuracy",
    "prevalence": "Prevalence",
    "true_positive_rate": "True Positive Rate",
    "false_negative_rate": "False Negative Rate",
    "false_positive_rate": "False Positive Rate",
    "true_negative_rate": "True Negative Rate",
    "positive_predictive_value": "Positive Predictive Value",
    "negative_predictive_value": "Negative Predictive Value",
    "false_discovery_rate": "False Discovery Rate",
    "false_omission_rate": "False Omission Rate",
    "positive_likelihood_ratio": "Positive Likelihood Ratio",
    "negative_likelihood_ratio": "Negative Likelihood Ratio",
    "diagnostic_odds_ratio": "Diagnostic Odds Ratio",
}


def format_sig(value: float, sig: int = 4) -> str:
    return f"{value:.{sig}g}"


def format_value(name: str, value: float | None) -> str:
    if value is None:
        return "undef"
    if name in _PERCENT_FIELDS:
        return f"{format_sig(value * 100.0)}%"
    return format_sig(value)


def to_csv(t: ContingencyTable, s: DiagnosticStats) -> str:
    lines = ["metric,value"]
    for name, count in (("true_positive", t.tp), ("false_positive", t.fp),
                        ("false_negative", t.fn), ("true_negative", t.tn),
                        ("population", t.population)):
        lines.append(f"{name},{count}")
    for name, value in s.as_dict().items():
        lines.append(f"{name},{'' if value is None else repr(value)}")
    return "\n".join(lines) + "\n"


def to_text(t: ContingencyTable, s: DiagnosticStats) -> str:
    """Aligned plain-text rendering of the contingency table and all ratios."""
    rows = [
        ("Population", str(t.population)),
        ("Predicted Positive", str(t.predicted_positive)),
        ("Predicted Negative", str(t.predicted_negative)),
        ("Confirmed Positive", str(t.confirmed_positive)),
        ("Confirmed Negative", str(t.confirmed_negative)),
        ("True Positive", str(t.tp)),
        ("False Positive", str(t.fp)),
        ("False Negative", str(t.fn)),
        ("True Negative", str(t.tn)),
    ]
    rows += [(_LABELS[name], format_value(name, value))
             for name, value in s.as_dict().items()]
    width = max(len(label) for label, _ in rows)
    return "\n".join(f"{label:<{width}}  {value}" for label, value in rows) + "\n"
