"""Resource/performance trade-off scoring.

A compressed model is scored against its base model by combining a quality
factor (per-metric degradation ratios raised to a fixed exponent and
averaged) with a resource cost factor (a weighted blend of the time and
energy change ratios).  The product is the final score; lower is better,
and a model identical to its base scores exactly 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Union

from .errors import BelowRandomFloor, DomainError

# Exponent applied to each quality ratio before averaging.  Chosen so that
# quality loss dominates resource savings once degradation is substantial.
QUALITY_EXPONENT = 1.5

# Fraction of the random-guess floor subtracted from benchmark scores before
# forming ratios.  Keeps near-random scores from looking deceptively close
# to strong ones.
FLOOR_DISCOUNT = 0.8


class Direction(Enum):
    """Whether smaller or larger raw values mean better performance."""

    LOWER_BETTER = "lower"
    HIGHER_BETTER = "higher"


@dataclass(frozen=True)
class WeightProfile:
    """Weighting of time cost (alpha) against energy cost (beta).

    The weights must be non-negative and sum to 1, so the cost factor of an
    unchanged model is exactly 1 under every profile.
    """

    name: str
    alpha: float
    beta: float

    def __post_init__(self):
        if not self.name:
            raise DomainError("weight profile needs a name")
        if self.alpha < 0 or self.beta < 0:
            raise DomainError(f"profile {self.name!r}: weights must be non-negative")
        if abs(self.alpha + self.beta - 1.0) > 1e-12:
            raise DomainError(
                f"profile {self.name!r}: alpha + beta must equal 1, got {self.alpha + self.beta!r}"
            )


BALANCED = WeightProfile("balanced", 0.5, 0.5)
ENERGY_FOCUS = WeightProfile("energy", 0.1, 0.9)
RUNTIME_FOCUS = WeightProfile("runtime", 0.9, 0.1)
BUILTIN_PROFILES = (BALANCED, ENERGY_FOCUS, RUNTIME_FOCUS)


def profile_by_name(name: str) -> WeightProfile:
    for p in BUILTIN_PROFILES:
        if p.name == name:
            return p
    raise DomainError(f"unknown weight profile {name!r}; expected one of "
                      + ", ".join(p.name for p in BUILTIN_PROFILES))


@dataclass(frozen=True)
class MetricRecord:
    """One quality measurement of a compressed model against its base.

    Lower-is-better records (perplexity and the like) take no random floor;
    higher-is-better records (benchmark accuracies) require one.  Values are
    validated on construction so that a ratio can always be formed.
    """

    name: str
    direction: Direction
    base_value: float
    model_value: float
    random_floor: float | None = None

    def __post_init__(self):
        if not self.name:
            raise DomainError("metric record needs a name")
        if self.direction is Direction.LOWER_BETTER:
            if self.random_floor is not None:
                raise DomainError(f"{self.name}: lower-is-better metrics take no random floor")
            if self.base_value <= 0 or self.model_value <= 0:
                raise DomainError(f"{self.name}: lower-is-better values must be positive")
        else:
            if self.random_floor is None:
                raise DomainError(f"{self.name}: higher-is-better metrics require a random floor")
            if self.random_floor < 0:
                raise DomainError(f"{self.name}: random floor must be non-negative")
            floor = FLOOR_DISCOUNT * self.random_floor
            if self.base_value - floor <= 0:
                raise BelowRandomFloor(
                    f"{self.name}: base score {self.base_value} is at or below "
                    f"{FLOOR_DISCOUNT:g} x random floor {self.random_floor}"
                )
            if self.model_value - floor <= 0:
                raise BelowRandomFloor(
                    f"{self.name}: model score {self.model_value} is at or below "
                    f"{FLOOR_DISCOUNT:g} x random floor {self.random_floor}"
                )


def ratio_lower_better(base: float, model: float) -> float:
    """Change ratio for metrics where smaller is better (perplexity, time, energy).

    Returns model / base: 1 means unchanged, above 1 means worse.
    """
    if base <= 0 or model <= 0:
        raise DomainError(f"lower-is-better ratio requires positive values, got {base} and {model}")
    return model / base


def ratio_higher_better(base: float, model: float, random_floor: float) -> float:
    """Change ratio for metrics where larger is better (benchmark accuracies).

    Both scores are first reduced by 4/5 of the random-guess floor, then the
    ratio base/model is returned so that degradation again lands above 1.
    """
    if random_floor < 0:
        raise DomainError(f"random floor must be non-negative, got {random_floor}")
    floor = FLOOR_DISCOUNT * random_floor
    adj_base = base - floor
    adj_model = model - floor
    if adj_base <= 0:
        raise BelowRandomFloor(
            f"base score {base} is at or below {FLOOR_DISCOUNT:g} x random floor {random_floor}"
        )
    if adj_model <= 0:
        raise BelowRandomFloor(
            f"model score {model} is at or below {FLOOR_DISCOUNT:g} x random floor {random_floor}"
        )
    return adj_base / adj_model


def metric_ratio(record: MetricRecord) -> float:
    """Change ratio of a single record, direction handled appropriately."""
    if record.direction is Direction.LOWER_BETTER:
        return ratio_lower_better(record.base_value, record.model_value)
    return ratio_higher_better(record.base_value, record.model_value, record.random_floor)


def aggregate_quality(records: Sequence[MetricRecord],
                      exponent: float = QUALITY_EXPONENT) -> float:
    """Quality factor over a set of metrics.

    Each record's change ratio is raised to ``exponent`` and the results are
    averaged.  The mean itself is the quality factor entering the final
    score; it is not raised to the exponent a second time.
    """
    if not records:
        raise DomainError("aggregate_quality needs at least one metric record")
    return sum(metric_ratio(r) ** exponent for r in records) / len(records)


@dataclass(frozen=True)
class ResourceRatios:
    """Time and energy change ratios (compressed over base)."""

    time_ratio: float
    energy_ratio: float

    def __post_init__(self):
        if self.time_ratio <= 0 or self.energy_ratio <= 0:
            raise DomainError("resource ratios must be positive")

    @classmethod
    def from_measurements(cls, base_time: float, model_time: float,
                          base_energy: float, model_energy: float) -> "ResourceRatios":
        return cls(ratio_lower_better(base_time, model_time),
                   ratio_lower_better(base_energy, model_energy))


@dataclass(frozen=True)
class OptResult:
    """Final score of one method under one weight profile.

    quality_factor x cost_factor = opt; all three are kept so a consumer can
    see which side drove the score.
    """

    profile: WeightProfile
    quality_factor: float
    cost_factor: float
    opt: float


Quality = Union[
    "MetricRecord",
    Sequence["MetricRecord"],
    tuple,  # (base_value, model_value) of a lower-is-better metric
]


def opt_score(quality: Quality, ratios: ResourceRatios, profile: WeightProfile,
              exponent: float = QUALITY_EXPONENT) -> OptResult:
    """Score one compressed model; lower is better.

    ``quality`` is either a (base, model) pair of a lower-is-better metric
    such as perplexity, a single MetricRecord, or a sequence of records that
    are aggregated into one quality factor.
    """
    if isinstance(quality, MetricRecord):
        q = aggregate_quality([quality], exponent)
    elif isinstance(quality, tuple):
        if len(quality) != 2:
            raise DomainError("a bare quality pair must be (base_value, model_value)")
        q = ratio_lower_better(quality[0], quality[1]) ** exponent
    else:
        q = aggregate_quality(list(quality), exponent)
    cost = profile.alpha * ratios.time_ratio + profile.beta * ratios.energy_ratio
    return OptResult(profile=profile, quality_factor=q, cost_factor=cost, opt=q * cost)


def rank_methods(candidates: Sequence[tuple[str, OptResult]]) -> list[tuple[str, OptResult]]:
    """Order scored methods best first.

    Ascending by score, ties broken by label.  All candidates must have been
    scored under the same weight profile; mixing profiles would compare
    incomparable numbers.
    """
    ordered = list(candidates)
    if not ordered:
        return []
    profile = ordered[0][1].profile
    for label, result in ordered:
        if result.profile != profile:
            raise DomainError(
                f"rank_methods: {label!r} was scored under profile {result.profile.name!r}, "
                f"others under {profile.name!r}"
            )
    return sorted(ordered, key=lambda c: (c[1].opt, c[0]))
