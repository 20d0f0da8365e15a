"""Wall-time and energy measurement around a repeated workload.

Three interchangeable sources: a scripted synthetic clock for deterministic
tests, a constant-power model, and a cumulative microjoule counter file of
the kind exposed by on-chip energy meters.  One measurement may be active
per process at a time.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .errors import DomainError, SourceError, StateError

DEFAULT_REPETITIONS = 30
DEFAULT_CARBON_INTENSITY = 475.0  # g CO2-eq per kWh, world average grid
JOULES_PER_KWH = 3.6e6


@dataclass(frozen=True)
class ResourceRecord:
    """Accumulated cost of a measured workload."""

    wall_time_s: float
    energy_kwh: float
    carbon_g: float
    repetitions: int
    source: str


class SyntheticClock:
    """Scripted source for deterministic tests.

    Each start/stop cycle yields the next (time delta, energy delta) from
    the scripts; scripts cycle when exhausted so any repetition count is
    serviceable.  Energy deltas are joules, time deltas seconds.
    """

    kind = "synthetic"

    def __init__(self, energy_deltas_j: Sequence[float],
                 time_deltas_s: Sequence[float] | None = None):
        energy = [float(e) for e in energy_deltas_j]
        if not energy:
            raise DomainError("SyntheticClock needs at least one energy delta")
        times = [float(t) for t in time_deltas_s] if time_deltas_s is not None else [1.0]
        if not times:
            raise DomainError("SyntheticClock needs at least one time delta")
        if any(e < 0 for e in energy) or any(t < 0 for t in times):
            raise DomainError("scripted deltas must be non-negative")
        self._energy = energy
        self._times = times
        self._cycle = 0

    def start(self) -> None:
        pass

    def stop(self) -> tuple[float, float]:
        i = self._cycle
        self._cycle += 1
        return self._times[i % len(self._times)], self._energy[i % len(self._energy)]


class PowerModel:
    """Constant average power: energy is watts x elapsed wall time.

    The clock is injectable so tests can script elapsed time.
    """

    kind = "power"

    def __init__(self, watts: float, clock: Callable[[], float] = time.perf_counter):
        if watts <= 0:
            raise DomainError(f"watts must be positive, got {watts}")
        self.watts = float(watts)
        self._clock = clock
        self._t0: float | None = None

    def start(self) -> None:
        self._t0 = self._clock()

    def stop(self) -> tuple[float, float]:
        if self._t0 is None:
            raise StateError("PowerModel.stop without start")
        dt = self._clock() - self._t0
        self._t0 = None
        return dt, self.watts * dt


class CounterFile:
    """Cumulative microjoule counter in a single-line file, wrap-aware.

    The file holds one decimal integer in [0, wrap_max); the counter wraps
    to zero at wrap_max like hardware energy counters do.  Unreadable or
    malformed reads raise SourceError.
    """

    kind = "counter"

    def __init__(self, path, wrap_max_microjoules: int,
                 clock: Callable[[], float] = time.perf_counter):
        if wrap_max_microjoules <= 0:
            raise DomainError(f"wrap_max must be positive, got {wrap_max_microjoules}")
        self.path = Path(path)
        self.wrap_max = int(wrap_max_microjoules)
        self._clock = clock
        self._t0: float | None = None
        self._e0: int | None = None

    def _read(self) -> int:
        try:
            text = self.path.read_text()
        except OSError as exc:
            raise SourceError(f"cannot read counter file {self.path}: {exc}") from exc
        try:
            value = int(text.strip())
        except ValueError as exc:
            raise SourceError(
                f"counter file {self.path} does not hold a decimal integer"
            ) from exc
        if not 0 <= value < self.wrap_max:
            raise SourceError(
                f"counter value {value} outside [0, {self.wrap_max})"
            )
        return value

    def start(self) -> None:
        self._t0 = self._clock()
        self._e0 = self._read()

    def stop(self) -> tuple[float, float]:
        if self._t0 is None or self._e0 is None:
            raise StateError("CounterFile.stop without start")
        dt = self._clock() - self._t0
        de_uj = counter_delta(self._e0, self._read(), self.wrap_max)
        self._t0 = None
        self._e0 = None
        return dt, de_uj * 1e-6


EnergySource = SyntheticClock | PowerModel | CounterFile


def counter_delta(previous: int, current: int, wrap_max: int) -> int:
    """Energy consumed between two counter readings, assuming at most one wrap."""
    if wrap_max <= 0:
        raise DomainError(f"wrap_max must be positive, got {wrap_max}")
    if not 0 <= previous < wrap_max:
        raise DomainError(f"previous reading {previous} outside [0, {wrap_max})")
    if not 0 <= current < wrap_max:
        raise DomainError(f"current reading {current} outside [0, {wrap_max})")
    if current >= previous:
        return current - previous
    return current + wrap_max - previous


def carbon_estimate(energy_kwh: float,
                    intensity_g_per_kwh: float = DEFAULT_CARBON_INTENSITY) -> float:
    """Grams of CO2-equivalent for the given energy at a grid intensity."""
    if energy_kwh < 0:
        raise DomainError("energy must be non-negative")
    if intensity_g_per_kwh < 0:
        raise DomainError("carbon intensity must be non-negative")
    return energy_kwh * intensity_g_per_kwh


_measuring = False  # one measurement per process; nesting would double-count


def measure(source: EnergySource, work: Callable[[], object],
            repetitions: int = DEFAULT_REPETITIONS,
            carbon_intensity: float = DEFAULT_CARBON_INTENSITY) -> ResourceRecord:
    """Run work repeatedly, accumulating wall time and energy across runs.

    Deltas from consecutive sessions add exactly: measuring A then B in one
    process equals the sum of measuring each alone with the same source
    state.  A measurement inside work raises StateError.
    """
    global _measuring
    if repetitions < 1:
        raise DomainError(f"repetitions must be at least 1, got {repetitions}")
    if _measuring:
        raise StateError("a measurement is already active in this process")
    _measuring = True
    try:
        total_t = 0.0
        total_j = 0.0
        for _ in range(repetitions):
            source.start()
            work()
            dt, dj = source.stop()
            total_t += dt
            total_j += dj
    finally:
        _measuring = False
    kwh = total_j / JOULES_PER_KWH
    return ResourceRecord(
        wall_time_s=total_t,
        energy_kwh=kwh,
        carbon_g=carbon_estimate(kwh, carbon_intensity),
        repetitions=repetitions,
        source=source.kind,
    )
