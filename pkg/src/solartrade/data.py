"""Daily price/generation datasets: CSV ingestion, aggregation, splits, synthesis."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ConfigurationError, ParseError, ValidationError

log = logging.getLogger(__name__)

STEPS_PER_DAY = 48


@dataclass(frozen=True)
class SolarSample:
    day: int
    timestep: int
    vmp: float
    imp: float


@dataclass(frozen=True)
class DayRecord:
    day: int
    price: float
    generation: float


@dataclass(frozen=True)
class Dataset:
    """Ordered daily records with contiguous, strictly increasing day indices."""

    records: tuple
    provenance: str = "unknown"

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        days = [r.day for r in self.records]
        for a, b in zip(days, days[1:]):
            if b != a + 1:
                raise ValidationError(f"day indices must be contiguous; found {a} followed by {b}")

    def __len__(self):
        return len(self.records)

    def __getitem__(self, item):
        if isinstance(item, slice):
            return Dataset(self.records[item], self.provenance)
        return self.records[item]

    @property
    def days(self) -> np.ndarray:
        return np.array([r.day for r in self.records], dtype=np.int64)

    @property
    def prices(self) -> np.ndarray:
        return np.array([r.price for r in self.records], dtype=np.float64)

    @property
    def generation(self) -> np.ndarray:
        return np.array([r.generation for r in self.records], dtype=np.float64)


# ------------------------------------------------------------------ parsing

def _read_rows(path, header: Sequence[str]):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [c.strip() for c in first] != list(header):
            raise ParseError(path, 1, f"expected header {','.join(header)!r}, got {first!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            yield lineno, [c.strip() for c in row]


def _as_int(path, lineno, text):
    try:
        return int(text)
    except ValueError:
        raise ParseError(path, lineno, f"not an integer: {text!r}") from None


def _as_float(path, lineno, text):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(path, lineno, f"not a number: {text!r}") from None
    if not math.isfinite(value):
        raise ParseError(path, lineno, f"non-finite value {text!r}")
    return value


def load_solar_csv(path) -> list[SolarSample]:
    """Read ``day,timestep,vmp,imp`` rows (48 samples per day at most)."""
    samples = []
    seen = {}
    for lineno, (d, t, v, i) in _read_rows(path, ("day", "timestep", "vmp", "imp")):
        sample = SolarSample(_as_int(path, lineno, d), _as_int(path, lineno, t),
                             _as_float(path, lineno, v), _as_float(path, lineno, i))
        if sample.day < 0:
            raise ValidationError(f"{path}:{lineno}: negative day index {sample.day}")
        if not 0 <= sample.timestep < STEPS_PER_DAY:
            raise ValidationError(f"{path}:{lineno}: timestep {sample.timestep} outside 0..{STEPS_PER_DAY - 1}")
        if sample.vmp < 0 or sample.imp < 0:
            raise ValidationError(f"{path}:{lineno}: negative vmp/imp")
        seen[sample.day] = seen.get(sample.day, 0) + 1
        if seen[sample.day] > STEPS_PER_DAY:
            raise ValidationError(f"{path}:{lineno}: more than {STEPS_PER_DAY} samples for day {sample.day}")
        samples.append(sample)
    return samples


def load_prices_csv(path) -> list[tuple[int, float]]:
    out = []
    seen = set()
    for lineno, (d, p) in _read_rows(path, ("day", "price")):
        day, price = _as_int(path, lineno, d), _as_float(path, lineno, p)
        if price <= 0:
            raise ValidationError(f"{path}:{lineno}: price must be positive, got {price}")
        if day in seen:
            raise ValidationError(f"{path}:{lineno}: duplicate day {day}")
        seen.add(day)
        out.append((day, price))
    return out


def aggregate_daily(samples: Iterable[SolarSample]) -> list[tuple[int, float]]:
    """Sum vmp*imp over each day's samples. Days are returned sorted."""
    totals: dict[int, list] = {}
    for s in samples:
        totals.setdefault(s.day, []).append(s.vmp * s.imp)
    # math.fsum keeps the result independent of sample order
    return [(day, math.fsum(totals[day])) for day in sorted(totals)]


def join_days(generation: Iterable[tuple[int, float]], prices: Iterable[tuple[int, float]],
              fill_missing_generation: bool = False, provenance: str = "real-csv") -> Dataset:
    """Inner join on day index.

    With ``fill_missing_generation`` a priced day that has no solar samples
    gets zero generation instead of being dropped.
    """
    gen = dict(generation)
    price = dict(prices)
    if fill_missing_generation:
        for day in price:
            gen.setdefault(day, 0.0)
    common = sorted(set(gen) & set(price))
    dropped = len(set(gen) ^ set(price))
    if dropped:
        log.info("join_days: dropped %d day(s) present on only one side", dropped)
    if not common:
        raise ValidationError("generation and price data share no day indices")
    return Dataset(tuple(DayRecord(d, price[d], gen[d]) for d in common), provenance)


def load_dataset(solar_path, prices_path) -> Dataset:
    """Solar + price CSVs to a joined dataset; priced days without samples generate 0."""
    return join_days(aggregate_daily(load_solar_csv(solar_path)), load_prices_csv(prices_path),
                     fill_missing_generation=True, provenance="real-csv")


def write_dataset_csv(dataset: Dataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write("day,price,generation\n")
        for r in dataset.records:
            fh.write(f"{r.day},{r.price!r},{r.generation!r}\n")


def read_dataset_csv(path) -> Dataset:
    records = []
    for lineno, (d, p, g) in _read_rows(path, ("day", "price", "generation")):
        rec = DayRecord(_as_int(path, lineno, d), _as_float(path, lineno, p), _as_float(path, lineno, g))
        if rec.price <= 0 or rec.generation < 0:
            raise ValidationError(f"{path}:{lineno}: price must be > 0 and generation >= 0")
        records.append(rec)
    if not records:
        raise ValidationError(f"{path}: no rows")
    return Dataset(tuple(records), "real-csv")


# ------------------------------------------------------------------- splits

def _n_test(n, fraction):
    # round first: 10 * 0.3 is 3.0000000000000004 in binary floating point
    return min(n, math.ceil(round(n * fraction, 9)))


def _check_fraction(fraction):
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"test fraction must lie in (0, 1), got {fraction}")


def split_chronological(dataset: Dataset, test_fraction: float) -> tuple[Dataset, Dataset]:
    """Last ceil(n * fraction) days form the test set; order is preserved."""
    _check_fraction(test_fraction)
    if len(dataset) == 0:
        raise ValidationError("cannot split an empty dataset")
    n_test = _n_test(len(dataset), test_fraction)
    cut = len(dataset) - n_test
    return dataset[:cut], dataset[cut:]


def split_random(dataset: Dataset, test_fraction: float, seed: int) -> tuple[list[DayRecord], list[DayRecord]]:
    """Seeded random partition for the forecaster.

    Returns record lists rather than ``Dataset`` objects because the pieces
    are not contiguous in time.
    """
    _check_fraction(test_fraction)
    if len(dataset) == 0:
        raise ValidationError("cannot split an empty dataset")
    n = len(dataset)
    n_test = _n_test(n, test_fraction)
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return [dataset[int(i)] for i in train_idx], [dataset[int(i)] for i in test_idx]


# ---------------------------------------------------------------- synthesis

@dataclass(frozen=True)
class SynthParams:
    """Seasonal sinusoids plus Gaussian noise.

    price(d)      = price_base + price_amplitude * sin(2 pi d / 365 + price_phase) + noise
    generation(d) = max(0, gen_base + gen_amplitude * sin(2 pi d / 365 + gen_phase) + noise)

    The defaults put the price peak at the start of winter (late in the
    year) and the generation peak in mid-summer.
    """

    price_base: float = 15.0
    price_amplitude: float = 6.0
    price_noise: float = 1.5
    price_phase: float = math.pi / 2
    gen_base: float = 10.0
    gen_amplitude: float = 5.0
    gen_noise: float = 1.5
    gen_phase: float = -math.pi / 2

    def __post_init__(self):
        if self.price_noise < 0 or self.gen_noise < 0:
            raise ConfigurationError("noise standard deviations must be >= 0")


MIN_PRICE = 0.01


def synth_dataset(n_days: int = 365, seed: int = 42, params: SynthParams | None = None) -> Dataset:
    if n_days < 10:
        raise ConfigurationError(f"synthetic dataset needs at least 10 days, got {n_days}")
    params = params or SynthParams()
    rng = np.random.default_rng(seed)
    d = np.arange(n_days, dtype=np.float64)
    angle = 2.0 * np.pi * d / 365.0
    price = params.price_base + params.price_amplitude * np.sin(angle + params.price_phase)
    price = price + params.price_noise * rng.standard_normal(n_days)
    price = np.maximum(price, MIN_PRICE)
    gen = params.gen_base + params.gen_amplitude * np.sin(angle + params.gen_phase)
    gen = np.maximum(gen + params.gen_noise * rng.standard_normal(n_days), 0.0)
    records = tuple(DayRecord(int(i), float(p), float(g)) for i, p, g in zip(range(n_days), price, gen))
    return Dataset(records, f"synthetic+{seed}")
