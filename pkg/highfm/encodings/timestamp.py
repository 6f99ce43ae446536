"""
Acquisition timestamps
Calendar decomposition used by the fine-grained temporal encoding
"""

from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Union

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


@dataclass(frozen=True, order=True)
class Timestamp:
    """
    An acquisition time in UTC.

    Ordering follows epoch_seconds (the calendar fields are derived from it).
    Seconds within the minute are kept in epoch_seconds only.
    """

    epoch_seconds: int
    year: int
    day_of_year: int
    minute_of_day: int

    def __post_init__(self):
        if not 1 <= self.day_of_year <= 366:
            raise ValueError(f"day_of_year out of range: {self.day_of_year}")
        if not 0 <= self.minute_of_day <= 1439:
            raise ValueError(f"minute_of_day out of range: {self.minute_of_day}")
        dt = _EPOCH + timedelta(seconds=self.epoch_seconds)
        derived = (dt.year, dt.timetuple().tm_yday, dt.hour * 60 + dt.minute)
        if (self.year, self.day_of_year, self.minute_of_day) != derived:
            raise ValueError(
                f"calendar fields {(self.year, self.day_of_year, self.minute_of_day)} "
                f"disagree with epoch {self.epoch_seconds} {derived}"
            )

    @classmethod
    def from_epoch(cls, epoch_seconds: Union[int, float]) -> "Timestamp":
        seconds = int(epoch_seconds)
        dt = _EPOCH + timedelta(seconds=seconds)
        return cls(
            epoch_seconds=seconds,
            year=dt.year,
            day_of_year=dt.timetuple().tm_yday,
            minute_of_day=dt.hour * 60 + dt.minute,
        )

    @classmethod
    def from_datetime(cls, dt: datetime) -> "Timestamp":
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return cls.from_epoch(int((dt - _EPOCH).total_seconds()))

    @classmethod
    def from_calendar(cls, year: int, day_of_year: int, minute_of_day: int, second: int = 0) -> "Timestamp":
        start = datetime(year, 1, 1, tzinfo=timezone.utc)
        dt = start + timedelta(days=day_of_year - 1, minutes=minute_of_day, seconds=second)
        if dt.year != year:
            raise ValueError(f"day {day_of_year} does not exist in {year}")
        return cls.from_datetime(dt)

    def to_datetime(self) -> datetime:
        return _EPOCH + timedelta(seconds=self.epoch_seconds)

    @property
    def month(self) -> int:
        return self.to_datetime().month

    @property
    def hour_bucket(self) -> int:
        return self.epoch_seconds // 3600

    def same_hour(self, other: "Timestamp") -> bool:
        return self.hour_bucket == other.hour_bucket

    def isoformat(self) -> str:
        return self.to_datetime().strftime("%Y-%m-%dT%H:%M:%SZ")
