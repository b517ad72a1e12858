"""Compute resource vectors shared by descriptors, infrastructure and slicing."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Resources:
    """A (cpu, memory, storage) requirement or capacity vector.

    All arithmetic and comparisons are componentwise.
    """

    cpu_cores: int = 0
    memory_mb: int = 0
    storage_gb: int = 0

    def __add__(self, other: "Resources") -> "Resources":
        return Resources(
            self.cpu_cores + other.cpu_cores,
            self.memory_mb + other.memory_mb,
            self.storage_gb + other.storage_gb,
        )

    def __sub__(self, other: "Resources") -> "Resources":
        return Resources(
            self.cpu_cores - other.cpu_cores,
            self.memory_mb - other.memory_mb,
            self.storage_gb - other.storage_gb,
        )

    def __mul__(self, factor: int) -> "Resources":
        return Resources(
            self.cpu_cores * factor, self.memory_mb * factor, self.storage_gb * factor
        )

    def fits_within(self, other: "Resources") -> bool:
        return (
            self.cpu_cores <= other.cpu_cores
            and self.memory_mb <= other.memory_mb
            and self.storage_gb <= other.storage_gb
        )

    def deficit_against(self, available: "Resources") -> "Resources":
        """Componentwise shortfall of `available` against this request (≥ 0)."""
        return Resources(
            max(0, self.cpu_cores - available.cpu_cores),
            max(0, self.memory_mb - available.memory_mb),
            max(0, self.storage_gb - available.storage_gb),
        )

    def is_zero(self) -> bool:
        return self.cpu_cores == 0 and self.memory_mb == 0 and self.storage_gb == 0

    def any_negative(self) -> bool:
        return self.cpu_cores < 0 or self.memory_mb < 0 or self.storage_gb < 0

    def to_dict(self) -> dict:
        return {
            "cpu_cores": self.cpu_cores,
            "memory_mb": self.memory_mb,
            "storage_gb": self.storage_gb,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Resources":
        return cls(
            cpu_cores=int(data.get("cpu_cores", 0)),
            memory_mb=int(data.get("memory_mb", 0)),
            storage_gb=int(data.get("storage_gb", 0)),
        )


ZERO = Resources(0, 0, 0)
