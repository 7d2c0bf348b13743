"""
Per-plan diagnostic records with a pluggable storage interface.
"""

import threading
from abc import ABC, abstractmethod
from pathlib import Path
from typing import List, Optional, Union

from pydantic import BaseModel, ConfigDict

from .helper_functions import canonical_json, setup_logging

logger = setup_logging(__name__)


class PlanRecord(BaseModel):
    """Outcome of one planning call for one subject at one step."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    subject: int
    step: int
    h: int
    path_count: int
    paths_evaluated: int
    paths_infeasible: int
    initial_cost: float
    best_cost: float
    wall_time: float
    worker_count: int
    fallback_reason: Optional[str] = None
    kept_previous: bool = False

    def to_json(self) -> str:
        return canonical_json(self.model_dump(mode="json"))


class PlanLog(ABC):
    """Abstract base class for plan record sinks."""

    @abstractmethod
    def append(self, record: PlanRecord) -> None:
        """Store one record."""
        pass

    @abstractmethod
    def records(self) -> List[PlanRecord]:
        """All records stored so far, in insertion order."""
        pass

    def close(self) -> None:
        """Release any resources held by the sink."""


class InMemoryPlanLog(PlanLog):
    """In-memory plan log (default, for tests and short runs)."""

    def __init__(self):
        self._records: List[PlanRecord] = []
        self._lock = threading.Lock()

    def append(self, record: PlanRecord) -> None:
        with self._lock:
            self._records.append(record)

    def records(self) -> List[PlanRecord]:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        return len(self._records)


class JsonLinesPlanLog(InMemoryPlanLog):
    """Keeps records in memory and appends each one as a canonical JSON line to a file."""

    def __init__(self, path: Union[str, Path]):
        super().__init__()
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fp = self.path.open("w", encoding="utf-8")
        logger.debug(f"Writing plan records to {self.path}")

    def append(self, record: PlanRecord) -> None:
        super().append(record)
        with self._lock:
            self._fp.write(record.to_json() + "\n")

    def close(self) -> None:
        if not self._fp.closed:
            self._fp.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_plan_records(path: Union[str, Path]) -> List[PlanRecord]:
    """Load a JSON-lines plan file written by JsonLinesPlanLog."""
    records = []
    with Path(path).open(encoding="utf-8") as fp:
        for line in fp:
            line = line.strip()
            if line:
                records.append(PlanRecord.model_validate_json(line))
    return records
