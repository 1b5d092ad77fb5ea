"""
Append-only JSON-lines metrics log.

One record per log interval: {"iter": ..., "stage": ..., "sup_loss_total": ..., ...}.
When a run resumes from a checkpoint the records written after that checkpoint are
dropped first, so the resumed log matches the uninterrupted one.
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Union

logger = logging.getLogger(__name__)


def _clean(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


class MetricsLogger:
    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: Dict[str, Any]) -> None:
        line = json.dumps({key: _clean(value) for key, value in record.items()}, sort_keys=True)

        with self.path.open("a") as handle:
            handle.write(line + "\n")

    def truncate_after(self, iteration: int) -> int:
        """Drops records with iter > iteration; returns how many remain."""

        kept = [r for r in read_metrics(self.path) if r.get("iter", 0) <= iteration]
        self.path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in kept))

        logger.debug("Metrics log %s truncated to %d records", self.path, len(kept))

        return len(kept)


def read_metrics(path: Union[str, Path]) -> List[Dict[str, Any]]:
    path = Path(path)

    if not path.exists():
        return []

    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
