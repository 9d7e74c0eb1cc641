"""
Stage timing for the pipeline: wall-clock per stage, logged and kept for
timings.txt, with errors tagged by the stage they escaped from.
"""

import time
import logging
from contextlib import contextmanager
from typing import Dict, Iterator, List, Tuple

from ..errors import PedQtlError

logger = logging.getLogger(__name__)


class StageTimer:
    """Records (stage, seconds) pairs in the order stages finish"""

    def __init__(self):
        self.timings: List[Tuple[str, float]] = []
        self.current_stage: str = ""

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        self.current_stage = name
        logger.info(f"Stage '{name}' started")
        start = time.perf_counter()
        try:
            yield
        except PedQtlError as e:
            if not getattr(e, 'stage', None):
                e.stage = name
            raise
        finally:
            elapsed = max(0.0, time.perf_counter() - start)
            self.timings.append((name, elapsed))
            logger.info(f"Stage '{name}' finished in {elapsed:.2f}s")

    def as_dict(self) -> Dict[str, float]:
        return dict(self.timings)

    def write(self, path: str) -> None:
        with open(path, 'w') as f:
            f.write("stage\tseconds\n")
            for name, seconds in self.timings:
                f.write(f"{name}\t{seconds:.3f}\n")
