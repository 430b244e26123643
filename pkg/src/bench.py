"""
Single-threaded wall-clock latency of eval-mode forwards.
"""

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from src.errors import ConfigError, NonFiniteError
from src.model import model_forward
from src.tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_RUNS = 500
DEFAULT_WARMUP = 10


@dataclass
class LatencyStats:
    samples_ms: list[float] = field(default_factory=list)
    threads: int = 1

    @property
    def runs(self) -> int:
        return len(self.samples_ms)

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.samples_ms))

    @property
    def median_ms(self) -> float:
        return float(np.median(self.samples_ms))

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.samples_ms, 95))

    @property
    def fps(self) -> float:
        return 1000.0 / self.mean_ms if self.mean_ms > 0 else float("inf")

    def to_dict(self) -> dict:
        return {
            "runs": self.runs,
            "threads": self.threads,
            "mean_ms": self.mean_ms,
            "median_ms": self.median_ms,
            "p95_ms": self.p95_ms,
            # a zero mean has no finite rate; JSON gets null
            "fps": self.fps if math.isfinite(self.fps) else None,
            "samples_ms": list(self.samples_ms),
        }


def bench_latency(
    model,
    dims: tuple[int, int, int, int],
    runs: int = DEFAULT_RUNS,
    warmup: int = DEFAULT_WARMUP,
    threads: int = 1,
    seed: int = 0,
) -> LatencyStats:
    """
    Time `runs` forwards of a random N×C×H×W input after `warmup` untimed ones.

    The model is switched to eval mode; pass a folded model to time inference
    without batch norm. BLAS threads are capped at `threads` for the duration.
    """
    if runs < 1:
        raise ConfigError(f"bench needs runs >= 1, got {runs}")
    if warmup < 0 or threads < 1:
        raise ConfigError(f"bench needs warmup >= 0 and threads >= 1, got {warmup} and {threads}")
    model.eval()
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal(dims).astype(model.dtype))
    samples = []
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            model_forward(model, x)
        for i in range(runs):
            start = time.perf_counter()
            seg, boundary = model_forward(model, x)
            samples.append((time.perf_counter() - start) * 1000.0)
            if not np.all(np.isfinite(seg.data)) or (boundary is not None and not np.all(np.isfinite(boundary.data))):
                raise NonFiniteError(f"forward {i} produced non-finite logits during the benchmark")
    stats = LatencyStats(samples, threads)
    logger.info(
        f"Bench: {runs} runs on {dims}: mean {stats.mean_ms:.2f} ms, "
        f"median {stats.median_ms:.2f} ms, p95 {stats.p95_ms:.2f} ms, {stats.fps:.1f} FPS"
    )
    return stats
