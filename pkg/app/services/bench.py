import time
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from app.errors import ContractError
from app.services.logger import app_logger
from app.services.numerics import Tensor
from app.services.selective_scan import scan_parallel

DEFAULT_LENGTHS = (256, 512, 1024, 2048, 4096)


@dataclass
class BenchResult:
    rows: List[Tuple[int, float]]  # (length, mean ms)
    exponent: float

    def to_tsv(self) -> str:
        lines = ["length\tmean_ms\texponent"]
        lines += [f"{length}\t{ms:.4f}\t{self.exponent:.4f}" for length, ms in self.rows]
        return "\n".join(lines) + "\n"


def fit_exponent(lengths: Sequence[int], times: Sequence[float]) -> float:
    """Least-squares slope of log(time) against log(length)."""
    slope, _ = np.polyfit(np.log(lengths), np.log(times), 1)
    return float(slope)


def bench_scan(lengths: Sequence[int] = DEFAULT_LENGTHS, d_model: int = 16, d_state: int = 16,
               repeats: int = 3, seed: int = 0) -> BenchResult:
    """Time the parallel scan forward at each length and fit the scaling exponent."""
    if len(lengths) < 2 or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ContractError("lengths must be strictly increasing with at least two entries")
    if repeats < 1:
        raise ContractError("repeats must be >= 1")
    rng = np.random.default_rng(seed)
    rows = []
    for length in lengths:
        a_bar = Tensor(rng.uniform(0.5, 0.999, size=(length, d_model, d_state)))
        bx = Tensor(rng.standard_normal((length, d_model, d_state)))
        c = Tensor(rng.standard_normal((length, d_state)))
        x = Tensor(rng.standard_normal((length, d_model)))
        d_skip = Tensor(np.ones(d_model))
        scan_parallel(a_bar, bx, c, x, d_skip)  # warm-up
        elapsed = []
        for _ in range(repeats):
            start = time.perf_counter()
            scan_parallel(a_bar, bx, c, x, d_skip)
            elapsed.append(time.perf_counter() - start)
        mean_ms = 1000.0 * float(np.mean(elapsed))
        app_logger.bench_row(length, mean_ms)
        rows.append((int(length), mean_ms))
    return BenchResult(rows, fit_exponent([r[0] for r in rows], [r[1] for r in rows]))
