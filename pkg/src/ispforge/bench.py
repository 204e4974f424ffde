"""Challenge scoring, runtime measurement, and leaderboards.

Final score = 2^(2 PSNR) / (C * runtime_ms). The normalization C is not
published; fitting it over the scored leaderboard rows gives log2 C ~ 40,
which is the shipped default.
"""

from __future__ import annotations

import csv
import io
import math
import os
import platform
import statistics
import time
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import _backend
from .graph import execute, infer_shapes

LOG2_C = 40.0
DEFAULT_C = 2.0 ** LOG2_C


def challenge_score(psnr, runtime_ms, C=DEFAULT_C):
    if not runtime_ms > 0:
        raise ValueError(f"runtime must be > 0 ms, got {runtime_ms}")
    if not C > 0:
        raise ValueError(f"C must be > 0, got {C}")
    return 2.0 ** (2.0 * psnr - math.log2(C)) / runtime_ms


@dataclass(frozen=True)
class CFit:
    log2_c: float
    residuals: tuple  # per record: log2 C implied by that record minus the fit
    n: int

    @property
    def c(self):
        return 2.0 ** self.log2_c

    @property
    def spread(self):
        """Largest absolute residual, in log2 units."""
        return max((abs(r) for r in self.residuals), default=0.0)

    @property
    def rms(self):
        return math.sqrt(sum(r * r for r in self.residuals) / self.n) if self.n else 0.0


def fit_C(records):
    """Least squares for log2 C over (psnr, runtime_ms, published score) triples."""
    records = list(records)
    if not records:
        raise ValueError("fit_C needs at least one (psnr, runtime, score) record")
    implied = []
    for psnr, runtime, score in records:
        if runtime <= 0 or score <= 0:
            raise ValueError(f"runtime and score must be > 0, got {runtime}, {score}")
        implied.append(2.0 * psnr - math.log2(runtime * score))
    mean = sum(implied) / len(implied)
    return CFit(mean, tuple(v - mean for v in implied), len(implied))


# ---------------------------------------------------------------------------
# records and leaderboard


@dataclass
class ScoreRecord:
    label: str
    psnr: float
    ssim: float
    runtime_ms: float
    score: float = float("nan")
    published: float | None = None
    group: str = ""

    def rescore(self, C=DEFAULT_C):
        self.score = challenge_score(self.psnr, self.runtime_ms, C)
        return self


def _num(text):
    text = (text or "").strip()
    if text.upper() in ("", "NA", "N.A.", "FAILED"):
        return None
    return float(text)


def read_records(path_or_text, scored_only=True):
    """Read a TSV with columns team, psnr, ssim, runtime_ms (extra columns kept if known)."""
    if isinstance(path_or_text, str) and "\t" in path_or_text:
        fh = io.StringIO(path_or_text)
    else:
        fh = open(path_or_text, newline="")
    with fh:
        reader = csv.DictReader(fh, delimiter="\t")
        missing = {"team", "psnr", "ssim", "runtime_ms"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"records TSV lacks columns {sorted(missing)}")
        out = []
        for row in reader:
            runtime = _num(row["runtime_ms"])
            if runtime is None and scored_only:
                continue
            out.append(ScoreRecord(row["team"], float(row["psnr"]), float(row["ssim"]),
                                   runtime if runtime is not None else float("nan"),
                                   published=_num(row.get("score")), group=row.get("group", "")))
        return out


def challenge_records(scored_only=True):
    """The challenge leaderboard shipped as package data."""
    text = resources.files("ispforge").joinpath("data/leaderboard.tsv").read_text()
    return read_records(text, scored_only)


def leaderboard(records, C=DEFAULT_C):
    """Score and sort: higher score first, ties broken by lower runtime, then label."""
    rows = [ScoreRecord(r.label, r.psnr, r.ssim, r.runtime_ms, published=r.published,
                        group=r.group).rescore(C) for r in records]
    rows.sort(key=lambda r: (-r.score, r.runtime_ms, r.label))
    return rows


LEADERBOARD_COLUMNS = ("rank", "team", "psnr", "ssim", "runtime_ms", "score")


def render_text(rows):
    table = [LEADERBOARD_COLUMNS] + [
        (str(i), r.label, f"{r.psnr:.2f}", f"{r.ssim:.4f}", f"{r.runtime_ms:g}", f"{r.score:.2f}")
        for i, r in enumerate(rows, 1)]
    widths = [max(len(row[j]) for row in table) for j in range(len(LEADERBOARD_COLUMNS))]
    lines = []
    for k, row in enumerate(table):
        lines.append("  ".join(cell.ljust(w) if j == 1 else cell.rjust(w)
                               for j, (cell, w) in enumerate(zip(row, widths))).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_tsv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(LEADERBOARD_COLUMNS)
    for i, r in enumerate(rows, 1):
        w.writerow([i, r.label, repr(r.psnr), repr(r.ssim), repr(r.runtime_ms), f"{r.score:.6g}"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# runtime harness


@dataclass(frozen=True)
class BenchConfig:
    warmup_iters: int = 3
    timed_iters: int = 10
    threads: int = 1
    shape: tuple | None = None  # input shape; None -> the model's declared input
    seed: int = 0

    def __post_init__(self):
        if self.warmup_iters < 0 or self.timed_iters < 1:
            raise ValueError("need warmup_iters >= 0 and timed_iters >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class BenchResult:
    median_ms: float
    times_ms: list
    shape: tuple
    machine: dict = field(default_factory=dict)

    def summary(self):
        return (f"median {self.median_ms:.3f} ms over {len(self.times_ms)} runs "
                f"(min {min(self.times_ms):.3f}, max {max(self.times_ms):.3f}) on input {self.shape}")


def machine_descriptor(threads=1):
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "system": f"{platform.system()} {platform.release()}",
        "python": platform.python_version(),
        "numpy": np.__version__,
        "backend": _backend.name(),
        "cpus": os.cpu_count() or 1,
        "threads": threads,
    }


def bench(model, config: BenchConfig = BenchConfig()):
    """Median wall-clock time of ``execute`` on a fixed seeded input."""
    if len(model.inputs) != 1:
        raise ValueError("bench supports single-input models")
    name = next(iter(model.inputs))
    shape = tuple(config.shape or model.inputs[name])
    infer_shapes(model, {name: shape})
    x = np.random.default_rng(config.seed).random(shape, dtype=np.float32)
    for _ in range(config.warmup_iters):
        execute(model, x, threads=config.threads)
    times = []
    for _ in range(config.timed_iters):
        t0 = time.perf_counter()
        execute(model, x, threads=config.threads)
        times.append((time.perf_counter() - t0) * 1000.0)
    return BenchResult(statistics.median(times), times, shape, machine_descriptor(config.threads))


def paired_bench(a, b, config: BenchConfig = BenchConfig()):
    """Alternate single timed runs of two models so drift hits both equally."""
    one = BenchConfig(0, 1, config.threads, config.shape, config.seed)
    for m in (a, b):
        bench(m, BenchConfig(config.warmup_iters, 1, config.threads, config.shape, config.seed))
    ra = rb = None
    ta, tb = [], []
    for _ in range(config.timed_iters):
        ra, rb = bench(a, one), bench(b, one)
        ta += ra.times_ms
        tb += rb.times_ms
    return (BenchResult(statistics.median(ta), ta, ra.shape, ra.machine),
            BenchResult(statistics.median(tb), tb, rb.shape, rb.machine))
