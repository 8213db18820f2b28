"""Harrell's concordance index, fold plans and cross-validation."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .cox import Records, as_arrays
from .errors import InvalidArgumentError, NoComparablePairsError
from .simdata import SimulatedDataset, SimulatedSample, derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CIndexResult:
    c_index: float
    concordant: int
    discordant: int
    tied_risk: int
    comparable_pairs: int


def c_index(risks, records: Records, chunk: int = 1024) -> CIndexResult:
    """Pair ``(i, j)`` counts iff ``T_i < T_j`` and ``E_i``; higher risk should fail first.

    Tied times give no pair; tied risks earn half credit.
    """
    r = np.asarray(risks, dtype=np.float64).reshape(-1)
    times, events = as_arrays(records)
    if r.size != times.size:
        raise InvalidArgumentError(f"{r.size} risks for {times.size} records")
    conc = disc = tied = 0
    ev_idx = np.flatnonzero(events)
    for s in range(0, ev_idx.size, chunk):
        i = ev_idx[s : s + chunk]
        later = times[None, :] > times[i, None]
        ri, rj = r[i, None], r[None, :]
        conc += int(np.count_nonzero(later & (ri > rj)))
        disc += int(np.count_nonzero(later & (ri < rj)))
        tied += int(np.count_nonzero(later & (ri == rj)))
    pairs = conc + disc + tied
    if pairs == 0:
        raise NoComparablePairsError("no comparable pairs (need an event before another time)")
    return CIndexResult((conc + 0.5 * tied) / pairs, conc, disc, tied, pairs)


@dataclass
class FoldPlan:
    k: int
    assignments: np.ndarray
    seed: int
    stratified: bool

    def train_test(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        return np.flatnonzero(self.assignments != fold), np.flatnonzero(self.assignments == fold)

    def fold_seed(self, fold: int) -> int:
        return derive_seed(self.seed, 1000 + fold)


def make_folds(records: Records, k: int, stratified: bool = True, seed: int = 0) -> FoldPlan:
    """Seeded fold assignment; stratified plans deal events round-robin first."""
    times, events = as_arrays(records)
    n = times.size
    if k < 2:
        raise InvalidArgumentError("k must be at least 2")
    if k > n:
        raise InvalidArgumentError(f"k={k} exceeds n={n}")
    rng = np.random.default_rng(seed)
    assign = np.empty(n, dtype=np.int64)
    if stratified:
        order = np.concatenate(
            [rng.permutation(np.flatnonzero(events)), rng.permutation(np.flatnonzero(~events))]
        )
    else:
        order = rng.permutation(n)
    assign[order] = np.arange(n) % k
    return FoldPlan(k, assign, seed, stratified)


@dataclass
class FoldOutcome:
    fold: int
    result: CIndexResult | None
    n_train: int
    n_test: int

    @property
    def valid(self) -> bool:
        return self.result is not None


@dataclass
class CrossValResult:
    folds: list[FoldOutcome]
    mean: float
    std: float

    @property
    def valid_folds(self) -> list[FoldOutcome]:
        return [f for f in self.folds if f.valid]


Predictor = Callable[[Sequence[SimulatedSample]], np.ndarray]
Trainer = Callable[[Sequence[SimulatedSample], int], Predictor]


def _run_fold(trainer: Trainer, samples, plan: FoldPlan, fold: int) -> FoldOutcome:
    tr, te = plan.train_test(fold)
    predictor = trainer([samples[i] for i in tr], plan.fold_seed(fold))
    test = [samples[i] for i in te]
    risks = np.asarray(predictor(test), dtype=np.float64)
    try:
        res = c_index(risks, [s.record for s in test])
    except NoComparablePairsError:
        log.warning("fold %d has no comparable pairs; excluded from the mean", fold)
        res = None
    return FoldOutcome(fold, res, len(tr), len(te))


def cross_validate(
    dataset: SimulatedDataset | Sequence[SimulatedSample],
    trainer: Trainer,
    plan: FoldPlan,
    jobs: int = 1,
) -> CrossValResult:
    """Fit on k-1 folds and score the held-out fold, for every fold.

    ``trainer(train_samples, fold_seed)`` returns a predictor for held-out
    samples; it must only see the training samples it is handed (any
    augmentation belongs inside it). Results are ordered by fold so they do
    not depend on ``jobs``.
    """
    samples = dataset.samples if isinstance(dataset, SimulatedDataset) else list(dataset)
    if len(samples) != plan.assignments.size:
        raise InvalidArgumentError("fold plan does not match the dataset size")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_fold, trainer, samples, plan, f) for f in range(plan.k)]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [_run_fold(trainer, samples, plan, f) for f in range(plan.k)]
    vals = [o.result.c_index for o in outcomes if o.result is not None]
    mean = float(np.mean(vals)) if vals else float("nan")
    std = float(np.std(vals)) if vals else float("nan")
    return CrossValResult(outcomes, mean, std)


# ---------------------------------------------------------------------------
# reporting


def result_records(method: str, config: str, cv: CrossValResult) -> list[dict]:
    """JSON-lines rows: one per fold plus a summary row."""
    rows = []
    for f in cv.folds:
        row = {"type": "fold", "method": method, "config": config, "fold": f.fold,
               "n_train": f.n_train, "n_test": f.n_test, "valid": f.valid}
        if f.result is not None:
            row.update(asdict(f.result))
        rows.append(row)
    rows.append({"type": "summary", "method": method, "config": config,
                 "mean_c_index": cv.mean, "std_c_index": cv.std,
                 "valid_folds": len(cv.valid_folds), "k": len(cv.folds)})
    return rows


def write_jsonl(rows: Iterable[dict], path) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def render_table(summaries: dict[str, dict[str, float]], title: str | None = None) -> str:
    """Plain-text grid of mean c-index, methods as rows and settings as columns."""
    title = title or "Performance (c-index) of different models"
    columns: list[str] = []
    for cells in summaries.values():
        columns.extend(c for c in cells if c not in columns)
    width = max([len(m) for m in summaries] + [8])
    lines = [title, " " * width + "".join(f"  {c:>10}" for c in columns)]
    for method, cells in summaries.items():
        vals = "".join(
            f"  {cells[c]:>10.2f}" if c in cells and not math.isnan(cells[c]) else f"  {'-':>10}"
            for c in columns
        )
        lines.append(f"{method:<{width}}{vals}")
    return "\n".join(lines) + "\n"
