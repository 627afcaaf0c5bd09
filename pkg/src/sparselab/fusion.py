"""Two-run score fusion with per-run min-max normalization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping

from .errors import ContractViolation
from .runs import RunList


@dataclass(frozen=True)
class FusionConfig:
    depth: int = 100
    weight_a: float = 0.5
    weight_b: float = 0.5
    k: int = 100

    def __post_init__(self):
        if self.depth < 1 or self.k < 1:
            raise ContractViolation("depth and k must be >= 1")
        if self.weight_a < 0 or self.weight_b < 0 or abs(self.weight_a + self.weight_b - 1.0) > 1e-12:
            raise ContractViolation("fusion weights must be non-negative and sum to 1")


def _normalized(run: RunList, universe: Iterable[str]) -> Dict[str, float]:
    scores = {h.doc: h.score for h in run.hits}
    if not scores:
        return {d: 0.0 for d in universe}
    lo, hi = min(scores.values()), max(scores.values())
    span = hi - lo
    out = {}
    for d in universe:
        s = scores.get(d, lo)  # docs outside this run's top-depth take its minimum
        out[d] = (s - lo) / span if span > 0 else 0.0
    return out


def fuse(run_a: RunList, run_b: RunList, config: FusionConfig = FusionConfig()) -> RunList:
    """Weighted sum of min-max normalized scores; ties by ascending doc id."""
    if run_a.query_id != run_b.query_id:
        raise ContractViolation(
            f"cannot fuse runs for different queries: {run_a.query_id!r} vs {run_b.query_id!r}"
        )
    a = run_a.truncated(config.depth)
    b = run_b.truncated(config.depth)
    universe = list(dict.fromkeys(a.docs() + b.docs()))
    na, nb = _normalized(a, universe), _normalized(b, universe)
    fused = [(d, config.weight_a * na[d] + config.weight_b * nb[d]) for d in universe]
    fused.sort(key=lambda x: (-x[1], x[0]))
    return RunList.from_ranked(run_a.query_id, fused, config.k)


def fuse_runs(
    runs_a: Mapping[str, RunList], runs_b: Mapping[str, RunList], config: FusionConfig = FusionConfig()
) -> List[RunList]:
    """Fuse two run files query by query; a query missing on one side uses an empty run."""
    out = []
    for qid in sorted(set(runs_a) | set(runs_b)):
        a = runs_a.get(qid, RunList(qid, []))
        b = runs_b.get(qid, RunList(qid, []))
        out.append(fuse(a, b, config))
    return out
