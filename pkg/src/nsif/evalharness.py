"""Per-subtask evaluation, paraphrase-robustness categories and reports."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from nsif.worldsim.sim import check_subtask_goal, replay, step
from nsif.worldsim.types import ActionKind, Episode

DEFAULT_BUDGET = 50
# column order of the subtask and robustness text reports
SUBTASK_COLUMNS = ("GotoLocation", "PickupObject", "SliceObject", "ToggleObject",
                   "PutObject", "OpenObject", "CloseObject")
SHORT = {c: c.replace("Location", "").replace("Object", "") for c in SUBTASK_COLUMNS}


class EmptyResults(ValueError):
    pass


class MismatchedGroup(ValueError):
    pass


@dataclass(frozen=True)
class SubtaskResult:
    episode_id: str
    subtask_index: int
    subtask_type: str
    variant: int
    success: bool
    L_expert: int
    L_agent: int
    split: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SubtaskResult":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def path_weighted(success: bool, L_expert: int, L_agent: int) -> float:
    if L_expert < 1 or L_agent < 1:
        raise ValueError("path lengths must be >= 1")
    return float(success) * L_expert / max(L_expert, L_agent)


def expert_length(episode: Episode, n: int, trace=None) -> int:
    """Expert steps from the start of subtask ``n`` until its goal first holds."""
    start, end = episode.boundaries[n]
    trace = trace if trace is not None else replay(episode, end)
    for t in range(start + 1, end + 1):
        if check_subtask_goal(trace[t][0], episode, n):
            return t - start
    raise AssertionError(f"{episode.id}: expert never satisfies subtask {n}")


def eval_subtask(agent, episode: Episode, n: int, k: int, budget: int = DEFAULT_BUDGET, trace=None) -> SubtaskResult:
    """Replay the expert to subtask ``n``'s start, then hand control to the agent."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if not 0 <= n < episode.N:
        raise IndexError(f"subtask {n} out of range")
    if episode.instructions and not 0 <= k < len(episode.instructions):
        raise IndexError(f"variant {k} out of range")
    trace = trace if trace is not None else replay(episode)
    state = trace[episode.boundaries[n][0]][0]
    session = agent.policy(episode, k, n)
    steps = 0
    done = False
    while steps < budget and not done:
        action = session.act(state)
        if action.kind == ActionKind.Stop:
            break
        state, _ = step(state, action)
        steps += 1
        done = check_subtask_goal(state, episode, n)
    return SubtaskResult(
        episode_id=episode.id,
        subtask_index=n,
        subtask_type=episode.frames[n].b.value,
        variant=k,
        success=check_subtask_goal(state, episode, n),
        L_expert=expert_length(episode, n, trace),
        L_agent=max(steps, 1),
        split=episode.split.value,
    )


def eval_episode(agent, episode: Episode, K: Optional[int] = None, budget: int = DEFAULT_BUDGET) -> List[SubtaskResult]:
    K = K if K is not None else max(len(episode.instructions), 1)
    trace = replay(episode)
    return [eval_subtask(agent, episode, n, k, budget, trace) for k in range(K) for n in range(episode.N)]


def _eval_chunk(args):
    agent, episodes, K, budget = args
    return [r for ep in episodes for r in eval_episode(agent, ep, K, budget)]


def evaluate(agent, episodes: Sequence[Episode], K: Optional[int] = None, budget: int = DEFAULT_BUDGET,
             workers: int = 1) -> List[SubtaskResult]:
    """All (episode, subtask, variant) results, in deterministic sorted order."""
    if workers <= 1:
        results = _eval_chunk((agent, list(episodes), K, budget))
    else:
        chunks = [list(episodes[i::workers]) for i in range(workers)]
        with ProcessPoolExecutor(workers) as pool:
            results = [r for part in pool.map(_eval_chunk, [(agent, c, K, budget) for c in chunks]) for r in part]
    return sorted(results, key=lambda r: (r.episode_id, r.subtask_index, r.variant))


# ------------------------------------------------------------------ aggregation


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def aggregate(results: Iterable[SubtaskResult]) -> Dict[Tuple[str, str], dict]:
    """Per (subtask_type, split): counts, success rate % and mean path-weighted %."""
    groups: Dict[Tuple[str, str], List[SubtaskResult]] = defaultdict(list)
    for r in results:
        groups[(r.subtask_type, r.split)].append(r)
    if not groups:
        raise EmptyResults("no results to aggregate")
    table = {}
    for key, rs in sorted(groups.items()):
        n = len(rs)
        wins = sum(r.success for r in rs)
        table[key] = {
            "n": n,
            "successes": wins,
            "success_rate": 100.0 * wins / n,
            "path_weighted": 100.0 * sum(path_weighted(r.success, r.L_expert, r.L_agent) for r in rs) / n,
        }
    return table


class Category(str, Enum):
    I = "I"
    II = "II"
    III = "III"


@dataclass(frozen=True)
class RobustnessRecord:
    episode_id: str
    subtask_index: int
    subtask_type: str
    split: str
    outcomes: Tuple[bool, ...]
    category: Category


def robustness_categorize(group: Sequence[SubtaskResult], K: Optional[int] = None) -> RobustnessRecord:
    if not group:
        raise MismatchedGroup("empty group")
    first = group[0]
    if any((r.episode_id, r.subtask_index) != (first.episode_id, first.subtask_index) for r in group):
        raise MismatchedGroup("results come from different (episode, subtask) pairs")
    variants = [r.variant for r in group]
    if len(set(variants)) != len(variants):
        raise MismatchedGroup("duplicate instruction variants")
    if K is not None and len(group) != K:
        raise MismatchedGroup(f"expected {K} variants, got {len(group)}")
    ordered = sorted(group, key=lambda r: r.variant)
    outcomes = tuple(r.success for r in ordered)
    if all(outcomes):
        cat = Category.I
    elif any(outcomes):
        cat = Category.II
    else:
        cat = Category.III
    return RobustnessRecord(first.episode_id, first.subtask_index, first.subtask_type, first.split, outcomes, cat)


def robustness_records(results: Iterable[SubtaskResult], K: Optional[int] = None) -> List[RobustnessRecord]:
    groups: Dict[Tuple[str, int], List[SubtaskResult]] = defaultdict(list)
    for r in results:
        groups[(r.episode_id, r.subtask_index)].append(r)
    return [robustness_categorize(g, K) for _, g in sorted(groups.items())]


def robustness_table(records: Iterable[RobustnessRecord]) -> Dict[Tuple[str, str], dict]:
    table: Dict[Tuple[str, str], dict] = {}
    for rec in records:
        cell = table.setdefault((rec.subtask_type, rec.split), {"I": 0, "II": 0, "III": 0})
        cell[rec.category.value] += 1
    return dict(sorted(table.items()))


# ---------------------------------------------------------------------- reports


@dataclass
class Report:
    """Subtask (``kind="subtask"``) or robustness (``kind="robustness"``) table data.

    ``tables`` maps agent name -> {(subtask_type, split): cell}.
    """

    kind: str
    tables: Dict[str, Dict[Tuple[str, str], dict]]
    seeds: List[int] = field(default_factory=list)
    config_hash: str = ""

    def __eq__(self, other) -> bool:
        return isinstance(other, Report) and _report_dict(self) == _report_dict(other)


def _report_dict(rep: Report) -> dict:
    return {
        "kind": rep.kind,
        "seeds": list(rep.seeds),
        "config_hash": rep.config_hash,
        "tables": {
            agent: [{"subtask_type": t, "split": s, **cell} for (t, s), cell in sorted(table.items())]
            for agent, table in sorted(rep.tables.items())
        },
    }


def parse_report(text: str) -> Report:
    d = json.loads(text)
    tables = {
        agent: {(row["subtask_type"], row["split"]): {k: v for k, v in row.items() if k not in ("subtask_type", "split")}
                for row in rows}
        for agent, rows in d["tables"].items()
    }
    return Report(d["kind"], tables, list(d["seeds"]), d["config_hash"])


def _cell_text(kind: str, cell: Optional[dict]) -> str:
    if cell is None:
        return "-"
    if kind == "subtask":
        return f"{round_half_up(cell['success_rate'])} ({round_half_up(cell['path_weighted'])})"
    return f"{cell['I']} / {cell['II']} / {cell['III']}"


def _split_label(split: str) -> str:
    return {"ValidSeen": "Seen", "ValidUnseen": "Unseen", "TrainSeen": "Train"}.get(split, split)


def report(rep: Report, fmt: str = "text") -> str:
    if fmt in ("json", "machine", "MachineReadable"):
        return json.dumps(_report_dict(rep), indent=2, sort_keys=True) + "\n"
    if fmt not in ("text", "Text"):
        raise ValueError(f"unknown report format {fmt!r}")
    present = {t for table in rep.tables.values() for t, _ in table}
    cols = [c for c in SUBTASK_COLUMNS if c in present] + sorted(present - set(SUBTASK_COLUMNS))
    splits = sorted({s for table in rep.tables.values() for _, s in table}, key=lambda s: (s != "ValidSeen", s))
    title = "Success rate % (path-weighted %)" if rep.kind == "subtask" else "Robustness (I) / (II) / (III)"
    header = ["Agent", "Split"] + [SHORT.get(c, c) for c in cols]
    rows = []
    for agent, table in sorted(rep.tables.items()):
        for split in splits:
            rows.append([agent, _split_label(split)] + [_cell_text(rep.kind, table.get((c, split))) for c in cols])
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt_row = lambda r: "  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()
    lines = [title, f"config {rep.config_hash}  seeds {','.join(map(str, rep.seeds))}", fmt_row(header),
             fmt_row(["-" * w for w in widths])]
    lines.extend(fmt_row(r) for r in rows)
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------- results I/O


def write_results(path: Path, results: Iterable[SubtaskResult], provenance: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in results:
            d = r.to_dict()
            if provenance is not None:
                d["provenance"] = provenance
            fh.write(json.dumps(d, sort_keys=True, separators=(",", ":")) + "\n")


def read_results(path: Path) -> List[SubtaskResult]:
    with Path(path).open(encoding="utf-8") as fh:
        return [SubtaskResult.from_dict(json.loads(line)) for line in fh if line.strip()]
