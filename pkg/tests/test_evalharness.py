import json

import pytest
from hypothesis import given, strategies as st

from nsif.agents import ExpertAgent
from nsif.evalharness import (
    Category,
    EmptyResults,
    MismatchedGroup,
    Report,
    SubtaskResult,
    aggregate,
    eval_episode,
    eval_subtask,
    evaluate,
    expert_length,
    parse_report,
    path_weighted,
    read_results,
    report,
    robustness_categorize,
    robustness_records,
    robustness_table,
    round_half_up,
    write_results,
)
from nsif.worldsim.types import Action, ActionKind, HighLevelAction


def res(success, variant=0, L_expert=4, L_agent=4, episode="e", n=0, kind="PickupObject", split="ValidUnseen"):
    return SubtaskResult(episode, n, kind, variant, success, L_expert, L_agent, split)


class StopAgent:
    kind = "stop"

    def policy(self, episode, k, n):
        return self

    def act(self, state):
        return Action(ActionKind.Stop)


class SpinAgent(StopAgent):
    def act(self, state):
        return Action(ActionKind.RotateLeft)


def test_path_weighted_examples():
    assert path_weighted(True, 10, 20) == 0.5
    assert path_weighted(False, 10, 10) == 0.0
    assert path_weighted(True, 10, 5) == 1.0
    with pytest.raises(ValueError):
        path_weighted(True, 0, 3)


@given(st.booleans(), st.integers(1, 100), st.integers(1, 100))
def test_path_weighted_bounds(success, le, la):
    score = path_weighted(success, le, la)
    assert 0.0 <= score <= float(success)
    assert (score == 1.0) == (success and la <= le)


def test_expert_scores_full_marks(unseen_episodes):
    results = evaluate(ExpertAgent(), unseen_episodes[:10])
    assert all(r.success and r.L_agent == r.L_expert for r in results)
    for cell in aggregate(results).values():
        assert cell["success_rate"] == 100.0 and cell["path_weighted"] == 100.0


def test_stop_agent_fails_pickup(unseen_episodes):
    ep = unseen_episodes[0]
    n = [f.b for f in ep.frames].index(HighLevelAction.PickupObject)
    r = eval_subtask(StopAgent(), ep, n, 0)
    assert not r.success and r.L_agent == 1


def test_budget_limits_and_bounds(unseen_episodes):
    ep = next(e for e in unseen_episodes if any(f.b == HighLevelAction.ToggleObject for f in e.frames))
    n = [f.b for f in ep.frames].index(HighLevelAction.ToggleObject)
    assert expert_length(ep, n) == 1
    assert eval_subtask(ExpertAgent(), ep, n, 0, budget=1).success
    with pytest.raises(ValueError):
        eval_subtask(ExpertAgent(), ep, n, 0, budget=0)
    with pytest.raises(IndexError):
        eval_subtask(ExpertAgent(), ep, ep.N, 0)
    spin = eval_subtask(SpinAgent(), ep, 0, 0, budget=7)
    assert spin.L_agent <= 7


def test_eval_episode_covers_every_subtask_and_variant(unseen_episodes):
    ep = unseen_episodes[1]
    results = eval_episode(ExpertAgent(), ep)
    assert {(r.subtask_index, r.variant) for r in results} == {(n, k) for n in range(ep.N) for k in range(3)}


def test_parallel_evaluation_matches_serial(unseen_episodes):
    eps = unseen_episodes[:6]
    assert evaluate(ExpertAgent(), eps, workers=2) == evaluate(ExpertAgent(), eps)


def test_aggregate_arithmetic():
    rs = [res(True), res(True, 1, L_agent=8), res(False, 2), res(False, 3)]
    cell = aggregate(rs)[("PickupObject", "ValidUnseen")]
    assert cell["n"] == 4 and cell["successes"] == 2
    assert cell["success_rate"] == 50.0
    assert cell["path_weighted"] == pytest.approx(100 * (1 + 0.5) / 4)
    with pytest.raises(EmptyResults):
        aggregate([])


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 66.49, 66.5)] == [1, 2, 3, 66, 67]


def test_robustness_categories():
    assert robustness_categorize([res(True, 0), res(True, 1), res(True, 2)]).category == Category.I
    assert robustness_categorize([res(True, 0), res(False, 1), res(True, 2)]).category == Category.II
    assert robustness_categorize([res(False, 0), res(False, 1), res(False, 2)]).category == Category.III
    with pytest.raises(MismatchedGroup):
        robustness_categorize([res(True, 0), res(True, 0)])
    with pytest.raises(MismatchedGroup):
        robustness_categorize([res(True, 0), res(True, 1, episode="other")])
    with pytest.raises(MismatchedGroup):
        robustness_categorize([res(True, 0), res(True, 1)], K=3)


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 3), st.lists(st.booleans(), min_size=3, max_size=3)),
                max_size=20, unique_by=lambda t: (t[0], t[1])))
def test_category_partition(groups):
    results = [res(ok, k, episode=f"e{e}", n=n) for e, n, oks in groups for k, ok in enumerate(oks)]
    records = robustness_records(results, 3)
    assert len(records) == len(groups)
    table = robustness_table(records)
    assert sum(c["I"] + c["II"] + c["III"] for c in table.values()) == len(groups)


def _example_report():
    tables = {
        "nsif": aggregate([res(True, k, n=n, kind=t, split=s) for k in range(3) for n in range(2)
                           for t in ("GotoLocation", "PickupObject") for s in ("ValidSeen", "ValidUnseen")]),
        "s2spm": aggregate([res(k != 1, k, L_agent=6, kind="PickupObject") for k in range(3)]),
    }
    return Report("subtask", tables, [0, 1, 2], "abc123")


def test_report_text_shape():
    text = report(_example_report(), "text")
    lines = text.splitlines()
    assert "Goto" in lines[2] and "Pickup" in lines[2]
    assert any(line.startswith("nsif") and "Seen" in line for line in lines)
    assert any(line.startswith("s2spm") and "Unseen" in line and "67 (44)" in line for line in lines)
    rob = Report("robustness", {"nsif": {("SliceObject", "ValidUnseen"): {"I": 5, "II": 0, "III": 1}}}, [0], "h")
    assert "5 / 0 / 1" in report(rob, "text")


def test_report_machine_round_trip():
    rep = _example_report()
    text = report(rep, "json")
    assert parse_report(text) == rep
    data = json.loads(text)
    assert data["seeds"] == [0, 1, 2] and data["config_hash"] == "abc123"
    with pytest.raises(ValueError):
        report(rep, "yaml")


def test_results_file_round_trip(tmp_path):
    rs = [res(True, 0), res(False, 1, L_agent=9)]
    path = tmp_path / "r.jsonl"
    write_results(path, rs, {"config_hash": "x", "seed": 0})
    assert read_results(path) == rs
    assert json.loads(path.read_text().splitlines()[0])["provenance"]["seed"] == 0
