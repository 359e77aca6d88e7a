import json

import pytest

from nsif.agents import ConfigError
from nsif.config import RunConfig
from nsif.pipeline import annotated_episode, build_split, split_sizes
from nsif.worldsim.dataset import dumps_episode
from nsif.worldsim.types import Split


def test_defaults_and_sizes():
    cfg = RunConfig()
    assert (cfg.n_train, cfg.n_valid_seen, cfg.n_valid_unseen, cfg.K) == (2000, 200, 200, 3)
    assert split_sizes(cfg) == {Split.TrainSeen: 2000, Split.ValidSeen: 200, Split.ValidUnseen: 200}


def test_merge_and_hash():
    base = RunConfig()
    other = base.merged({"seed": 4, "agent": {"epochs": 3}})
    assert other.seed == 4 and other.agent.epochs == 3 and base.agent.epochs == 20
    assert other.hash() != base.hash()
    assert base.merged({"workers": 8}).hash() == base.hash()
    assert RunConfig.from_dict(json.loads(json.dumps(other.to_dict()))) == other
    assert other.provenance()["config_hash"] == other.hash()


def test_invalid_configs():
    with pytest.raises(ConfigError):
        RunConfig().merged({"n_train": 0})
    with pytest.raises(ConfigError):
        RunConfig().merged({"bogus": 1})
    with pytest.raises(ConfigError):
        RunConfig().merged({"agent": {"subtask_mode": "psychic"}})


def test_parallel_split_build_matches_serial():
    serial = [dumps_episode(e) for e in build_split(Split.ValidSeen, 6, 3, 3, workers=1)]
    parallel = [dumps_episode(e) for e in build_split(Split.ValidSeen, 6, 3, 3, workers=3)]
    assert serial == parallel


def test_annotated_episode_carries_k_instruction_sets():
    ep = annotated_episode(Split.TrainSeen, 2, 0, 3)
    assert len(ep.instructions) == 3
    assert all(len(lists) == ep.N + 1 for lists in ep.instructions)
