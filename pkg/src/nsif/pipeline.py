"""Dataset building, training and evaluation glue shared by the CLI and tests."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import Dict, List, Sequence

from nsif.agents import Agent, train
from nsif.config import RunConfig
from nsif.evalharness import SubtaskResult, evaluate
from nsif.instructgen import annotate
from nsif.rng import derive_seed
from nsif.worldsim.dataset import generate_episode
from nsif.worldsim.types import Episode, Split

log = logging.getLogger(__name__)

SPLIT_FILES = {
    Split.TrainSeen: "train.jsonl",
    Split.ValidSeen: "valid_seen.jsonl",
    Split.ValidUnseen: "valid_unseen.jsonl",
}
SPLIT_ALIASES = {"train": Split.TrainSeen, "seen": Split.ValidSeen, "unseen": Split.ValidUnseen}


def annotated_episode(split: Split, index: int, seed: int, K: int) -> Episode:
    ep = generate_episode(split, index, seed)
    ep.instructions = [s.as_lists() for s in annotate(ep, K, seed=derive_seed(seed, "instructions") >> 1)]
    return ep


def _build_chunk(args):
    split, indices, seed, K = args
    return [annotated_episode(split, i, seed, K) for i in indices]


def build_split(split: Split, count: int, seed: int, K: int = 3, workers: int = 1) -> List[Episode]:
    """Episodes 0..count-1 of a split; identical for any worker count."""
    if workers <= 1:
        return _build_chunk((split, range(count), seed, K))
    chunks = [range(w, count, workers) for w in range(workers)]
    with ProcessPoolExecutor(workers) as pool:
        parts = list(pool.map(_build_chunk, [(split, c, seed, K) for c in chunks]))
    merged = [ep for part in parts for ep in part]
    return sorted(merged, key=lambda ep: ep.id)


def split_sizes(cfg: RunConfig) -> Dict[Split, int]:
    return {Split.TrainSeen: cfg.n_train, Split.ValidSeen: cfg.n_valid_seen, Split.ValidUnseen: cfg.n_valid_unseen}


def build_datasets(cfg: RunConfig) -> Dict[Split, List[Episode]]:
    return {split: build_split(split, n, cfg.seed, cfg.K, cfg.workers) for split, n in split_sizes(cfg).items()}


def train_agent(kind: str, train_set: Sequence[Episode], cfg: RunConfig) -> Agent:
    return train(kind, train_set, replace(cfg.agent, kind=kind, seed=cfg.seed, budget=cfg.budget))


def run_experiment(cfg: RunConfig, kinds: Sequence[str] = ("nsif", "s2spm"),
                   eval_splits: Sequence[Split] = (Split.ValidSeen, Split.ValidUnseen)) -> Dict[str, List[SubtaskResult]]:
    """gen + train + eval for each agent kind; results per agent."""
    data = build_datasets(cfg)
    out = {}
    for kind in kinds:
        agent = train_agent(kind, data[Split.TrainSeen], cfg)
        results = []
        for split in eval_splits:
            results.extend(evaluate(agent, data[split], cfg.K, cfg.budget, cfg.workers))
        out[kind] = results
    return out
