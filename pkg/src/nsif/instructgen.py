"""Paraphrased instruction sets, tokenizer and vocabulary."""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

from nsif.rng import SplitMix64, derive_seed
from nsif.worldsim.types import Episode, HighLevelAction, SubtaskFrame, Template

PAD, UNK, SEP = 0, 1, 2
RESERVED = ("<pad>", "<unk>", "<sep>")
MODIFIER_PROB = 0.5
DEFAULT_K = 3

_PUNCT = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> List[str]:
    return text.lower().translate(_PUNCT).split()


def _default_path(name: str):
    return resources.files("nsif") / "data" / name


@dataclass(frozen=True)
class ParaphraseBank:
    predicates: Dict[str, List[str]]
    referring: Dict[str, List[str]]
    modifiers: Dict[str, List[str]] = field(default_factory=dict)
    goals: Dict[str, List[str]] = field(default_factory=dict)

    @classmethod
    def load(cls, path: Optional[Path] = None) -> "ParaphraseBank":
        src = Path(path) if path is not None else _default_path("paraphrase_bank.json")
        data = json.loads(src.read_text(encoding="utf-8"))
        return cls(
            predicates=data["predicates"],
            referring=data["referring"],
            modifiers=data.get("modifiers", {}),
            goals=data.get("goals", {}),
        )


@dataclass
class InstructionSet:
    goal: List[str]
    steps: List[List[str]]
    annotator_id: int

    def as_lists(self) -> List[List[str]]:
        return [list(self.goal)] + [list(s) for s in self.steps]

    @classmethod
    def from_lists(cls, lists: Sequence[Sequence[str]], annotator_id: int) -> "InstructionSet":
        return cls(goal=list(lists[0]), steps=[list(s) for s in lists[1:]], annotator_id=annotator_id)


def _goal_slots(template: str, frames: Sequence[SubtaskFrame]) -> Dict[str, str]:
    t = Template(template)
    if t == Template.SliceAndPlace:
        return {"obj": frames[3].r}
    if t == Template.PickupFromReceptacle:
        return {"obj": frames[2].r, "recep": frames[0].r}
    if t == Template.PutAway:
        return {"obj": frames[1].r, "recep": frames[2].r}
    return {"obj": frames[1].r}


def _render(episode: Episode, bank: ParaphraseBank, rng: SplitMix64) -> List[List[str]]:
    template = episode.goal["template"]
    slots = _goal_slots(template, episode.frames)
    goal_text = rng.choice(bank.goals.get(template, ["{obj}"]))
    fills = {k: rng.choice(bank.referring[v]) for k, v in slots.items()}
    lists = [tokenize(goal_text.format(**fills))]
    for frame in episode.frames:
        words = [rng.choice(bank.predicates[frame.b.value]), rng.choice(bank.referring[frame.r])]
        modifiers = bank.modifiers.get(frame.b.value, [])
        if modifiers and rng.bernoulli(MODIFIER_PROB):
            words.append(rng.choice(modifiers))
        lists.append(tokenize(" ".join(words)))
    return lists


def annotate(episode: Episode, K: int = DEFAULT_K, seed: int = 0, bank: Optional[ParaphraseBank] = None) -> List[InstructionSet]:
    """K independent paraphrase sets for one episode, all sharing its frames.

    A set that repeats an earlier one is redrawn a bounded number of times,
    so the K sets are distinct whenever the bank has room for it.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    bank = bank or default_bank()
    out: List[InstructionSet] = []
    seen = set()
    for k in range(K):
        rng = SplitMix64(derive_seed(seed, "annotate", episode.id, k))
        for _ in range(32):
            lists = _render(episode, bank, rng)
            key = tuple(tuple(s) for s in lists)
            if key not in seen:
                break
        seen.add(key)
        out.append(InstructionSet.from_lists(lists, k))
    return out


_DEFAULT_BANK: Optional[ParaphraseBank] = None


def default_bank() -> ParaphraseBank:
    global _DEFAULT_BANK
    if _DEFAULT_BANK is None:
        _DEFAULT_BANK = ParaphraseBank.load()
    return _DEFAULT_BANK


class Vocab:
    """Token/index tables with PAD=0, UNK=1, SEP=2 reserved."""

    def __init__(self, tokens: Iterable[str]):
        self.itos: List[str] = list(RESERVED) + sorted(set(tokens) - set(RESERVED))
        self.stoi: Dict[str, int] = {tok: i for i, tok in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.stoi.get(tok, UNK) for tok in tokens]

    def to_json(self) -> List[str]:
        return list(self.itos)

    @classmethod
    def from_json(cls, itos: List[str]) -> "Vocab":
        if list(itos[: len(RESERVED)]) != list(RESERVED):
            raise ValueError("vocabulary does not start with the reserved tokens")
        vocab = cls(itos[len(RESERVED):])
        if vocab.itos != list(itos):
            raise ValueError("vocabulary is not in canonical sorted order")
        return vocab


def build_vocab(corpus: Iterable[InstructionSet]) -> Vocab:
    tokens = set()
    for iset in corpus:
        tokens.update(iset.goal)
        for step in iset.steps:
            tokens.update(step)
    return Vocab(tokens)


def episode_instruction_sets(episode: Episode) -> List[InstructionSet]:
    return [InstructionSet.from_lists(lists, k) for k, lists in enumerate(episode.instructions)]


def symbolic_tokens(frames: Sequence[SubtaskFrame]) -> List[List[str]]:
    """Step "instructions" made only of the frame symbols (encoder ablation input)."""
    return [[f.b.value.lower(), f.r.lower()] for f in frames]
