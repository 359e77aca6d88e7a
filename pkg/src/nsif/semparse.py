"""Instruction -> (high-level action, argument) frames: oracle and lexicon rules."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from nsif.instructgen import ParaphraseBank, tokenize
from nsif.worldsim.types import (
    ARGUMENT_CLASSES,
    Episode,
    HighLevelAction,
    SubtaskFrame,
    frame_is_valid,
)

PARSER_MODES = ("oracle", "rule")


class ParseFailure(ValueError):
    def __init__(self, reason: str, tokens: Sequence[str] = ()):
        super().__init__(f"{reason}: {' '.join(tokens)!r}")
        self.reason = reason  # NoPredicate | NoArgument | InvalidPair


class LexiconError(ValueError):
    pass


def _no_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise LexiconError(f"duplicate lexicon entry {key!r}")
        out[key] = value
    return out


@dataclass(frozen=True)
class Lexicon:
    predicates: Dict[Tuple[str, ...], HighLevelAction]
    referring: Dict[Tuple[str, ...], str]

    @classmethod
    def from_dict(cls, data: dict) -> "Lexicon":
        predicates, referring = {}, {}
        for phrase, action in data["predicates"].items():
            key = tuple(tokenize(phrase))
            if key in predicates and predicates[key] != HighLevelAction(action):
                raise LexiconError(f"phrase {phrase!r} maps to two actions")
            predicates[key] = HighLevelAction(action)
        for phrase, cls_name in data["referring"].items():
            if cls_name not in ARGUMENT_CLASSES:
                raise LexiconError(f"unknown class {cls_name!r} for {phrase!r}")
            key = tuple(tokenize(phrase))
            if key in referring and referring[key] != cls_name:
                raise LexiconError(f"phrase {phrase!r} maps to two classes")
            referring[key] = cls_name
        return cls(predicates, referring)

    @classmethod
    def load(cls, path: Optional[Path] = None) -> "Lexicon":
        src = Path(path) if path is not None else resources.files("nsif") / "data" / "lexicon.json"
        return cls.from_dict(json.loads(src.read_text(encoding="utf-8"), object_pairs_hook=_no_duplicates))

    def covers(self, bank: ParaphraseBank) -> List[str]:
        """Bank phrases missing from (or contradicting) this lexicon."""
        problems = []
        for action, phrases in bank.predicates.items():
            for p in phrases:
                if self.predicates.get(tuple(tokenize(p))) != HighLevelAction(action):
                    problems.append(p)
        for cls_name, phrases in bank.referring.items():
            for p in phrases:
                if self.referring.get(tuple(tokenize(p))) != cls_name:
                    problems.append(p)
        return problems


_DEFAULT: Optional[Lexicon] = None


def default_lexicon() -> Lexicon:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = Lexicon.load()
    return _DEFAULT


def _first_match(tokens: Sequence[str], table: Dict[Tuple[str, ...], object], start: int = 0):
    """Left-to-right longest match; returns (value, end index) of the first hit."""
    lengths = sorted({len(k) for k in table}, reverse=True)
    for i in range(start, len(tokens)):
        for n in lengths:
            if i + n > len(tokens):
                continue
            key = tuple(tokens[i:i + n])
            if key in table:
                return table[key], i + n
    return None, None


def parse_rule(tokens: Sequence[str], lexicon: Optional[Lexicon] = None) -> SubtaskFrame:
    lexicon = lexicon or default_lexicon()
    action, end = _first_match(tokens, lexicon.predicates)
    if action is None:
        raise ParseFailure("NoPredicate", tokens)
    arg, _ = _first_match(tokens, lexicon.referring, end)
    if arg is None:
        raise ParseFailure("NoArgument", tokens)
    if not frame_is_valid(action, arg):
        raise ParseFailure("InvalidPair", tokens)
    return SubtaskFrame(action, arg)


def parse_oracle(episode: Episode, n: int) -> SubtaskFrame:
    if not 0 <= n < episode.N:
        raise IndexError(f"subtask {n} out of range for N={episode.N}")
    return episode.frames[n]


def parse_frames(episode: Episode, k: int, mode: str = "oracle", lexicon: Optional[Lexicon] = None,
                 fallback: str = "oracle") -> Optional[List[SubtaskFrame]]:
    """Frames for instruction set ``k``.

    In rule mode a ParseFailure either falls back to the ground-truth frame
    (``fallback="oracle"``) or makes the whole set unparseable (returns None).
    """
    if mode == "oracle":
        return list(episode.frames)
    if mode != "rule":
        raise ValueError(f"unknown parser mode {mode!r}")
    steps = episode.instructions[k][1:]
    frames = []
    for n, step_tokens in enumerate(steps):
        try:
            frames.append(parse_rule(step_tokens, lexicon))
        except ParseFailure:
            if fallback != "oracle":
                return None
            frames.append(parse_oracle(episode, n))
    return frames
