"""Episode (de)serialisation and split-level episode generation."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator, List, Optional

from nsif.rng import derive_seed
from nsif.worldsim.expert import UnreachableTarget, spawn_episode
from nsif.worldsim.layout import generate_layout
from nsif.worldsim.types import (
    Action,
    Episode,
    Layout,
    ObjClass,
    SimObject,
    Split,
    SubtaskFrame,
    Template,
    WorldState,
)

TEMPLATES = tuple(Template)


def _cells(cells) -> list:
    return [list(c) for c in sorted(cells)]


def layout_to_dict(layout: Layout) -> dict:
    return {
        "id": layout.id,
        "grid": list(layout.grid),
        "room_texture": layout.room_texture,
        "receptacles": [[cls, [list(c) for c in cells]] for cls, cells in layout.receptacles],
        "family": layout.family,
    }


def layout_from_dict(d: dict) -> Layout:
    return Layout(
        id=d["id"],
        grid=tuple(d["grid"]),
        room_texture=d["room_texture"],
        receptacles=tuple((cls, tuple(tuple(c) for c in cells)) for cls, cells in d["receptacles"]),
        family=d["family"],
    )


def _object_to_dict(obj: SimObject) -> dict:
    return {
        "id": obj.id,
        "class": obj.cls.value,
        "attributes": list(obj.attributes),
        "cells": [list(c) for c in obj.cells],
        "is_open": obj.is_open,
        "is_toggled_on": obj.is_toggled_on,
        "is_sliced": obj.is_sliced,
        "is_held": obj.is_held,
        "containing_receptacle": obj.containing_receptacle,
    }


def _object_from_dict(d: dict) -> SimObject:
    return SimObject(
        id=d["id"],
        cls=ObjClass(d["class"]),
        attributes=tuple(d["attributes"]),
        cells=tuple(tuple(c) for c in d["cells"]),
        is_open=d["is_open"],
        is_toggled_on=d["is_toggled_on"],
        is_sliced=d["is_sliced"],
        is_held=d["is_held"],
        containing_receptacle=d["containing_receptacle"],
    )


def episode_to_dict(ep: Episode, provenance: Optional[dict] = None) -> dict:
    d = {
        "id": ep.id,
        "layout": layout_to_dict(ep.layout),
        "init": {
            "objects": [_object_to_dict(o) for o in ep.init.objects],
            "agent_pos": list(ep.init.agent_pos),
            "agent_dir": ep.init.agent_dir,
            "t": ep.init.t,
        },
        "expert_actions": [
            {"kind": a.kind.value, "mask": None if a.mask is None else _cells(a.mask)}
            for a in ep.expert_actions
        ],
        "boundaries": [list(b) for b in ep.boundaries],
        "frames": [f.as_list() for f in ep.frames],
        "goal": ep.goal,
        "split": ep.split.value,
        "instructions": ep.instructions,
    }
    if provenance is not None:
        d["provenance"] = provenance
    return d


def episode_from_dict(d: dict) -> Episode:
    layout = layout_from_dict(d["layout"])
    init = WorldState(
        layout=layout,
        objects=tuple(_object_from_dict(o) for o in d["init"]["objects"]),
        agent_pos=tuple(d["init"]["agent_pos"]),
        agent_dir=d["init"]["agent_dir"],
        t=d["init"]["t"],
    )
    return Episode(
        id=d["id"],
        layout=layout,
        init=init,
        expert_actions=[
            Action(a["kind"], None if a["mask"] is None else frozenset(tuple(c) for c in a["mask"]))
            for a in d["expert_actions"]
        ],
        boundaries=[tuple(b) for b in d["boundaries"]],
        frames=[SubtaskFrame(b, r) for b, r in d["frames"]],
        goal=d["goal"],
        split=Split(d["split"]),
        instructions=d.get("instructions", []),
    )


def dumps_episode(ep: Episode, provenance: Optional[dict] = None) -> str:
    return json.dumps(episode_to_dict(ep, provenance), separators=(",", ":"))


def write_episodes(path: Path, episodes: Iterable[Episode], provenance: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(dumps_episode(ep, provenance))
            fh.write("\n")


def read_episodes(path: Path) -> List[Episode]:
    with Path(path).open(encoding="utf-8") as fh:
        return [episode_from_dict(json.loads(line)) for line in fh if line.strip()]


def generate_episode(split: Split, index: int, seed: int) -> Episode:
    """Episode ``index`` of ``split``; templates cycle, rooms are seeded."""
    split = Split(split)
    template = TEMPLATES[index % len(TEMPLATES)]
    for retry in range(16):
        sub = derive_seed(seed, split.value, index, retry) >> 1
        layout = generate_layout(sub, split)
        try:
            ep = spawn_episode(layout, template, sub, split)
        except UnreachableTarget:
            continue
        ep.id = f"{split.value}-{index:05d}"
        return ep
    raise UnreachableTarget(f"could not generate {split.value} episode {index}")


def generate_split(split: Split, count: int, seed: int) -> Iterator[Episode]:
    for i in range(count):
        yield generate_episode(split, i, seed)
