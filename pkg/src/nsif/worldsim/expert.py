"""Episode spawning and the BFS + scripted-interaction expert."""

from __future__ import annotations

from collections import deque
from typing import Dict, List, Optional, Sequence, Tuple

from nsif.rng import SplitMix64, derive_seed
from nsif.worldsim.layout import sample_attributes
from nsif.worldsim.sim import Outcome, ahead, check_subtask_goal, observe, step
from nsif.worldsim.types import (
    Action,
    ActionKind,
    Cell,
    CellType,
    Episode,
    HighLevelAction as HLA,
    Layout,
    ObjClass,
    SimObject,
    SLICEABLE,
    Split,
    SubtaskFrame,
    Template,
    WorldState,
)

SMALL_CLASSES = (ObjClass.Apple, ObjClass.Bread, ObjClass.Tomato, ObjClass.Knife, ObjClass.Mug)
MAX_SPAWN_ATTEMPTS = 64
_NAV_ORDER = (ActionKind.MoveAhead, ActionKind.RotateLeft, ActionKind.RotateRight)


class UnreachableTarget(RuntimeError):
    pass


class _Retry(Exception):
    pass


def plan_path(layout: Layout, pos: Cell, direction: int, aim: Cell) -> Optional[List[ActionKind]]:
    """Shortest navigation sequence ending adjacent to and facing ``aim``."""
    start = (pos, direction)
    parents: Dict[Tuple[Cell, int], Optional[Tuple[Tuple[Cell, int], ActionKind]]] = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        p, d = node
        if ahead(p, d) == aim:
            path = []
            while parents[node] is not None:
                node, act = parents[node]
                path.append(act)
            return path[::-1]
        for act in _NAV_ORDER:
            if act == ActionKind.MoveAhead:
                nxt_pos = ahead(p, d)
                if not layout.is_floor(nxt_pos):
                    continue
                nxt = (nxt_pos, d)
            elif act == ActionKind.RotateLeft:
                nxt = (p, (d + 3) % 4)
            else:
                nxt = (p, (d + 1) % 4)
            if nxt not in parents:
                parents[nxt] = (node, act)
                queue.append(nxt)
    return None


def _furniture(layout: Layout) -> Dict[ObjClass, Tuple[Cell, ...]]:
    return {ObjClass(cls): cells for cls, cells in layout.receptacles}


def _build_objects(layout: Layout, split: Split, rng: SplitMix64, placements: Dict[ObjClass, Tuple]) -> List[SimObject]:
    """Fixed furniture first, then small objects in a shuffled id order.

    ``placements`` maps a small class to ("cell", cell) or ("in", receptacle class).
    """
    objects: List[SimObject] = []
    ids: Dict[ObjClass, int] = {}
    for cls, cells in layout.receptacles:
        cls = ObjClass(cls)
        ids[cls] = len(objects)
        objects.append(SimObject(id=len(objects), cls=cls, attributes=sample_attributes(cls, split, rng), cells=tuple(cells)))
    small = list(placements)
    rng.shuffle(small)
    for cls in small:
        kind, where = placements[cls]
        if kind == "cell":
            cells, container = (where,), None
            counter_cells = _furniture(layout)[ObjClass.CounterTop]
            if where in counter_cells:
                container = ids[ObjClass.CounterTop]
        else:
            container = ids[where]
            cells = (objects[container].position,)
        objects.append(
            SimObject(
                id=len(objects),
                cls=cls,
                attributes=sample_attributes(cls, split, rng),
                cells=cells,
                containing_receptacle=container,
            )
        )
    return objects


def _template_plan(template: Template, layout: Layout, rng: SplitMix64):
    """Placements of the template's key objects plus its subtask script.

    The script is a list of (frame, target, receptacle, aim) where ``target``
    is a class (resolved to an id later) or a landmark name.
    """
    furn = _furniture(layout)
    counter = list(furn[ObjClass.CounterTop])
    lamp_cell = furn[ObjClass.DeskLamp][0]
    table_free = [c for c in layout.cells_of(CellType.Table) if c != lamp_cell]
    rng.shuffle(counter)
    placements: Dict[ObjClass, Tuple] = {}
    script = []

    if template == Template.PickupSimple:
        x = rng.choice(SMALL_CLASSES)
        placements[x] = ("cell", counter.pop())
        script = [
            (SubtaskFrame(HLA.GotoLocation, "CounterTop"), ObjClass.CounterTop, None, x),
            (SubtaskFrame(HLA.PickupObject, x.value), x, None, None),
        ]
    elif template == Template.SliceAndPlace:
        y = rng.choice(sorted(SLICEABLE, key=lambda c: c.value))
        placements[ObjClass.Knife] = ("cell", counter.pop())
        placements[y] = ("cell", table_free[0])
        script = [
            (SubtaskFrame(HLA.GotoLocation, "CounterTop"), ObjClass.CounterTop, None, ObjClass.Knife),
            (SubtaskFrame(HLA.PickupObject, "Knife"), ObjClass.Knife, None, None),
            (SubtaskFrame(HLA.GotoLocation, "DiningTable"), "DiningTable", None, y),
            (SubtaskFrame(HLA.SliceObject, y.value), y, None, None),
            (SubtaskFrame(HLA.GotoLocation, "SinkBasin"), ObjClass.SinkBasin, None, ObjClass.SinkBasin),
            (SubtaskFrame(HLA.PutObject, "Knife"), ObjClass.Knife, ObjClass.SinkBasin, None),
        ]
    elif template == Template.ToggleLamp:
        x = rng.choice(SMALL_CLASSES)
        placements[x] = ("cell", counter.pop())
        script = [
            (SubtaskFrame(HLA.GotoLocation, "CounterTop"), ObjClass.CounterTop, None, x),
            (SubtaskFrame(HLA.PickupObject, x.value), x, None, None),
            (SubtaskFrame(HLA.GotoLocation, "DeskLamp"), ObjClass.DeskLamp, None, ObjClass.DeskLamp),
            (SubtaskFrame(HLA.ToggleObject, "DeskLamp"), ObjClass.DeskLamp, None, None),
        ]
    elif template == Template.PickupFromReceptacle:
        c = rng.choice((ObjClass.Fridge, ObjClass.Drawer))
        x = rng.choice(SMALL_CLASSES)
        placements[x] = ("in", c)
        script = [
            (SubtaskFrame(HLA.GotoLocation, c.value), c, None, c),
            (SubtaskFrame(HLA.OpenObject, c.value), c, None, None),
            (SubtaskFrame(HLA.PickupObject, x.value), x, None, None),
            (SubtaskFrame(HLA.CloseObject, c.value), c, None, None),
        ]
    elif template == Template.PutAway:
        c = rng.choice((ObjClass.Fridge, ObjClass.Drawer, ObjClass.Microwave))
        x = rng.choice(SMALL_CLASSES)
        on_table = rng.bernoulli(0.5)
        if on_table:
            placements[x] = ("cell", table_free[0])
            first = (SubtaskFrame(HLA.GotoLocation, "DiningTable"), "DiningTable", None, x)
        else:
            placements[x] = ("cell", counter.pop())
            first = (SubtaskFrame(HLA.GotoLocation, "CounterTop"), ObjClass.CounterTop, None, x)
        script = [
            first,
            (SubtaskFrame(HLA.PickupObject, x.value), x, None, None),
            (SubtaskFrame(HLA.GotoLocation, c.value), c, None, c),
            (SubtaskFrame(HLA.OpenObject, c.value), c, None, None),
            (SubtaskFrame(HLA.PutObject, x.value), x, c, None),
            (SubtaskFrame(HLA.CloseObject, c.value), c, None, None),
        ]
    else:  # pragma: no cover
        raise ValueError(f"unknown template {template}")

    # Distractors fill the remaining surfaces; overflow goes into free containers.
    used_containers = {p[1] for p in placements.values() if p[0] == "in"}
    used_containers |= {entry[2] for entry in script if entry[2] is not None}
    used_containers |= {entry[1] for entry in script if isinstance(entry[1], ObjClass) and entry[1] in (ObjClass.Fridge, ObjClass.Drawer, ObjClass.Microwave)}
    surfaces = counter + [c for c in table_free if c not in {p[1] for p in placements.values()}]
    rng.shuffle(surfaces)
    spare_containers = [
        c for c in (ObjClass.Microwave, ObjClass.Drawer, ObjClass.Fridge, ObjClass.SinkBasin)
        if c not in used_containers
    ]
    for cls in SMALL_CLASSES:
        if cls in placements:
            continue
        if surfaces:
            placements[cls] = ("cell", surfaces.pop())
        elif spare_containers:
            placements[cls] = ("in", spare_containers.pop(0))
    return placements, script


def spawn_episode(layout: Layout, template: Template, seed: int, split: Split = Split.TrainSeen, episode_id: Optional[str] = None) -> Episode:
    """Place objects and the agent, then record an expert demonstration.

    Raises UnreachableTarget when no placement yields a valid demonstration.
    """
    template = Template(template)
    for attempt in range(MAX_SPAWN_ATTEMPTS):
        rng = SplitMix64(derive_seed(seed, "spawn", template.value, attempt))
        try:
            return _spawn_once(layout, template, split, rng, episode_id or f"{layout.id}-{template.value}-{seed}")
        except _Retry:
            continue
    raise UnreachableTarget(f"no valid {template.value} episode in layout {layout.id} for seed {seed}")


def _spawn_once(layout: Layout, template: Template, split: Split, rng: SplitMix64, episode_id: str) -> Episode:
    placements, script = _template_plan(template, layout, rng)
    objects = _build_objects(layout, split, rng, placements)
    by_class = {o.cls: o.id for o in objects}
    floors = layout.cells_of(CellType.Floor)
    state = WorldState(layout=layout, objects=tuple(objects), agent_pos=rng.choice(floors), agent_dir=rng.randrange(4))

    targets = [by_class[t] if isinstance(t, ObjClass) else t for _, t, _, _ in script]
    receptacles = [None if r is None else by_class[r] for _, _, r, _ in script]
    frames = [entry[0] for entry in script]
    episode = Episode(
        id=episode_id,
        layout=layout,
        init=state,
        expert_actions=[],
        boundaries=[],
        frames=frames,
        goal={"template": template.value, "targets": targets, "receptacles": receptacles},
        split=Split(split),
    )

    actions: List[Action] = []
    for n, (frame, _, _, aim) in enumerate(script):
        if check_subtask_goal(state, episode, n):
            raise _Retry()
        start = len(actions)
        segment: List[Action] = []
        if frame.b == HLA.GotoLocation:
            aim_cell = state.objects[by_class[aim]].position
            path = plan_path(layout, state.agent_pos, state.agent_dir, aim_cell)
            if path is None:
                raise UnreachableTarget(f"{aim} unreachable in layout {layout.id}")
            segment = [Action(kind) for kind in path]
        else:
            segment = [_interaction(state, frame, episode.goal["targets"][n], receptacles[n])]
        for action in segment:
            state, outcome = step(state, action)
            if outcome != Outcome.Ok:  # pragma: no cover - planner bug guard
                raise _Retry()
        if n == len(script) - 1:
            stop = Action(ActionKind.Stop)
            state, _ = step(state, stop)
            segment.append(stop)
        if not check_subtask_goal(state, episode, n):
            raise _Retry()
        actions.extend(segment)
        episode.boundaries.append((start, len(actions)))
    episode.expert_actions = actions
    return episode


_INTERACTION_FOR = {
    HLA.PickupObject: ActionKind.Pickup,
    HLA.SliceObject: ActionKind.Slice,
    HLA.ToggleObject: ActionKind.ToggleOn,
    HLA.OpenObject: ActionKind.Open,
    HLA.CloseObject: ActionKind.Close,
    HLA.PutObject: ActionKind.Put,
}


def _interaction(state: WorldState, frame: SubtaskFrame, target: int, receptacle: Optional[int]) -> Action:
    acted_on = receptacle if frame.b == HLA.PutObject else target
    obs = observe(state)
    for obj, mask in obs.objects:
        if obj.id == acted_on:
            return Action(_INTERACTION_FOR[frame.b], mask)
    raise _Retry()


def interaction_target(episode: Episode, t: int) -> Optional[int]:
    """Object id the expert acts upon at step ``t`` (None for navigation)."""
    action = episode.expert_actions[t]
    if not action.is_interaction:
        return None
    n = episode.subtask_at(t)
    if episode.frames[n].b == HLA.PutObject:
        return episode.goal["receptacles"][n]
    return episode.goal["targets"][n]
