"""State transitions, egocentric observation and subtask goal predicates."""

from __future__ import annotations

from dataclasses import replace
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Tuple

from nsif.worldsim.types import (
    Action,
    ActionKind,
    Cell,
    CellType,
    DIRECTIONS,
    Episode,
    HighLevelAction,
    Layout,
    Mask,
    ObjClass,
    Observation,
    OPENABLE,
    PICKUPABLE,
    SimObject,
    SLICEABLE,
    TOGGLEABLE,
    WorldState,
)

CONE_HALF_WIDTHS = (0, 1, 2, 2)  # rows of width 1/3/5/5
INTERACTION_RANGE = 2
OVERLAP_THRESHOLD = 0.5


class Outcome(str, Enum):
    Ok = "Ok"
    Blocked = "Blocked"
    InvalidInteraction = "InvalidInteraction"


def ahead(pos: Cell, direction: int, distance: int = 1) -> Cell:
    dx, dy = DIRECTIONS[direction]
    return (pos[0] + dx * distance, pos[1] + dy * distance)


def _cone(layout: Layout, pos: Cell, direction: int) -> Dict[Cell, int]:
    """Visible cells of the view cone mapped to their forward distance."""
    key = ("cone", pos, direction)
    cached = layout._cache.get(key)
    if cached is not None:
        return cached
    fx, fy = DIRECTIONS[direction]
    rx, ry = -fy, fx
    visible: Dict[Tuple[int, int], Cell] = {}  # (d, k) -> cell
    depth: Dict[Cell, int] = {}
    for d, half in enumerate(CONE_HALF_WIDTHS, start=1):
        for k in range(-half, half + 1):
            cell = (pos[0] + fx * d + rx * k, pos[1] + fy * d + ry * k)
            if not (0 <= cell[0] < layout.width and 0 <= cell[1] < layout.height):
                continue
            if d > 1:
                prev_half = CONE_HALF_WIDTHS[d - 2]
                parent = visible.get((d - 1, max(-prev_half, min(prev_half, k))))
                if parent is None or layout.cell_type(parent) == CellType.Wall:
                    continue
            visible[(d, k)] = cell
            depth[cell] = d
    layout._cache[key] = depth
    return depth


def _inside_closed(state: WorldState, obj: SimObject) -> bool:
    if obj.containing_receptacle is None:
        return False
    container = state.objects[obj.containing_receptacle]
    return container.cls in OPENABLE and not container.is_open


def observe(state: WorldState) -> Observation:
    depth = _cone(state.layout, state.agent_pos, state.agent_dir)
    objects = []
    for obj in state.objects:
        if obj.is_held or _inside_closed(state, obj):
            continue
        mask = frozenset(c for c in obj.cells if c in depth)
        if mask:
            objects.append((obj, mask))
    held = state.held()
    return Observation(
        visible_cells=frozenset(depth),
        depth=depth,
        objects=tuple(objects),
        room_texture=state.layout.room_texture,
        agent_dir=state.agent_dir,
        held_class=held.cls if held is not None else None,
        t=state.t,
    )


def _admits(state: WorldState, obj: SimObject, kind: ActionKind) -> bool:
    held = state.held()
    if kind == ActionKind.Pickup:
        return obj.cls in PICKUPABLE and held is None
    if kind == ActionKind.Slice:
        return (
            obj.cls in SLICEABLE
            and not obj.is_sliced
            and held is not None
            and held.cls == ObjClass.Knife
        )
    if kind == ActionKind.ToggleOn:
        return obj.cls in TOGGLEABLE and not obj.is_toggled_on
    if kind == ActionKind.ToggleOff:
        return obj.cls in TOGGLEABLE and obj.is_toggled_on
    if kind == ActionKind.Open:
        return obj.cls in OPENABLE and not obj.is_open
    if kind == ActionKind.Close:
        return obj.cls in OPENABLE and obj.is_open
    if kind == ActionKind.Put:
        if held is None:
            return False
        if obj.cls == ObjClass.CounterTop:
            return True
        if obj.cls in OPENABLE and not obj.is_open:
            return False
        return obj.cls in (ObjClass.SinkBasin, ObjClass.Fridge, ObjClass.Drawer, ObjClass.Microwave)
    return False


def resolve_target(state: WorldState, obs: Observation, action: Action) -> Optional[Tuple[SimObject, Mask]]:
    """Visible, in-range object that ``action.mask`` grounds to, if any.

    A candidate must overlap the mask by more than half of the smaller mask
    and its class/state must admit the action. Ties go to the larger IoU, then
    the smaller object id.
    """
    best = None
    best_key = None
    arg = action.mask
    for obj, mask in obs.objects:
        if min(obs.depth[c] for c in mask) > INTERACTION_RANGE:
            continue
        overlap = len(arg & mask)
        if overlap <= OVERLAP_THRESHOLD * min(len(arg), len(mask)):
            continue
        if not _admits(state, obj, action.kind):
            continue
        iou = overlap / len(arg | mask)
        key = (-iou, obj.id)
        if best_key is None or key < best_key:
            best, best_key = (obj, mask), key
    return best


def _occupied_cells(state: WorldState) -> set:
    return {
        obj.position
        for obj in state.objects
        if obj.cls in PICKUPABLE and obj.position is not None
    }


def step(state: WorldState, action: Action) -> Tuple[WorldState, Outcome]:
    """Apply ``action``; the input state is never mutated and nothing raises."""
    t = state.t + 1
    kind = action.kind
    if kind == ActionKind.MoveAhead:
        nxt = ahead(state.agent_pos, state.agent_dir)
        if state.layout.is_floor(nxt):
            return replace(state, agent_pos=nxt, t=t), Outcome.Ok
        return replace(state, t=t), Outcome.Blocked
    if kind == ActionKind.RotateLeft:
        return replace(state, agent_dir=(state.agent_dir + 3) % 4, t=t), Outcome.Ok
    if kind == ActionKind.RotateRight:
        return replace(state, agent_dir=(state.agent_dir + 1) % 4, t=t), Outcome.Ok
    if kind == ActionKind.Stop:
        return replace(state, t=t), Outcome.Ok

    invalid = (replace(state, t=t), Outcome.InvalidInteraction)
    if not action.mask:
        return invalid
    obs = observe(state)
    found = resolve_target(state, obs, action)
    if found is None:
        return invalid
    target, mask = found
    objects = list(state.objects)

    if kind == ActionKind.Pickup:
        objects[target.id] = replace(target, cells=(), is_held=True, containing_receptacle=None)
    elif kind == ActionKind.Put:
        held = state.held()
        if target.cls == ObjClass.CounterTop:
            occupied = _occupied_cells(state)
            free = sorted(
                c for c in action.mask & mask
                if obs.depth[c] <= INTERACTION_RANGE and c not in occupied
            )
            if not free:
                return invalid
            cell = free[0]
        else:
            if any(o.containing_receptacle == target.id for o in state.objects):
                return invalid
            cell = target.position
        objects[held.id] = replace(held, cells=(cell,), is_held=False, containing_receptacle=target.id)
    elif kind == ActionKind.Slice:
        objects[target.id] = replace(target, is_sliced=True)
    elif kind == ActionKind.ToggleOn:
        objects[target.id] = replace(target, is_toggled_on=True)
    elif kind == ActionKind.ToggleOff:
        objects[target.id] = replace(target, is_toggled_on=False)
    elif kind == ActionKind.Open:
        objects[target.id] = replace(target, is_open=True)
    elif kind == ActionKind.Close:
        objects[target.id] = replace(target, is_open=False)
    return replace(state, objects=tuple(objects), t=t), Outcome.Ok


def target_cells(state: WorldState, target) -> FrozenSet[Cell]:
    """Cells of a Goto target: an object id or a landmark name."""
    if isinstance(target, str):
        return frozenset(state.layout.cells_of(CellType.Table))
    return frozenset(state.objects[target].cells)


def check_subtask_goal(state: WorldState, episode: Episode, n: int) -> bool:
    """Whether subtask ``n`` of ``episode`` is accomplished in ``state``."""
    frame = episode.frames[n]
    target = episode.goal["targets"][n]
    b = frame.b
    if b == HighLevelAction.GotoLocation:
        return ahead(state.agent_pos, state.agent_dir) in target_cells(state, target)
    if b == HighLevelAction.PickupObject:
        return any(o.is_held and o.cls.value == frame.r for o in state.objects)
    obj = state.objects[target]
    if b == HighLevelAction.SliceObject:
        return obj.is_sliced
    if b == HighLevelAction.ToggleObject:
        return obj.is_toggled_on
    if b == HighLevelAction.OpenObject:
        return obj.is_open
    if b == HighLevelAction.CloseObject:
        return not obj.is_open
    if b == HighLevelAction.PutObject:
        receptacle = episode.goal["receptacles"][n]
        return not obj.is_held and obj.containing_receptacle == receptacle
    raise ValueError(f"unknown high-level action {b}")  # pragma: no cover


def replay(episode: Episode, upto: Optional[int] = None) -> List[Tuple[WorldState, Outcome]]:
    """States reached by the expert; element t is the state *before* action t.

    The final element (index ``upto``) is the state after the last replayed
    action, paired with that action's outcome.
    """
    upto = episode.T if upto is None else upto
    state = episode.init
    trace = [(state, Outcome.Ok)]
    for action in episode.expert_actions[:upto]:
        state, outcome = step(state, action)
        trace.append((state, outcome))
    return trace
