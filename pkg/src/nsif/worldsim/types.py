from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Tuple

Cell = Tuple[int, int]
Mask = FrozenSet[Cell]


class ObjClass(str, Enum):
    Apple = "Apple"
    Bread = "Bread"
    Tomato = "Tomato"
    Knife = "Knife"
    Mug = "Mug"
    DeskLamp = "DeskLamp"
    Microwave = "Microwave"
    Fridge = "Fridge"
    Drawer = "Drawer"
    CounterTop = "CounterTop"
    SinkBasin = "SinkBasin"


OBJECT_CLASSES: Tuple[ObjClass, ...] = tuple(ObjClass)
# Landmarks are valid subtask arguments but are not simulated objects.
LANDMARKS: Tuple[str, ...] = ("DiningTable",)
ARGUMENT_CLASSES: Tuple[str, ...] = tuple(c.value for c in ObjClass) + LANDMARKS

SLICEABLE = frozenset({ObjClass.Apple, ObjClass.Bread, ObjClass.Tomato})
TOGGLEABLE = frozenset({ObjClass.DeskLamp, ObjClass.Microwave})
OPENABLE = frozenset({ObjClass.Fridge, ObjClass.Drawer, ObjClass.Microwave})
PICKUPABLE = frozenset(
    {ObjClass.Apple, ObjClass.Bread, ObjClass.Tomato, ObjClass.Knife, ObjClass.Mug}
)
RECEPTACLES = frozenset(
    {ObjClass.CounterTop, ObjClass.SinkBasin, ObjClass.Fridge, ObjClass.Drawer, ObjClass.Microwave}
)


class CellType(str, Enum):
    Floor = "."
    Wall = "#"
    Counter = "C"
    Table = "T"
    Sink = "S"


class Split(str, Enum):
    TrainSeen = "TrainSeen"
    ValidSeen = "ValidSeen"
    ValidUnseen = "ValidUnseen"


class ActionKind(str, Enum):
    MoveAhead = "MoveAhead"
    RotateLeft = "RotateLeft"
    RotateRight = "RotateRight"
    Pickup = "Pickup"
    Put = "Put"
    Slice = "Slice"
    ToggleOn = "ToggleOn"
    ToggleOff = "ToggleOff"
    Open = "Open"
    Close = "Close"
    Stop = "Stop"


ACTION_KINDS: Tuple[ActionKind, ...] = tuple(ActionKind)
ACTION_INDEX: Dict[ActionKind, int] = {k: i for i, k in enumerate(ACTION_KINDS)}
NAVIGATION_KINDS = frozenset({ActionKind.MoveAhead, ActionKind.RotateLeft, ActionKind.RotateRight, ActionKind.Stop})
INTERACTION_KINDS = frozenset(ACTION_KINDS) - NAVIGATION_KINDS


class HighLevelAction(str, Enum):
    GotoLocation = "GotoLocation"
    PickupObject = "PickupObject"
    SliceObject = "SliceObject"
    ToggleObject = "ToggleObject"
    PutObject = "PutObject"
    OpenObject = "OpenObject"
    CloseObject = "CloseObject"


HIGH_LEVEL_ACTIONS: Tuple[HighLevelAction, ...] = tuple(HighLevelAction)


class Template(str, Enum):
    PickupSimple = "PickupSimple"
    SliceAndPlace = "SliceAndPlace"
    ToggleLamp = "ToggleLamp"
    PickupFromReceptacle = "PickupFromReceptacle"
    PutAway = "PutAway"


# N, E, S, W
DIRECTIONS: Tuple[Cell, ...] = ((0, -1), (1, 0), (0, 1), (-1, 0))
DIRECTION_NAMES = ("N", "E", "S", "W")


class InvalidFrame(ValueError):
    pass


@dataclass(frozen=True)
class SubtaskFrame:
    """High-level action ``b`` with its single argument class ``r``."""

    b: HighLevelAction
    r: str

    def __post_init__(self):
        object.__setattr__(self, "b", HighLevelAction(self.b))
        if not frame_is_valid(self.b, self.r):
            raise InvalidFrame(f"{self.r} is not a valid argument for {self.b.value}")

    def as_list(self) -> List[str]:
        return [self.b.value, self.r]


def frame_is_valid(b: HighLevelAction, r: str) -> bool:
    if r not in ARGUMENT_CLASSES:
        return False
    if b == HighLevelAction.GotoLocation:
        return r in LANDMARKS or ObjClass(r) in RECEPTACLES | {ObjClass.DeskLamp}
    if r in LANDMARKS:
        return False
    cls = ObjClass(r)
    if b in (HighLevelAction.PickupObject, HighLevelAction.PutObject):
        return cls in PICKUPABLE
    if b == HighLevelAction.SliceObject:
        return cls in SLICEABLE
    if b == HighLevelAction.ToggleObject:
        return cls in TOGGLEABLE
    return cls in OPENABLE


@dataclass(frozen=True)
class SimObject:
    id: int
    cls: ObjClass
    attributes: Tuple[int, int, int]  # (color, shape, texture)
    cells: Tuple[Cell, ...]  # empty while held
    is_open: bool = False
    is_toggled_on: bool = False
    is_sliced: bool = False
    is_held: bool = False
    containing_receptacle: Optional[int] = None

    @property
    def position(self) -> Optional[Cell]:
        return self.cells[0] if self.cells else None


@dataclass(frozen=True)
class Layout:
    id: str
    grid: Tuple[str, ...]  # rows of CellType characters, indexed grid[y][x]
    room_texture: int
    receptacles: Tuple[Tuple[str, Tuple[Cell, ...]], ...]  # fixed furniture placements
    family: int
    _cache: dict = field(default_factory=dict, compare=False, hash=False, repr=False)

    @property
    def width(self) -> int:
        return len(self.grid[0])

    @property
    def height(self) -> int:
        return len(self.grid)

    def cell_type(self, cell: Cell) -> CellType:
        x, y = cell
        if not (0 <= x < self.width and 0 <= y < self.height):
            return CellType.Wall
        return CellType(self.grid[y][x])

    def is_floor(self, cell: Cell) -> bool:
        return self.cell_type(cell) == CellType.Floor

    def cells_of(self, ctype: CellType) -> List[Cell]:
        return [
            (x, y)
            for y in range(self.height)
            for x in range(self.width)
            if self.grid[y][x] == ctype.value
        ]

    def arrangement(self) -> Tuple:
        """Wall/receptacle arrangement, i.e. everything except the scenery code."""
        return (self.grid, self.receptacles)


@dataclass(frozen=True)
class WorldState:
    layout: Layout
    objects: Tuple[SimObject, ...]  # objects[i].id == i
    agent_pos: Cell
    agent_dir: int
    t: int = 0

    def held(self) -> Optional[SimObject]:
        for obj in self.objects:
            if obj.is_held:
                return obj
        return None

    def find(self, cls: ObjClass) -> Optional[SimObject]:
        for obj in self.objects:
            if obj.cls == cls:
                return obj
        return None


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    mask: Optional[Mask] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ActionKind(self.kind))
        if self.mask is not None:
            object.__setattr__(self, "mask", frozenset(self.mask))
        if (self.kind in INTERACTION_KINDS) != (self.mask is not None):
            raise ValueError(f"{self.kind.value}: mask must be given iff the action is an interaction")

    @property
    def is_interaction(self) -> bool:
        return self.kind in INTERACTION_KINDS


@dataclass(frozen=True)
class Observation:
    visible_cells: FrozenSet[Cell]
    depth: Dict[Cell, int] = field(compare=False, hash=False)
    objects: Tuple[Tuple[SimObject, Mask], ...]  # visible objects with their visible masks
    room_texture: int
    agent_dir: int
    held_class: Optional[ObjClass]
    t: int


@dataclass(frozen=True)
class Detection:
    mask: Mask
    cls: ObjClass
    features: Tuple[float, ...]
    object_id: int  # oracle bookkeeping; agents must not read it


@dataclass
class Episode:
    id: str
    layout: Layout
    init: WorldState
    expert_actions: List[Action]
    boundaries: List[Tuple[int, int]]
    frames: List[SubtaskFrame]
    goal: dict  # template name plus per-subtask target bookkeeping
    split: Split
    instructions: List[List[List[str]]] = field(default_factory=list)  # K x (1 + N) token lists

    @property
    def T(self) -> int:
        return len(self.expert_actions)

    @property
    def N(self) -> int:
        return len(self.frames)

    def subtask_at(self, t: int) -> int:
        for n, (start, end) in enumerate(self.boundaries):
            if start <= t < end:
                return n
        raise IndexError(f"t={t} outside episode horizon {self.T}")
