import pytest

from nsif.pipeline import annotated_episode
from nsif.worldsim.types import (
    Layout,
    ObjClass,
    SimObject,
    Split,
    WorldState,
)

ROOM = (
    "########",
    "#......#",
    "#......#",
    "#...T..#",
    "#......#",
    "#......#",
    "#CCCCCC#",
    "########",
)


def make_room(texture: int = 0) -> Layout:
    return Layout(
        id=f"hand-t{texture}",
        grid=ROOM,
        room_texture=texture,
        receptacles=(
            ("CounterTop", ((1, 6), (2, 6))),
            ("Fridge", ((4, 6),)),
            ("Drawer", ((5, 6),)),
            ("DeskLamp", ((4, 3),)),
        ),
        family=0,
    )


def make_objects(fridge_open: bool = False, drawer_open: bool = False, knife_held: bool = False):
    knife_cells = () if knife_held else ((2, 6),)
    return (
        SimObject(0, ObjClass.CounterTop, (4, 1, 2), ((1, 6), (2, 6))),
        SimObject(1, ObjClass.Fridge, (5, 3, 0), ((4, 6),), is_open=fridge_open),
        SimObject(2, ObjClass.Drawer, (4, 1, 2), ((5, 6),), is_open=drawer_open),
        SimObject(3, ObjClass.DeskLamp, (6, 3, 1), ((4, 3),)),
        SimObject(4, ObjClass.Apple, (0, 0, 0), ((1, 6),), containing_receptacle=0),
        SimObject(5, ObjClass.Knife, (7, 1, 1), knife_cells, is_held=knife_held,
                  containing_receptacle=None if knife_held else 0),
        SimObject(6, ObjClass.Bread, (4, 1, 3), ((5, 6),), containing_receptacle=2),
        SimObject(7, ObjClass.Tomato, (0, 0, 1), ((4, 6),), containing_receptacle=1),
    )


def make_state(pos=(4, 5), direction=2, texture=0, **kwargs) -> WorldState:
    return WorldState(make_room(texture), make_objects(**kwargs), pos, direction)


@pytest.fixture(scope="session")
def train_episodes():
    return [annotated_episode(Split.TrainSeen, i, 0, 3) for i in range(40)]


@pytest.fixture(scope="session")
def unseen_episodes():
    return [annotated_episode(Split.ValidUnseen, i, 0, 3) for i in range(20)]
