"""Room generation and the seen/unseen pools for rooms and object attributes."""

from __future__ import annotations

from collections import deque
from functools import lru_cache
from typing import Dict, List, Optional, Set, Tuple

from nsif.rng import SplitMix64, derive_seed
from nsif.worldsim.types import Cell, CellType, Layout, ObjClass, OBJECT_CLASSES, Split

GRID_SIZE = 8
N_COLORS, N_SHAPES, N_TEXTURES = 8, 4, 4
N_ROOM_TEXTURES = 8
SEEN_ROOM_TEXTURES = (0, 1, 2, 3, 4, 5)
UNSEEN_ROOM_TEXTURES = (6, 7)
N_SEEN_FAMILIES = 24
N_UNSEEN_FAMILIES = 8
TRAIN_ATTRIBUTE_FRACTION = 0.6

COLOR_NAMES = ("red", "green", "yellow", "orange", "brown", "white", "black", "silver")
SHAPE_NAMES = ("round", "oblong", "boxy", "irregular")
TEXTURE_NAMES = ("smooth", "matte", "glossy", "speckled")

# Each class leans towards two colours; see sample_attributes.
TYPICAL_COLORS: Dict[ObjClass, Tuple[int, int]] = {
    ObjClass.Apple: (0, 1),
    ObjClass.Bread: (4, 2),
    ObjClass.Tomato: (0, 3),
    ObjClass.Knife: (7, 6),
    ObjClass.Mug: (5, 1),
    ObjClass.DeskLamp: (6, 2),
    ObjClass.Microwave: (7, 5),
    ObjClass.Fridge: (5, 7),
    ObjClass.Drawer: (4, 5),
    ObjClass.CounterTop: (5, 6),
    ObjClass.SinkBasin: (7, 5),
}
TYPICAL_COLOR_PROB = 0.5

_ARRANGEMENT_SALT = 0x5EED_A11A


class LayoutError(RuntimeError):
    pass


def _pool_for(split: Split) -> str:
    return "unseen" if Split(split) == Split.ValidUnseen else "seen"


def _floor_components_ok(grid: List[List[str]]) -> bool:
    floors = [(x, y) for y in range(GRID_SIZE) for x in range(GRID_SIZE) if grid[y][x] == "."]
    if not floors:
        return False
    seen = {floors[0]}
    queue = deque([floors[0]])
    while queue:
        x, y = queue.popleft()
        for dx, dy in ((0, -1), (1, 0), (0, 1), (-1, 0)):
            nxt = (x + dx, y + dy)
            if nxt not in seen and grid[nxt[1]][nxt[0]] == ".":
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == len(floors)


def _has_floor_neighbour(grid: List[List[str]], cell: Cell) -> bool:
    x, y = cell
    return any(grid[y + dy][x + dx] == "." for dx, dy in ((0, -1), (1, 0), (0, 1), (-1, 0)))


def _wall_run(side: int, start: int, length: int) -> List[Cell]:
    # side: 0 north, 1 east, 2 south, 3 west; cells hug the border wall
    lo = 1
    cells = []
    for i in range(start, start + length):
        if side == 0:
            cells.append((i, lo))
        elif side == 1:
            cells.append((GRID_SIZE - 2, i))
        elif side == 2:
            cells.append((i, GRID_SIZE - 2))
        else:
            cells.append((lo, i))
    return cells


def _try_arrangement(rng: SplitMix64):
    grid = [["#"] * GRID_SIZE for _ in range(GRID_SIZE)]
    for y in range(1, GRID_SIZE - 1):
        for x in range(1, GRID_SIZE - 1):
            grid[y][x] = "."

    side = rng.randrange(4)
    length = 5 + rng.randrange(2)
    start = 1 + rng.randrange(GRID_SIZE - 2 - length + 1)
    main_run = _wall_run(side, start, length)
    side2 = (side + (1 if rng.bernoulli(0.5) else 3)) % 4
    length2 = 2 + rng.randrange(2)
    start2 = 1 + rng.randrange(GRID_SIZE - 2 - length2 + 1)
    second_run = [c for c in _wall_run(side2, start2, length2) if c not in main_run]
    counter_cells = main_run + second_run
    for x, y in counter_cells:
        grid[y][x] = "C"

    # appliances and the sink take counter slots; at least three stay as countertop
    slots = list(counter_cells)
    rng.shuffle(slots)
    if len(slots) < 7:
        return None
    sink, fridge, drawer, microwave = slots[:4]
    grid[sink[1]][sink[0]] = "S"

    interior = [
        (x, y)
        for y in range(2, GRID_SIZE - 2)
        for x in range(2, GRID_SIZE - 2)
        if grid[y][x] == "."
    ]
    tx, ty = rng.choice(interior)
    if rng.bernoulli(0.5):
        table = [(tx, ty), (tx + 1, ty)]
    else:
        table = [(tx, ty), (tx, ty + 1)]
    for x, y in table:
        if grid[y][x] != ".":
            return None
        grid[y][x] = "T"
    lamp = table[rng.randrange(2)]

    if rng.bernoulli(0.5):
        free = [
            (x, y)
            for y in range(1, GRID_SIZE - 1)
            for x in range(1, GRID_SIZE - 1)
            if grid[y][x] == "."
        ]
        wx, wy = rng.choice(free)
        grid[wy][wx] = "#"

    if not _floor_components_ok(grid):
        return None
    furniture = [c for c in counter_cells] + table
    if not all(_has_floor_neighbour(grid, c) for c in furniture):
        return None

    countertop = tuple(sorted(c for c in counter_cells if c not in (sink, fridge, drawer, microwave)))
    receptacles = (
        (ObjClass.CounterTop.value, countertop),
        (ObjClass.SinkBasin.value, (sink,)),
        (ObjClass.Fridge.value, (fridge,)),
        (ObjClass.Drawer.value, (drawer,)),
        (ObjClass.Microwave.value, (microwave,)),
        (ObjClass.DeskLamp.value, (lamp,)),
    )
    return tuple("".join(row) for row in grid), receptacles


@lru_cache(maxsize=None)
def arrangement_pools() -> Dict[str, Tuple[Tuple, ...]]:
    """Distinct room arrangements, split into a seen and an unseen pool."""
    arrangements: List[Tuple] = []
    seen_keys: Set[Tuple] = set()
    attempt = 0
    total = N_SEEN_FAMILIES + N_UNSEEN_FAMILIES
    while len(arrangements) < total:
        rng = SplitMix64(derive_seed(_ARRANGEMENT_SALT, attempt))
        attempt += 1
        arr = _try_arrangement(rng)
        if arr is None or arr in seen_keys:
            continue
        seen_keys.add(arr)
        arrangements.append(arr)
    return {
        "seen": tuple(arrangements[:N_SEEN_FAMILIES]),
        "unseen": tuple(arrangements[N_SEEN_FAMILIES:]),
    }


def generate_layout(seed: int, split: Split) -> Layout:
    """Deterministic room for ``(seed, split)``.

    ValidUnseen rooms come from an arrangement pool and a scenery-code pool
    that are disjoint from the ones used by TrainSeen and ValidSeen.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    pool_name = _pool_for(split)
    pool = arrangement_pools()[pool_name]
    textures = UNSEEN_ROOM_TEXTURES if pool_name == "unseen" else SEEN_ROOM_TEXTURES
    rng = SplitMix64(derive_seed(seed, "layout", pool_name))
    family_idx = rng.randrange(len(pool))
    texture = textures[rng.randrange(len(textures))]
    grid, receptacles = pool[family_idx]
    family = family_idx + (N_SEEN_FAMILIES if pool_name == "unseen" else 0)
    return Layout(
        id=f"{pool_name}-f{family:02d}-t{texture}",
        grid=grid,
        room_texture=texture,
        receptacles=receptacles,
        family=family,
    )


@lru_cache(maxsize=None)
def attribute_pools() -> Dict[ObjClass, Dict[str, Tuple[Tuple[int, int, int], ...]]]:
    """Fixed 60/40 split of every class's colour x shape x texture combinations.

    Each class ranks the colours (its two typical colours first, the rest in a
    seeded order) and the training pool takes the best-ranked 60% of combos.
    Training appearances therefore correlate with class, while held-out
    objects carry colours their class never showed during training.
    """
    pools = {}
    for k, cls in enumerate(OBJECT_CLASSES):
        rng = SplitMix64(derive_seed(_ARRANGEMENT_SALT, "attributes", k))
        typical = list(TYPICAL_COLORS[cls])
        others = [c for c in range(N_COLORS) if c not in typical]
        rng.shuffle(others)
        rank = {c: i for i, c in enumerate(typical + others)}
        combos = [
            (c, s, x)
            for c in range(N_COLORS)
            for s in range(N_SHAPES)
            for x in range(N_TEXTURES)
        ]
        tiebreak = {combo: rng.next_u64() for combo in combos}
        combos.sort(key=lambda combo: (rank[combo[0]], tiebreak[combo]))
        n_train = int(round(TRAIN_ATTRIBUTE_FRACTION * len(combos)))
        pools[cls] = {
            "train": tuple(sorted(combos[:n_train])),
            "valid": tuple(sorted(combos[n_train:])),
        }
    return pools


def sample_attributes(cls: ObjClass, split: Split, rng: SplitMix64) -> Tuple[int, int, int]:
    """Draw an attribute combination from the split's pool for ``cls``.

    Within the pool, colour leans towards the class's typical colours when
    they are available, so appearance is informative about class without
    determining it.
    """
    part = "train" if Split(split) == Split.TrainSeen else "valid"
    pool = attribute_pools()[ObjClass(cls)][part]
    allowed = set(pool)
    typical = [c for c in TYPICAL_COLORS[ObjClass(cls)] if any(a[0] == c for a in pool)]
    for _ in range(1000):
        if typical and rng.bernoulli(TYPICAL_COLOR_PROB):
            color = typical[rng.randrange(len(typical))]
        else:
            color = rng.randrange(N_COLORS)
        combo = (color, rng.randrange(N_SHAPES), rng.randrange(N_TEXTURES))
        if combo in allowed:
            return combo
    raise LayoutError(f"could not sample attributes for {cls}")  # pragma: no cover


def table_cells(layout: Layout) -> List[Cell]:
    return layout.cells_of(CellType.Table)
