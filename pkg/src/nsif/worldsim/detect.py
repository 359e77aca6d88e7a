"""Object detector stand-in: exact oracle or seeded noisy detections."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

from nsif.rng import SplitMix64, derive_seed
from nsif.worldsim.layout import N_COLORS, N_ROOM_TEXTURES, N_SHAPES, N_TEXTURES
from nsif.worldsim.types import Detection, OBJECT_CLASSES, Observation

FEATURE_DIM = N_COLORS + N_SHAPES + N_TEXTURES
# Scenery leaks into appearance: lighting bleeds each colour into a
# room-specific neighbour and adds a room-specific offset.
LIGHTING_MIX = 0.35
ROOM_OFFSET_SCALE = 0.3
FEATURE_NOISE = 0.05
_SCENERY_SALT = 0x11647


@dataclass(frozen=True)
class DetectorMode:
    kind: str = "oracle"  # "oracle" | "noisy"
    seed: int = 0
    p_miss: float = 0.05
    p_misclass: float = 0.05

    @classmethod
    def oracle(cls) -> "DetectorMode":
        return cls("oracle")

    @classmethod
    def noisy(cls, seed: int = 0, p_miss: float = 0.05, p_misclass: float = 0.05) -> "DetectorMode":
        return cls("noisy", seed, p_miss, p_misclass)


def _room_scenery(texture: int) -> Tuple[int, Tuple[float, ...]]:
    rng = SplitMix64(derive_seed(_SCENERY_SALT, texture))
    shift = 1 + (texture * 3) % (N_COLORS - 1)
    offset = tuple(ROOM_OFFSET_SCALE * rng.normal() for _ in range(FEATURE_DIM))
    return shift, offset


_SCENERY = [_room_scenery(k) for k in range(N_ROOM_TEXTURES)]


def appearance(attributes: Tuple[int, int, int], room_texture: int, noise_key: int) -> Tuple[float, ...]:
    """Feature vector of an object as seen under a room's lighting."""
    color, shape, texture = attributes
    shift, offset = _SCENERY[room_texture]
    vec = [0.0] * FEATURE_DIM
    vec[color] += 1.0 - LIGHTING_MIX
    vec[(color + shift) % N_COLORS] += LIGHTING_MIX
    vec[N_COLORS + shape] = 1.0
    vec[N_COLORS + N_SHAPES + texture] = 1.0
    rng = SplitMix64(noise_key)
    return tuple(v + o + FEATURE_NOISE * rng.normal() for v, o in zip(vec, offset))


def detect(obs: Observation, mode: DetectorMode = DetectorMode()) -> List[Detection]:
    """One detection per visible object (oracle), or a seeded corruption of it.

    Noisy mode drops each detection with ``p_miss`` and resamples its class
    uniformly with ``p_misclass``; the draw depends only on (seed, t, object).
    """
    out = []
    for obj, mask in obs.objects:
        key = derive_seed(obs.t, obj.id, obs.room_texture, *obj.attributes)
        features = appearance(obj.attributes, obs.room_texture, key)
        cls = obj.cls
        if mode.kind == "noisy":
            rng = SplitMix64(derive_seed(mode.seed, "detect", obs.t, obj.id))
            if rng.random() < mode.p_miss:
                continue
            if rng.random() < mode.p_misclass:
                cls = OBJECT_CLASSES[rng.randrange(len(OBJECT_CLASSES))]
        elif mode.kind != "oracle":
            raise ValueError(f"unknown detector mode {mode.kind!r}")
        out.append(Detection(mask=mask, cls=cls, features=features, object_id=obj.id))
    return out
