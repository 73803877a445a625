"""Training-state snapshots: parameters, velocities, iteration counter.

Both protocols checkpoint the same way: serialize the full parameter and
velocity sets next to the iteration index. Input batches are regenerated
from (seed, iteration), so restoring a snapshot and replaying reproduces
the uninterrupted run bit for bit.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .tensor_core import (CorruptCheckpoint, deserialize_params,
                          serialize_params)

_MAGIC = b"STZC"
_VERSION = 1


@dataclass
class TrainState:
    """Everything needed to resume a run at an iteration boundary."""
    iteration: int
    params: list[list[np.ndarray]]
    velocities: list[list[np.ndarray]]

    def copy(self) -> "TrainState":
        return TrainState(
            iteration=self.iteration,
            params=[[t.copy() for t in layer] for layer in self.params],
            velocities=[[t.copy() for t in layer] for layer in self.velocities],
        )


def param_digest(params) -> str:
    """Stable hex digest of a parameter set (order and bytes exact)."""
    return hashlib.sha256(serialize_params(params)).hexdigest()


def state_to_bytes(state: TrainState) -> bytes:
    p = serialize_params(state.params)
    v = serialize_params(state.velocities)
    head = _MAGIC + struct.pack("<HQQQ", _VERSION, state.iteration,
                                len(p), len(v))
    return head + p + v


def state_from_bytes(blob: bytes) -> TrainState:
    head_len = 4 + struct.calcsize("<HQQQ")
    if len(blob) < head_len or blob[:4] != _MAGIC:
        raise CorruptCheckpoint("not a training-state snapshot")
    version, iteration, p_len, v_len = struct.unpack("<HQQQ", blob[4:head_len])
    if version != _VERSION:
        raise CorruptCheckpoint(f"unsupported snapshot version {version}")
    if len(blob) != head_len + p_len + v_len:
        raise CorruptCheckpoint("snapshot length does not match header")
    params = deserialize_params(blob[head_len:head_len + p_len])
    velocities = deserialize_params(blob[head_len + p_len:])
    if [len(l) for l in params] != [len(l) for l in velocities]:
        raise CorruptCheckpoint("parameter/velocity structure mismatch")
    return TrainState(iteration=iteration, params=params, velocities=velocities)


def save_state(state: TrainState, path) -> None:
    with open(path, "wb") as f:
        f.write(state_to_bytes(state))


def load_state(path) -> TrainState:
    with open(path, "rb") as f:
        return state_from_bytes(f.read())
