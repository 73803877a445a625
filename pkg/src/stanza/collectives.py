"""Group collectives over the simulated transport.

allreduce_sum uses recursive doubling: in round i each member exchanges its
accumulated block sum with the member 2^(i-1) ranks away, so a power-of-two
group of n needs log2(n) rounds, each moving the full tensor per node.

Groups that are not a power of two run the surplus protocol: the extra
|surplus| = n - 2^floor(log2 n) members each pre-send their tensor to a
distinct randomly chosen core donor (one extra round up front), the remaining
power-of-two core runs recursive doubling, and the donors return the finished
result to their surplus members (one extra round at the end). Total rounds:

    r(1) = 0
    r(n) = log2 n                  when n is a power of two
    r(n) = floor(log2 n) + 2       otherwise

Summation order is canonical: surplus contributions fold into their donor in
ascending member order, and each doubling round adds the lower-rank block
before the upper-rank block. Every member therefore computes the bit-identical
aligned binary tree sum for a given surplus selection; changing the selection
seed permutes the fold and moves the result only at float32 rounding level.

Every collective has a *counted* twin that moves size-only messages through
the identical schedule, for byte-accounted runs on count profiles.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

from .transport import (NodeId, SimTransport, Tag, Timeout, counted_message,
                        tensor_message)


class NotNeeded(RuntimeError):
    """Surplus protocol requested for a power-of-two group."""


class MemberMissing(Timeout):
    """A group member never produced its contribution."""


class ArityMismatch(ValueError):
    """scatter got a tensor count different from the group size."""


@dataclass(frozen=True)
class Group:
    """An ordered set of distinct members; order defines ranks."""
    members: tuple[NodeId, ...]

    def __post_init__(self):
        if len(set(self.members)) != len(self.members):
            raise ValueError("group members must be distinct")
        if not self.members:
            raise ValueError("empty group")

    def __len__(self):
        return len(self.members)

    def index(self, node: NodeId) -> int:
        return self.members.index(node)


def round_count(n: int) -> int:
    """Allreduce rounds for a group of n members."""
    if n < 1:
        raise ValueError("group size must be positive")
    if n == 1:
        return 0
    m = n.bit_length() - 1
    return m if n == (1 << m) else m + 2


def surplus_protocol(group: Group, seed: int = 0):
    """Pick surplus members and their distinct core donors for |group| not a
    power of two.

    Returns (surplus, core, donors): surplus and core are member tuples (core
    keeps group order and has power-of-two size), donors maps each surplus
    member to its core donor. Raises NotNeeded when the group size already is
    a power of two.
    """
    n = len(group)
    m = n.bit_length() - 1
    core_size = 1 << m
    if core_size == n:
        raise NotNeeded(f"group of {n} needs no surplus protocol")
    rng = random.Random(seed)
    surplus_ranks = sorted(rng.sample(range(n), n - core_size))
    surplus_set = set(surplus_ranks)
    core = tuple(node for i, node in enumerate(group.members)
                 if i not in surplus_set)
    surplus = tuple(group.members[i] for i in surplus_ranks)
    donor_picks = rng.sample(range(core_size), len(surplus))
    donors = {s: core[d] for s, d in zip(surplus, donor_picks)}
    return surplus, core, donors


def _schedule(group: Group, seed: int):
    """(core members in group order, surplus tuple, donor map, doubling rounds)."""
    n = len(group)
    m = n.bit_length() - 1
    if n == (1 << m):
        return group.members, (), {}, m
    surplus, core, donors = surplus_protocol(group, seed)
    return core, surplus, donors, m


def _fold(a: np.ndarray, b: np.ndarray, a_first: bool) -> np.ndarray:
    return a + b if a_first else b + a


def allreduce_sum(transport: SimTransport, group: Group, me: NodeId,
                  value: np.ndarray, *, seed: int = 0, op: str = "allreduce",
                  timeout: float | None = None) -> np.ndarray:
    """Sum `value` across the group; every member returns the identical array.

    Must be called collectively by every member. Any member arrival order is
    deadlock-free: each round sends before it receives and the transport
    buffers. Rounds are labeled on the ledger under `op` for round counting.
    """
    value = np.ascontiguousarray(value, dtype=np.float32)
    n = len(group)
    if n == 1:
        return value.copy()
    core, surplus, donors, m = _schedule(group, seed)
    tag = Tag.ALLREDUCE_CHUNK

    if me in surplus:
        donor = donors[me]
        transport.send(tensor_message(me, donor, tag, value, op=op, round=0))
        final = transport.recv(me, tag=tag, src=donor, timeout=timeout)
        return final.tensor().reshape(value.shape).copy()

    acc = value
    my_surplus = next((s for s, d in donors.items() if d == me), None)
    if my_surplus is not None:
        msg = transport.recv(me, tag=tag, src=my_surplus, timeout=timeout)
        acc = _fold(acc, msg.tensor().reshape(acc.shape),
                    a_first=group.index(me) < group.index(my_surplus))

    rank = core.index(me)
    for r in range(m):
        partner_rank = rank ^ (1 << r)
        partner = core[partner_rank]
        transport.send(tensor_message(me, partner, tag, acc, op=op, round=r + 1))
        msg = transport.recv(me, tag=tag, src=partner, timeout=timeout)
        acc = _fold(acc, msg.tensor().reshape(acc.shape),
                    a_first=rank < partner_rank)

    if my_surplus is not None:
        transport.send(tensor_message(me, my_surplus, tag, acc, op=op, round=m + 1))
    return acc.copy()


def allreduce_counted(transport: SimTransport, group: Group, me: NodeId,
                      elements: int, *, seed: int = 0, op: str = "allreduce",
                      timeout: float | None = None) -> None:
    """Size-only twin of allreduce_sum: identical message schedule, no math."""
    n = len(group)
    if n == 1:
        return
    core, surplus, donors, m = _schedule(group, seed)
    tag = Tag.ALLREDUCE_CHUNK

    if me in surplus:
        donor = donors[me]
        transport.send(counted_message(me, donor, tag, elements, op=op, round=0))
        transport.recv(me, tag=tag, src=donor, timeout=timeout)
        return

    my_surplus = next((s for s, d in donors.items() if d == me), None)
    if my_surplus is not None:
        transport.recv(me, tag=tag, src=my_surplus, timeout=timeout)

    rank = core.index(me)
    for r in range(m):
        partner = core[rank ^ (1 << r)]
        transport.send(counted_message(me, partner, tag, elements, op=op, round=r + 1))
        transport.recv(me, tag=tag, src=partner, timeout=timeout)

    if my_surplus is not None:
        transport.send(counted_message(me, my_surplus, tag, elements, op=op, round=m + 1))


def gather(transport: SimTransport, group: Group, root: NodeId, me: NodeId,
           value: np.ndarray | None, tag: Tag, *, op: str | None = None,
           iteration: int | None = None,
           timeout: float | None = None) -> dict[NodeId, np.ndarray] | None:
    """Collect one tensor per member at root (root may be outside the group).

    Members pass their tensor as `value`; the root (when not itself a member)
    passes None. Returns the {member: tensor} dict at root, None elsewhere.
    """
    if me != root:
        transport.send(tensor_message(me, root, tag, value, op=op,
                                      iteration=iteration))
        return None
    out: dict[NodeId, np.ndarray] = {}
    for member in group.members:
        if member == root:
            out[member] = np.ascontiguousarray(value, dtype=np.float32)
            continue
        try:
            msg = transport.recv(root, tag=tag, src=member, timeout=timeout)
        except Timeout as exc:
            raise MemberMissing(f"gather missing {member}: {exc}") from exc
        out[member] = msg.tensor()
    return out


def scatter(transport: SimTransport, group: Group, root: NodeId, me: NodeId,
            values: dict[NodeId, np.ndarray] | None, tag: Tag, *,
            op: str | None = None, iteration: int | None = None,
            timeout: float | None = None) -> np.ndarray | None:
    """Distribute one tensor per member from root; inverse of gather."""
    if me == root:
        if values is None or set(values) != set(group.members):
            got = sorted(str(k) for k in (values or {}))
            raise ArityMismatch(f"scatter needs one tensor per member, got {got}")
        own = None
        for member in group.members:
            if member == root:
                own = np.ascontiguousarray(values[member], dtype=np.float32)
                continue
            transport.send(tensor_message(root, member, tag, values[member],
                                          op=op, iteration=iteration))
        return own
    try:
        msg = transport.recv(me, tag=tag, src=root, timeout=timeout)
    except Timeout as exc:
        raise MemberMissing(f"scatter never heard from root {root}: {exc}") from exc
    return msg.tensor()


def gather_counted(transport: SimTransport, group: Group, root: NodeId,
                   me: NodeId, elements: int, tag: Tag, *, op: str | None = None,
                   timeout: float | None = None) -> None:
    if me != root:
        transport.send(counted_message(me, root, tag, elements, op=op))
        return
    for member in group.members:
        if member != root:
            transport.recv(root, tag=tag, src=member, timeout=timeout)


def scatter_counted(transport: SimTransport, group: Group, root: NodeId,
                    me: NodeId, elements: int, tag: Tag, *, op: str | None = None,
                    timeout: float | None = None) -> None:
    if me == root:
        for member in group.members:
            if member != root:
                transport.send(counted_message(root, member, tag, elements, op=op))
        return
    transport.recv(me, tag=tag, src=root, timeout=timeout)
