"""Simulated in-process network with byte accounting and a logical clock.

Nodes are threads sharing one SimTransport. send() is nonblocking; recv()
blocks until a message matching (tag, source) arrives. Delivery per
(src, dst) pair is FIFO; a tag/source filter skips non-matching queued
messages without consuming them.

Time is logical, not wall-clock. The run driver brackets protocol steps in
*phases*; when a phase closes, the clock advances by the phase's bottleneck
transfer time:

    elapsed = max over nodes of max(sent payload bytes, received payload
              bytes) * 8 / bandwidth, plus one per_message_latency if the
              phase moved any message.

Send and receive directions are metered independently (full duplex) unless
NetConfig says otherwise. The fixed 32-byte per-message header is tracked in
the ledger's byte counters but excluded from transfer-time arithmetic and
from tag-filtered traffic metrics, which count tensor payload bytes only.

Count-profile runs move size-only messages: payload None, payload_elements
authoritative (4 bytes per element). Numeric runs carry real payload bytes,
and for tensor-bearing tags len(payload) == 4 * payload_elements always.
"""

from __future__ import annotations

import csv
import json
import threading
import time
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np

HEADER_BYTES = 32
BYTES_PER_ELEMENT = 4


class Role(Enum):
    CONV_WORKER = "conv"
    FC_WORKER = "fc"
    PS_SERVER = "server"
    PS_WORKER = "worker"
    CONTROLLER = "controller"


@dataclass(frozen=True)
class NodeId:
    role: Role
    index: int

    def __str__(self):
        return f"{self.role.value}{self.index}"


def _node_key(n: NodeId) -> tuple[str, int]:
    return (n.role.value, n.index)


class Tag(Enum):
    ACTIVATIONS = "Activations"
    BOUNDARY_GRADS = "BoundaryGrads"
    GRAD_PUSH = "GradPush"
    PARAM_PULL = "ParamPull"
    ALLREDUCE_CHUNK = "AllreduceChunk"
    CHECKPOINT = "Checkpoint"
    CONTROL = "Control"


TENSOR_TAGS = {Tag.ACTIVATIONS, Tag.BOUNDARY_GRADS, Tag.GRAD_PUSH,
               Tag.PARAM_PULL, Tag.ALLREDUCE_CHUNK}


class UnknownNode(KeyError):
    pass


class Timeout(TimeoutError):
    pass


class ClusterShutDown(RuntimeError):
    pass


@dataclass
class Message:
    src: NodeId
    dst: NodeId
    tag: Tag
    payload_elements: int
    payload: bytes | None = None
    shape: tuple[int, ...] | None = None
    iteration: int | None = None
    op: str | None = None      # collective / protocol op label for the ledger
    round: int | None = None   # collective round index

    @property
    def payload_bytes(self) -> int:
        if self.payload is not None:
            return len(self.payload)
        return BYTES_PER_ELEMENT * self.payload_elements

    def tensor(self) -> np.ndarray:
        if self.payload is None:
            raise ValueError("size-only message has no tensor payload")
        a = np.frombuffer(self.payload, dtype="<f4")
        return a.reshape(self.shape) if self.shape is not None else a


def tensor_message(src: NodeId, dst: NodeId, tag: Tag, array: np.ndarray,
                   **kw) -> Message:
    a = np.ascontiguousarray(array, dtype=np.float32)
    return Message(src=src, dst=dst, tag=tag, payload_elements=a.size,
                   payload=a.tobytes(), shape=a.shape, **kw)


def counted_message(src: NodeId, dst: NodeId, tag: Tag, elements: int,
                    **kw) -> Message:
    return Message(src=src, dst=dst, tag=tag, payload_elements=int(elements),
                   **kw)


@dataclass
class NetConfig:
    bandwidth: float = 10e9          # bits/s, per node per direction
    per_message_latency: float = 0.0  # seconds, charged once per phase
    full_duplex: bool = True
    default_timeout: float = 30.0    # seconds of wall time for recv


@dataclass
class PhaseRecord:
    label: str
    elapsed: float
    messages: int
    payload_bytes: int


@dataclass
class MessageRecord:
    phase: str
    phase_index: int
    link_seq: int
    src: NodeId
    dst: NodeId
    tag: Tag
    op: str | None
    round: int | None
    payload_bytes: int


class TrafficLedger:
    """Byte counters, per-message log, phase log, and the logical clock.

    Counters are wire bytes (payload + 32-byte header) and only ever grow.
    Accounting happens at delivery time, so total sent == total received at
    every instant, not just at barriers. Metrics queries (bytes_for_tags)
    count payload bytes only.
    """

    def __init__(self):
        self.node_sent: dict[NodeId, int] = {}
        self.node_received: dict[NodeId, int] = {}
        self.link_bytes: dict[tuple[NodeId, NodeId], int] = {}
        self.tag_payload_bytes: dict[Tag, int] = {t: 0 for t in Tag}
        self.tag_messages: dict[Tag, int] = {t: 0 for t in Tag}
        self.logical_clock = 0.0
        self.phases: list[PhaseRecord] = []
        self.messages: list[MessageRecord] = []
        self._link_seq: dict[tuple[NodeId, NodeId, Tag], int] = {}

    def observe(self, msg: Message, phase: str, phase_index: int) -> None:
        wire = msg.payload_bytes + HEADER_BYTES
        self.node_sent[msg.src] = self.node_sent.get(msg.src, 0) + wire
        self.node_received[msg.dst] = self.node_received.get(msg.dst, 0) + wire
        link = (msg.src, msg.dst)
        self.link_bytes[link] = self.link_bytes.get(link, 0) + wire
        self.tag_payload_bytes[msg.tag] += msg.payload_bytes
        self.tag_messages[msg.tag] += 1
        seq_key = (msg.src, msg.dst, msg.tag)
        seq = self._link_seq.get(seq_key, 0)
        self._link_seq[seq_key] = seq + 1
        self.messages.append(MessageRecord(
            phase=phase, phase_index=phase_index, link_seq=seq, src=msg.src,
            dst=msg.dst, tag=msg.tag, op=msg.op, round=msg.round,
            payload_bytes=msg.payload_bytes))

    # -- queries ------------------------------------------------------------

    @property
    def total_sent(self) -> int:
        return sum(self.node_sent.values())

    @property
    def total_received(self) -> int:
        return sum(self.node_received.values())

    def bytes_for_tags(self, tags: Iterable[Tag]) -> int:
        return sum(self.tag_payload_bytes[t] for t in tags)

    @property
    def total_payload_bytes(self) -> int:
        return self.bytes_for_tags(Tag)

    def rounds_for_op(self, op: str) -> list[int]:
        """Sorted distinct round indices recorded under a collective op label."""
        return sorted({m.round for m in self.messages
                       if m.op == op and m.round is not None})

    def assert_conserved(self) -> None:
        sent, received = self.total_sent, self.total_received
        if sent != received:
            raise AssertionError(f"byte conservation violated: {sent} != {received}")

    # -- exports ------------------------------------------------------------

    def export_csv(self, path) -> None:
        """One row per message: phase, src, dst, tag, bytes, elapsed_s.

        Rows are sorted on (phase index, src, dst, tag, per-link sequence) so
        the file is byte-identical across reruns regardless of thread timing.
        elapsed_s is the elapsed time of the phase the message belongs to.
        """
        phase_elapsed = {i: p.elapsed for i, p in enumerate(self.phases)}
        rows = sorted(self.messages,
                      key=lambda m: (m.phase_index, _node_key(m.src),
                                     _node_key(m.dst), m.tag.value, m.link_seq))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["phase", "src", "dst", "tag", "bytes", "elapsed_s"])
            for m in rows:
                writer.writerow([m.phase, str(m.src), str(m.dst), m.tag.value,
                                 m.payload_bytes,
                                 repr(phase_elapsed.get(m.phase_index, 0.0))])

    def summary(self) -> dict:
        return {
            "logical_clock_s": self.logical_clock,
            "total_wire_bytes_sent": self.total_sent,
            "total_wire_bytes_received": self.total_received,
            "total_payload_bytes": self.total_payload_bytes,
            "per_node": {
                str(n): {"sent": self.node_sent.get(n, 0),
                         "received": self.node_received.get(n, 0)}
                for n in sorted(set(self.node_sent) | set(self.node_received),
                                key=_node_key)
            },
            "per_tag_payload_bytes": {t.value: self.tag_payload_bytes[t]
                                      for t in Tag if self.tag_messages[t]},
            "phases": len(self.phases),
            "messages": len(self.messages),
        }

    def export_summary_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def phase_elapsed(transfers: Iterable[tuple[NodeId, NodeId, int]],
                  net: NetConfig) -> float:
    """Bottleneck time for a set of concurrent transfers (src, dst, bytes).

    Every node serializes its own sends at `bandwidth` and its receives
    likewise; the phase takes as long as the busiest direction of the busiest
    node. Half duplex shares one pipe across both directions.
    """
    sent: dict[NodeId, int] = {}
    received: dict[NodeId, int] = {}
    count = 0
    for src, dst, nbytes in transfers:
        sent[src] = sent.get(src, 0) + nbytes
        received[dst] = received.get(dst, 0) + nbytes
        count += 1
    if count == 0:
        return 0.0
    worst = 0.0
    for node in set(sent) | set(received):
        s, r = sent.get(node, 0), received.get(node, 0)
        load = (s + r) if not net.full_duplex else max(s, r)
        worst = max(worst, load * 8.0 / net.bandwidth)
    return worst + net.per_message_latency


class SimTransport:
    """Shared mailbox network for one simulated cluster."""

    def __init__(self, net: NetConfig | None = None):
        self.net = net or NetConfig()
        self.ledger = TrafficLedger()
        self._cv = threading.Condition()
        self._queues: dict[NodeId, deque[Message]] = {}
        self._shutdown = False
        self._phase = "setup"
        self._phase_index = 0
        self._phase_transfers: list[tuple[NodeId, NodeId, int]] = []
        self._phase_payload = 0
        self._phase_messages = 0

    # -- membership ----------------------------------------------------------

    def register(self, node: NodeId) -> None:
        with self._cv:
            if node in self._queues:
                raise ValueError(f"{node} already registered")
            self._queues[node] = deque()

    def register_all(self, nodes: Iterable[NodeId]) -> None:
        for n in nodes:
            self.register(n)

    @property
    def nodes(self) -> list[NodeId]:
        return sorted(self._queues, key=_node_key)

    # -- messaging ------------------------------------------------------------

    def send(self, msg: Message) -> None:
        if msg.payload is not None and msg.tag in TENSOR_TAGS:
            if len(msg.payload) != BYTES_PER_ELEMENT * msg.payload_elements:
                raise ValueError(
                    f"{msg.tag.value} payload is {len(msg.payload)} bytes for "
                    f"{msg.payload_elements} elements")
        with self._cv:
            if self._shutdown:
                raise ClusterShutDown("transport is shut down")
            if msg.src not in self._queues:
                raise UnknownNode(f"unregistered sender {msg.src}")
            if msg.dst not in self._queues:
                raise UnknownNode(f"unregistered destination {msg.dst}")
            self.ledger.observe(msg, self._phase, self._phase_index)
            self._phase_transfers.append((msg.src, msg.dst, msg.payload_bytes))
            self._phase_payload += msg.payload_bytes
            self._phase_messages += 1
            self._queues[msg.dst].append(msg)
            self._cv.notify_all()

    def recv(self, dst: NodeId, tag: Tag | None = None,
             src: NodeId | None = None, timeout: float | None = None) -> Message:
        """Earliest queued message for dst matching the tag/source filter."""
        if timeout is None:
            timeout = self.net.default_timeout
        deadline = time.monotonic() + timeout
        with self._cv:
            if dst not in self._queues:
                raise UnknownNode(f"unregistered receiver {dst}")
            while True:
                if self._shutdown:
                    raise ClusterShutDown("transport is shut down")
                q = self._queues[dst]
                for i, m in enumerate(q):
                    if tag is not None and m.tag is not tag:
                        continue
                    if src is not None and m.src != src:
                        continue
                    del q[i]
                    return m
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise Timeout(f"{dst} timed out waiting for "
                                  f"tag={tag and tag.value} src={src}")
                self._cv.wait(remaining)

    def shutdown(self) -> None:
        with self._cv:
            self._shutdown = True
            self._cv.notify_all()

    # -- phases / logical clock ----------------------------------------------

    def begin_phase(self, label: str) -> None:
        with self._cv:
            self._phase = label
            self._phase_transfers = []
            self._phase_payload = 0
            self._phase_messages = 0

    def end_phase(self) -> float:
        """Close the current phase, advance the clock, return elapsed seconds."""
        with self._cv:
            elapsed = phase_elapsed(self._phase_transfers, self.net)
            self.ledger.logical_clock += elapsed
            self.ledger.phases.append(PhaseRecord(
                label=self._phase, elapsed=elapsed,
                messages=self._phase_messages,
                payload_bytes=self._phase_payload))
            self._phase_index += 1
            self._phase = f"phase{self._phase_index}"
            self._phase_transfers = []
            self._phase_payload = 0
            self._phase_messages = 0
            return elapsed

    def advance_compute(self, seconds: float, label: str) -> float:
        """Charge injected compute time as a zero-byte phase."""
        if seconds < 0:
            raise ValueError("compute time must be nonnegative")
        with self._cv:
            self.ledger.logical_clock += seconds
            self.ledger.phases.append(PhaseRecord(
                label=label, elapsed=seconds, messages=0, payload_bytes=0))
            self._phase_index += 1
            return seconds


def run_node_threads(transport: SimTransport, tasks: dict[NodeId, "object"],
                     join_timeout: float = 120.0) -> dict[NodeId, object]:
    """Run one thread per node, collect results, propagate the first failure.

    tasks maps NodeId -> zero-arg callable. On any node failure the transport
    is shut down so peers blocked in recv unwind instead of hanging, then the
    original exception is re-raised in the caller.
    """
    results: dict[NodeId, object] = {}
    errors: list[tuple[NodeId, BaseException]] = []
    lock = threading.Lock()

    def runner(node: NodeId, fn) -> None:
        try:
            out = fn()
            with lock:
                results[node] = out
        except BaseException as exc:  # noqa: BLE001 - must not lose node errors
            with lock:
                errors.append((node, exc))
            transport.shutdown()

    threads = [threading.Thread(target=runner, args=(node, fn),
                                name=f"node-{node}", daemon=True)
               for node, fn in tasks.items()]
    for t in threads:
        t.start()
    for t in threads:
        t.join(join_timeout)
        if t.is_alive():
            transport.shutdown()
            raise Timeout(f"node thread {t.name} failed to finish")
    if errors:
        # first recorded failure is the root cause; ClusterShutDown on peers
        # is just collateral from our own shutdown() call
        real = [e for e in errors if not isinstance(e[1], ClusterShutDown)]
        _, exc = (real or errors)[0]
        raise exc
    return results
