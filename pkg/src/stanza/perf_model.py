"""Closed-form iteration-time models and the node-assignment planner.

The formulas mirror the simulator's phase accounting exactly: a phase
costs its busiest node's transfer time at 4 bytes per tensor element,
directions are metered independently, and message latency is zero. An
allreduce's busiest node moves window(n) full payloads, so the exchange
term uses window(n), not the structural round count: for a group with a
surplus, the pre-send and return payloads pipeline into the doubling
rounds of the busiest (donor) node.

With those conventions the model equals the count-profile simulator's
clock to floating-point rounding for every valid shape, and reduces to
the familiar closed forms (2*n_w*P/(n_s*B) + T for the parameter server;
T_c + (n_c/n_f)*T_f plus activation and exchange terms for layer
separation) whenever shards and groups divide evenly.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model_partition import ConfigError, Partition, parse_kv_text


class Infeasible(ValueError):
    """No node assignment satisfies the constraints."""


BITS_PER_ELEMENT = 32


@dataclass(frozen=True)
class PerfConstants:
    """Measured per-iteration compute times and the link bandwidth.

    conv_time: CONV worker forward+backward per iteration (T_c).
    fc_unit_time: FC-block forward+backward per served CONV batch (T_f).
    ps_compute_time: full-model worker compute per iteration (T_ps).
    bandwidth: per-node per-direction link speed in bits/s.
    """
    bandwidth: float = 10e9
    conv_time: float = 0.0
    fc_unit_time: float = 0.0
    ps_compute_time: float = 0.0

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ConfigError(f"bandwidth must be positive, got {self.bandwidth}")
        for name in ("conv_time", "fc_unit_time", "ps_compute_time"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")


def v100_class_constants(bandwidth: float = 10e9) -> PerfConstants:
    """Ballpark per-iteration times for a V100-class GPU on a large CNN.

    The FC stack is arithmetic-light for its size, so its per-batch time is
    hundreds of times smaller than the full-model or CONV-block time.
    """
    return PerfConstants(bandwidth=bandwidth, conv_time=0.43,
                         fc_unit_time=0.001, ps_compute_time=0.43)


def window(n: int) -> int:
    """Busiest-node payload multiple of an n-member allreduce."""
    if n < 1:
        raise ValueError(f"group size must be positive, got {n}")
    if n == 1:
        return 0
    m = n.bit_length() - 1
    return m if n == (1 << m) else m + 1


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _check_pair(n_conv: int, n_fc: int) -> None:
    if n_conv < 1 or n_fc < 1:
        raise ConfigError("need at least one CONV and one FC worker, got "
                          f"n_conv={n_conv} n_fc={n_fc}")
    if n_fc > n_conv:
        raise ConfigError(f"more FC workers ({n_fc}) than CONV workers "
                          f"({n_conv}) leaves some idle")


def stanza_iter_time(part: Partition, n_conv: int, n_fc: int,
                     c: PerfConstants) -> float:
    """Modeled seconds per layer-separated iteration.

    compute + activations out + boundary gradients back + the slower of the
    two concurrent gradient allreduces. g = ceil(n_conv/n_fc) is the largest
    number of CONV batches any FC worker serves.
    """
    _check_pair(n_conv, n_fc)
    g = _ceil_div(n_conv, n_fc)
    ak_bits = part.boundary_activations * part.spec.batch_k * BITS_PER_ELEMENT
    transfer = 2 * g * ak_bits
    exchange = max(window(n_conv) * part.conv_params,
                   window(n_fc) * part.fc_params) * BITS_PER_ELEMENT
    return (c.conv_time + g * c.fc_unit_time
            + (transfer + exchange) / c.bandwidth)


def stanza_throughput(part: Partition, n_conv: int, n_fc: int,
                      c: PerfConstants) -> float:
    """Samples per second: n_conv local batches per iteration."""
    return (n_conv * part.spec.batch_k
            / stanza_iter_time(part, n_conv, n_fc, c))


def ps_iter_time(params_total: int, n_workers: int, n_servers: int,
                 c: PerfConstants) -> float:
    """Modeled seconds per parameter-server iteration with equal shards.

    Push and pull each cost the busier of one full gradient set leaving a
    worker and n_workers shards crossing the busiest server's link.
    """
    if n_workers < 1 or n_servers < 1:
        raise ConfigError("need at least one worker and one server, got "
                          f"n_workers={n_workers} n_servers={n_servers}")
    shard = _ceil_div(params_total, n_servers)
    window_bits = max(params_total, n_workers * shard) * BITS_PER_ELEMENT
    return 2 * window_bits / c.bandwidth + c.ps_compute_time


def ps_throughput(params_total: int, batch_k: int, n_workers: int,
                  n_servers: int, c: PerfConstants) -> float:
    return (n_workers * batch_k
            / ps_iter_time(params_total, n_workers, n_servers, c))


@dataclass(frozen=True)
class Assignment:
    n_conv: int
    n_fc: int
    throughput: float


@dataclass(frozen=True)
class PsAssignment:
    n_workers: int
    n_servers: int
    throughput: float


def assign_nodes(part: Partition, total_nodes: int, c: PerfConstants,
                 fc_memory_bytes: float | None = None) -> Assignment:
    """Best (n_conv, n_fc) split of a fixed node budget, by exhaustive search.

    Every FC worker must serve at least one CONV worker (n_fc <= n_conv).
    fc_memory_bytes, when given, bounds the activation batch an FC worker
    must hold: ceil(n_conv/n_fc) * batch_k * boundary * 4 bytes. Ties go to
    the smaller FC group. Raises Infeasible when no split qualifies.
    """
    best: Assignment | None = None
    for n_fc in range(1, total_nodes):
        n_conv = total_nodes - n_fc
        if n_fc > n_conv:
            break
        if fc_memory_bytes is not None:
            g = _ceil_div(n_conv, n_fc)
            held = g * part.spec.batch_k * part.boundary_activations * 4
            if held > fc_memory_bytes:
                continue
        thr = stanza_throughput(part, n_conv, n_fc, c)
        if best is None or thr > best.throughput:
            best = Assignment(n_conv=n_conv, n_fc=n_fc, throughput=thr)
    if best is None:
        raise Infeasible(f"no feasible (n_conv, n_fc) split of {total_nodes} "
                         "nodes under the given constraints")
    return best


def assign_ps(params_total: int, batch_k: int, total_nodes: int,
              c: PerfConstants) -> PsAssignment:
    """Best (n_workers, n_servers) split of a fixed node budget.

    Ties go to the smaller server group. Raises Infeasible when the budget
    cannot hold one worker and one server.
    """
    best: PsAssignment | None = None
    for n_servers in range(1, total_nodes):
        n_workers = total_nodes - n_servers
        thr = ps_throughput(params_total, batch_k, n_workers, n_servers, c)
        if best is None or thr > best.throughput:
            best = PsAssignment(n_workers=n_workers, n_servers=n_servers,
                                throughput=thr)
    if best is None:
        raise Infeasible(f"cannot split {total_nodes} nodes into workers "
                         "and servers")
    return best


def speedup(part: Partition, total_nodes: int, c: PerfConstants) -> float:
    """Modeled PS-over-layer-separated time ratio at an equal node budget.

    Each side gets one coordinator node (parameter server there, FC worker
    here) plus total_nodes - 1 workers, so both process the same global
    batch per iteration and the iteration-time ratio doubles as the
    throughput ratio. Pinning the coordinator keeps the trend
    one-dimensional; letting PS rebalance workers against servers instead
    makes the ratio saw-tooth with node parity rather than track protocol
    efficiency.
    """
    if total_nodes < 2:
        raise Infeasible("speedup needs a worker beside the coordinator, "
                         f"got {total_nodes} nodes")
    workers = total_nodes - 1
    total = part.conv_params + part.fc_params
    t_ps = ps_iter_time(total, workers, 1, c)
    t_stanza = stanza_iter_time(part, workers, 1, c)
    return t_ps / t_stanza


def comm_bound_constants(c: PerfConstants, params_total: int,
                         headroom: float = 1.5) -> PerfConstants:
    """Rescale measured compute constants until wire time rules PS.

    Returns constants whose conv_time equals headroom times the two-way
    wire time of one full gradient set, with the other compute terms shrunk
    by the same factor. Under them the busiest server link dominates every
    PS iteration, while CONV compute still outweighs the far smaller
    activation-plus-allreduce traffic, so extra workers keep paying off for
    the layer-separated run and merely lengthen the PS queue.
    """
    if c.conv_time <= 0.0:
        raise ConfigError("rescaling needs a measured conv_time > 0")
    wire = 2 * params_total * BITS_PER_ELEMENT / c.bandwidth
    scale = headroom * wire / c.conv_time
    return PerfConstants(bandwidth=c.bandwidth,
                         conv_time=c.conv_time * scale,
                         fc_unit_time=c.fc_unit_time * scale,
                         ps_compute_time=c.ps_compute_time * scale)


def parse_constants_text(text: str) -> PerfConstants:
    """Parse a constants file: one `key value` pair per line.

    Recognized keys are the four PerfConstants fields; a `name` line is
    accepted and ignored so benched files can label themselves. Missing
    keys keep their defaults (zero compute, 10 Gb/s).
    """
    values = {"bandwidth": 10e9, "conv_time": 0.0, "fc_unit_time": 0.0,
              "ps_compute_time": 0.0}
    for key, args in parse_kv_text(text):
        if key == "name":
            continue
        if key not in values:
            raise ConfigError(f"unknown constants key {key!r}")
        try:
            (raw,) = args
            values[key] = float(raw)
        except ValueError:
            raise ConfigError(f"bad {key} line: expected one number, "
                              f"got {args!r}") from None
    return PerfConstants(**values)


def load_constants_file(path) -> PerfConstants:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_constants_text(fh.read())


def format_constants_text(c: PerfConstants, name: str = "measured") -> str:
    """Render constants in the same `key value` format the parser reads."""
    return "".join((f"name {name}\n",
                    f"bandwidth {c.bandwidth!r}\n",
                    f"conv_time {c.conv_time!r}\n",
                    f"fc_unit_time {c.fc_unit_time!r}\n",
                    f"ps_compute_time {c.ps_compute_time!r}\n"))
