"""Trace file format, parsing, and synthetic trace generators.

Traces are line-oriented text (gzip transparent) with a versioned
header.  Event grammar, one event per line, fields whitespace-split:

    MEM <r|w> <client> <cvt_index> <offset> <icount_delta>
    REQVB <client> <size_bytes> <props>
    ENABLE <vbuid> <props>
    ATTACH <client> <vbuid> <rwx>
    DETACH <client> <vbuid>
    DISABLE <vbuid>
    CLONE <src_vbuid> <dst_vbuid>
    PROMOTE <client> <src_vbuid> <dst_vbuid>

vbuids are written size:vbid (size:vm:vbid in VM mode); props are a
comma-separated flag list or '-'.  Generators are deterministic for a
given (spec, seed).
"""

from __future__ import annotations

import gzip
import random
from dataclasses import dataclass, field

from .addrspace import Vbuid, parse_vbuid
from .registry import Props

HEADER = "# vbi-trace v1"

LIFECYCLE_OPS = ("REQVB", "ENABLE", "ATTACH", "DETACH", "DISABLE", "CLONE",
                 "PROMOTE")


class TraceError(Exception):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass
class Mem:
    kind: str  # r | w
    client: int
    cvt_index: int
    offset: int
    icount: int


@dataclass
class Lifecycle:
    op: str
    client: int | None = None
    vbuid: Vbuid | None = None
    vbuid2: Vbuid | None = None
    size: int | None = None
    props: Props = field(default_factory=Props)
    rwx: str | None = None


Event = object  # Mem | Lifecycle


def _open(path: str, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode + "t")
    return open(path, mode)


def parse_line(lineno: int, line: str):
    parts = line.split()
    op = parts[0]
    try:
        if op == "MEM":
            kind, client, index, offset, icount = parts[1:6]
            if kind not in ("r", "w"):
                raise ValueError(f"bad access kind {kind!r}")
            return Mem(kind, int(client), int(index), int(offset), int(icount))
        if op == "REQVB":
            return Lifecycle(op, client=int(parts[1]), size=int(parts[2]),
                             props=Props.parse(parts[3]))
        if op == "ENABLE":
            return Lifecycle(op, vbuid=parse_vbuid(parts[1]),
                             props=Props.parse(parts[2]))
        if op == "ATTACH":
            return Lifecycle(op, client=int(parts[1]), vbuid=parse_vbuid(parts[2]),
                             rwx=parts[3])
        if op == "DETACH":
            return Lifecycle(op, client=int(parts[1]), vbuid=parse_vbuid(parts[2]))
        if op == "DISABLE":
            return Lifecycle(op, vbuid=parse_vbuid(parts[1]))
        if op == "CLONE":
            return Lifecycle(op, vbuid=parse_vbuid(parts[1]),
                             vbuid2=parse_vbuid(parts[2]))
        if op == "PROMOTE":
            return Lifecycle(op, client=int(parts[1]), vbuid=parse_vbuid(parts[2]),
                             vbuid2=parse_vbuid(parts[3]))
    except (IndexError, ValueError) as e:
        raise TraceError(lineno, f"cannot parse {op} event: {e}") from e
    raise TraceError(lineno, f"unknown event {op!r}")


def load_trace(path: str) -> list:
    events = []
    with _open(path, "r") as fh:
        first = fh.readline().rstrip("\n")
        if first.strip() != HEADER:
            raise TraceError(1, f"missing header {HEADER!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            events.append(parse_line(lineno, line))
    return events


def event_str(ev) -> str:
    if isinstance(ev, Mem):
        return f"MEM {ev.kind} {ev.client} {ev.cvt_index} {ev.offset} {ev.icount}"
    if ev.op == "REQVB":
        return f"REQVB {ev.client} {ev.size} {ev.props}"
    if ev.op == "ENABLE":
        return f"ENABLE {ev.vbuid} {ev.props}"
    if ev.op == "ATTACH":
        return f"ATTACH {ev.client} {ev.vbuid} {ev.rwx}"
    if ev.op == "DETACH":
        return f"DETACH {ev.client} {ev.vbuid}"
    if ev.op == "DISABLE":
        return f"DISABLE {ev.vbuid}"
    if ev.op == "CLONE":
        return f"CLONE {ev.vbuid} {ev.vbuid2}"
    if ev.op == "PROMOTE":
        return f"PROMOTE {ev.client} {ev.vbuid} {ev.vbuid2}"
    raise ValueError(f"cannot serialize {ev!r}")


def save_trace(path: str, events: list) -> None:
    with _open(path, "w") as fh:
        fh.write(HEADER + "\n")
        for ev in events:
            fh.write(event_str(ev) + "\n")


# -- generators --


GENERATORS = ("uniform", "skew", "stream", "chase")


def parse_gen_spec(spec: str) -> tuple[str, dict]:
    """'skew,p=0.9,q=0.1,vbs=10,n=100000' -> name + parameter dict."""
    parts = spec.split(",")
    name = parts[0].strip()
    if name not in GENERATORS:
        raise ValueError(f"unknown generator {name!r} (have {', '.join(GENERATORS)})")
    params: dict[str, float] = {}
    for p in parts[1:]:
        if not p.strip():
            continue
        if "=" not in p:
            raise ValueError(f"bad generator parameter {p!r}")
        k, v = p.split("=", 1)
        params[k.strip()] = float(v)
    return name, params


DEFAULTS = dict(vbs=10, vb_kb=256, n=10_000, wfrac=0.3, icount=20,
                p=0.9, q=0.1)


def generate_trace(spec: str, seed: int) -> list:
    """Deterministic synthetic trace: lifecycle preamble plus accesses."""
    name, params = parse_gen_spec(spec)
    opts = dict(DEFAULTS)
    opts.update(params)
    vbs = int(opts["vbs"])
    vb_bytes = int(opts["vb_kb"]) * 1024
    n = int(opts["n"])
    wfrac = float(opts["wfrac"])
    icount = int(opts["icount"])
    if not 0.0 <= wfrac <= 1.0:
        raise ValueError(f"write fraction {wfrac} outside [0, 1]")
    if vbs < 1 or n < 0:
        raise ValueError("need at least one VB and a non-negative access count")
    rng = random.Random(seed)
    client = 0
    events: list = []

    hot_set: set[int] = set()
    if name == "skew":
        p, q = float(opts["p"]), float(opts["q"])
        if not (0.0 <= p <= 1.0 and 0.0 < q <= 1.0):
            raise ValueError(f"skew fractions p={p} q={q} invalid")
        n_hot = max(1, round(q * vbs))
        hot_set = set(range(vbs - n_hot, vbs))  # highest-numbered VBs are hot

    for i in range(vbs):
        props = "latency_sensitive" if i in hot_set else "-"
        events.append(Lifecycle("REQVB", client=client, size=vb_bytes,
                                props=Props.parse(props)))

    def pick_vb() -> int:
        if name == "skew":
            if rng.random() < float(opts["p"]):
                return rng.randrange(vbs - len(hot_set), vbs)
            cold = vbs - len(hot_set)
            return rng.randrange(cold) if cold else rng.randrange(vbs)
        return rng.randrange(vbs)

    lines = vb_bytes // 64
    if name == "stream":
        pos = [0] * vbs
    elif name == "chase":
        order = list(range(lines))
        rng.shuffle(order)

    for i in range(n):
        vb = pick_vb()
        if name == "stream":
            off = (pos[vb] % lines) * 64
            pos[vb] += 1
        elif name == "chase":
            off = order[i % lines] * 64
        else:
            off = rng.randrange(lines) * 64
        kind = "w" if rng.random() < wfrac else "r"
        delta = rng.randrange(2 * icount + 1) if icount else 0
        events.append(Mem(kind, client, vb, off, delta))
    return events
