"""Pipeline-parallel schedules: builders, an earliest-start simulator and closed-form metrics.

Chunk kinds: ``F`` forward, ``B`` full backward, ``I`` backward for inputs,
``W`` backward for weights, and ``FB`` an overlapped cell that runs the
forward of one micro-batch together with the full backward of another.
Direction 0 flows from rank 0 to rank PP-1; direction 1 flows the other way.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field

ONE_F_ONE_B = "1F1B"
ZB1P = "ZB1P"
DUALPIPE = "DualPipe"
METHODS = (ONE_F_ONE_B, ZB1P, DUALPIPE)


@dataclass(frozen=True)
class ChunkCosts:
    F: float
    B: float
    W: float = 0.0
    FB: float | None = None

    def __post_init__(self):
        if min(self.F, self.B, self.W) < 0:
            raise ValueError("chunk costs must be nonnegative")
        if self.W > self.B:
            raise ValueError("W cannot exceed B")
        if self.FB is None:
            object.__setattr__(self, "FB", self.F + self.B)
        if self.FB < 0 or self.FB > self.F + self.B + 1e-12:
            raise ValueError("FB must lie in [0, F + B]")

    def duration(self, kind: str) -> float:
        return {"F": self.F, "B": self.B, "I": self.B - self.W, "W": self.W, "FB": self.FB}[kind]


@dataclass(frozen=True)
class ScheduleSpec:
    method: str
    PP: int
    m: int

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.PP < 1 or self.m < 1:
            raise ValueError("PP and m must be positive")
        if self.m < self.PP:
            raise ValueError("need m >= PP")
        if self.method == DUALPIPE and (self.PP % 2 or self.m % 2):
            raise ValueError("DualPipe needs even PP and even m")

    @property
    def param_copies(self) -> int:
        return 2 if self.method == DUALPIPE else 1


@dataclass(frozen=True)
class Event:
    kind: str
    direction: int
    micro: int
    # backward half of an FB cell
    b_direction: int | None = None
    b_micro: int | None = None

    def parts(self):
        if self.kind == "FB":
            return [("F", self.direction, self.micro), ("B", self.b_direction, self.b_micro)]
        return [(self.kind, self.direction, self.micro)]

    def label(self) -> str:
        if self.kind == "FB":
            return f"F{self.direction}:{self.micro}+B{self.b_direction}:{self.b_micro}"
        return f"{self.kind}{self.direction}:{self.micro}"


@dataclass
class PipelineSchedule:
    spec: ScheduleSpec
    ranks: list

    def to_json(self) -> str:
        return json.dumps(
            {
                "spec": asdict(self.spec),
                "ranks": [[{k: v for k, v in asdict(e).items() if v is not None} for e in evs] for evs in self.ranks],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> PipelineSchedule:
        obj = json.loads(text)
        return cls(ScheduleSpec(**obj["spec"]), [[Event(**e) for e in evs] for evs in obj["ranks"]])


@dataclass
class SimReport:
    makespan: float
    rank_bubbles: list
    peak_activation: int
    param_copies: int
    timeline: list = field(default_factory=list)

    @property
    def bubble(self) -> float:
        return max(self.rank_bubbles)


@dataclass(frozen=True)
class AnalyticMetrics:
    bubble: float
    param_copies: int
    peak_activation: int


def analytic_metrics(spec: ScheduleSpec, costs: ChunkCosts) -> AnalyticMetrics:
    PP, c = spec.PP, costs
    if spec.method == ONE_F_ONE_B:
        return AnalyticMetrics((PP - 1) * (c.F + c.B), 1, PP)
    if spec.method == ZB1P:
        return AnalyticMetrics((PP - 1) * (c.F + c.B - 2 * c.W), 1, PP)
    return AnalyticMetrics((PP // 2 - 1) * (c.FB + c.B - 3 * c.W), 2, PP + 1)


# builders


def _one_f_one_b(PP: int, m: int, split: bool) -> list:
    ranks = []
    for r in range(PP):
        warm = min(PP - r - 1, m)
        evs = [Event("F", 0, j) for j in range(warm)]
        f, b = warm, 0
        pending = deque()  # W chunks held back to fill later gaps
        hold = r if split else 0

        def back():
            nonlocal b
            if split:
                evs.append(Event("I", 0, b))
                pending.append(b)
                while len(pending) > hold:
                    evs.append(Event("W", 0, pending.popleft()))
            else:
                evs.append(Event("B", 0, b))
            b += 1

        while f < m:
            evs.append(Event("F", 0, f))
            f += 1
            back()
        while b < m:
            back()
        evs.extend(Event("W", 0, j) for j in pending)
        ranks.append(evs)
    return ranks


def _dualpipe(PP: int, m: int) -> list:
    H = PP // 2
    ranks = []
    for r in range(PP):
        h = min(r, PP - 1 - r)
        # ranks in the second half see the directions in swapped roles
        d = (1, 0) if r >= H else (0, 1)
        nf, nb = [0, 0], [0, 0]
        wq: deque = deque()
        evs: list = []

        def fwd(ph):
            evs.append(Event("F", d[ph], nf[ph]))
            nf[ph] += 1

        def bwd(ph, split=False):
            if split:
                evs.append(Event("I", d[ph], nb[ph]))
                wq.append((d[ph], nb[ph]))
            else:
                evs.append(Event("B", d[ph], nb[ph]))
            nb[ph] += 1

        def wgt():
            dd, j = wq.popleft()
            evs.append(Event("W", dd, j))

        def overlap(pf, pb):
            evs.append(Event("FB", d[pf], nf[pf], d[pb], nb[pb]))
            nf[pf] += 1
            nb[pb] += 1

        for _ in range(2 * (H - h - 1)):
            fwd(0)
        for _ in range(h + 1):
            fwd(0)
            fwd(1)
        for _ in range(H - h - 1):
            bwd(1, split=True)
            wgt()
            fwd(1)
        for _ in range(m - PP + h + 1):
            overlap(0, 1)
            overlap(1, 0)
        for _ in range(H - h - 1):
            bwd(1)
            overlap(1, 0)
        split = False
        for i in range(h + 1):
            if i == (h + 1) // 2 and h % 2 == 1:
                split = True
            bwd(1, split)
            if i == (h + 1) // 2 and h % 2 == 0:
                split = True
            bwd(0, split)
        for _ in range(H - h - 1):
            wgt()
            bwd(0, split=True)
        while wq:
            wgt()
        ranks.append(evs)
    return ranks


def build_schedule(spec: ScheduleSpec, costs: ChunkCosts | None = None) -> PipelineSchedule:
    """Per-rank event order for the method. Costs do not change the order."""
    if spec.method == ONE_F_ONE_B:
        ranks = _one_f_one_b(spec.PP, spec.m, split=False)
    elif spec.method == ZB1P:
        ranks = _one_f_one_b(spec.PP, spec.m, split=True)
    else:
        # builders assume m >= PP; DualPipe's m counts micro-batches per direction
        ranks = _dualpipe(spec.PP, spec.m)
    return PipelineSchedule(spec, ranks)


# simulation


def simulate(schedule: PipelineSchedule, costs: ChunkCosts) -> SimReport:
    """Run each rank's events in order, each as early as its dependencies allow.

    A forward needs the same micro-batch's forward on the previous stage.
    A backward (``B`` or ``I``) needs its own forward and the backward of
    the next stage. ``W`` needs its own ``I``. Both halves of an ``FB`` cell
    must be ready when the cell starts and both finish when it ends.
    """
    PP = schedule.spec.PP

    def stage(r, d):
        return r if d == 0 else PP - 1 - r

    def deps(r, op, d, j):
        s = stage(r, d)
        if op == "F":
            return [("F", d, j, s - 1)] if s > 0 else []
        if op in ("B", "I"):
            out = [("F", d, j, s)]
            if s < PP - 1:
                out.append(("G", d, j, s + 1))
            return out
        return [("I", d, j, s)]

    done: dict = {}
    pos = [0] * PP
    free = [0.0] * PP
    busy = [0.0] * PP
    act: list = [[] for _ in range(PP)]
    timeline = []
    remaining = sum(len(e) for e in schedule.ranks)
    while remaining:
        progressed = False
        for r in range(PP):
            evs = schedule.ranks[r]
            while pos[r] < len(evs):
                ev = evs[pos[r]]
                ready, ok = free[r], True
                for op, d, j in ev.parts():
                    for key in deps(r, op, d, j):
                        if key[0] == "G":
                            key = ("B",) + key[1:] if ("B",) + key[1:] in done else ("I",) + key[1:]
                        if key not in done:
                            ok = False
                            break
                        ready = max(ready, done[key])
                    if not ok:
                        break
                if not ok:
                    break
                cost = costs.duration(ev.kind)
                end = ready + cost
                for op, d, j in ev.parts():
                    done[(op, d, j, stage(r, d))] = end
                    if op == "F":
                        act[r].append((ready, 1))
                    elif op in ("B", "I"):
                        act[r].append((end, -1))
                timeline.append((r, ev, ready, end))
                free[r] = end
                busy[r] += cost
                pos[r] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise ValueError("schedule has cyclic or unsatisfiable dependencies")
    makespan = max(free)
    peak = 0
    for r in range(PP):
        level = 0
        # releases sort before acquisitions at equal times
        for _, delta in sorted(act[r]):
            level += delta
            peak = max(peak, level)
    return SimReport(makespan, [makespan - b for b in busy], peak, schedule.spec.param_copies, timeline)


def gantt(report: SimReport, PP: int, resolution: float | None = None, width: int = 120) -> str:
    """Plain-text grid, one row per rank.

    Upper case marks direction 0, lower case direction 1, ``X`` an
    overlapped cell and ``.`` idle time.
    """
    if report.makespan == 0:
        return "\n".join(f"rank {r}: " for r in range(PP))
    step = resolution or report.makespan / width
    cols = int(round(report.makespan / step))
    rows = [["."] * cols for _ in range(PP)]
    for r, ev, start, end in report.timeline:
        ch = "X" if ev.kind == "FB" else (ev.kind if ev.direction == 0 else ev.kind.lower())
        for c in range(int(round(start / step)), int(round(end / step))):
            if c < cols:
                rows[r][c] = ch
    return "\n".join(f"rank {r}: " + "".join(row) for r, row in enumerate(rows))
