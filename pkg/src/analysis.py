#!/usr/bin/env python3
"""
结果分析
每个peer的速度/加速度时间序列、消息统计、两个peer的比较，以及CSV/SVG导出

时间 t 为相对会话开始（该peer第一条状态记录）的秒数；窗口为半开区间 [a, b)。
加速度使用前向差分并以 Fraction 精确表示。
"""

import csv
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib
matplotlib.use('Agg')
from matplotlib.figure import Figure

from src.log_parsers import Direction, MessageKind, StatusRecord, to_epoch
from src.storage import PeerMeta, SwarmStore, UnknownPeer

logger = logging.getLogger(__name__)

STABILITY_FRACTION = Fraction(5, 100)
FULL_RANGE = (0, 1 << 62)

Window = Tuple[int, int]
PeerRef = Union[int, str]


class AnalysisError(Exception):
    """分析错误的基类"""


class EmptyWindow(AnalysisError):
    pass


class SeriesTooShort(AnalysisError):
    pass


class DisjointWindows(AnalysisError):
    pass


class ExportError(AnalysisError):
    pass


@dataclass(frozen=True)
class SpeedSeries:
    peer_id: int
    direction: str  # 'down' | 'up'
    points: Tuple[Tuple[int, int], ...]

    @property
    def values(self) -> List[int]:
        return [v for _, v in self.points]


@dataclass(frozen=True)
class AccelSeries:
    peer_id: int
    direction: str
    points: Tuple[Tuple[int, Fraction], ...]


@dataclass(frozen=True)
class MessageStats:
    peer_id: int
    window: Window
    counts: Dict[MessageKind, Tuple[int, int]]  # kind → (sent, received)

    @property
    def total(self) -> int:
        return sum(s + r for s, r in self.counts.values())


@dataclass(frozen=True)
class PlateauSummary:
    ramp_end: Optional[int]
    mean: Optional[Fraction]
    max_abs_accel: Optional[Fraction]
    positive_prefix: bool


@dataclass(frozen=True)
class Comparison:
    window: Window  # 绝对UNIX秒
    speed_a: SpeedSeries
    speed_b: SpeedSeries
    stats_a: MessageStats
    stats_b: MessageStats
    plateau_a: PlateauSummary
    plateau_b: PlateauSummary

    @property
    def plateau_ratio(self) -> Optional[float]:
        if self.plateau_a.mean is None or not self.plateau_b.mean:
            return None
        return float(self.plateau_a.mean / self.plateau_b.mean)


# ---------------------------------------------------------------------------
# 基本查询
# ---------------------------------------------------------------------------

def resolve_peer(store: SwarmStore, peer: PeerRef) -> PeerMeta:
    if isinstance(peer, int) or (isinstance(peer, str) and peer.isdigit()):
        try:
            return store.get_peer(int(peer))
        except UnknownPeer:
            if isinstance(peer, int):
                raise
    return store.find_peer(str(peer))


def session_origin(store: SwarmStore, peer_id: int) -> Optional[int]:
    span = store.status_span(peer_id)
    return span[0] if span else None


def _absolute(store: SwarmStore, peer_id: int, window: Optional[Window]) -> Tuple[int, Window]:
    origin = session_origin(store, peer_id)
    if origin is None:
        return 0, (window or FULL_RANGE)
    if window is None:
        span = store.status_span(peer_id)
        return origin, (span[0], span[1] + 1)
    return origin, (origin + window[0], origin + window[1])


def _points(records: Sequence[StatusRecord], direction: str, origin: int,
            absolute: Window) -> Tuple[Tuple[int, int], ...]:
    key = 'down_speed' if direction == 'down' else 'up_speed'
    points = []
    for rec in records:
        ts = to_epoch(rec.timestamp)
        if absolute[0] <= ts < absolute[1]:
            points.append((ts - origin, getattr(rec, key)))
    return tuple(points)


def speed_series(store: SwarmStore, peer: PeerRef, direction: str = 'down',
                 window: Optional[Window] = None) -> SpeedSeries:
    """状态记录中的速度原样取出；缺失的tick直接省略，不插值"""
    if direction not in ('down', 'up'):
        raise AnalysisError(f"direction must be down or up, got {direction!r}")
    peer_id = resolve_peer(store, peer).peer_id
    origin, absolute = _absolute(store, peer_id, window)
    points = _points(store.query_status(peer_id), direction, origin, absolute)
    if not points:
        raise EmptyWindow(f"No status records for peer {peer_id} in window {window}")
    return SpeedSeries(peer_id, direction, points)


def acceleration_series(speed: SpeedSeries) -> AccelSeries:
    """前向差分 a(t_i) = (v_{i+1} - v_i) / (t_{i+1} - t_i)"""
    pts = speed.points
    if len(pts) < 2:
        raise SeriesTooShort(f"Need at least 2 points, have {len(pts)}")
    accel = tuple((t0, Fraction(v1 - v0, t1 - t0)) for (t0, v0), (t1, v1) in zip(pts, pts[1:]))
    return AccelSeries(speed.peer_id, speed.direction, accel)


def message_stats(store: SwarmStore, peer: PeerRef, window: Optional[Window] = None) -> MessageStats:
    peer_id = resolve_peer(store, peer).peer_id
    _, absolute = _absolute(store, peer_id, window)
    return _stats(store, peer_id, absolute, window or absolute)


def _stats(store: SwarmStore, peer_id: int, absolute: Window, label: Window) -> MessageStats:
    grouped = store.kind_counts(peer_id, absolute[0], absolute[1])
    counts = {kind: (grouped.get((kind, Direction.SENT), 0), grouped.get((kind, Direction.RECEIVED), 0))
              for kind in MessageKind}
    return MessageStats(peer_id, label, counts)


def download_window(store: SwarmStore, peer: PeerRef) -> Optional[Window]:
    """下载阶段：完成度低于100%的状态记录所覆盖的相对窗口"""
    peer_id = resolve_peer(store, peer).peer_id
    origin = session_origin(store, peer_id)
    incomplete = [to_epoch(r.timestamp) for r in store.query_status(peer_id) if r.percent < 100]
    if origin is None or not incomplete:
        return None
    return incomplete[0] - origin, incomplete[-1] - origin + 1


def download_phase(speed: SpeedSeries, window: Optional[Window]) -> SpeedSeries:
    if window is None:
        return SpeedSeries(speed.peer_id, speed.direction, ())
    return SpeedSeries(speed.peer_id, speed.direction,
                       tuple(p for p in speed.points if window[0] <= p[0] < window[1]))


# ---------------------------------------------------------------------------
# 自举阶段与平台期
# ---------------------------------------------------------------------------

def detect_bootstrap(accel: AccelSeries, cap: int) -> Optional[int]:
    """
    返回自举阶段结束时刻：此后所有点都满足 |a| < 5%·cap

    最后一个点仍不稳定时返回 None。
    """
    if not accel.points:
        raise SeriesTooShort('Acceleration series is empty')
    threshold = STABILITY_FRACTION * cap
    k = len(accel.points)
    while k > 0 and abs(accel.points[k - 1][1]) < threshold:
        k -= 1
    if k == len(accel.points):
        return None
    return accel.points[k][0]


def plateau_summary(speed: SpeedSeries, cap: int) -> PlateauSummary:
    if len(speed.points) < 2:
        return PlateauSummary(None, None, None, False)
    accel = acceleration_series(speed)
    ramp_end = detect_bootstrap(accel, cap)
    if ramp_end is None:
        return PlateauSummary(None, None, None, False)
    plateau = [v for t, v in speed.points if t >= ramp_end]
    stable = [abs(a) for t, a in accel.points if t >= ramp_end]
    prefix = [a for t, a in accel.points if t < ramp_end]
    return PlateauSummary(
        ramp_end=ramp_end,
        mean=Fraction(sum(plateau), len(plateau)),
        max_abs_accel=max(stable) if stable else Fraction(0),
        positive_prefix=all(a > 0 for a in prefix),
    )


# ---------------------------------------------------------------------------
# 比较
# ---------------------------------------------------------------------------

def _series_in(store: SwarmStore, peer_id: int, absolute: Window, origin: int) -> SpeedSeries:
    return SpeedSeries(peer_id, 'down', _points(store.query_status(peer_id), 'down', origin, absolute))


def _download_plateau(store: SwarmStore, meta: PeerMeta, series: SpeedSeries, origin: int) -> PlateauSummary:
    phase = download_window(store, meta.peer_id)
    if phase is None:
        return PlateauSummary(None, None, None, False)
    own_origin = session_origin(store, meta.peer_id)
    shift = own_origin - origin
    points = download_phase(series, (phase[0] + shift, phase[1] + shift))
    cap = meta.down_limit or max((v for _, v in points.points), default=0)
    return plateau_summary(points, cap)


def compare(store: SwarmStore, peer_a: PeerRef, peer_b: PeerRef,
            window: Optional[Window] = None) -> Comparison:
    """
    两个peer在共同的绝对时间窗口上的比较

    Args:
        window: 相对共同窗口开始的 [a, b)；None 表示整个共同窗口
    """
    meta_a, meta_b = resolve_peer(store, peer_a), resolve_peer(store, peer_b)
    span_a, span_b = store.status_span(meta_a.peer_id), store.status_span(meta_b.peer_id)
    if span_a is None or span_b is None:
        raise EmptyWindow('Both peers need status records to be compared')
    start, end = max(span_a[0], span_b[0]), min(span_a[1], span_b[1]) + 1
    if end <= start:
        raise DisjointWindows(f"Sessions do not overlap: {span_a} vs {span_b}")
    if window is not None:
        base = start
        start, end = base + max(0, window[0]), min(end, base + window[1])
        if end <= start:
            raise DisjointWindows(f"Window {window} lies outside the common span")

    common = (start, end)
    speed_a = _series_in(store, meta_a.peer_id, common, start)
    speed_b = _series_in(store, meta_b.peer_id, common, start)
    label = (0, end - start)
    return Comparison(
        window=common,
        speed_a=speed_a,
        speed_b=speed_b,
        stats_a=_stats(store, meta_a.peer_id, common, label),
        stats_b=_stats(store, meta_b.peer_id, common, label),
        plateau_a=_download_plateau(store, meta_a, speed_a, start),
        plateau_b=_download_plateau(store, meta_b, speed_b, start),
    )


# ---------------------------------------------------------------------------
# 导出
# ---------------------------------------------------------------------------

def _number(value) -> str:
    if isinstance(value, Fraction):
        return str(value.numerator) if value.denominator == 1 else repr(float(value))
    return str(value)


def _write_csv(obj, path: Path):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        if isinstance(obj, SpeedSeries):
            writer.writerow(['t', 'v'])
            writer.writerows((t, v) for t, v in obj.points)
        elif isinstance(obj, AccelSeries):
            writer.writerow(['t', 'a'])
            writer.writerows((t, _number(a)) for t, a in obj.points)
        else:
            writer.writerow(['kind', 'sent', 'received'])
            writer.writerows((kind.label, s, r) for kind, (s, r) in obj.counts.items())


def _draw(obj, fig: Figure):
    ax = fig.add_subplot(1, 1, 1)
    if isinstance(obj, MessageStats):
        labels, values = [], []
        for kind, (sent, received) in obj.counts.items():
            labels += [f"{kind.label} SND", f"{kind.label} RCV"]
            values += [sent, received]
        ax.bar(range(len(values)), values, color=['tab:blue', 'tab:orange'] * len(obj.counts))
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=60, ha='right', fontsize=7)
        ax.set_ylabel('messages')
        ax.set_title(f"peer {obj.peer_id} messages [{obj.window[0]}, {obj.window[1]})")
    else:
        xs = [t for t, _ in obj.points]
        ys = [float(v) for _, v in obj.points]
        ax.plot(xs, ys, marker='.')
        ax.grid(True)
        ax.set_xlabel('t (s)')
        if isinstance(obj, SpeedSeries):
            ax.set_ylabel('bytes/s')
            ax.set_title(f"peer {obj.peer_id} {obj.direction} speed")
        else:
            ax.set_ylabel('bytes/s²')
            ax.set_title(f"peer {obj.peer_id} {obj.direction} acceleration")
    fig.tight_layout()


def _write_svg(obj, path: Path):
    with matplotlib.rc_context({'svg.hashsalt': 'swarmforge', 'svg.fonttype': 'none'}):
        fig = Figure(figsize=(8, 4.5))
        _draw(obj, fig)
        fig.savefig(path, format='svg', metadata={'Date': None})


def export_plot(obj: Union[SpeedSeries, AccelSeries, MessageStats], fmt: str, path: Path) -> Path:
    """写出CSV或SVG；相同输入总是得到相同字节"""
    path = Path(path)
    fmt = fmt.lower()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == 'csv':
            _write_csv(obj, path)
        elif fmt == 'svg':
            _write_svg(obj, path)
        else:
            raise ExportError(f"Unsupported format {fmt!r}")
    except OSError as e:
        raise ExportError(f"Cannot write {path}: {e}") from e
    logger.debug(f"Wrote {path}")
    return path
