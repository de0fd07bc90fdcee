#!/usr/bin/env python3
"""
群体模拟器
确定性的离散时间BitTorrent群体模型，代替真实客户端产生状态日志与详细日志

每个tick的处理顺序：
1. 离开/加入：新peer与所有在线peer建立连接并互发 bitfield
2. 兴趣：interested / not_interested 仅在状态变化时发送
3. 阻塞：每 rechoke_period 个tick完整重排（tit-for-tat + 随机乐观解阻塞），其余tick只填补空位
4. 传输：按链路轮询分配块，链路配额为请求窗口（1 → 64 每tick翻倍），上下行预算精确
5. 终局：缺失块 < 5% 时对第二条链路发送重复请求，收到块后发送 cancel
6. 状态快照：每个在线peer一条状态记录

扩展点：
- 选块策略：_next_block
- 解阻塞策略：_rechoke
"""

import json
import logging
import math
import random
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from decimal import Decimal
from pathlib import Path
from typing import Dict, IO, Iterator, List, Mapping, Optional, Set, Tuple

from config.experiment import Role
from src.log_parsers import (
    Direction, MessageKind, StatusRecord, VerboseRecord, VlogDialect, bitfield_to_hex,
    format_timestamp, parse_timestamp, per_peer_vlog_path, render_status_line, render_verbose_line,
)

logger = logging.getLogger(__name__)

UNLIMITED_RATE = 1 << 40
WINDOW_CAP = 64
ENDGAME_PERCENT = 5
DEFAULT_BLOCK_SIZE = 16384
DEFAULT_EPOCH = datetime(2010, 3, 1, 10, 0, 0, tzinfo=timezone.utc)


class SimulationError(Exception):
    """模拟器错误的基类"""


class InvalidSimConfig(SimulationError):
    pass


class Unsatisfiable(SimulationError):
    pass


class TickBoundExceeded(SimulationError):
    pass


@dataclass(frozen=True)
class SimPeer:
    peer_id: str
    addr: str
    role: Role
    down_cap: int = UNLIMITED_RATE
    up_cap: int = UNLIMITED_RATE
    start_tick: int = 0
    stop_tick: Optional[int] = None

    @property
    def is_seeder(self) -> bool:
        return self.role is Role.SEEDER


@dataclass(frozen=True)
class SimConfig:
    seed: int
    peers: Tuple[SimPeer, ...]
    file_size: int
    piece_size: int
    block_size: int = DEFAULT_BLOCK_SIZE
    tick: int = 1
    unchoke_slots: int = 4
    optimistic_slots: int = 1
    rechoke_period: int = 10
    max_ticks: int = 10000
    epoch: datetime = DEFAULT_EPOCH
    file_name: str = 'payload.bin'

    @property
    def num_pieces(self) -> int:
        return math.ceil(self.file_size / self.piece_size)

    def piece_length(self, piece: int) -> int:
        return min(self.piece_size, self.file_size - piece * self.piece_size)

    def blocks_in_piece(self, piece: int) -> int:
        return math.ceil(self.piece_length(piece) / self.block_size)

    def block_length(self, piece: int, block: int) -> int:
        return min(self.block_size, self.piece_length(piece) - block * self.block_size)

    @property
    def total_blocks(self) -> int:
        return sum(self.blocks_in_piece(p) for p in range(self.num_pieces))

    def timestamp(self, tick: int) -> datetime:
        return self.epoch + timedelta(seconds=tick * self.tick)

    def peer(self, peer_id: str) -> SimPeer:
        for peer in self.peers:
            if peer.peer_id == peer_id:
                return peer
        raise KeyError(peer_id)


@dataclass(frozen=True)
class SimEvent:
    tick: int
    from_peer: str
    to_peer: str
    kind: MessageKind
    piece_index: Optional[int] = None
    block_offset: Optional[int] = None
    block_length: Optional[int] = None
    bitfield: Optional[str] = None


@dataclass
class SimResult:
    config: SimConfig
    ticks: int
    status: Dict[str, List[StatusRecord]]
    events: List[SimEvent]
    completion: Dict[str, Optional[int]]

    def addr_map(self) -> Dict[str, str]:
        return {p.peer_id: p.addr for p in self.config.peers}

    def verbose_records(self, peer_id: str) -> List[VerboseRecord]:
        """peer_id 视角下的详细记录（发送方记 SND，接收方记 RCV），保持事件顺序"""
        addrs = self.addr_map()
        return [event_to_record(self.config, ev, peer_id, addrs)
                for ev in self.events if peer_id in (ev.from_peer, ev.to_peer)]

    def events_by_tick(self) -> Dict[int, List[SimEvent]]:
        grouped: Dict[int, List[SimEvent]] = {}
        for ev in self.events:
            grouped.setdefault(ev.tick, []).append(ev)
        return grouped


def event_to_record(config: SimConfig, ev: SimEvent, perspective: str,
                    addrs: Mapping[str, str]) -> VerboseRecord:
    if ev.from_peer == perspective:
        direction, remote = Direction.SENT, addrs[ev.to_peer]
    else:
        direction, remote = Direction.RECEIVED, addrs[ev.from_peer]
    return VerboseRecord(
        timestamp=config.timestamp(ev.tick),
        direction=direction,
        kind=ev.kind,
        remote_peer=remote,
        piece_index=ev.piece_index,
        block_offset=ev.block_offset,
        block_length=ev.block_length,
        bitfield_hex=ev.bitfield,
    )


def validate_config(config: SimConfig):
    if config.file_size <= 0:
        raise InvalidSimConfig('file_size must be positive')
    if config.block_size <= 0 or config.piece_size % config.block_size:
        raise InvalidSimConfig('piece_size must be a multiple of block_size')
    if config.unchoke_slots < 1 or config.optimistic_slots < 1:
        raise InvalidSimConfig('unchoke and optimistic slots must be >= 1')
    if config.rechoke_period < 1 or config.tick < 1:
        raise InvalidSimConfig('rechoke_period and tick must be >= 1')
    ids = [p.peer_id for p in config.peers]
    if len(set(ids)) != len(ids):
        raise InvalidSimConfig('duplicate peer ids')
    for peer in config.peers:
        if peer.down_cap <= 0 or peer.up_cap <= 0:
            raise InvalidSimConfig(f"{peer.peer_id}: caps must be positive")
        if peer.stop_tick is not None and peer.stop_tick <= peer.start_tick:
            raise InvalidSimConfig(f"{peer.peer_id}: stop_tick must be after start_tick")
    if not any(p.is_seeder for p in config.peers):
        raise Unsatisfiable('swarm has no seeder')


def _iter_bits(mask: int) -> Iterator[int]:
    while mask:
        low = mask & -mask
        yield low.bit_length() - 1
        mask ^= low


class _Link:
    """上传方 u → 下载方 d 的单向链路状态"""
    __slots__ = ('choked', 'interested', 'window', 'sent')

    def __init__(self):
        self.choked = True
        self.interested = False
        self.window = 1
        self.sent = 0


class _PeerState:
    def __init__(self, index: int, spec: SimPeer, config: SimConfig, full_mask: int):
        self.index = index
        self.spec = spec
        self.have = full_mask if spec.is_seeder else 0
        self.partial: Dict[int, Set[int]] = {}
        self.partial_mask = 0
        self.received_blocks = config.total_blocks if spec.is_seeder else 0
        self.downloaded = 0
        self.uploaded = 0
        self.tick_down = 0
        self.tick_up = 0
        self.active = False
        self.departed = False
        self.completed_tick: Optional[int] = None
        self.neighbors: Set[int] = set()


class SwarmSimulator:
    """对一个 SimConfig 运行完整模拟；run() 是 config 的纯函数"""

    def __init__(self, config: SimConfig):
        validate_config(config)
        self.config = config
        self.rng = random.Random(config.seed)
        self.full_mask = (1 << config.num_pieces) - 1
        self.total_blocks = config.total_blocks
        self.peers = [_PeerState(i, spec, config, self.full_mask) for i, spec in enumerate(config.peers)]
        self.links: Dict[Tuple[int, int], _Link] = {}
        self.availability = [0] * config.num_pieces
        self.events: List[SimEvent] = []
        self.status: Dict[str, List[StatusRecord]] = {p.peer_id: [] for p in config.peers}

    # -- helpers -------------------------------------------------------------

    def _emit(self, tick: int, src: int, dst: int, kind: MessageKind, **payload):
        self.events.append(SimEvent(tick, self.peers[src].spec.peer_id,
                                    self.peers[dst].spec.peer_id, kind, **payload))

    def _is_complete(self, peer: _PeerState) -> bool:
        return peer.have == self.full_mask

    def _active(self) -> List[_PeerState]:
        return [p for p in self.peers if p.active]

    def _bitfield_hex(self, mask: int) -> str:
        return bitfield_to_hex([bool(mask >> i & 1) for i in range(self.config.num_pieces)])

    def _adjust_availability(self, mask: int, delta: int):
        for piece in _iter_bits(mask):
            self.availability[piece] += delta

    # -- phases --------------------------------------------------------------

    def _membership(self, t: int):
        for peer in self.peers:
            if peer.active and peer.spec.stop_tick == t:
                logger.debug(f"tick {t}: {peer.spec.peer_id} leaves")
                peer.active = False
                peer.departed = True
                for n in peer.neighbors:
                    self.peers[n].neighbors.discard(peer.index)
                    del self.links[(peer.index, n)]
                    del self.links[(n, peer.index)]
                peer.neighbors.clear()
                self._adjust_availability(peer.have, -1)

        for peer in self.peers:
            if peer.active or peer.departed or peer.spec.start_tick != t:
                continue
            peer.active = True
            self._adjust_availability(peer.have, 1)
            for other in self._active():
                if other is peer:
                    continue
                self.links[(peer.index, other.index)] = _Link()
                self.links[(other.index, peer.index)] = _Link()
                peer.neighbors.add(other.index)
                other.neighbors.add(peer.index)
                self._emit(t, peer.index, other.index, MessageKind.BITFIELD,
                           bitfield=self._bitfield_hex(peer.have))
                self._emit(t, other.index, peer.index, MessageKind.BITFIELD,
                           bitfield=self._bitfield_hex(other.have))

    def _update_interest(self, t: int):
        for d in self._active():
            for u in sorted(d.neighbors):
                want = (self.peers[u].have & ~d.have) != 0
                link = self.links[(u, d.index)]
                if want != link.interested:
                    link.interested = want
                    kind = MessageKind.INTERESTED if want else MessageKind.NOT_INTERESTED
                    self._emit(t, d.index, u, kind)

    def _score(self, u: _PeerState, d: int) -> int:
        # 做种者按发给对方的字节排序，下载者按从对方收到的字节排序
        if self._is_complete(u):
            return self.links[(u.index, d)].sent
        return self.links[(d, u.index)].sent

    def _set_choke(self, t: int, u: int, d: int, choked: bool):
        link = self.links[(u, d)]
        if link.choked == choked:
            return
        link.choked = choked
        link.window = 1
        self._emit(t, u, d, MessageKind.CHOKE if choked else MessageKind.UNCHOKE)

    def _rechoke(self, t: int):
        cfg = self.config
        for u in self._active():
            candidates = [d for d in sorted(u.neighbors) if self.links[(u.index, d)].interested]
            ranked = sorted(candidates, key=lambda d: (-self._score(u, d), d))
            up_cap = u.spec.up_cap

            if t % cfg.rechoke_period == 0:
                chosen: List[int] = []
                cap_sum = 0
                for d in ranked:
                    cap = self.peers[d].spec.down_cap
                    if len(chosen) < cfg.unchoke_slots or cap_sum + cap <= up_cap:
                        chosen.append(d)
                        cap_sum += cap
                    else:
                        break
                rest = sorted(d for d in ranked if d not in chosen)
                k = min(cfg.optimistic_slots, len(rest))
                target = set(chosen) | set(self.rng.sample(rest, k) if k else [])
                for d in sorted(u.neighbors):
                    self._set_choke(t, u.index, d, d not in target)
            else:
                current = [d for d in candidates if not self.links[(u.index, d)].choked]
                cap_sum = sum(self.peers[d].spec.down_cap for d in current)
                limit = cfg.unchoke_slots + cfg.optimistic_slots
                for d in ranked:
                    if not self.links[(u.index, d)].choked:
                        continue
                    cap = self.peers[d].spec.down_cap
                    if len(current) < limit or cap_sum + cap <= up_cap:
                        self._set_choke(t, u.index, d, False)
                        current.append(d)
                        cap_sum += cap
                    else:
                        break

    def _next_block(self, u: _PeerState, d: _PeerState) -> Optional[Tuple[int, int]]:
        for piece in sorted(d.partial):
            if u.have >> piece & 1:
                got = d.partial[piece]
                for block in range(self.config.blocks_in_piece(piece)):
                    if block not in got:
                        return piece, block
        candidates = u.have & ~d.have & ~d.partial_mask
        if not candidates:
            return None
        piece = min(_iter_bits(candidates), key=lambda p: (self.availability[p], p))
        return piece, 0

    def _second_source(self, u: int, d: _PeerState, piece: int) -> Optional[int]:
        for n in sorted(d.neighbors):
            if n == u:
                continue
            link = self.links[(n, d.index)]
            if not link.choked and link.interested and self.peers[n].have >> piece & 1:
                return n
        return None

    def _deliver(self, t: int, u: _PeerState, d: _PeerState, piece: int, block: int):
        cfg = self.config
        length = cfg.block_length(piece, block)
        coords = dict(piece_index=piece, block_offset=block * cfg.block_size, block_length=length)

        endgame = (self.total_blocks - d.received_blocks) * 100 < ENDGAME_PERCENT * self.total_blocks
        backup = self._second_source(u.index, d, piece) if endgame else None

        self._emit(t, d.index, u.index, MessageKind.REQUEST, **coords)
        if backup is not None:
            self._emit(t, d.index, backup, MessageKind.REQUEST, **coords)
        self._emit(t, u.index, d.index, MessageKind.PIECE, **coords)
        if backup is not None:
            self._emit(t, d.index, backup, MessageKind.CANCEL, **coords)

        u.uploaded += length
        u.tick_up += length
        d.downloaded += length
        d.tick_down += length
        self.links[(u.index, d.index)].sent += length

        got = d.partial.setdefault(piece, set())
        d.partial_mask |= 1 << piece
        got.add(block)
        d.received_blocks += 1
        if len(got) == cfg.blocks_in_piece(piece):
            del d.partial[piece]
            d.partial_mask &= ~(1 << piece)
            d.have |= 1 << piece
            self.availability[piece] += 1
            for n in sorted(d.neighbors):
                self._emit(t, d.index, n, MessageKind.HAVE, piece_index=piece)
            if self._is_complete(d):
                d.completed_tick = t
                logger.debug(f"tick {t}: {d.spec.peer_id} complete")

    def _transfer(self, t: int):
        cfg = self.config
        up_left: Dict[int, int] = {}
        down_left: Dict[int, int] = {}
        for peer in self._active():
            peer.tick_down = peer.tick_up = 0
            up_left[peer.index] = peer.spec.up_cap * cfg.tick
            down_left[peer.index] = peer.spec.down_cap * cfg.tick

        eligible = [key for key, link in sorted(self.links.items())
                    if not link.choked and link.interested and not self._is_complete(self.peers[key[1]])]
        if not eligible:
            return
        shift = t % len(eligible)
        order = eligible[shift:] + eligible[:shift]
        quota = {key: self.links[key].window for key in order}

        progress = True
        while progress:
            progress = False
            for key in order:
                if quota[key] == 0:
                    continue
                u, d = self.peers[key[0]], self.peers[key[1]]
                choice = self._next_block(u, d)
                if choice is None:
                    quota[key] = 0
                    continue
                length = cfg.block_length(*choice)
                if up_left[u.index] < length or down_left[d.index] < length:
                    quota[key] = 0
                    continue
                self._deliver(t, u, d, *choice)
                up_left[u.index] -= length
                down_left[d.index] -= length
                quota[key] -= 1
                progress = True

        for key in eligible:
            link = self.links.get(key)
            if link is not None and not link.choked:
                link.window = min(link.window * 2, WINDOW_CAP)

    def _snapshot(self, t: int):
        cfg = self.config
        size = cfg.file_size
        for peer in self._active():
            have_bytes = size if peer.spec.is_seeder else peer.downloaded
            ds = peer.tick_down // cfg.tick
            us = peer.tick_up // cfg.tick
            if peer.spec.is_seeder:
                eta = None
            elif self._is_complete(peer):
                eta = 0
            elif ds > 0:
                eta = math.ceil((size - have_bytes) / ds)
            else:
                eta = None
            self.status[peer.spec.peer_id].append(StatusRecord(
                timestamp=cfg.timestamp(t),
                down_speed=ds,
                up_speed=us,
                downloaded=peer.downloaded,
                uploaded=peer.uploaded,
                eta=eta,
                num_peers=len(peer.neighbors),
                percent=Decimal(have_bytes * 10000 // size).scaleb(-2),
                transfer_size=size,
                file_name=cfg.file_name,
            ))

    def _finished(self) -> bool:
        return all(p.departed or self._is_complete(p) for p in self.peers if not p.spec.is_seeder)

    def run(self) -> SimResult:
        for t in range(self.config.max_ticks):
            self._membership(t)
            self._update_interest(t)
            self._rechoke(t)
            self._transfer(t)
            self._snapshot(t)
            if self._finished():
                logger.info(f"Simulation finished after {t + 1} ticks, {len(self.events)} events")
                return SimResult(
                    config=self.config,
                    ticks=t + 1,
                    status=self.status,
                    events=self.events,
                    completion={p.spec.peer_id: p.completed_tick for p in self.peers},
                )
        raise TickBoundExceeded(f"Leechers still incomplete after {self.config.max_ticks} ticks")


def simulate(config: SimConfig) -> SimResult:
    return SwarmSimulator(config).run()


# ---------------------------------------------------------------------------
# 日志输出
# ---------------------------------------------------------------------------

class PeerLogWriter:
    """把单个peer的状态记录与详细记录写入其日志文件"""

    def __init__(self, slog: Path, vlog: Path, dialect: VlogDialect):
        self.slog = Path(slog)
        self.vlog = Path(vlog)
        self.dialect = dialect
        self._status: Optional[IO[str]] = None
        self._verbose: Dict[Path, IO[str]] = {}

    def _open(self, path: Path) -> IO[str]:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, 'a', encoding='utf-8')

    def _verbose_path(self, rec: VerboseRecord) -> Path:
        if self.dialect is VlogDialect.PER_PEER_FILES:
            return per_peer_vlog_path(self.vlog, rec.remote_peer)
        return self.vlog

    def ensure_unified(self):
        """统一方言下即使没有任何详细记录也创建文件"""
        if self.dialect is VlogDialect.UNIFIED_FILE and self.vlog not in self._verbose:
            self._verbose[self.vlog] = self._open(self.vlog)

    def write_status(self, rec: StatusRecord):
        if self._status is None:
            self._status = self._open(self.slog)
        self._status.write(render_status_line(rec) + '\n')

    def write_verbose(self, rec: VerboseRecord):
        path = self._verbose_path(rec)
        handle = self._verbose.get(path)
        if handle is None:
            handle = self._verbose[path] = self._open(path)
        handle.write(render_verbose_line(rec, self.dialect) + '\n')

    def files(self) -> List[Path]:
        found = [self.slog] if self._status is not None else []
        return found + sorted(self._verbose)

    def flush(self):
        for handle in [self._status, *self._verbose.values()]:
            if handle is not None:
                handle.flush()

    def close(self):
        for handle in [self._status, *self._verbose.values()]:
            if handle is not None:
                handle.close()

    def __enter__(self) -> 'PeerLogWriter':
        return self

    def __exit__(self, *exc_info):
        self.close()


def emit_logs(result: SimResult, dialect: VlogDialect,
              paths: Mapping[str, Tuple[Path, Path]]) -> Dict[str, List[Path]]:
    """
    为 paths 中列出的每个peer写出状态日志与详细日志

    Args:
        paths: peer_id → (slog 路径, vlog 路径)

    Returns:
        Dict[str, List[Path]]: 每个peer实际写出的文件
    """
    written: Dict[str, List[Path]] = {}
    for peer_id, (slog, vlog) in paths.items():
        with PeerLogWriter(slog, vlog, dialect) as writer:
            writer.ensure_unified()
            for rec in result.status[peer_id]:
                writer.write_status(rec)
            for rec in result.verbose_records(peer_id):
                writer.write_verbose(rec)
            written[peer_id] = writer.files()
    return written


# ---------------------------------------------------------------------------
# 群体名册（多个独立 btsim 进程共享同一个模拟）
# ---------------------------------------------------------------------------

def dump_roster(config: SimConfig) -> str:
    def cap(value: int) -> Optional[int]:
        return None if value >= UNLIMITED_RATE else value

    return json.dumps({
        'seed': config.seed,
        'block_size': config.block_size,
        'tick': config.tick,
        'unchoke_slots': config.unchoke_slots,
        'optimistic_slots': config.optimistic_slots,
        'rechoke_period': config.rechoke_period,
        'max_ticks': config.max_ticks,
        'epoch': format_timestamp(config.epoch),
        'peers': [{
            'peer_id': p.peer_id,
            'addr': p.addr,
            'role': p.role.value,
            'down': cap(p.down_cap),
            'up': cap(p.up_cap),
            'start': p.start_tick,
            'stop': p.stop_tick,
        } for p in config.peers],
    }, indent=2, sort_keys=True)


def load_roster(text: str, file_size: int, piece_size: int, file_name: str) -> SimConfig:
    """名册 + torrent 信息 → SimConfig"""
    try:
        data = json.loads(text)
        peers = tuple(SimPeer(
            peer_id=entry['peer_id'],
            addr=entry['addr'],
            role=Role(entry['role']),
            down_cap=entry.get('down') or UNLIMITED_RATE,
            up_cap=entry.get('up') or UNLIMITED_RATE,
            start_tick=int(entry.get('start') or 0),
            stop_tick=entry.get('stop'),
        ) for entry in data['peers'])
        return SimConfig(
            seed=int(data['seed']),
            peers=peers,
            file_size=file_size,
            piece_size=piece_size,
            block_size=int(data.get('block_size', DEFAULT_BLOCK_SIZE)),
            tick=int(data.get('tick', 1)),
            unchoke_slots=int(data.get('unchoke_slots', 4)),
            optimistic_slots=int(data.get('optimistic_slots', 1)),
            rechoke_period=int(data.get('rechoke_period', 10)),
            max_ticks=int(data.get('max_ticks', 10000)),
            epoch=parse_timestamp(data['epoch']) if 'epoch' in data else DEFAULT_EPOCH,
            file_name=file_name,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidSimConfig(f"Bad roster: {e}") from e
