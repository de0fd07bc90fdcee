#!/usr/bin/env python3
"""
存储引擎
实验、peer、状态消息与详细消息都保存在单个SQLite文件中

设计要点：
- 消息表是 WITHOUT ROWID 表，主键 (peer_id, timestamp, seq) 即时间窗口查询所用的聚簇顺序
- 消息类型与方向存为整数，bitfield 存为BLOB，对端地址通过 remote_peers 字典表引用
- 时间戳为UNIX秒；eta 为 NULL 表示无穷
- 每个批次一个事务，批次内失败则整批回滚
"""

import logging
import sqlite3
from dataclasses import dataclass
from datetime import datetime
from decimal import Decimal
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

from src.log_parsers import (
    Direction, MessageKind, StatusRecord, VerboseRecord, from_epoch, to_epoch,
)

logger = logging.getLogger(__name__)

BATCH_SIZE = 10_000

Timestamp = Union[int, datetime]

SCHEMA = """
CREATE TABLE IF NOT EXISTS experiments (
    experiment_id INTEGER PRIMARY KEY,
    swarm_id TEXT NOT NULL,
    num_peers INTEGER NOT NULL CHECK (num_peers >= 0),
    num_seeders INTEGER NOT NULL CHECK (num_seeders >= 0),
    start_time INTEGER NOT NULL,
    file_name TEXT NOT NULL,
    file_size INTEGER NOT NULL CHECK (file_size >= 0)
);

CREATE TABLE IF NOT EXISTS peers (
    peer_id INTEGER PRIMARY KEY,
    experiment_id INTEGER NOT NULL REFERENCES experiments (experiment_id) ON DELETE CASCADE,
    name TEXT NOT NULL,
    client_name TEXT NOT NULL,
    addr TEXT NOT NULL,
    down_limit INTEGER CHECK (down_limit IS NULL OR down_limit > 0),
    up_limit INTEGER CHECK (up_limit IS NULL OR up_limit > 0),
    cpu_description TEXT NOT NULL DEFAULT '',
    ram_bytes INTEGER NOT NULL DEFAULT 0,
    os_version TEXT NOT NULL DEFAULT '',
    net_info TEXT NOT NULL DEFAULT '',
    status_seq INTEGER NOT NULL DEFAULT 0,
    verbose_seq INTEGER NOT NULL DEFAULT 0,
    UNIQUE (experiment_id, name)
);

CREATE TABLE IF NOT EXISTS remote_peers (
    remote_id INTEGER PRIMARY KEY,
    addr TEXT NOT NULL UNIQUE
);

CREATE TABLE IF NOT EXISTS status_messages (
    peer_id INTEGER NOT NULL REFERENCES peers (peer_id) ON DELETE CASCADE,
    timestamp INTEGER NOT NULL,
    seq INTEGER NOT NULL,
    down_speed INTEGER NOT NULL CHECK (down_speed >= 0),
    up_speed INTEGER NOT NULL CHECK (up_speed >= 0),
    downloaded INTEGER NOT NULL CHECK (downloaded >= 0),
    uploaded INTEGER NOT NULL CHECK (uploaded >= 0),
    eta INTEGER CHECK (eta IS NULL OR eta >= 0),
    num_peers INTEGER NOT NULL CHECK (num_peers >= 0),
    percent INTEGER NOT NULL CHECK (percent BETWEEN 0 AND 10000),
    transfer_size INTEGER NOT NULL CHECK (transfer_size >= downloaded),
    file_name TEXT NOT NULL,
    PRIMARY KEY (peer_id, timestamp, seq)
) WITHOUT ROWID;

CREATE TABLE IF NOT EXISTS verbose_messages (
    peer_id INTEGER NOT NULL REFERENCES peers (peer_id) ON DELETE CASCADE,
    timestamp INTEGER NOT NULL,
    seq INTEGER NOT NULL,
    direction INTEGER NOT NULL CHECK (direction IN (0, 1)),
    kind INTEGER NOT NULL CHECK (kind BETWEEN 0 AND 8),
    remote_id INTEGER NOT NULL REFERENCES remote_peers (remote_id),
    piece_index INTEGER CHECK (piece_index IS NULL OR piece_index >= 0),
    block_offset INTEGER CHECK (block_offset IS NULL OR block_offset >= 0),
    block_length INTEGER CHECK (block_length IS NULL OR block_length >= 0),
    bitfield BLOB,
    PRIMARY KEY (peer_id, timestamp, seq)
) WITHOUT ROWID;
"""

TABLES = ('experiments', 'peers', 'remote_peers', 'status_messages', 'verbose_messages')
DIRECTION_CODES = {Direction.SENT: 0, Direction.RECEIVED: 1}
DIRECTIONS = {code: direction for direction, code in DIRECTION_CODES.items()}


class StorageError(Exception):
    """存储错误的基类"""


class CorruptStore(StorageError):
    pass


class UnknownPeer(StorageError):
    pass


class UnknownExperiment(StorageError):
    pass


class ConstraintViolation(StorageError):
    pass


class BadWindow(StorageError):
    pass


class BadInput(StorageError):
    pass


@dataclass(frozen=True)
class ExperimentMeta:
    swarm_id: str
    num_peers: int
    num_seeders: int
    start_time: int
    file_name: str
    file_size: int
    experiment_id: Optional[int] = None


@dataclass(frozen=True)
class PeerMeta:
    experiment_id: int
    name: str
    client_name: str
    addr: str
    down_limit: Optional[int] = None
    up_limit: Optional[int] = None
    cpu_description: str = ''
    ram_bytes: int = 0
    os_version: str = ''
    net_info: str = ''
    peer_id: Optional[int] = None


def _epoch(value: Timestamp) -> int:
    return value if isinstance(value, int) else to_epoch(value)


def _chunks(items: Iterable, size: int) -> Iterator[list]:
    chunk = []
    for item in items:
        chunk.append(item)
        if len(chunk) >= size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


class SwarmStore:
    """一个打开的存储文件；单写多读"""

    def __init__(self, path: Path, read_only: bool = False):
        self.path = Path(path)
        self.read_only = read_only
        self._remote_ids: Dict[str, int] = {}
        try:
            if read_only:
                if not self.path.exists():
                    raise StorageError(f"Store does not exist: {self.path}")
                uri = self.path.resolve().as_uri() + '?mode=ro'
                self.conn = sqlite3.connect(uri, uri=True)
            else:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                self.conn = sqlite3.connect(str(self.path))
            self.conn.execute('PRAGMA foreign_keys = ON')
            if read_only:
                self._check_schema()
            else:
                with self.conn:
                    self.conn.executescript(SCHEMA)
        except sqlite3.DatabaseError as e:
            raise CorruptStore(f"{self.path}: {e}") from e

    def _check_schema(self):
        names = {row[0] for row in self.conn.execute("SELECT name FROM sqlite_master WHERE type = 'table'")}
        missing = [t for t in TABLES if t not in names]
        if missing:
            raise CorruptStore(f"{self.path}: missing tables {', '.join(missing)}")

    def close(self):
        self.conn.close()

    def __enter__(self) -> 'SwarmStore':
        return self

    def __exit__(self, *exc_info):
        self.close()

    # -- experiments ---------------------------------------------------------

    def add_experiment(self, meta: ExperimentMeta) -> int:
        try:
            with self.conn:
                cur = self.conn.execute(
                    'INSERT INTO experiments (swarm_id, num_peers, num_seeders, start_time, file_name, file_size) '
                    'VALUES (?, ?, ?, ?, ?, ?)',
                    (meta.swarm_id, meta.num_peers, meta.num_seeders, meta.start_time,
                     meta.file_name, meta.file_size))
        except sqlite3.IntegrityError as e:
            raise ConstraintViolation(str(e)) from e
        return cur.lastrowid

    def get_experiment(self, experiment_id: int) -> ExperimentMeta:
        row = self.conn.execute(
            'SELECT swarm_id, num_peers, num_seeders, start_time, file_name, file_size, experiment_id '
            'FROM experiments WHERE experiment_id = ?', (experiment_id,)).fetchone()
        if row is None:
            raise UnknownExperiment(f"No experiment {experiment_id}")
        return ExperimentMeta(*row)

    def list_experiments(self) -> List[ExperimentMeta]:
        rows = self.conn.execute(
            'SELECT swarm_id, num_peers, num_seeders, start_time, file_name, file_size, experiment_id '
            'FROM experiments ORDER BY experiment_id')
        return [ExperimentMeta(*row) for row in rows]

    # -- peers ---------------------------------------------------------------

    _PEER_COLUMNS = ('experiment_id, name, client_name, addr, down_limit, up_limit, '
                     'cpu_description, ram_bytes, os_version, net_info, peer_id')

    def add_peer(self, meta: PeerMeta) -> int:
        try:
            with self.conn:
                cur = self.conn.execute(
                    'INSERT INTO peers (experiment_id, name, client_name, addr, down_limit, up_limit, '
                    'cpu_description, ram_bytes, os_version, net_info) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)',
                    (meta.experiment_id, meta.name, meta.client_name, meta.addr, meta.down_limit,
                     meta.up_limit, meta.cpu_description, meta.ram_bytes, meta.os_version, meta.net_info))
        except sqlite3.IntegrityError as e:
            raise ConstraintViolation(str(e)) from e
        return cur.lastrowid

    def get_peer(self, peer_id: int) -> PeerMeta:
        row = self.conn.execute(f'SELECT {self._PEER_COLUMNS} FROM peers WHERE peer_id = ?',
                                (peer_id,)).fetchone()
        if row is None:
            raise UnknownPeer(f"No peer {peer_id}")
        return PeerMeta(*row)

    def find_peer(self, name: str, experiment_id: Optional[int] = None) -> PeerMeta:
        """按名称查找peer；未指定实验时取最近的实验"""
        if experiment_id is None:
            row = self.conn.execute(
                f'SELECT {self._PEER_COLUMNS} FROM peers WHERE name = ? ORDER BY experiment_id DESC LIMIT 1',
                (name,)).fetchone()
        else:
            row = self.conn.execute(
                f'SELECT {self._PEER_COLUMNS} FROM peers WHERE name = ? AND experiment_id = ?',
                (name, experiment_id)).fetchone()
        if row is None:
            raise UnknownPeer(f"No peer named {name!r}")
        return PeerMeta(*row)

    def list_peers(self, experiment_id: Optional[int] = None) -> List[PeerMeta]:
        if experiment_id is None:
            rows = self.conn.execute(f'SELECT {self._PEER_COLUMNS} FROM peers ORDER BY peer_id')
        else:
            rows = self.conn.execute(
                f'SELECT {self._PEER_COLUMNS} FROM peers WHERE experiment_id = ? ORDER BY peer_id',
                (experiment_id,))
        return [PeerMeta(*row) for row in rows]

    def delete_peer(self, peer_id: int):
        with self.conn:
            cur = self.conn.execute('DELETE FROM peers WHERE peer_id = ?', (peer_id,))
        if cur.rowcount == 0:
            raise UnknownPeer(f"No peer {peer_id}")
        logger.info(f"Deleted peer {peer_id} and its messages")

    def _require_peer(self, peer_id: int):
        if self.conn.execute('SELECT 1 FROM peers WHERE peer_id = ?', (peer_id,)).fetchone() is None:
            raise UnknownPeer(f"No peer {peer_id}")

    def _remote_id(self, addr: str) -> int:
        remote_id = self._remote_ids.get(addr)
        if remote_id is None:
            self.conn.execute('INSERT OR IGNORE INTO remote_peers (addr) VALUES (?)', (addr,))
            remote_id = self.conn.execute('SELECT remote_id FROM remote_peers WHERE addr = ?',
                                          (addr,)).fetchone()[0]
            self._remote_ids[addr] = remote_id
        return remote_id

    # -- messages ------------------------------------------------------------

    def _next_seq(self, peer_id: int, column: str, count: int) -> int:
        row = self.conn.execute(f'SELECT {column} FROM peers WHERE peer_id = ?', (peer_id,)).fetchone()
        if row is None:
            raise UnknownPeer(f"No peer {peer_id}")
        self.conn.execute(f'UPDATE peers SET {column} = ? WHERE peer_id = ?', (row[0] + count, peer_id))
        return row[0]

    def insert_status_batch(self, peer_id: int, records: Sequence[StatusRecord]) -> int:
        """整批原子插入状态记录，返回插入条数"""
        records = list(records)
        try:
            with self.conn:
                first = self._next_seq(peer_id, 'status_seq', len(records))
                self.conn.executemany(
                    'INSERT INTO status_messages (peer_id, timestamp, seq, down_speed, up_speed, downloaded, '
                    'uploaded, eta, num_peers, percent, transfer_size, file_name) '
                    'VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)',
                    ((peer_id, to_epoch(r.timestamp), first + i, r.down_speed, r.up_speed, r.downloaded,
                      r.uploaded, r.eta, r.num_peers, int(r.percent * 100), r.transfer_size, r.file_name)
                     for i, r in enumerate(records)))
        except sqlite3.IntegrityError as e:
            raise ConstraintViolation(str(e)) from e
        return len(records)

    def insert_verbose_batch(self, peer_id: int, records: Sequence[VerboseRecord]) -> int:
        """整批原子插入详细记录，返回插入条数"""
        records = list(records)
        try:
            with self.conn:
                first = self._next_seq(peer_id, 'verbose_seq', len(records))
                rows = []
                for i, r in enumerate(records):
                    rows.append((
                        peer_id, to_epoch(r.timestamp), first + i, DIRECTION_CODES[r.direction],
                        r.kind.code, self._remote_id(r.remote_peer), r.piece_index, r.block_offset,
                        r.block_length, bytes.fromhex(r.bitfield_hex) if r.bitfield_hex is not None else None,
                    ))
                self.conn.executemany(
                    'INSERT INTO verbose_messages (peer_id, timestamp, seq, direction, kind, remote_id, '
                    'piece_index, block_offset, block_length, bitfield) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)',
                    rows)
        except sqlite3.IntegrityError as e:
            # 回滚后字典缓存可能指向不存在的行
            self._remote_ids.clear()
            raise ConstraintViolation(str(e)) from e
        return len(records)

    def insert_status(self, peer_id: int, records: Iterable[StatusRecord]) -> int:
        return sum(self.insert_status_batch(peer_id, chunk) for chunk in _chunks(records, BATCH_SIZE))

    def insert_verbose(self, peer_id: int, records: Iterable[VerboseRecord]) -> int:
        return sum(self.insert_verbose_batch(peer_id, chunk) for chunk in _chunks(records, BATCH_SIZE))

    @staticmethod
    def _window(t0: Timestamp, t1: Timestamp) -> Tuple[int, int]:
        start, end = _epoch(t0), _epoch(t1)
        if end <= start:
            raise BadWindow(f"Empty or inverted window [{start}, {end})")
        return start, end

    def query_messages(self, peer_id: int, t0: Timestamp, t1: Timestamp,
                       kinds: Optional[Iterable[MessageKind]] = None) -> List[VerboseRecord]:
        """返回 t0 <= timestamp < t1 且类型在 kinds 中的详细记录，按时间排序"""
        self._require_peer(peer_id)
        start, end = self._window(t0, t1)
        sql = ('SELECT v.timestamp, v.direction, v.kind, r.addr, v.piece_index, v.block_offset, '
               'v.block_length, v.bitfield FROM verbose_messages v JOIN remote_peers r USING (remote_id) '
               'WHERE v.peer_id = ? AND v.timestamp >= ? AND v.timestamp < ?')
        params: list = [peer_id, start, end]
        if kinds is not None:
            codes = sorted({k.code for k in kinds})
            if not codes:
                return []
            sql += f" AND v.kind IN ({', '.join('?' * len(codes))})"
            params += codes
        sql += ' ORDER BY v.timestamp, v.seq'
        return [VerboseRecord(
            timestamp=from_epoch(ts),
            direction=DIRECTIONS[direction],
            kind=MessageKind.from_code(kind),
            remote_peer=addr,
            piece_index=piece,
            block_offset=offset,
            block_length=length,
            bitfield_hex=bitfield.hex() if bitfield is not None else None,
        ) for ts, direction, kind, addr, piece, offset, length, bitfield in self.conn.execute(sql, params)]

    def count_messages(self, peer_id: int, t0: Timestamp, t1: Timestamp) -> int:
        self._require_peer(peer_id)
        start, end = self._window(t0, t1)
        return self.conn.execute(
            'SELECT COUNT(*) FROM verbose_messages WHERE peer_id = ? AND timestamp >= ? AND timestamp < ?',
            (peer_id, start, end)).fetchone()[0]

    def kind_counts(self, peer_id: int, t0: Timestamp, t1: Timestamp
                    ) -> Dict[Tuple[MessageKind, Direction], int]:
        self._require_peer(peer_id)
        start, end = self._window(t0, t1)
        rows = self.conn.execute(
            'SELECT kind, direction, COUNT(*) FROM verbose_messages '
            'WHERE peer_id = ? AND timestamp >= ? AND timestamp < ? GROUP BY kind, direction',
            (peer_id, start, end))
        return {(MessageKind.from_code(kind), DIRECTIONS[direction]): count for kind, direction, count in rows}

    def query_status(self, peer_id: int, t0: Optional[Timestamp] = None,
                     t1: Optional[Timestamp] = None) -> List[StatusRecord]:
        self._require_peer(peer_id)
        sql = ('SELECT timestamp, down_speed, up_speed, downloaded, uploaded, eta, num_peers, percent, '
               'transfer_size, file_name FROM status_messages WHERE peer_id = ?')
        params: list = [peer_id]
        if t0 is not None and t1 is not None:
            start, end = self._window(t0, t1)
            sql += ' AND timestamp >= ? AND timestamp < ?'
            params += [start, end]
        sql += ' ORDER BY timestamp, seq'
        return [StatusRecord(
            timestamp=from_epoch(ts), down_speed=ds, up_speed=us, downloaded=d, uploaded=u, eta=eta,
            num_peers=peers, percent=Decimal(pct).scaleb(-2), transfer_size=size, file_name=name,
        ) for ts, ds, us, d, u, eta, peers, pct, size, name in self.conn.execute(sql, params)]

    def status_span(self, peer_id: int) -> Optional[Tuple[int, int]]:
        """状态记录的 (最早, 最晚) 时间戳"""
        self._require_peer(peer_id)
        row = self.conn.execute('SELECT MIN(timestamp), MAX(timestamp) FROM status_messages WHERE peer_id = ?',
                                (peer_id,)).fetchone()
        return None if row[0] is None else (row[0], row[1])

    def message_total(self) -> int:
        return self.conn.execute('SELECT COUNT(*) FROM verbose_messages').fetchone()[0]

    # -- file ----------------------------------------------------------------

    def vacuum(self):
        self.conn.execute('VACUUM')

    def file_size(self) -> int:
        return self.path.stat().st_size

    def dump_canonical(self) -> str:
        """按主键顺序导出全部表的文本形式，用于逐字节比较两个存储"""
        lines = []
        for table, order in (('experiments', 'experiment_id'), ('peers', 'peer_id'),
                             ('remote_peers', 'remote_id'),
                             ('status_messages', 'peer_id, timestamp, seq'),
                             ('verbose_messages', 'peer_id, timestamp, seq')):
            lines.append(f"# {table}")
            for row in self.conn.execute(f'SELECT * FROM {table} ORDER BY {order}'):
                lines.append('\t'.join('' if v is None else v.hex() if isinstance(v, bytes) else str(v)
                                       for v in row))
        return '\n'.join(lines) + '\n'


def open_store(path: Path, read_only: bool = False) -> SwarmStore:
    return SwarmStore(path, read_only=read_only)


def compact_ratio(raw_log_bytes: int, store: SwarmStore) -> float:
    """存储文件大小 / 原始日志字节数"""
    if raw_log_bytes <= 0:
        raise BadInput('Raw log size must be positive')
    size = store.file_size()
    if size <= 0:
        raise BadInput('Store file is empty')
    return size / raw_log_bytes
