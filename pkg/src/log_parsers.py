#!/usr/bin/env python3
"""
日志解析模块
状态日志（status log）与详细日志（verbose log，两种方言）的解析与渲染

状态行：
    2010-03-01T10:00:12Z ds=524288 us=262144 d=6291456 u=1048576 eta=58 peers=49 pct=12.50 size=50331648 name=test.bin

详细行（UNIFIED_FILE 带 peer 列，PER_PEER_FILES 的对端地址写在文件名中）：
    2010-03-01T10:00:03Z RCV piece peer=10.0.1.7:6881 index=4 begin=16384 length=16384

渲染与解析共用同一套语法定义，render(parse(line)) == line。
"""

import logging
import os
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from decimal import Decimal, InvalidOperation
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, TextIO, Tuple

logger = logging.getLogger(__name__)

TIMESTAMP_FORMAT = '%Y-%m-%dT%H:%M:%SZ'
TIMESTAMP_PATTERN = re.compile(r'^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}Z$')
DECIMAL_PATTERN = re.compile(r'^(?:0|[1-9]\d*)$')
PERCENT_PATTERN = re.compile(r'^(?:0|[1-9]\d{0,2})\.\d{2}$')
HEX_PATTERN = re.compile(r'^[0-9a-f]*$')
ADDR_PATTERN = re.compile(r'^[A-Za-z0-9.\-]+:\d{1,5}$')
PER_PEER_SUFFIX = re.compile(r'\.((?:\d{1,3}\.){3}\d{1,3}:\d{1,5}|[A-Za-z0-9\-]+:\d{1,5})\.log$')

STATUS_FIELDS = ('ds', 'us', 'd', 'u', 'eta', 'peers', 'pct', 'size')
LAST_LINE_WINDOW = 65536


class LogParseError(Exception):
    """日志解析错误的基类"""


class MalformedLine(LogParseError):
    def __init__(self, column: int, reason: str, line_no: Optional[int] = None):
        where = f"line {line_no}, column {column}" if line_no is not None else f"column {column}"
        super().__init__(f"{where}: {reason}")
        self.column = column
        self.reason = reason
        self.line_no = line_no


class AmbiguousDialect(LogParseError):
    pass


class VlogDialect(Enum):
    PER_PEER_FILES = 'per-peer'
    UNIFIED_FILE = 'unified'


class Direction(Enum):
    SENT = 'SND'
    RECEIVED = 'RCV'


class MessageKind(Enum):
    """九种协议消息；code 即BitTorrent线上的消息ID"""
    CHOKE = ('choke', 0)
    UNCHOKE = ('unchoke', 1)
    INTERESTED = ('interested', 2)
    NOT_INTERESTED = ('not_interested', 3)
    HAVE = ('have', 4)
    BITFIELD = ('bitfield', 5)
    REQUEST = ('request', 6)
    PIECE = ('piece', 7)
    CANCEL = ('cancel', 8)

    def __init__(self, label: str, code: int):
        self.label = label
        self.code = code

    @classmethod
    def from_label(cls, label: str) -> Optional['MessageKind']:
        return _KIND_BY_LABEL.get(label)

    @classmethod
    def from_code(cls, code: int) -> 'MessageKind':
        return _KIND_BY_CODE[code]

    @property
    def has_block(self) -> bool:
        return self in BLOCK_KINDS


_KIND_BY_LABEL = {kind.label: kind for kind in MessageKind}
_KIND_BY_CODE = {kind.code: kind for kind in MessageKind}
BLOCK_KINDS = frozenset({MessageKind.REQUEST, MessageKind.PIECE, MessageKind.CANCEL})
STATE_KINDS = frozenset({MessageKind.CHOKE, MessageKind.UNCHOKE,
                         MessageKind.INTERESTED, MessageKind.NOT_INTERESTED})


# ---------------------------------------------------------------------------
# 时间戳与位图
# ---------------------------------------------------------------------------

def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime(TIMESTAMP_FORMAT)


def parse_timestamp(text: str) -> datetime:
    if not TIMESTAMP_PATTERN.match(text):
        raise ValueError(f"bad timestamp {text!r}")
    return datetime.strptime(text, TIMESTAMP_FORMAT).replace(tzinfo=timezone.utc)


def _line_timestamp(text: str, line_no: Optional[int]) -> datetime:
    """形如时间戳但不是真实日期（2月30日、13月）时按第1列报错"""
    try:
        return parse_timestamp(text)
    except ValueError:
        raise MalformedLine(1, f"bad timestamp {text!r}", line_no) from None


def to_epoch(ts: datetime) -> int:
    return int(ts.timestamp())


def from_epoch(seconds: int) -> datetime:
    return datetime.fromtimestamp(seconds, tz=timezone.utc)


def bitfield_to_hex(bits: Sequence[bool]) -> str:
    """位图按BitTorrent习惯编码：第0块是首字节的最高位，末尾补零"""
    data = bytearray((len(bits) + 7) // 8)
    for i, bit in enumerate(bits):
        if bit:
            data[i // 8] |= 0x80 >> (i % 8)
    return data.hex()


def hex_to_bitfield(text: str, num_pieces: int) -> List[bool]:
    data = bytes.fromhex(text)
    return [bool(data[i // 8] & (0x80 >> (i % 8))) for i in range(num_pieces)]


# ---------------------------------------------------------------------------
# 状态日志
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StatusRecord:
    timestamp: datetime
    down_speed: int
    up_speed: int
    downloaded: int
    uploaded: int
    eta: Optional[int]  # None 表示无穷（做种者）
    num_peers: int
    percent: Decimal
    transfer_size: int
    file_name: str

    @property
    def is_complete(self) -> bool:
        return self.percent == 100


def render_status_line(rec: StatusRecord) -> str:
    eta = 'inf' if rec.eta is None else str(rec.eta)
    return (f"{format_timestamp(rec.timestamp)} ds={rec.down_speed} us={rec.up_speed} "
            f"d={rec.downloaded} u={rec.uploaded} eta={eta} peers={rec.num_peers} "
            f"pct={rec.percent:.2f} size={rec.transfer_size} name={rec.file_name}")


def parse_status_line(line: str, line_no: Optional[int] = None) -> StatusRecord:
    """
    解析一行规范格式的状态日志

    Raises:
        MalformedLine: 字段缺失、顺序错误或取值非法（column 为1起始的字符位置）
    """
    line = line.rstrip('\n')
    parts = line.split(' ', len(STATUS_FIELDS) + 1)
    offsets = []
    pos = 1
    for part in parts:
        offsets.append(pos)
        pos += len(part) + 1

    def fail(index: int, reason: str):
        column = offsets[index] if index < len(offsets) else len(line) + 1
        raise MalformedLine(column, reason, line_no)

    if not parts or not TIMESTAMP_PATTERN.match(parts[0]):
        fail(0, 'expected timestamp')
    timestamp = _line_timestamp(parts[0], line_no)

    values = {}
    for i, key in enumerate(STATUS_FIELDS, start=1):
        if i >= len(parts) or not parts[i].startswith(key + '='):
            fail(i, f"expected {key}=")
        values[key] = parts[i][len(key) + 1:]
    name_index = len(STATUS_FIELDS) + 1
    if name_index >= len(parts) or not parts[name_index].startswith('name='):
        fail(name_index, 'expected name=')
    file_name = parts[name_index][len('name='):]

    ints = {}
    for i, key in enumerate(('ds', 'us', 'd', 'u', 'peers', 'size'), start=1):
        if not DECIMAL_PATTERN.match(values[key]):
            fail(STATUS_FIELDS.index(key) + 1, f"{key} must be a non-negative integer without leading zeros")
        ints[key] = int(values[key])

    eta_text = values['eta']
    if eta_text == 'inf':
        eta = None
    elif DECIMAL_PATTERN.match(eta_text):
        eta = int(eta_text)
    else:
        fail(STATUS_FIELDS.index('eta') + 1, 'eta must be an integer or inf')

    pct_index = STATUS_FIELDS.index('pct') + 1
    if not PERCENT_PATTERN.match(values['pct']):
        fail(pct_index, 'pct must have two decimals and no leading zeros')
    try:
        percent = Decimal(values['pct'])
    except InvalidOperation:
        fail(pct_index, 'pct is not a number')
    if percent > 100:
        fail(pct_index, 'pct above 100.00')
    if percent == 100 and eta not in (None, 0):
        fail(STATUS_FIELDS.index('eta') + 1, 'complete transfer must have eta 0 or inf')
    if ints['d'] > ints['size']:
        fail(STATUS_FIELDS.index('d') + 1, 'downloaded exceeds transfer size')

    return StatusRecord(
        timestamp=timestamp,
        down_speed=ints['ds'],
        up_speed=ints['us'],
        downloaded=ints['d'],
        uploaded=ints['u'],
        eta=eta,
        num_peers=ints['peers'],
        percent=percent,
        transfer_size=ints['size'],
        file_name=file_name,
    )


def parse_status_stream(stream: Iterable[str]) -> Iterator[StatusRecord]:
    """逐行流式解析状态日志（空行跳过）"""
    for line_no, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        yield parse_status_line(line, line_no)


def read_last_status(path: Path) -> Optional[StatusRecord]:
    """
    读取状态日志最后一个完整行（以换行结尾）

    写入方可能正在写最后一行，未以换行结尾的尾部被忽略。
    """
    with open(path, 'rb') as f:
        f.seek(0, os.SEEK_END)
        size = f.tell()
        f.seek(max(0, size - LAST_LINE_WINDOW))
        tail = f.read().decode('utf-8', errors='replace')
    complete = tail[:tail.rfind('\n') + 1] if '\n' in tail else ''
    for line in reversed(complete.split('\n')):
        if line.strip():
            return parse_status_line(line)
    return None


# ---------------------------------------------------------------------------
# 详细日志
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VerboseRecord:
    timestamp: datetime
    direction: Direction
    kind: MessageKind
    remote_peer: str
    piece_index: Optional[int] = None
    block_offset: Optional[int] = None
    block_length: Optional[int] = None
    bitfield_hex: Optional[str] = None


def check_verbose_record(rec: VerboseRecord) -> Tuple[bool, Optional[str]]:
    """检查记录的字段组合是否与消息类型相符"""
    piece = (rec.piece_index, rec.block_offset, rec.block_length)
    if rec.kind.has_block:
        if any(v is None for v in piece):
            return False, f"{rec.kind.label} requires index, begin and length"
        if rec.bitfield_hex is not None:
            return False, f"{rec.kind.label} carries no bitfield"
    elif rec.kind is MessageKind.HAVE:
        if rec.piece_index is None or rec.block_offset is not None or rec.block_length is not None:
            return False, 'have requires index only'
        if rec.bitfield_hex is not None:
            return False, 'have carries no bitfield'
    elif rec.kind is MessageKind.BITFIELD:
        if rec.bitfield_hex is None:
            return False, 'bitfield requires bitfield='
        if any(v is not None for v in piece):
            return False, 'bitfield carries no piece fields'
    else:
        if any(v is not None for v in piece) or rec.bitfield_hex is not None:
            return False, f"{rec.kind.label} carries no payload"
    if any(v is not None and v < 0 for v in piece):
        return False, 'negative piece coordinate'
    return True, None


def render_verbose_line(rec: VerboseRecord, dialect: VlogDialect = VlogDialect.UNIFIED_FILE) -> str:
    fields = [format_timestamp(rec.timestamp), rec.direction.value, rec.kind.label]
    if dialect is VlogDialect.UNIFIED_FILE:
        fields.append(f"peer={rec.remote_peer}")
    if rec.piece_index is not None:
        fields.append(f"index={rec.piece_index}")
    if rec.block_offset is not None:
        fields.append(f"begin={rec.block_offset}")
    if rec.block_length is not None:
        fields.append(f"length={rec.block_length}")
    if rec.bitfield_hex is not None:
        fields.append(f"bitfield={rec.bitfield_hex}")
    return ' '.join(fields)


_INT_FIELDS = {'index': 'piece_index', 'begin': 'block_offset', 'length': 'block_length'}


def parse_verbose_line(line: str, dialect: VlogDialect, remote_peer: Optional[str] = None,
                       line_no: Optional[int] = None) -> Optional[VerboseRecord]:
    """
    解析一行详细日志

    Returns:
        Optional[VerboseRecord]: 不是协议消息的行（调试输出、未知类型）返回 None
    """
    parts = line.rstrip('\n').split(' ')
    if len(parts) < 3 or not TIMESTAMP_PATTERN.match(parts[0]) or parts[1] not in ('SND', 'RCV'):
        return None
    kind = MessageKind.from_label(parts[2])
    if kind is None:
        return None

    column = len(parts[0]) + len(parts[1]) + len(parts[2]) + 4
    values = {}
    peer = None
    for part in parts[3:]:
        key, sep, value = part.partition('=')
        if not sep or (key != 'peer' and key != 'bitfield' and key not in _INT_FIELDS):
            raise MalformedLine(column, f"unexpected field {part!r}", line_no)
        if key in values or (key == 'peer' and peer is not None):
            raise MalformedLine(column, f"duplicate field {key}", line_no)
        if key == 'peer':
            if not ADDR_PATTERN.match(value):
                raise MalformedLine(column, f"bad peer address {value!r}", line_no)
            peer = value
        elif key == 'bitfield':
            if not HEX_PATTERN.match(value) or len(value) % 2:
                raise MalformedLine(column, 'bitfield must be lowercase hex bytes', line_no)
            values[key] = value
        else:
            if not DECIMAL_PATTERN.match(value):
                raise MalformedLine(column, f"{key} must be a non-negative integer without leading zeros", line_no)
            values[key] = int(value)
        column += len(part) + 1

    if peer is None:
        peer = remote_peer
    if peer is None:
        reason = 'missing peer=' if dialect is VlogDialect.UNIFIED_FILE else 'remote peer unknown'
        raise MalformedLine(column, reason, line_no)

    rec = VerboseRecord(
        timestamp=_line_timestamp(parts[0], line_no),
        direction=Direction(parts[1]),
        kind=kind,
        remote_peer=peer,
        piece_index=values.get('index'),
        block_offset=values.get('begin'),
        block_length=values.get('length'),
        bitfield_hex=values.get('bitfield'),
    )
    ok, reason = check_verbose_record(rec)
    if not ok:
        raise MalformedLine(len(parts[0]) + len(parts[1]) + 3, reason, line_no)
    return rec


class VerboseParser:
    """
    详细日志的流式解析器

    单次遍历，内存占用与文件大小无关；跳过的行数记录在 skipped 中。
    """

    def __init__(self, dialect: VlogDialect, remote_peer: Optional[str] = None):
        self.dialect = dialect
        self.remote_peer = remote_peer
        self.skipped = 0
        self.parsed = 0

    def parse(self, stream: Iterable[str]) -> Iterator[VerboseRecord]:
        last: Optional[datetime] = None
        for line_no, line in enumerate(stream, start=1):
            if not line.strip():
                continue
            rec = parse_verbose_line(line, self.dialect, self.remote_peer, line_no)
            if rec is None:
                self.skipped += 1
                logger.debug(f"Skipping non-protocol line {line_no}: {line.rstrip()[:80]!r}")
                continue
            if last is not None and rec.timestamp < last:
                raise MalformedLine(1, 'timestamp goes backwards', line_no)
            last = rec.timestamp
            self.parsed += 1
            yield rec
        if self.skipped:
            logger.warning(f"Skipped {self.skipped} unrecognised verbose line(s)")


def parse_verbose_stream(stream: Iterable[str], dialect: VlogDialect,
                         remote_peer: Optional[str] = None) -> Iterator[VerboseRecord]:
    return VerboseParser(dialect, remote_peer).parse(stream)


# ---------------------------------------------------------------------------
# 文件与方言
# ---------------------------------------------------------------------------

def per_peer_vlog_path(vlog: Path, remote_addr: str) -> Path:
    """PER_PEER_FILES 方言的文件名：<vlog>.<ip:port>.log"""
    vlog = Path(vlog)
    return vlog.with_name(f"{vlog.name}.{remote_addr}.log")


def peer_from_filename(path: Path) -> Optional[str]:
    match = PER_PEER_SUFFIX.search(Path(path).name)
    return match.group(1) if match else None


def find_vlog_files(vlog: Path) -> List[Path]:
    """返回属于该 vlog 的全部文件（统一文件本身 + 按对端拆分的文件），按名称排序"""
    vlog = Path(vlog)
    found = [vlog] if vlog.is_file() else []
    if vlog.parent.is_dir():
        prefix = vlog.name + '.'
        for entry in sorted(vlog.parent.iterdir()):
            if not entry.name.startswith(prefix) or not entry.is_file():
                continue
            remote = peer_from_filename(entry)
            if remote and entry.name == f"{prefix}{remote}.log":
                found.append(entry)
    return found


def detect_dialect(paths: Sequence[Path]) -> VlogDialect:
    """
    根据文件名判断方言

    - 全部文件名都嵌有对端地址 → PER_PEER_FILES（单个这样的文件也算）
    - 恰好一个不带地址的文件 → UNIFIED_FILE
    - 其他情况（空列表、混合、多个普通文件）→ AmbiguousDialect
    """
    if not paths:
        raise AmbiguousDialect('No verbose log files given')
    embedded = [p for p in paths if peer_from_filename(p)]
    if len(embedded) == len(paths):
        return VlogDialect.PER_PEER_FILES
    if not embedded and len(paths) == 1:
        return VlogDialect.UNIFIED_FILE
    raise AmbiguousDialect(f"Cannot decide dialect for {len(paths)} file(s), "
                           f"{len(embedded)} with peer addresses")


def iter_verbose_files(paths: Sequence[Path], dialect: Optional[VlogDialect] = None
                       ) -> Iterator[Tuple[Path, VerboseParser, Iterator[VerboseRecord]]]:
    """按文件依次产出 (路径, 解析器, 记录迭代器)；调用方负责消费迭代器"""
    dialect = dialect or detect_dialect(paths)
    for path in paths:
        remote = peer_from_filename(path) if dialect is VlogDialect.PER_PEER_FILES else None
        parser = VerboseParser(dialect, remote)
        with open(path, 'r', encoding='utf-8') as f:
            yield path, parser, parser.parse(f)


def open_text(path: Path) -> TextIO:
    return open(path, 'r', encoding='utf-8')


if __name__ == "__main__":
    import sys

    for arg in sys.argv[1:]:
        with open_text(Path(arg)) as f:
            first = f.readline()
        kind = 'status' if ' ds=' in first else 'verbose'
        print(f"{arg}: {kind}")
