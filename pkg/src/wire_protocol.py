#!/usr/bin/env python3
"""
线协议模块
Commander ↔ Agent 之间的消息集合定义与编解码

帧格式：
- 4字节大端长度前缀 + UTF-8 文本负载
- 负载第1行是命令名（或 OK / ERR <code>），其后每行一个 key=value
- 行之间用 \\n 分隔，末尾没有换行
"""

import re
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

MAX_FRAME_SIZE = 1_048_576
HEADER = struct.Struct('>I')

COMMAND_KEY_PATTERN = re.compile(r'^[A-Z_]+$')
BODY_KEY_PATTERN = re.compile(r'^[a-z0-9_]+$')
TOKEN_SAFE = re.compile(r'^[A-Za-z0-9._-]+$')

STATUS_BODY_KEYS = ('down_speed', 'up_speed', 'downloaded', 'uploaded', 'eta', 'num_peers')
CLEANUP_KEYS = ('ALL', 'DOWN', 'VLOGS', 'SLOGS', 'ARCHIVE')


class WireProtocolError(Exception):
    """线协议错误的基类"""


class InvalidEnvelope(WireProtocolError):
    """信封不满足其不变量"""


class FrameTooShort(WireProtocolError):
    """帧比声明的长度短，或缺少头部"""


class FrameTooLong(WireProtocolError):
    """帧超过上限，或带有多余的字节"""


class BadUtf8(WireProtocolError):
    """负载不是合法的UTF-8"""


class UnknownCommand(WireProtocolError):
    """未知的命令名"""


class DuplicateKey(InvalidEnvelope):
    """同一信封内出现重复的key"""


class MissingRequiredKey(InvalidEnvelope):
    """缺少命令所需的key"""


class CommandKind(Enum):
    """Agent 支持的七种命令（线上名称使用连字符）"""
    START_CLIENT = 'START-CLIENT'
    STOP_CLIENT = 'STOP-CLIENT'
    GET_CLIENTS = 'GET-CLIENTS'
    GET_OUTPUT = 'GET-OUTPUT'
    ARCHIVE = 'ARCHIVE'
    GET_STATUS = 'GET-STATUS'
    CLEANUP = 'CLEANUP'

    @classmethod
    def from_wire(cls, name: str) -> 'CommandKind':
        for kind in cls:
            if kind.value == name:
                return kind
        raise UnknownCommand(f"Unknown command: {name!r}")


class ResponseStatus(Enum):
    OK = 'OK'
    ERR = 'ERR'


class ErrorCode(Enum):
    UNKNOWN_CMD = 'UNKNOWN_CMD'
    BAD_ARGS = 'BAD_ARGS'
    NO_SUCH_ID = 'NO_SUCH_ID'
    CLIENT_FAILED = 'CLIENT_FAILED'
    IO_ERROR = 'IO_ERROR'


REQUIRED_KEYS: Dict[CommandKind, Tuple[str, ...]] = {
    CommandKind.START_CLIENT: ('TORRENT', 'DOWN_DIR', 'SLOG', 'VLOG', 'CLIENT'),
    CommandKind.STOP_CLIENT: ('ID',),
    CommandKind.GET_STATUS: ('ID',),
    CommandKind.GET_OUTPUT: ('ID',),
}


Pairs = Tuple[Tuple[str, str], ...]


def _freeze(pairs: Iterable[Tuple[str, str]]) -> Pairs:
    return tuple((str(k), str(v)) for k, v in pairs)


@dataclass(frozen=True)
class CommandEnvelope:
    """Commander 发给 Agent 的命令信封"""
    kind: CommandKind
    args: Pairs = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, 'args', _freeze(self.args))

    @classmethod
    def build(cls, kind: CommandKind, **kwargs: object) -> 'CommandEnvelope':
        """按关键字参数顺序构造信封"""
        return cls(kind, tuple((k, str(v)) for k, v in kwargs.items()))

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        for k, v in self.args:
            if k == key:
                return v
        return default

    def as_dict(self) -> Dict[str, str]:
        return dict(self.args)


@dataclass(frozen=True)
class ResponseEnvelope:
    """Agent 返回给 Commander 的响应信封"""
    status: ResponseStatus
    error_code: Optional[ErrorCode] = None
    body: Pairs = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, 'body', _freeze(self.body))

    @classmethod
    def ok(cls, body: Sequence[Tuple[str, str]] = ()) -> 'ResponseEnvelope':
        return cls(ResponseStatus.OK, None, tuple(body))

    @classmethod
    def err(cls, code: ErrorCode, message: Optional[str] = None) -> 'ResponseEnvelope':
        body = (('message', message),) if message else ()
        return cls(ResponseStatus.ERR, code, body)

    @property
    def is_ok(self) -> bool:
        return self.status is ResponseStatus.OK

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        for k, v in self.body:
            if k == key:
                return v
        return default

    def as_dict(self) -> Dict[str, str]:
        return dict(self.body)


# ---------------------------------------------------------------------------
# 不变量检查（编码器与解码器共用）
# ---------------------------------------------------------------------------

def _check_pairs(pairs: Pairs, key_pattern: 're.Pattern[str]'):
    seen = set()
    for key, value in pairs:
        if not key_pattern.match(key):
            raise InvalidEnvelope(f"Invalid key: {key!r}")
        if key in seen:
            raise DuplicateKey(f"Duplicate key: {key}")
        seen.add(key)
        if '\n' in value:
            raise InvalidEnvelope(f"Value of {key} contains a newline")


def validate_command(cmd: CommandEnvelope):
    """检查命令信封的全部不变量，违反时抛出 InvalidEnvelope 的子类"""
    if not isinstance(cmd.kind, CommandKind):
        raise InvalidEnvelope(f"Invalid command kind: {cmd.kind!r}")
    _check_pairs(cmd.args, COMMAND_KEY_PATTERN)

    keys = {k for k, _ in cmd.args}
    for required in REQUIRED_KEYS.get(cmd.kind, ()):
        if required not in keys:
            raise MissingRequiredKey(f"{cmd.kind.value} requires {required}")

    if cmd.kind is CommandKind.CLEANUP:
        flags = [k for k in keys if k in CLEANUP_KEYS]
        if not flags:
            raise MissingRequiredKey(f"CLEANUP requires one of {', '.join(CLEANUP_KEYS)}")
        for key, value in cmd.args:
            if key not in CLEANUP_KEYS:
                raise InvalidEnvelope(f"CLEANUP does not accept {key}")
            if value not in ('0', '1'):
                raise InvalidEnvelope(f"CLEANUP flag {key} must be 0 or 1, got {value!r}")


def validate_response(resp: ResponseEnvelope):
    """检查响应信封的不变量"""
    if resp.status is ResponseStatus.ERR and resp.error_code is None:
        raise InvalidEnvelope("ERR response requires an error code")
    if resp.status is ResponseStatus.OK and resp.error_code is not None:
        raise InvalidEnvelope("OK response must not carry an error code")
    _check_pairs(resp.body, BODY_KEY_PATTERN)


def validate_status_body(resp: ResponseEnvelope) -> Tuple[bool, Optional[str]]:
    """GET-STATUS 的 OK 响应必须正好包含六个十进制（或 inf）字段"""
    keys = tuple(k for k, _ in resp.body)
    if sorted(keys) != sorted(STATUS_BODY_KEYS):
        return False, f"Unexpected status keys: {', '.join(keys)}"
    for key, value in resp.body:
        if not value.isdigit() and not (key == 'eta' and value == 'inf'):
            return False, f"Non-decimal value for {key}: {value!r}"
    return True, None


# ---------------------------------------------------------------------------
# 帧
# ---------------------------------------------------------------------------

def frame(payload: str) -> bytes:
    data = payload.encode('utf-8')
    if len(data) > MAX_FRAME_SIZE:
        raise FrameTooLong(f"Payload of {len(data)} bytes exceeds {MAX_FRAME_SIZE}")
    return HEADER.pack(len(data)) + data


def split_frame(buffer: bytes) -> Tuple[bytes, bytes]:
    """
    从缓冲区切出第一个完整帧

    Returns:
        Tuple[bytes, bytes]: (完整帧, 剩余字节)
    """
    if len(buffer) < HEADER.size:
        raise FrameTooShort(f"Need {HEADER.size} header bytes, have {len(buffer)}")
    (length,) = HEADER.unpack_from(buffer)
    if length > MAX_FRAME_SIZE:
        raise FrameTooLong(f"Declared length {length} exceeds {MAX_FRAME_SIZE}")
    end = HEADER.size + length
    if len(buffer) < end:
        raise FrameTooShort(f"Declared length {length}, have {len(buffer) - HEADER.size}")
    return buffer[:end], buffer[end:]


def unframe(data: bytes) -> str:
    """解析恰好一个完整帧并返回负载文本"""
    whole, rest = split_frame(data)
    if rest:
        raise FrameTooLong(f"{len(rest)} trailing bytes after frame")
    try:
        return whole[HEADER.size:].decode('utf-8')
    except UnicodeDecodeError as e:
        raise BadUtf8(str(e)) from e


def _render(first_line: str, pairs: Pairs) -> str:
    lines = [first_line] + [f"{k}={v}" for k, v in pairs]
    return '\n'.join(lines)


def _parse_pairs(lines: List[str]) -> Pairs:
    pairs = []
    for line in lines:
        if '=' not in line:
            raise InvalidEnvelope(f"Line without '=': {line!r}")
        key, value = line.split('=', 1)
        pairs.append((key, value))
    return tuple(pairs)


# ---------------------------------------------------------------------------
# 编解码
# ---------------------------------------------------------------------------

def encode_command(cmd: CommandEnvelope) -> bytes:
    validate_command(cmd)
    return frame(_render(cmd.kind.value, cmd.args))


def decode_command(data: bytes) -> CommandEnvelope:
    lines = unframe(data).split('\n')
    kind = CommandKind.from_wire(lines[0])
    cmd = CommandEnvelope(kind, _parse_pairs(lines[1:]))
    validate_command(cmd)
    return cmd


def encode_response(resp: ResponseEnvelope) -> bytes:
    validate_response(resp)
    if resp.status is ResponseStatus.OK:
        first = 'OK'
    else:
        first = f"ERR {resp.error_code.value}"
    return frame(_render(first, resp.body))


def decode_response(data: bytes) -> ResponseEnvelope:
    lines = unframe(data).split('\n')
    head = lines[0]
    if head == 'OK':
        resp = ResponseEnvelope(ResponseStatus.OK, None, _parse_pairs(lines[1:]))
    elif head.startswith('ERR '):
        code_name = head[4:]
        try:
            code = ErrorCode(code_name)
        except ValueError:
            raise InvalidEnvelope(f"Unknown error code: {code_name!r}") from None
        resp = ResponseEnvelope(ResponseStatus.ERR, code, _parse_pairs(lines[1:]))
    else:
        raise InvalidEnvelope(f"Bad response status line: {head!r}")
    validate_response(resp)
    return resp


def escape_text(text: str) -> str:
    """多行文本放进单个value：\\ → \\\\，换行 → \\n，回车 → \\r"""
    return text.replace('\\', '\\\\').replace('\n', '\\n').replace('\r', '\\r')


def unescape_text(value: str) -> str:
    out = []
    chars = iter(value)
    for ch in chars:
        if ch != '\\':
            out.append(ch)
            continue
        nxt = next(chars, '')
        out.append({'n': '\n', 'r': '\r', '\\': '\\'}.get(nxt, '\\' + nxt))
    return ''.join(out)


def error_code_for(exc: WireProtocolError) -> ErrorCode:
    """将解码异常映射为响应错误码"""
    if isinstance(exc, UnknownCommand):
        return ErrorCode.UNKNOWN_CMD
    return ErrorCode.BAD_ARGS
