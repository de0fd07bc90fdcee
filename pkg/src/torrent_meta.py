#!/usr/bin/env python3
"""
torrent元信息
单文件 .torrent 的读写（bencode）
"""

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import bencodepy

DEFAULT_PIECE_SIZE = 262144


class TorrentError(Exception):
    pass


@dataclass(frozen=True)
class TorrentInfo:
    name: str
    length: int
    piece_length: int
    info_hash: str
    announce: str = ''

    @property
    def num_pieces(self) -> int:
        return math.ceil(self.length / self.piece_length)


def make_torrent(path: Path, name: str, length: int, piece_length: int = DEFAULT_PIECE_SIZE,
                 payload: Optional[bytes] = None, announce: str = 'http://127.0.0.1:6969/announce'
                 ) -> TorrentInfo:
    """
    写出一个单文件torrent

    payload 为 None 时按全零内容计算块哈希（模拟实验不关心内容）。
    """
    if length <= 0 or piece_length <= 0:
        raise TorrentError('length and piece_length must be positive')
    pieces = bytearray()
    for offset in range(0, length, piece_length):
        size = min(piece_length, length - offset)
        chunk = payload[offset:offset + size] if payload is not None else bytes(size)
        pieces += hashlib.sha1(chunk).digest()

    info = {
        b'name': name.encode('utf-8'),
        b'length': length,
        b'piece length': piece_length,
        b'pieces': bytes(pieces),
    }
    metainfo = {b'announce': announce.encode('utf-8'), b'info': info}
    Path(path).write_bytes(bencodepy.encode(metainfo))
    return TorrentInfo(name, length, piece_length,
                       hashlib.sha1(bencodepy.encode(info)).hexdigest(), announce)


def read_torrent(path: Path) -> TorrentInfo:
    data = Path(path).read_bytes()
    try:
        decoded = bencodepy.decode(data)
    except Exception as e:
        raise TorrentError(f"Cannot decode torrent {path}: {e}") from e
    try:
        info = decoded[b'info']
        return TorrentInfo(
            name=info[b'name'].decode('utf-8'),
            length=int(info[b'length']),
            piece_length=int(info[b'piece length']),
            info_hash=hashlib.sha1(bencodepy.encode(info)).hexdigest(),
            announce=decoded.get(b'announce', b'').decode('utf-8'),
        )
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise TorrentError(f"Not a single-file torrent: {path}: {e}") from e
