#!/usr/bin/env python3
"""
线协议的TCP传输
在socket上读写长度前缀帧，以及Commander侧使用的Agent客户端
"""

import logging
import socket
from typing import Optional

from src.wire_protocol import (
    HEADER, MAX_FRAME_SIZE, CommandEnvelope, CommandKind, FrameTooLong, FrameTooShort,
    ResponseEnvelope, WireProtocolError, decode_response, encode_command,
)

logger = logging.getLogger(__name__)


def recv_exactly(sock: socket.socket, length: int) -> bytes:
    """读取恰好 length 字节；对端提前关闭时返回已读到的部分"""
    data = b''
    while len(data) < length:
        more = sock.recv(length - len(data))
        if not more:
            break
        data += more
    return data


def recv_frame(sock: socket.socket) -> Optional[bytes]:
    """
    从socket读取一个完整帧（含头部）

    Returns:
        Optional[bytes]: 完整帧；在帧边界处连接关闭时返回 None
    """
    header = recv_exactly(sock, HEADER.size)
    if not header:
        return None
    if len(header) < HEADER.size:
        raise FrameTooShort(f"Connection closed inside frame header ({len(header)} bytes)")
    (length,) = HEADER.unpack(header)
    if length > MAX_FRAME_SIZE:
        raise FrameTooLong(f"Declared length {length} exceeds {MAX_FRAME_SIZE}")
    payload = recv_exactly(sock, length)
    if len(payload) < length:
        raise FrameTooShort(f"Connection closed after {len(payload)} of {length} bytes")
    return header + payload


def send_frame(sock: socket.socket, data: bytes):
    sock.sendall(data)


class AgentClient:
    """
    与单个Agent的连接

    每次 request 发送一个命令帧并等待一个响应帧；连接可复用。
    """

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.host = host
        self.port = port
        self.timeout = timeout
        self._sock: Optional[socket.socket] = None

    def connect(self) -> 'AgentClient':
        if self._sock is None:
            self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
            logger.debug(f"Connected to agent {self.host}:{self.port}")
        return self

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def __enter__(self) -> 'AgentClient':
        return self.connect()

    def __exit__(self, *exc_info):
        self.close()

    def request(self, cmd: CommandEnvelope) -> ResponseEnvelope:
        self.connect()
        send_frame(self._sock, encode_command(cmd))
        data = recv_frame(self._sock)
        if data is None:
            self.close()
            raise ConnectionError(f"Agent {self.host}:{self.port} closed the connection")
        return decode_response(data)


def probe_agent(host: str, port: int, timeout: float = 1.0) -> bool:
    """通过 GET-CLIENTS 确认Agent是否在监听"""
    try:
        with AgentClient(host, port, timeout=timeout) as client:
            return client.request(CommandEnvelope(CommandKind.GET_CLIENTS)).is_ok
    except (OSError, ConnectionError, WireProtocolError):
        return False
