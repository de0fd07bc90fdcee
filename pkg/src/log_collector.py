#!/usr/bin/env python3
"""
日志收集
把 Agent 生成的会话归档取回到 Commander 的运行目录并解包
"""

import logging
import os
import shutil
import tarfile
from abc import ABC, abstractmethod
from pathlib import Path
from typing import List

import requests

from config.experiment import NodeSpec

logger = logging.getLogger(__name__)

CHUNK_SIZE = 65536


class CollectionError(Exception):
    pass


class LogCollector(ABC):
    """从节点取回一个归档文件"""

    @abstractmethod
    def fetch(self, node: NodeSpec, remote_path: str, dest_dir: Path) -> Path:
        """
        Args:
            remote_path: ARCHIVE 响应中的 archive 路径（节点视角）
            dest_dir: 本地目标目录

        Returns:
            Path: 本地归档文件
        """


class SharedFilesystemCollector(LogCollector):
    """节点与 Commander 共享文件系统时直接复制"""

    def fetch(self, node: NodeSpec, remote_path: str, dest_dir: Path) -> Path:
        source = Path(remote_path)
        dest_dir.mkdir(parents=True, exist_ok=True)
        target = dest_dir / source.name
        try:
            shutil.copy2(source, target)
        except OSError as e:
            raise CollectionError(f"Cannot copy {source} from {node.node_id}: {e}") from e
        return target


class HttpArchiveCollector(LogCollector):
    """通过 Agent 的监视接口 /archives/<name> 下载"""

    def __init__(self, timeout: float = 30.0):
        self.timeout = timeout

    def fetch(self, node: NodeSpec, remote_path: str, dest_dir: Path) -> Path:
        if node.monitor_port is None:
            raise CollectionError(f"Node {node.node_id} has no monitor-port")
        name = Path(remote_path).name
        url = f"http://{node.host}:{node.monitor_port}/archives/{name}"
        dest_dir.mkdir(parents=True, exist_ok=True)
        target = dest_dir / name
        partial = target.with_name(name + '.partial')
        try:
            with requests.get(url, stream=True, timeout=self.timeout) as response:
                response.raise_for_status()
                # 传输编码会改变字节数，此时不核对长度
                expected = None if response.headers.get('Content-Encoding') \
                    else response.headers.get('Content-Length')
                written = 0
                with open(partial, 'wb') as f:
                    for chunk in response.iter_content(chunk_size=CHUNK_SIZE):
                        f.write(chunk)
                        written += len(chunk)
            if expected is not None and written != int(expected):
                raise CollectionError(f"Download of {url} truncated: {written} of {expected} bytes")
            os.replace(partial, target)
        except (requests.RequestException, OSError) as e:
            partial.unlink(missing_ok=True)
            raise CollectionError(f"Download of {url} failed: {e}") from e
        except CollectionError:
            partial.unlink(missing_ok=True)
            raise
        logger.info(f"Downloaded {url} ({target.stat().st_size} bytes)")
        return target


def extract_archive(archive: Path, dest_dir: Path) -> List[Path]:
    """解包到 dest_dir；拒绝指向目录外的成员"""
    dest_dir.mkdir(parents=True, exist_ok=True)
    root = dest_dir.resolve()
    try:
        with tarfile.open(archive, 'r:gz') as tar:
            members = tar.getmembers()
            for member in members:
                target = (root / member.name).resolve()
                if root not in target.parents or not (member.isfile() or member.isdir()):
                    raise CollectionError(f"Refusing archive member {member.name!r}")
            tar.extractall(root, members=members)
    except (OSError, tarfile.TarError) as e:
        raise CollectionError(f"Cannot extract {archive}: {e}") from e
    return sorted(root / m.name for m in members if m.isfile())


def collector_for(kind: str, timeout: float = 30.0) -> LogCollector:
    if kind == 'shared':
        return SharedFilesystemCollector()
    if kind == 'http':
        return HttpArchiveCollector(timeout)
    raise CollectionError(f"Unknown collector: {kind!r}")
