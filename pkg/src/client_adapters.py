#!/usr/bin/env python3
"""
客户端适配层
Agent 与具体BitTorrent客户端之间的统一接口：每个适配器负责把启动参数翻译成命令行

扩展点：
- 新客户端：编写一个 build 函数并调用 AdapterRegistry.register
- 可执行文件路径：Agent 启动时通过 JSON 清单覆盖（来自 NodeSpec.client_paths）
"""

import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from src.log_parsers import VlogDialect

logger = logging.getLogger(__name__)

SHELL_METACHARACTERS = frozenset(';&|$`<>\\\'"*?!(){}\n\r')
BTSIM_SCRIPT = Path(__file__).parent / 'btsim.py'


class AdapterError(Exception):
    """适配器错误的基类"""


class DuplicateAdapter(AdapterError):
    pass


class UnknownAdapter(AdapterError):
    pass


class MissingPath(AdapterError):
    pass


class UnsafeArgument(AdapterError):
    pass


@dataclass(frozen=True)
class LaunchRequest:
    """一次客户端启动所需的全部参数；extra 为适配器专用的附加选项"""
    torrent: str
    download_dir: str
    slog: str
    vlog: str
    down_limit: Optional[int] = None
    up_limit: Optional[int] = None
    extra: Tuple[Tuple[str, str], ...] = ()

    def option(self, key: str, default: Optional[str] = None) -> Optional[str]:
        for k, v in self.extra:
            if k == key:
                return v
        return default


Builder = Callable[[Sequence[str], LaunchRequest], List[str]]


@dataclass(frozen=True)
class AdapterSpec:
    name: str
    executable: Tuple[str, ...]
    vlog_dialect: VlogDialect
    build: Builder = field(compare=False)

    def build_command_line(self, request: LaunchRequest) -> List[str]:
        for label, value in (('torrent', request.torrent), ('download dir', request.download_dir),
                             ('status log', request.slog), ('verbose log', request.vlog)):
            if not value:
                raise MissingPath(f"{self.name}: {label} path is required")
        argv = self.build(self.executable, request)
        check_argv(argv)
        return argv

    def with_executable(self, path: str) -> 'AdapterSpec':
        return AdapterSpec(self.name, executable_argv(path), self.vlog_dialect, self.build)


def check_argv(argv: Sequence[str]):
    """参数不经过shell执行，但仍拒绝含shell元字符的参数"""
    for arg in argv:
        bad = SHELL_METACHARACTERS.intersection(arg)
        if bad:
            raise UnsafeArgument(f"Argument {arg!r} contains {''.join(sorted(bad))!r}")


def executable_argv(path: str) -> Tuple[str, ...]:
    """.py 脚本用当前解释器启动"""
    if path.endswith('.py'):
        return (sys.executable, path)
    return (path,)


def kib(limit: int) -> str:
    return str(max(1, limit // 1024))


# ---------------------------------------------------------------------------
# 内置适配器
# ---------------------------------------------------------------------------

SIMULATED_OPTIONS = ('dialect', 'peer_id', 'roster', 'tick_delay')


def build_simulated(executable: Sequence[str], req: LaunchRequest) -> List[str]:
    argv = list(executable)
    argv += ['--torrent', req.torrent, '--role', req.option('role', 'leecher')]
    if req.down_limit is not None:
        argv += ['--down', str(req.down_limit)]
    if req.up_limit is not None:
        argv += ['--up', str(req.up_limit)]
    argv += ['--slog', req.slog, '--vlog', req.vlog, '--download-dir', req.download_dir]
    for key in SIMULATED_OPTIONS:
        value = req.option(key)
        if value is not None:
            argv += ['--' + key.replace('_', '-'), value]
    return argv


def build_hrktorrent(executable: Sequence[str], req: LaunchRequest) -> List[str]:
    # libtorrent 系客户端：限速单位 KB/s，torrent 路径放在最后
    argv = list(executable)
    argv += ['--dir', req.download_dir, '--status-log', req.slog, '--verbose-log', req.vlog]
    if req.down_limit is not None:
        argv += ['--maxdown', kib(req.down_limit)]
    if req.up_limit is not None:
        argv += ['--maxup', kib(req.up_limit)]
    argv.append(req.torrent)
    return argv


def build_tribler(executable: Sequence[str], req: LaunchRequest) -> List[str]:
    argv = list(executable)
    argv += ['--torrent', req.torrent, '--output-dir', req.download_dir,
             '--status-file', req.slog, '--verbose-file', req.vlog]
    if req.down_limit is not None:
        argv += ['--max-download-rate', kib(req.down_limit)]
    if req.up_limit is not None:
        argv += ['--max-upload-rate', kib(req.up_limit)]
    return argv


def builtin_specs() -> List[AdapterSpec]:
    return [
        AdapterSpec('simulated', executable_argv(str(BTSIM_SCRIPT)),
                    VlogDialect.UNIFIED_FILE, build_simulated),
        AdapterSpec('hrktorrent', ('hrktorrent',), VlogDialect.PER_PEER_FILES, build_hrktorrent),
        AdapterSpec('tribler', ('tribler-cli',), VlogDialect.UNIFIED_FILE, build_tribler),
    ]


# ---------------------------------------------------------------------------
# 注册表
# ---------------------------------------------------------------------------

class AdapterRegistry:
    """名称 → AdapterSpec；freeze 之后只读"""

    def __init__(self):
        self._specs: Dict[str, AdapterSpec] = {}
        self._frozen = False

    def register(self, spec: AdapterSpec):
        if self._frozen:
            raise AdapterError('Registry is frozen')
        if spec.name in self._specs:
            raise DuplicateAdapter(f"Adapter already registered: {spec.name}")
        self._specs[spec.name] = spec

    def resolve(self, name: str) -> AdapterSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise UnknownAdapter(f"Unknown client adapter: {name!r}") from None

    def names(self) -> List[str]:
        return sorted(self._specs)

    def freeze(self) -> 'AdapterRegistry':
        self._frozen = True
        return self

    def __contains__(self, name: str) -> bool:
        return name in self._specs


def default_registry(client_paths: Optional[Dict[str, str]] = None) -> AdapterRegistry:
    """内置适配器 + 可执行文件路径覆盖"""
    client_paths = client_paths or {}
    builtins = {spec.name: spec for spec in builtin_specs()}
    unknown = set(client_paths) - set(builtins)
    if unknown:
        raise UnknownAdapter(f"No adapter for client(s): {', '.join(sorted(unknown))}")

    registry = AdapterRegistry()
    for name, spec in builtins.items():
        if name in client_paths:
            spec = spec.with_executable(client_paths[name])
            logger.info(f"Adapter {name} -> {' '.join(spec.executable)}")
        registry.register(spec)
    return registry.freeze()


def load_manifest(path: Path) -> AdapterRegistry:
    """读取 {"client-name": "/path/to/executable", ...} 形式的清单"""
    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)
    if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
        raise AdapterError(f"Manifest {path} must map client names to paths")
    return default_registry(data)


def register_adapter(registry: AdapterRegistry, spec: AdapterSpec):
    registry.register(spec)


def resolve_adapter(registry: AdapterRegistry, name: str) -> AdapterSpec:
    return registry.resolve(name)


if __name__ == "__main__":
    registry = default_registry()
    for name in registry.names():
        spec = registry.resolve(name)
        print(f"{name}: {spec.vlog_dialect.value} {' '.join(spec.executable)}")
