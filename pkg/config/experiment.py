#!/usr/bin/env python3
"""
实验配置模块
解析并校验两个XML描述文件：节点清单（nodes）与群体计划（swarm）

nodes:
    <nodes>
      <node id="p2p-01" host="10.0.0.1" agent-port="5000" ssh-port="22" user="p2p"
            agent-path="/opt/swarmforge/bin/swarmforge">
        <client name="simulated" path="/opt/swarmforge/bin/btsim"/>
      </node>
    </nodes>

swarm:
    <swarm id="exp-1" torrent="/srv/test.torrent" seed="42">
      <peer node="p2p-01" client="simulated" role="seeder" down="512KB" up="256KB"
            ddir="/srv/dl" slog="/srv/logs/p1.slog" vlog="/srv/logs/p1.vlog" start="0" stop="120"/>
    </swarm>
"""

import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

DEFAULT_AGENT_PORT = 5000
DEFAULT_SSH_PORT = 22

TOKEN_PATTERN = re.compile(r'^[A-Za-z0-9_.\-]+$')
LIMIT_PATTERN = re.compile(r'^(\d+)\s*(B|KB|MB|GB)?(/s)?$', re.IGNORECASE)
UNIT_BYTES = {'B': 1, 'KB': 1024, 'MB': 1024 ** 2, 'GB': 1024 ** 3}


class ConfigError(Exception):
    """配置错误的基类"""


class ParseError(ConfigError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DuplicateNodeId(ConfigError):
    pass


class InvalidPort(ConfigError):
    pass


class UnknownNodeId(ConfigError):
    pass


class UnknownClient(ConfigError):
    pass


class NoSeeder(ConfigError):
    pass


class BadLimit(ConfigError):
    pass


class Role(Enum):
    SEEDER = 'seeder'
    LEECHER = 'leecher'


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    host: str
    agent_port: int = DEFAULT_AGENT_PORT
    ssh_port: int = DEFAULT_SSH_PORT
    username: str = ''
    agent_path: str = ''
    client_paths: Dict[str, str] = field(default_factory=dict)
    state_dir: Optional[str] = None
    monitor_port: Optional[int] = None

    def __hash__(self):
        return hash(self.node_id)


@dataclass(frozen=True)
class PlacementSpec:
    node_id: str
    client: str
    role: Role
    download_dir: str
    slog_path: str
    vlog_path: str
    down_limit: Optional[int] = None
    up_limit: Optional[int] = None
    start_offset: int = 0
    stop_offset: Optional[int] = None
    peer_id: str = ''
    addr: str = ''
    dialect: Optional[str] = None


@dataclass(frozen=True)
class SwarmSpec:
    swarm_id: str
    torrent_path: str
    placements: Tuple[PlacementSpec, ...] = ()
    seed: int = 0

    @property
    def num_seeders(self) -> int:
        return sum(1 for p in self.placements if p.role is Role.SEEDER)

    @property
    def num_leechers(self) -> int:
        return sum(1 for p in self.placements if p.role is Role.LEECHER)

    def placements_on(self, node_id: str) -> List[PlacementSpec]:
        return [p for p in self.placements if p.node_id == node_id]


# ---------------------------------------------------------------------------
# 解析辅助
# ---------------------------------------------------------------------------

def _parse_document(document: str, root_tag: str) -> ET.Element:
    try:
        root = ET.fromstring(document)
    except ET.ParseError as e:
        line = e.position[0] if getattr(e, 'position', None) else 0
        raise ParseError(line, str(e)) from e
    if root.tag != root_tag:
        raise ParseError(1, f"expected <{root_tag}> root element, got <{root.tag}>")
    return root


def _line_of(document: str, needle: str) -> int:
    """尽力定位属性值所在的行号（ElementTree不保留行号）"""
    index = document.find(needle)
    return document.count('\n', 0, index) + 1 if index >= 0 else 0


def _required(elem: ET.Element, name: str, document: str) -> str:
    value = elem.get(name)
    if value is None or value == '':
        ident = elem.get('id') or elem.get('node') or ''
        raise ParseError(_line_of(document, f'"{ident}"') if ident else 0,
                         f"<{elem.tag}> is missing attribute {name!r}")
    return value


def _port(value: Optional[str], default: Optional[int], what: str) -> Optional[int]:
    if value is None:
        return default
    try:
        port = int(value)
    except ValueError:
        raise InvalidPort(f"{what}: not a number: {value!r}") from None
    if not 1 <= port <= 65535:
        raise InvalidPort(f"{what}: {port} outside 1-65535")
    return port


def parse_limit(value: Optional[str]) -> Optional[int]:
    """
    将人类可读的速率转换为 bytes/s

    '512KB' / '512KB/s' → 524288；纯数字视为 bytes/s；'unlimited' 或缺省 → None
    """
    if value is None or value.strip().lower() in ('', 'unlimited', 'none'):
        return None
    match = LIMIT_PATTERN.match(value.strip())
    if not match:
        raise BadLimit(f"Unrecognised rate limit: {value!r}")
    amount = int(match.group(1)) * UNIT_BYTES[(match.group(2) or 'B').upper()]
    if amount <= 0:
        raise BadLimit(f"Rate limit must be positive: {value!r}")
    return amount


def format_limit(limit: Optional[int]) -> str:
    if limit is None:
        return 'unlimited'
    if limit % 1024 == 0:
        return f"{limit // 1024}KB"
    return str(limit)


def _offset(value: Optional[str], what: str) -> Optional[int]:
    if value is None or value == '':
        return None
    try:
        offset = int(value)
    except ValueError:
        raise ConfigError(f"{what} must be an integer number of seconds: {value!r}") from None
    if offset < 0:
        raise ConfigError(f"{what} must be >= 0: {offset}")
    return offset


def synthetic_addr(index: int) -> str:
    """为第 index 个放置生成合成的 ip:port"""
    return f"10.0.{index // 250}.{index % 250 + 1}:6881"


# ---------------------------------------------------------------------------
# nodes
# ---------------------------------------------------------------------------

def load_nodes(document: str) -> List[NodeSpec]:
    """解析节点清单，顺序与文档一致"""
    root = _parse_document(document, 'nodes')
    nodes: List[NodeSpec] = []
    seen = set()
    for elem in root.findall('node'):
        node_id = _required(elem, 'id', document)
        if not TOKEN_PATTERN.match(node_id):
            raise ParseError(_line_of(document, f'"{node_id}"'), f"bad node id {node_id!r}")
        if node_id in seen:
            raise DuplicateNodeId(f"Duplicate node id: {node_id}")
        seen.add(node_id)

        client_paths = {}
        for client in elem.findall('client'):
            client_paths[_required(client, 'name', document)] = _required(client, 'path', document)
        if not client_paths:
            raise ParseError(_line_of(document, f'"{node_id}"'),
                             f"node {node_id} declares no <client> paths")

        nodes.append(NodeSpec(
            node_id=node_id,
            host=_required(elem, 'host', document),
            agent_port=_port(elem.get('agent-port'), DEFAULT_AGENT_PORT, f"{node_id} agent-port"),
            ssh_port=_port(elem.get('ssh-port'), DEFAULT_SSH_PORT, f"{node_id} ssh-port"),
            username=elem.get('user', ''),
            agent_path=elem.get('agent-path', ''),
            client_paths=client_paths,
            state_dir=elem.get('state-dir'),
            monitor_port=_port(elem.get('monitor-port'), None, f"{node_id} monitor-port"),
        ))
    return nodes


def dump_nodes(nodes: List[NodeSpec]) -> str:
    root = ET.Element('nodes')
    for node in nodes:
        attrs = {
            'id': node.node_id,
            'host': node.host,
            'agent-port': str(node.agent_port),
            'ssh-port': str(node.ssh_port),
            'user': node.username,
            'agent-path': node.agent_path,
        }
        if node.state_dir is not None:
            attrs['state-dir'] = node.state_dir
        if node.monitor_port is not None:
            attrs['monitor-port'] = str(node.monitor_port)
        elem = ET.SubElement(root, 'node', attrs)
        for name, path in node.client_paths.items():
            ET.SubElement(elem, 'client', {'name': name, 'path': path})
    ET.indent(root)
    return ET.tostring(root, encoding='unicode') + '\n'


# ---------------------------------------------------------------------------
# swarm
# ---------------------------------------------------------------------------

def load_swarm(document: str, inventory: List[NodeSpec]) -> SwarmSpec:
    """解析群体计划并对照节点清单校验"""
    root = _parse_document(document, 'swarm')
    torrent = _required(root, 'torrent', document)
    by_id = {node.node_id: node for node in inventory}

    placements: List[PlacementSpec] = []
    for index, elem in enumerate(root.findall('peer')):
        node_id = _required(elem, 'node', document)
        node = by_id.get(node_id)
        if node is None:
            raise UnknownNodeId(f"Placement {index} references unknown node {node_id!r}")
        client = _required(elem, 'client', document)
        if client not in node.client_paths:
            raise UnknownClient(f"Node {node_id} has no path for client {client!r}")

        role_name = _required(elem, 'role', document)
        try:
            role = Role(role_name)
        except ValueError:
            raise ConfigError(f"Placement {index}: role must be seeder or leecher, got {role_name!r}") from None

        start = _offset(elem.get('start'), f"placement {index} start") or 0
        stop = _offset(elem.get('stop'), f"placement {index} stop")
        if stop is not None and stop <= start:
            raise ConfigError(f"Placement {index}: stop ({stop}) must be after start ({start})")

        dialect = elem.get('dialect')
        if dialect is not None and dialect not in ('unified', 'per-peer'):
            raise ConfigError(f"Placement {index}: dialect must be unified or per-peer")

        placements.append(PlacementSpec(
            node_id=node_id,
            client=client,
            role=role,
            download_dir=_required(elem, 'ddir', document),
            slog_path=_required(elem, 'slog', document),
            vlog_path=_required(elem, 'vlog', document),
            down_limit=parse_limit(elem.get('down')),
            up_limit=parse_limit(elem.get('up')),
            start_offset=start,
            stop_offset=stop,
            peer_id=elem.get('id') or f"p{index:03d}",
            addr=elem.get('addr') or synthetic_addr(index),
            dialect=dialect,
        ))

    ids = [p.peer_id for p in placements]
    if len(set(ids)) != len(ids):
        raise ConfigError("Duplicate peer ids in swarm")
    if not any(p.role is Role.SEEDER for p in placements):
        raise NoSeeder("Swarm has no seeder")

    try:
        seed = int(root.get('seed', '0'))
    except ValueError:
        raise ConfigError(f"seed must be an integer: {root.get('seed')!r}") from None

    return SwarmSpec(
        swarm_id=root.get('id', 'swarm'),
        torrent_path=torrent,
        placements=tuple(placements),
        seed=seed,
    )


def dump_swarm(swarm: SwarmSpec) -> str:
    root = ET.Element('swarm', {'id': swarm.swarm_id, 'torrent': swarm.torrent_path,
                                'seed': str(swarm.seed)})
    for p in swarm.placements:
        attrs = {
            'id': p.peer_id,
            'node': p.node_id,
            'client': p.client,
            'role': p.role.value,
            'addr': p.addr,
            'down': format_limit(p.down_limit),
            'up': format_limit(p.up_limit),
            'ddir': p.download_dir,
            'slog': p.slog_path,
            'vlog': p.vlog_path,
            'start': str(p.start_offset),
        }
        if p.stop_offset is not None:
            attrs['stop'] = str(p.stop_offset)
        if p.dialect is not None:
            attrs['dialect'] = p.dialect
        ET.SubElement(root, 'peer', attrs)
    ET.indent(root)
    return ET.tostring(root, encoding='unicode') + '\n'


def load_nodes_file(path: str) -> List[NodeSpec]:
    with open(path, 'r', encoding='utf-8') as f:
        return load_nodes(f.read())


def load_swarm_file(path: str, inventory: List[NodeSpec]) -> SwarmSpec:
    with open(path, 'r', encoding='utf-8') as f:
        return load_swarm(f.read(), inventory)
