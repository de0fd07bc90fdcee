#!/usr/bin/env python3
"""
Agent 启动传输
Commander 的 bootstrap 命令通过这里在各节点上启动 Agent

实现：
- LocalExecTransport：在本机以子进程启动 Agent（测试与单机集群）
- ExternalCommandTransport：执行外部命令（默认 ssh）在远端启动 Agent

扩展点：
- 其他远程执行方式（容器、作业调度器）
"""

import json
import logging
import subprocess
import sys
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from config.experiment import NodeSpec
from lib.utils import get_toolkit_root, is_service_running, terminate_process_tree
from src.wire_transport import probe_agent

logger = logging.getLogger(__name__)

DEFAULT_SSH_TEMPLATE = (
    'ssh', '-p', '{ssh_port}', '{login}',
    'nohup', '{agent_path}', 'agent', '--bind', '0.0.0.0', '--port', '{agent_port}',
    '--state-dir', '{state_dir}', '>/dev/null', '2>&1', '&',
)


class BootstrapError(Exception):
    pass


class BootstrapOutcome(Enum):
    STARTED = 'started'
    ALREADY_RUNNING = 'already-running'
    FAILED = 'failed'


@dataclass(frozen=True)
class BootstrapResult:
    node_id: str
    outcome: BootstrapOutcome
    message: str = ''

    @property
    def ok(self) -> bool:
        return self.outcome is not BootstrapOutcome.FAILED


class BootstrapTransport(ABC):
    """
    在一个节点上确保 Agent 正在监听

    子类只需要实现 launch；探测与等待由基类完成。
    """

    def __init__(self, startup_timeout: float = 10.0, probe_timeout: float = 1.0,
                 default_state_dir: Optional[Path] = None):
        self.startup_timeout = startup_timeout
        self.probe_timeout = probe_timeout
        self.default_state_dir = default_state_dir

    def state_dir(self, node: NodeSpec) -> Path:
        if node.state_dir:
            return Path(node.state_dir)
        base = self.default_state_dir or Path.home() / '.swarmforge' / 'state'
        return Path(base) / node.node_id

    @abstractmethod
    def launch(self, node: NodeSpec):
        """发起启动；不等待 Agent 就绪"""

    def is_running(self, node: NodeSpec) -> bool:
        return probe_agent(node.host, node.agent_port, timeout=self.probe_timeout)

    def ensure_agent(self, node: NodeSpec) -> BootstrapResult:
        if self.is_running(node):
            return BootstrapResult(node.node_id, BootstrapOutcome.ALREADY_RUNNING)
        try:
            self.launch(node)
        except (OSError, BootstrapError) as e:
            logger.error(f"Bootstrap of {node.node_id} failed: {e}")
            return BootstrapResult(node.node_id, BootstrapOutcome.FAILED, str(e))

        deadline = time.monotonic() + self.startup_timeout
        while time.monotonic() < deadline:
            if self.is_running(node):
                logger.info(f"Agent on {node.node_id} is up at {node.host}:{node.agent_port}")
                return BootstrapResult(node.node_id, BootstrapOutcome.STARTED)
            time.sleep(0.1)
        return BootstrapResult(node.node_id, BootstrapOutcome.FAILED,
                               f"agent did not answer on {node.host}:{node.agent_port} "
                               f"within {self.startup_timeout:g}s")

    def close(self):
        """释放由本传输启动的资源（默认无操作）"""


class LocalExecTransport(BootstrapTransport):
    """在本机启动 Agent 子进程；close() 时终止它们"""

    def __init__(self, python: str = sys.executable, stop_grace: float = 5.0, **kwargs):
        super().__init__(**kwargs)
        self.python = python
        self.stop_grace = stop_grace
        self.processes: Dict[str, subprocess.Popen] = {}

    def command_line(self, node: NodeSpec, state_dir: Path) -> List[str]:
        if node.agent_path:
            argv = [node.agent_path]
        else:
            argv = [self.python, str(get_toolkit_root() / 'src' / 'swarmforge.py')]
        argv += ['agent', '--bind', node.host, '--port', str(node.agent_port),
                 '--state-dir', str(state_dir)]
        if node.monitor_port is not None:
            argv += ['--monitor-port', str(node.monitor_port)]
        if node.client_paths:
            manifest = state_dir / 'clients.json'
            manifest.write_text(json.dumps(node.client_paths, indent=2, sort_keys=True), encoding='utf-8')
            argv += ['--clients', str(manifest)]
        return argv

    def launch(self, node: NodeSpec):
        state_dir = self.state_dir(node)
        state_dir.mkdir(parents=True, exist_ok=True)
        if is_service_running(state_dir / 'run', 'agent'):
            logger.info(f"Agent pid file present for {node.node_id}; waiting for it to listen")
            return
        argv = self.command_line(node, state_dir)
        with open(state_dir / 'agent.out', 'ab') as out:
            proc = subprocess.Popen(argv, stdout=out, stderr=subprocess.STDOUT,
                                    stdin=subprocess.DEVNULL, start_new_session=True)
        self.processes[node.node_id] = proc
        logger.info(f"Launched agent for {node.node_id}: pid {proc.pid}")

    def close(self):
        for node_id, proc in list(self.processes.items()):
            if proc.poll() is None:
                code = terminate_process_tree(proc.pid, self.stop_grace)
                logger.info(f"Agent for {node_id} terminated (exit code {code})")
            del self.processes[node_id]


class ExternalCommandTransport(BootstrapTransport):
    """
    通过外部命令启动 Agent（不经过本地shell）

    模板中的每个参数都用节点字段格式化：
    {host} {login} {ssh_port} {agent_port} {agent_path} {state_dir} {node_id}
    """

    def __init__(self, template: Sequence[str] = DEFAULT_SSH_TEMPLATE, **kwargs):
        super().__init__(**kwargs)
        self.template = tuple(template)
        self.processes: List[subprocess.Popen] = []

    def command_line(self, node: NodeSpec) -> List[str]:
        fields = {
            'host': node.host,
            'login': f"{node.username}@{node.host}" if node.username else node.host,
            'ssh_port': node.ssh_port,
            'agent_port': node.agent_port,
            'agent_path': node.agent_path or 'swarmforge',
            'state_dir': node.state_dir or f"~/.swarmforge/state/{node.node_id}",
            'node_id': node.node_id,
        }
        try:
            return [arg.format(**fields) for arg in self.template]
        except (KeyError, IndexError) as e:
            raise BootstrapError(f"Bad bootstrap template placeholder: {e}") from e

    def launch(self, node: NodeSpec):
        argv = self.command_line(node)
        logger.info(f"Bootstrapping {node.node_id}: {' '.join(argv)}")
        self.processes.append(subprocess.Popen(argv, stdin=subprocess.DEVNULL,
                                               stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
                                               start_new_session=True))

    def close(self):
        for proc in self.processes:
            if proc.poll() is None:
                proc.terminate()
        self.processes.clear()


def transport_for(kind: str, **kwargs) -> BootstrapTransport:
    if kind == 'local':
        return LocalExecTransport(**kwargs)
    if kind == 'ssh':
        return ExternalCommandTransport(**kwargs)
    raise BootstrapError(f"Unknown bootstrap transport: {kind!r}")
