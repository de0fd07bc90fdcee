#!/usr/bin/env python3
"""
Commander（操作员CLI）
读取节点清单与群体描述，启动 Agent，把命令分发到多个节点，并驱动完整的实验场景

此模块负责以下职责：
1. 目标选择：节点ID与会话ID
2. 扇出：不同节点并发，同一节点内顺序；单个节点失败不影响其他节点
3. 场景执行：启动 → 轮询 → 停止 → 归档 → 收集 → 入库 → 摘要

输出格式（每次交换一行）：
    node_id<TAB>status=OK<TAB>key=value...
    node_id<TAB>status=ERR<TAB>code=...<TAB>message=...

扩展点：
- 新命令：在 Commander 中添加 cmd_* 方法并在 COMMANDS 中注册
- 收集方式：src/log_collector.py
- 启动方式：src/bootstrap.py
"""

import argparse
import json
import logging
import math
import shutil
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

sys.path.insert(0, str(Path(__file__).parent.parent))

from config.experiment import (
    ConfigError, NodeSpec, PlacementSpec, Role, SwarmSpec, UnknownNodeId, load_nodes_file, load_swarm_file,
)
from config.settings import SettingsManager
from lib.utils import setup_logging
from src.analysis import AnalysisError, download_phase, download_window, plateau_summary, speed_series
from src.bootstrap import BootstrapTransport, ExternalCommandTransport, LocalExecTransport
from src.ingest import PeerLogs, ingest_experiment
from src.log_collector import CollectionError, LogCollector, collector_for, extract_archive
from src.log_parsers import VlogDialect, to_epoch
from src.storage import StorageError, SwarmStore
from src.swarm_simulator import UNLIMITED_RATE, SimConfig, SimPeer, dump_roster
from src.torrent_meta import TorrentError, TorrentInfo, read_torrent
from src.wire_protocol import CommandEnvelope, CommandKind, WireProtocolError
from src.wire_transport import AgentClient

logger = logging.getLogger(__name__)

SIMULATED_CLIENT = 'simulated'
TIMEOUT_FACTOR = 10
STOP_SLACK_TICKS = 2
DRAIN_TICKS = 3
DEFAULT_TIMEOUT_GRACE = 30.0


class CommanderError(Exception):
    pass


class ScenarioTimeout(CommanderError):
    pass


class MissingSwarm(CommanderError):
    pass


# ---------------------------------------------------------------------------
# 目标选择与结果
# ---------------------------------------------------------------------------

def _split_ids(text: Optional[str]) -> Optional[FrozenSet[str]]:
    if text is None or text.strip().upper() == 'ALL':
        return None
    return frozenset(part.strip() for part in text.split(',') if part.strip())


@dataclass(frozen=True)
class TargetSelector:
    """node_ids 为 None 表示全部节点；session_ids 为 None 表示节点上的全部会话"""
    node_ids: Optional[FrozenSet[str]] = None
    session_ids: Optional[FrozenSet[int]] = None

    @classmethod
    def parse(cls, nodes_filter: Optional[str] = None, ids: Optional[str] = None) -> 'TargetSelector':
        sessions = _split_ids(ids)
        try:
            session_ids = None if sessions is None else frozenset(int(s) for s in sessions)
        except ValueError:
            raise CommanderError(f"Session ids must be integers: {ids!r}") from None
        return cls(_split_ids(nodes_filter), session_ids)

    def resolve(self, inventory: Sequence[NodeSpec]) -> List[NodeSpec]:
        if self.node_ids is None:
            return list(inventory)
        known = {n.node_id for n in inventory}
        unknown = sorted(self.node_ids - known)
        if unknown:
            raise UnknownNodeId(f"Unknown node id(s): {', '.join(unknown)}")
        return [n for n in inventory if n.node_id in self.node_ids]


@dataclass(frozen=True)
class NodeResult:
    node_id: str
    ok: bool
    body: Tuple[Tuple[str, str], ...] = ()
    error: Optional[str] = None
    code: Optional[str] = None

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        return dict(self.body).get(key, default)

    def render(self) -> str:
        fields = ['status=OK'] if self.ok else ['status=ERR', f"code={self.code or 'FAILED'}"]
        fields += [f"{k}={v}" for k, v in self.body]
        if self.error:
            fields.append(f"message={self.error}")
        return '\t'.join([self.node_id] + fields)


def exit_code(results: Sequence[NodeResult]) -> int:
    """没有任何目标也算失败"""
    return 0 if results and all(r.ok for r in results) else 1


# ---------------------------------------------------------------------------
# Commander
# ---------------------------------------------------------------------------

class Commander:
    """
    对节点清单执行命令

    Args:
        nodes: 节点清单
        swarm: 群体描述（start 与 run 需要）
        transport: bootstrap 使用的启动传输
    """

    def __init__(self, nodes: Sequence[NodeSpec], swarm: Optional[SwarmSpec] = None,
                 transport: Optional[BootstrapTransport] = None, connect_timeout: float = 5.0,
                 stop_grace: float = 5.0, max_workers: int = 16):
        self.nodes = list(nodes)
        self.swarm = swarm
        self.transport = transport or LocalExecTransport(stop_grace=stop_grace)
        self.connect_timeout = connect_timeout
        self.request_timeout = connect_timeout + stop_grace + 1.0
        self.max_workers = max_workers

    def node(self, node_id: str) -> NodeSpec:
        for node in self.nodes:
            if node.node_id == node_id:
                return node
        raise UnknownNodeId(f"Unknown node id: {node_id}")

    # -- fan-out -------------------------------------------------------------

    def fan_out(self, selector: TargetSelector,
                work: Callable[[NodeSpec, AgentClient], List[NodeResult]]) -> List[NodeResult]:
        """每个节点一个工作线程；结果按节点清单顺序返回"""
        targets = selector.resolve(self.nodes)
        if not targets:
            return []

        def run(node: NodeSpec) -> List[NodeResult]:
            client = AgentClient(node.host, node.agent_port, timeout=self.request_timeout)
            try:
                return work(node, client)
            except (OSError, ConnectionError) as e:
                logger.warning(f"{node.node_id}: {e}")
                return [NodeResult(node.node_id, False, error=str(e), code='UNREACHABLE')]
            except WireProtocolError as e:
                return [NodeResult(node.node_id, False, error=str(e), code='PROTOCOL')]
            finally:
                client.close()

        with ThreadPoolExecutor(max_workers=min(self.max_workers, len(targets))) as pool:
            per_node = list(pool.map(run, targets))
        return [result for results in per_node for result in results]

    @staticmethod
    def exchange(node: NodeSpec, client: AgentClient, cmd: CommandEnvelope,
                 label: Sequence[Tuple[str, str]] = ()) -> NodeResult:
        resp = client.request(cmd)
        if resp.is_ok:
            return NodeResult(node.node_id, True, tuple(label) + resp.body)
        return NodeResult(node.node_id, False, tuple(label), error=resp.get('message', ''),
                          code=resp.error_code.value)

    def _session_ids(self, selector: TargetSelector, node: NodeSpec,
                     client: AgentClient) -> Tuple[List[int], Optional[NodeResult]]:
        """未指定会话时取 GET-CLIENTS 的列表；列表请求失败则返回该失败结果"""
        if selector.session_ids is not None:
            return sorted(selector.session_ids), None
        listing = self.exchange(node, client, CommandEnvelope(CommandKind.GET_CLIENTS))
        if not listing.ok:
            return [], listing
        return [int(s) for s in (listing.get('clients') or '').split(',') if s], None

    def _per_session(self, selector: TargetSelector, kind: CommandKind,
                     extra: Callable[[int], Dict[str, str]] = lambda sid: {}) -> List[NodeResult]:
        def work(node: NodeSpec, client: AgentClient) -> List[NodeResult]:
            sids, failure = self._session_ids(selector, node, client)
            if failure is not None:
                return [failure]
            results = []
            for sid in sids:
                cmd = CommandEnvelope.build(kind, ID=sid, **extra(sid))
                results.append(self.exchange(node, client, cmd, [('session', str(sid))]))
            if not results:
                results.append(NodeResult(node.node_id, True, (('sessions', '0'),)))
            return results
        return self.fan_out(selector, work)

    # -- commands ------------------------------------------------------------

    def cmd_bootstrap(self, selector: TargetSelector) -> List[NodeResult]:
        targets = selector.resolve(self.nodes)
        if not targets:
            return []
        with ThreadPoolExecutor(max_workers=min(self.max_workers, len(targets))) as pool:
            outcomes = list(pool.map(self.transport.ensure_agent, targets))
        return [NodeResult(o.node_id, o.ok, (('bootstrap', o.outcome.value),),
                           error=o.message or None, code=None if o.ok else 'BOOTSTRAP')
                for o in outcomes]

    def start_args(self, placement: PlacementSpec, roster: Optional[Path] = None,
                   tick_delay: Optional[float] = None) -> Dict[str, str]:
        if self.swarm is None:
            raise MissingSwarm('A swarm description is required to start clients')
        args = {
            'TORRENT': str(Path(self.swarm.torrent_path).resolve()),
            'DOWN_DIR': placement.download_dir,
            'SLOG': placement.slog_path,
            'VLOG': placement.vlog_path,
            'CLIENT': placement.client,
        }
        if placement.down_limit is not None:
            args['DOWN'] = str(placement.down_limit)
        if placement.up_limit is not None:
            args['UP'] = str(placement.up_limit)
        if placement.client == SIMULATED_CLIENT:
            args['ROLE'] = placement.role.value
            args['PEER_ID'] = placement.peer_id
            if placement.dialect:
                args['DIALECT'] = placement.dialect
            if roster is not None:
                args['ROSTER'] = str(roster)
            if tick_delay is not None:
                args['TICK_DELAY'] = f"{tick_delay:g}"
        return args

    def start_placement(self, placement: PlacementSpec, roster: Optional[Path] = None,
                        tick_delay: Optional[float] = None) -> NodeResult:
        node = self.node(placement.node_id)
        cmd = CommandEnvelope(CommandKind.START_CLIENT,
                              tuple(self.start_args(placement, roster, tick_delay).items()))
        try:
            with AgentClient(node.host, node.agent_port, timeout=self.request_timeout) as client:
                return self.exchange(node, client, cmd, [('peer', placement.peer_id)])
        except (OSError, ConnectionError, WireProtocolError) as e:
            return NodeResult(node.node_id, False, (('peer', placement.peer_id),), str(e), 'UNREACHABLE')

    def cmd_start(self, selector: TargetSelector, roster: Optional[Path] = None,
                  tick_delay: Optional[float] = None) -> List[NodeResult]:
        if self.swarm is None:
            raise MissingSwarm('A swarm description is required to start clients')

        def work(node: NodeSpec, client: AgentClient) -> List[NodeResult]:
            results = []
            for placement in self.swarm.placements_on(node.node_id):
                cmd = CommandEnvelope(CommandKind.START_CLIENT,
                                      tuple(self.start_args(placement, roster, tick_delay).items()))
                results.append(self.exchange(node, client, cmd, [('peer', placement.peer_id)]))
            return results
        return self.fan_out(selector, work)

    def cmd_stop(self, selector: TargetSelector) -> List[NodeResult]:
        return self._per_session(selector, CommandKind.STOP_CLIENT)

    def cmd_status(self, selector: TargetSelector) -> List[NodeResult]:
        return self._per_session(selector, CommandKind.GET_STATUS)

    def cmd_getoutput(self, selector: TargetSelector) -> List[NodeResult]:
        return self._per_session(selector, CommandKind.GET_OUTPUT)

    def cmd_archive(self, selector: TargetSelector, name: Optional[str] = None) -> List[NodeResult]:
        extra = (lambda sid: {'NAME': f"{name}-{sid}"}) if name else (lambda sid: {})
        return self._per_session(selector, CommandKind.ARCHIVE, extra)

    def cmd_getclients(self, selector: TargetSelector) -> List[NodeResult]:
        def work(node: NodeSpec, client: AgentClient) -> List[NodeResult]:
            return [self.exchange(node, client, CommandEnvelope(CommandKind.GET_CLIENTS))]
        return self.fan_out(selector, work)

    def cmd_cleanup(self, selector: TargetSelector, flags: Dict[str, int]) -> List[NodeResult]:
        cmd = CommandEnvelope(CommandKind.CLEANUP, tuple((k, str(v)) for k, v in flags.items()))

        def work(node: NodeSpec, client: AgentClient) -> List[NodeResult]:
            return [self.exchange(node, client, cmd)]
        return self.fan_out(selector, work)

    def close(self):
        self.transport.close()


# ---------------------------------------------------------------------------
# 场景执行
# ---------------------------------------------------------------------------

@dataclass
class PlacementRun:
    placement: PlacementSpec
    session_id: Optional[int] = None
    state: str = 'PENDING'
    exit_code: Optional[int] = None
    complete: bool = False
    stopped: bool = False
    archive: Optional[str] = None
    error: Optional[str] = None

    @property
    def started(self) -> bool:
        return self.session_id is not None

    @property
    def running(self) -> bool:
        return self.state == 'RUNNING'


@dataclass
class ScenarioSummary:
    swarm_id: str
    store_path: str
    experiment_id: Optional[int]
    duration: float
    peers: List[Dict[str, object]] = field(default_factory=list)
    classes: List[Dict[str, object]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        return {
            'swarm_id': self.swarm_id,
            'store': self.store_path,
            'experiment_id': self.experiment_id,
            'duration': round(self.duration, 3),
            'peers': self.peers,
            'classes': self.classes,
        }

    @property
    def all_complete(self) -> bool:
        return all(p['complete'] for p in self.peers if p['role'] == Role.LEECHER.value)


def build_sim_config(swarm: SwarmSpec, torrent: TorrentInfo) -> SimConfig:
    """群体描述中的模拟客户端 → 共享名册"""
    peers = tuple(SimPeer(
        peer_id=p.peer_id,
        addr=p.addr,
        role=p.role,
        down_cap=p.down_limit or UNLIMITED_RATE,
        up_cap=p.up_limit or UNLIMITED_RATE,
        start_tick=p.start_offset,
        stop_tick=p.stop_offset,
    ) for p in swarm.placements if p.client == SIMULATED_CLIENT)
    return SimConfig(seed=swarm.seed, peers=peers, file_size=torrent.length,
                     piece_size=torrent.piece_length, file_name=torrent.name)


def scenario_timeout(swarm: SwarmSpec, file_size: int, tick_delay: float,
                     grace: float = DEFAULT_TIMEOUT_GRACE) -> float:
    """10 × 理论下限 file_size / 最小下载上限（按tick计），加上最晚的启动偏移"""
    caps = [p.down_limit for p in swarm.placements if p.role is Role.LEECHER and p.down_limit]
    lower_bound = math.ceil(file_size / min(caps)) if caps else math.ceil(file_size / 65536)
    last_start = max((p.start_offset for p in swarm.placements), default=0)
    return (last_start + TIMEOUT_FACTOR * max(lower_bound, 1)) * tick_delay + grace


def _jsonable(value):
    if isinstance(value, Fraction):
        return float(value)
    return value


class ScenarioRunner:
    """
    完整执行一次实验

    完成后运行目录中留下：experiment.db、每个会话一个归档、summary.json
    """

    def __init__(self, commander: Commander, run_dir: Path, tick_delay: float = 1.0,
                 collector: Optional[LogCollector] = None, poll_interval: float = 1.0,
                 timeout: Optional[float] = None):
        if commander.swarm is None:
            raise MissingSwarm('Scenario needs a swarm description')
        self.commander = commander
        self.swarm = commander.swarm
        self.run_dir = Path(run_dir)
        self.tick_delay = tick_delay
        self.collector = collector or collector_for('shared')
        self.poll_interval = poll_interval
        self.timeout = timeout
        self.runs = [PlacementRun(p) for p in sorted(self.swarm.placements,
                                                     key=lambda p: (p.start_offset, p.peer_id))]

    def _involved_nodes(self) -> TargetSelector:
        return TargetSelector(frozenset(p.node_id for p in self.swarm.placements))

    def prepare(self) -> TorrentInfo:
        torrent_path = Path(self.swarm.torrent_path)
        if not torrent_path.is_file():
            raise CommanderError(f"Torrent not found: {torrent_path}")
        try:
            torrent = read_torrent(torrent_path)
        except TorrentError as e:
            raise CommanderError(f"Bad torrent {torrent_path}: {e}") from e
        self.run_dir.mkdir(parents=True, exist_ok=True)
        return torrent

    def bootstrap(self) -> Dict[str, bool]:
        results = self.commander.cmd_bootstrap(self._involved_nodes())
        for r in results:
            marker = '✅' if r.ok else '❌'
            print(f"{marker} {r.node_id}: {r.get('bootstrap')} {r.error or ''}".rstrip(), flush=True)
        return {r.node_id: r.ok for r in results}

    def write_roster(self, torrent: TorrentInfo) -> Optional[Path]:
        config = build_sim_config(self.swarm, torrent)
        if not config.peers:
            return None
        roster = (self.run_dir / 'roster.json').resolve()
        roster.write_text(dump_roster(config), encoding='utf-8')
        return roster

    def _start(self, run: PlacementRun, roster: Optional[Path], agents: Dict[str, bool]):
        if not agents.get(run.placement.node_id, False):
            run.state, run.error = 'FAILED', 'agent not available'
            return
        result = self.commander.start_placement(run.placement, roster, self.tick_delay)
        if result.ok:
            run.session_id = int(result.get('id'))
            run.state = 'RUNNING'
            logger.info(f"{run.placement.peer_id} started on {run.placement.node_id} as session {run.session_id}")
        else:
            run.state, run.error = 'FAILED', f"{result.code}: {result.error}"
            print(f"❌ {run.placement.peer_id}: {run.error}", flush=True)

    def _request(self, node_id: str, cmd: CommandEnvelope):
        node = self.commander.node(node_id)
        with AgentClient(node.host, node.agent_port, timeout=self.commander.request_timeout) as client:
            return client.request(cmd)

    def poll(self, file_size: int):
        """刷新会话状态；对仍在运行的下载者读取已下载字节数"""
        by_node: Dict[str, List[PlacementRun]] = {}
        for run in self.runs:
            if run.started and run.running:
                by_node.setdefault(run.placement.node_id, []).append(run)
        for node_id, runs in by_node.items():
            try:
                states = self._request(node_id, CommandEnvelope(CommandKind.GET_CLIENTS)).as_dict()
                for run in runs:
                    run.state = states.get(f"state_{run.session_id}", run.state)
                    if run.placement.role is not Role.LEECHER or run.complete:
                        continue
                    status = self._request(node_id, CommandEnvelope.build(CommandKind.GET_STATUS,
                                                                          ID=run.session_id))
                    if status.is_ok and int(status.get('downloaded', '0')) >= file_size:
                        run.complete = True
                        logger.info(f"{run.placement.peer_id} completed")
            except (OSError, ConnectionError, WireProtocolError, ValueError) as e:
                logger.warning(f"Polling {node_id} failed: {e}")

    def stop(self, run: PlacementRun):
        if not run.started or not run.running:
            return
        resp = self._request(run.placement.node_id,
                             CommandEnvelope.build(CommandKind.STOP_CLIENT, ID=run.session_id))
        if resp.is_ok:
            run.state, run.stopped = resp.get('state', 'STOPPED'), True
        else:
            run.error = f"stop failed: {resp.get('message', '')}"

    def stop_all(self):
        for run in self.runs:
            try:
                self.stop(run)
            except (OSError, ConnectionError, WireProtocolError) as e:
                run.error = f"stop failed: {e}"

    def drive(self, torrent: TorrentInfo, roster: Optional[Path], agents: Dict[str, bool]) -> float:
        """启动、轮询、停止；返回耗时（秒）"""
        timeout = self.timeout or scenario_timeout(self.swarm, torrent.length, self.tick_delay)
        t0 = time.monotonic()
        drain_until: Optional[float] = None
        while True:
            elapsed = time.monotonic() - t0
            for run in self.runs:
                if run.state == 'PENDING' and run.placement.start_offset * self.tick_delay <= elapsed:
                    self._start(run, roster, agents)
            self.poll(torrent.length)

            elapsed = time.monotonic() - t0
            for run in self.runs:
                stop_at = run.placement.stop_offset
                if stop_at is not None and run.running and elapsed >= (stop_at + STOP_SLACK_TICKS) * self.tick_delay:
                    self.stop(run)

            pending = any(r.state == 'PENDING' for r in self.runs)
            leechers_done = all(r.complete or not r.running for r in self.runs
                                if r.placement.role is Role.LEECHER)
            if not pending and not any(r.running for r in self.runs):
                break
            if not pending and leechers_done:
                if drain_until is None:
                    drain_until = time.monotonic() + max(DRAIN_TICKS * self.tick_delay, self.poll_interval)
                elif time.monotonic() >= drain_until:
                    self.stop_all()
                    break
            if elapsed > timeout:
                self.stop_all()
                raise ScenarioTimeout(f"Scenario {self.swarm.swarm_id} exceeded {timeout:.1f}s")
            time.sleep(self.poll_interval)
        return time.monotonic() - t0

    def collect(self) -> List[PeerLogs]:
        """每个会话：ARCHIVE → 取回 → 解包 → PeerLogs"""
        peers = []
        for run in self.runs:
            if not run.started:
                continue
            p = run.placement
            cmd = CommandEnvelope.build(CommandKind.ARCHIVE, ID=run.session_id,
                                        NAME=f"{self.swarm.swarm_id}-{p.peer_id}")
            try:
                resp = self._request(p.node_id, cmd)
                if not resp.is_ok:
                    run.error = f"archive failed: {resp.error_code.value} {resp.get('message', '')}"
                    continue
                local = self.collector.fetch(self.commander.node(p.node_id), resp.get('archive'),
                                             self.run_dir / 'archives')
                run.archive = str(local)
                logs_dir = self.run_dir / 'logs' / p.peer_id
                if logs_dir.exists():
                    shutil.rmtree(logs_dir)
                extract_archive(local, logs_dir)
            except (OSError, ConnectionError, WireProtocolError, CollectionError) as e:
                run.error = f"collection failed: {e}"
                continue
            peers.append(PeerLogs.from_paths(
                name=p.peer_id, client=p.client, addr=p.addr,
                slog=logs_dir / Path(p.slog_path).name, vlog=logs_dir / Path(p.vlog_path).name,
                dialect=VlogDialect(p.dialect) if p.dialect else None,
                down_limit=p.down_limit, up_limit=p.up_limit, seeder=p.role is Role.SEEDER,
            ))
        return peers

    def ingest(self, peers: List[PeerLogs], torrent: TorrentInfo) -> Tuple[Path, int]:
        store_path = self.run_dir / 'experiment.db'
        if store_path.exists():
            store_path.unlink()
        with SwarmStore(store_path) as store:
            report = ingest_experiment(store, self.swarm.swarm_id, peers,
                                       file_name=torrent.name, file_size=torrent.length)
        return store_path, report.experiment_id

    def summarize(self, store_path: Path, experiment_id: Optional[int], duration: float) -> ScenarioSummary:
        summary = ScenarioSummary(self.swarm.swarm_id, str(store_path), experiment_id, duration)
        plateaus: Dict[Optional[int], List[Fraction]] = {}
        store = SwarmStore(store_path, read_only=True) if experiment_id is not None else None
        try:
            start = store.get_experiment(experiment_id).start_time if store else 0
            for run in sorted(self.runs, key=lambda r: r.placement.peer_id):
                p = run.placement
                entry = {
                    'peer': p.peer_id, 'node': p.node_id, 'client': p.client, 'role': p.role.value,
                    'session': run.session_id, 'state': run.state, 'complete': False,
                    'percent': None, 'completion_time': None, 'plateau': None,
                    'archive': run.archive, 'error': run.error,
                }
                if store is not None and run.archive:
                    self._peer_metrics(store, experiment_id, start, run, entry, plateaus)
                summary.peers.append(entry)
        finally:
            if store is not None:
                store.close()
        for cap in sorted(plateaus, key=lambda c: (c is None, c or 0)):
            means = plateaus[cap]
            summary.classes.append({
                'down_limit': cap,
                'peers': len(means),
                'mean_plateau': _jsonable(sum(means) / len(means)) if means else None,
            })
        return summary

    @staticmethod
    def _peer_metrics(store: SwarmStore, experiment_id: int, start: int, run: PlacementRun,
                      entry: Dict[str, object], plateaus: Dict[Optional[int], List[Fraction]]):
        p = run.placement
        try:
            meta = store.find_peer(p.peer_id, experiment_id)
            records = store.query_status(meta.peer_id)
        except StorageError as e:
            entry['error'] = entry['error'] or str(e)
            return
        if not records:
            return
        entry['percent'] = float(records[-1].percent)
        done = next((r for r in records if r.percent >= 100), None)
        entry['complete'] = done is not None
        if done is not None:
            entry['completion_time'] = to_epoch(done.timestamp) - start
        if p.role is not Role.LEECHER:
            return
        try:
            phase = download_phase(speed_series(store, meta.peer_id), download_window(store, meta.peer_id))
            cap = p.down_limit or max((v for _, v in phase.points), default=0)
            plateau = plateau_summary(phase, cap)
        except AnalysisError as e:
            logger.warning(f"No plateau for {p.peer_id}: {e}")
            return
        if plateau.mean is not None:
            entry['plateau'] = _jsonable(plateau.mean)
            plateaus.setdefault(p.down_limit, []).append(plateau.mean)

    def run(self) -> ScenarioSummary:
        torrent = self.prepare()
        agents = self.bootstrap()
        roster = self.write_roster(torrent)
        print(f"🌐 Scenario {self.swarm.swarm_id}: {len(self.runs)} placements, "
              f"{torrent.name} ({torrent.length} bytes)", flush=True)
        try:
            duration = self.drive(torrent, roster, agents)
        except ScenarioTimeout:
            self._write_summary(self.summarize(self.run_dir / 'experiment.db', None,
                                               self.timeout or 0.0))
            raise
        peers = self.collect()
        store_path, experiment_id = self.ingest(peers, torrent)
        summary = self.summarize(store_path, experiment_id, duration)
        self._write_summary(summary)
        return summary

    def _write_summary(self, summary: ScenarioSummary):
        path = self.run_dir / 'summary.json'
        path.write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True), encoding='utf-8')
        logger.info(f"Summary written to {path}")


def render_summary(summary: ScenarioSummary) -> List[str]:
    lines = []
    for p in summary.peers:
        fields = [f"{k}={'' if p[k] is None else p[k]}"
                  for k in ('role', 'session', 'state', 'complete', 'completion_time', 'plateau')]
        lines.append('\t'.join([p['node'], f"peer={p['peer']}"] + fields))
    for c in summary.classes:
        lines.append(f"class\tdown_limit={c['down_limit']}\tpeers={c['peers']}\tmean_plateau={c['mean_plateau']}")
    return lines


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

COMMANDS = ('bootstrap', 'start', 'stop', 'status', 'getclients', 'getoutput', 'archive', 'cleanup', 'run')


def build_parser(settings: SettingsManager) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='swarmforge commander', description='Drive swarmforge agents')
    parser.add_argument('--nodes', required=True, help='nodes XML')
    parser.add_argument('--swarm', default=None, help='swarm XML (start and run)')
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--nodes-filter', default=None, help='comma-separated node ids (default ALL)')
    parser.add_argument('--ids', default=None, help='comma-separated session ids (default ALL)')
    parser.add_argument('--name', default=None, help='archive name prefix')
    parser.add_argument('--transport', choices=('local', 'ssh'), default='local')
    parser.add_argument('--ssh-template', default=None, help='bootstrap command template (space separated)')
    parser.add_argument('--collector', choices=('shared', 'http'), default='shared')
    parser.add_argument('--run-dir', default=None, help='scenario output directory')
    parser.add_argument('--roster', default=None, help='simulated swarm roster for start')
    parser.add_argument('--tick-delay', type=float, default=settings.get_tick_delay())
    parser.add_argument('--poll-interval', type=float, default=settings.get_poll_interval())
    parser.add_argument('--timeout', type=float, default=None, help='scenario timeout in seconds')
    for flag in ('all', 'down', 'vlogs', 'slogs', 'archive'):
        parser.add_argument(f"--{flag}", dest=f"clean_{flag}", action='store_true',
                            help=f"cleanup: remove {flag}")
    parser.add_argument('--log-level', default=settings.get_log_level())
    return parser


def make_transport(args: argparse.Namespace, settings: SettingsManager) -> BootstrapTransport:
    state_dir = settings.get_state_dir()
    if args.transport == 'ssh':
        if args.ssh_template:
            return ExternalCommandTransport(args.ssh_template.split(), default_state_dir=state_dir)
        return ExternalCommandTransport(default_state_dir=state_dir)
    return LocalExecTransport(stop_grace=settings.get_stop_grace(), default_state_dir=state_dir)


def cleanup_flags(args: argparse.Namespace) -> Dict[str, int]:
    flags = {key.upper(): int(getattr(args, f"clean_{key}"))
             for key in ('all', 'down', 'vlogs', 'slogs', 'archive')}
    if not any(flags.values()):
        raise CommanderError('cleanup needs at least one of --all --down --vlogs --slogs --archive')
    return flags


def main(argv=None) -> int:
    settings = SettingsManager()
    args = build_parser(settings).parse_args(argv)
    setup_logging(args.log_level)

    try:
        nodes = load_nodes_file(args.nodes)
        swarm = load_swarm_file(args.swarm, nodes) if args.swarm else None
    except (OSError, ConfigError) as e:
        print(f"❌ {e}")
        return 2

    commander = Commander(nodes, swarm, make_transport(args, settings),
                          connect_timeout=settings.get_connect_timeout(),
                          stop_grace=settings.get_stop_grace())
    try:
        selector = TargetSelector.parse(args.nodes_filter, args.ids)
        if args.command == 'run':
            run_dir = Path(args.run_dir or f"runs/{swarm.swarm_id if swarm else 'scenario'}")
            runner = ScenarioRunner(commander, run_dir, args.tick_delay, collector_for(args.collector),
                                    args.poll_interval, args.timeout)
            summary = runner.run()
            for line in render_summary(summary):
                print(line)
            marker = '✅' if summary.all_complete else '⚠️'
            print(f"{marker} Store: {summary.store_path}  Summary: {run_dir / 'summary.json'}")
            return 0 if summary.all_complete else 1

        if args.command == 'bootstrap':
            results = commander.cmd_bootstrap(selector)
        elif args.command == 'start':
            roster = Path(args.roster).resolve() if args.roster else None
            results = commander.cmd_start(selector, roster, args.tick_delay)
        elif args.command == 'archive':
            results = commander.cmd_archive(selector, args.name)
        elif args.command == 'cleanup':
            results = commander.cmd_cleanup(selector, cleanup_flags(args))
        else:
            results = getattr(commander, f"cmd_{args.command}")(selector)
    except (CommanderError, ConfigError) as e:
        print(f"❌ {e}")
        return 2
    finally:
        if args.command == 'run':
            commander.close()

    if not results:
        print("⚠️ No targets matched; nothing was done")
    for result in results:
        print(result.render())
    return exit_code(results)


if __name__ == "__main__":
    sys.exit(main())
