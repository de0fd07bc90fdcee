#!/usr/bin/env python3
"""
Agent（节点守护进程）
接收Commander的帧命令，通过适配器管理BitTorrent客户端进程，
从状态日志读取传输状态，并负责归档与清理实验文件

职责：
1. TCP服务：每个连接按请求逐个处理（ThreadingTCPServer）
2. 会话表：单锁保护，会话ID单调递增且不复用
3. 进程监督：独立的轮询线程（≤ 1 s）记录真实退出码
4. 归档：先写临时文件并落盘，再原子改名，最后才删除原文件
5. 清理：只删除会话声明过的路径

扩展点：
- 新命令：CommandDispatcher.handlers
- 只读HTTP监视：src/monitor_app.py
"""

import argparse
import logging
import os
import shutil
import signal
import socketserver
import subprocess
import sys
import tarfile
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Set, Tuple

import psutil

sys.path.insert(0, str(Path(__file__).parent.parent))

from config.settings import SettingsManager
from lib.utils import create_pid_file, is_service_running, remove_pid_file, setup_logging
from src.client_adapters import (
    AdapterError, AdapterRegistry, LaunchRequest, UnknownAdapter, default_registry, load_manifest,
)
from src.log_parsers import LogParseError, find_vlog_files, read_last_status
from src.torrent_meta import TorrentError, read_torrent
from src.wire_protocol import (
    CLEANUP_KEYS, TOKEN_SAFE, CommandEnvelope, CommandKind, ErrorCode, ResponseEnvelope,
    WireProtocolError, decode_command, encode_response, error_code_for, escape_text,
)
from src.wire_transport import recv_frame, send_frame

logger = logging.getLogger(__name__)

OUTPUT_TAIL_BYTES = 65536
SERVICE_NAME = 'agent'
LAUNCH_KEYS = ('TORRENT', 'DOWN_DIR', 'SLOG', 'VLOG', 'CLIENT', 'DOWN', 'UP')


class SessionState(Enum):
    RUNNING = 'RUNNING'
    STOPPED = 'STOPPED'
    EXITED = 'EXITED'
    FAILED = 'FAILED'


class AgentError(Exception):
    """带有响应错误码的Agent错误"""
    code = ErrorCode.IO_ERROR


class BadArgs(AgentError):
    code = ErrorCode.BAD_ARGS


class NoSuchId(AgentError):
    code = ErrorCode.NO_SUCH_ID


class ClientFailed(AgentError):
    code = ErrorCode.CLIENT_FAILED


class AgentIOError(AgentError):
    code = ErrorCode.IO_ERROR


class BindFailure(Exception):
    pass


@dataclass
class SessionRecord:
    id: int
    client: str
    torrent_path: str
    download_dir: str
    slog_path: str
    vlog_path: str
    output_path: str
    argv: List[str]
    pid: int
    payload_name: str = ''
    state: SessionState = SessionState.RUNNING
    exit_code: Optional[int] = None
    started_at: float = field(default_factory=time.time)
    stopping: bool = False

    def to_dict(self) -> Dict[str, object]:
        return {
            'id': self.id,
            'client': self.client,
            'torrent': self.torrent_path,
            'download_dir': self.download_dir,
            'slog': self.slog_path,
            'vlog': self.vlog_path,
            'pid': self.pid,
            'state': self.state.value,
            'exit_code': self.exit_code,
            'started_at': self.started_at,
        }


def _parse_limit(args: Dict[str, str], key: str) -> Optional[int]:
    value = args.get(key)
    if value is None or value in ('', 'unlimited'):
        return None
    if not value.isdigit() or int(value) <= 0:
        raise BadArgs(f"{key} must be a positive integer (bytes/s)")
    return int(value)


class SessionManager:
    """
    会话表与客户端进程

    所有对会话表的访问都在 self.lock 下进行；进程终止等待在锁外进行。
    """

    def __init__(self, state_dir: Path, registry: AdapterRegistry,
                 stop_grace: float = 5.0, poll_interval: float = 1.0):
        self.state_dir = Path(state_dir)
        self.output_dir = self.state_dir / 'output'
        self.archive_dir = self.state_dir / 'archives'
        self.registry = registry
        self.stop_grace = stop_grace
        self.poll_interval = min(poll_interval, 1.0)
        self.lock = threading.Lock()
        self.sessions: Dict[int, SessionRecord] = {}
        self.processes: Dict[int, subprocess.Popen] = {}
        self._next_id = 1
        self._poller: Optional[threading.Thread] = None
        self._stop_polling = threading.Event()
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.archive_dir.mkdir(parents=True, exist_ok=True)

    # -- supervision ---------------------------------------------------------

    def start_polling(self):
        if self._poller is None:
            self._poller = threading.Thread(target=self._poll_loop, name='session-poller', daemon=True)
            self._poller.start()

    def _poll_loop(self):
        while not self._stop_polling.wait(self.poll_interval):
            self.poll()

    def poll(self):
        """记录已退出进程的退出码：0 → EXITED，非0 → FAILED"""
        with self.lock:
            for sid, record in self.sessions.items():
                if record.state is not SessionState.RUNNING or record.stopping:
                    continue
                code = self.processes[sid].poll()
                if code is not None:
                    record.exit_code = code
                    record.state = SessionState.EXITED if code == 0 else SessionState.FAILED
                    logger.info(f"Session {sid} exited with code {code}")

    def shutdown(self):
        self._stop_polling.set()
        with self.lock:
            running = [sid for sid, r in self.sessions.items() if r.state is SessionState.RUNNING]
        for sid in running:
            self.stop(sid)
        if self._poller is not None:
            self._poller.join(timeout=2 * self.poll_interval + 1)

    # -- commands ------------------------------------------------------------

    def resolve(self, path: str) -> str:
        """相对路径以状态目录为基准"""
        return os.path.abspath(os.path.join(self.state_dir, os.path.expanduser(path)))

    def start(self, args: Dict[str, str]) -> SessionRecord:
        try:
            adapter = self.registry.resolve(args['CLIENT'])
        except UnknownAdapter as e:
            raise BadArgs(str(e)) from None
        torrent = self.resolve(args['TORRENT'])
        if not os.access(torrent, os.R_OK):
            raise BadArgs(f"Torrent not readable: {torrent}")
        try:
            payload_name = read_torrent(Path(torrent)).name
        except TorrentError as e:
            raise BadArgs(f"Bad torrent {torrent}: {e}") from None
        if self.resolve(args['SLOG']) == self.resolve(args['VLOG']):
            raise BadArgs('SLOG and VLOG must be distinct paths')
        for key in ('SLOG', 'VLOG'):
            # ARCHIVE 的 FILES 以逗号分隔
            if ',' in args[key]:
                raise BadArgs(f"{key} must not contain ','")
        download_dir = self.resolve(args['DOWN_DIR'])
        state_real, down_real = os.path.realpath(self.state_dir), os.path.realpath(download_dir)
        if os.path.commonpath([state_real, down_real]) == down_real:
            raise BadArgs(f"DOWN_DIR must not contain the state directory: {download_dir}")

        extra = tuple((k.lower(), v) for k, v in args.items() if k not in LAUNCH_KEYS)
        request = LaunchRequest(
            torrent=torrent,
            download_dir=download_dir,
            slog=self.resolve(args['SLOG']),
            vlog=self.resolve(args['VLOG']),
            down_limit=_parse_limit(args, 'DOWN'),
            up_limit=_parse_limit(args, 'UP'),
            extra=extra,
        )
        try:
            argv = adapter.build_command_line(request)
        except AdapterError as e:
            raise BadArgs(str(e)) from None

        with self.lock:
            sid = self._next_id
            output_path = self.output_dir / f"session-{sid}.log"
            try:
                for path in (request.slog, request.vlog):
                    Path(path).parent.mkdir(parents=True, exist_ok=True)
                Path(request.download_dir).mkdir(parents=True, exist_ok=True)
                with open(output_path, 'ab') as output:
                    proc = subprocess.Popen(argv, stdout=output, stderr=subprocess.STDOUT,
                                            stdin=subprocess.DEVNULL, cwd=str(self.state_dir),
                                            start_new_session=True)
            except OSError as e:
                logger.error(f"Failed to spawn {adapter.name}: {e}")
                raise ClientFailed(f"Cannot start {adapter.name}: {e}") from e

            self._next_id += 1
            record = SessionRecord(
                id=sid, client=adapter.name, torrent_path=torrent, download_dir=request.download_dir,
                slog_path=request.slog, vlog_path=request.vlog, output_path=str(output_path),
                argv=argv, pid=proc.pid, payload_name=payload_name,
            )
            self.sessions[sid] = record
            self.processes[sid] = proc
        logger.info(f"Session {sid} started: {' '.join(argv)} (pid {proc.pid})")
        return record

    def _get(self, sid_text: str) -> SessionRecord:
        try:
            sid = int(sid_text)
        except (TypeError, ValueError):
            raise BadArgs(f"ID must be an integer, got {sid_text!r}") from None
        record = self.sessions.get(sid)
        if record is None:
            raise NoSuchId(f"No session {sid}")
        return record

    def get(self, sid_text: str) -> SessionRecord:
        with self.lock:
            return self._get(sid_text)

    def _terminate(self, proc: subprocess.Popen) -> int:
        """SIGTERM整个进程组，等待 stop_grace 秒后 SIGKILL"""
        try:
            children = psutil.Process(proc.pid).children(recursive=True)
        except psutil.NoSuchProcess:
            children = []
        for child in children:
            try:
                child.terminate()
            except psutil.NoSuchProcess:
                pass
        proc.terminate()
        try:
            code = proc.wait(timeout=self.stop_grace)
        except subprocess.TimeoutExpired:
            logger.warning(f"pid {proc.pid} ignored SIGTERM, killing")
            proc.kill()
            code = proc.wait()
        _, alive = psutil.wait_procs(children, timeout=self.stop_grace)
        for child in alive:
            try:
                child.kill()
            except psutil.NoSuchProcess:
                pass
        return code

    def stop(self, sid_text: str) -> SessionRecord:
        """已停止的会话再次停止是OK的空操作"""
        with self.lock:
            record = self._get(sid_text)
            if record.state is not SessionState.RUNNING or record.stopping:
                return record
            record.stopping = True
            proc = self.processes[record.id]

        code = self._terminate(proc)

        with self.lock:
            record.exit_code = code
            record.state = SessionState.STOPPED
            record.stopping = False
        logger.info(f"Session {record.id} stopped (exit code {code})")
        return record

    def list(self) -> List[Tuple[int, SessionState]]:
        with self.lock:
            return [(sid, r.state) for sid, r in sorted(self.sessions.items())]

    def status(self, sid_text: str) -> List[Tuple[str, str]]:
        slog = self.get(sid_text).slog_path
        try:
            rec = read_last_status(Path(slog))
        except FileNotFoundError:
            raise AgentIOError(f"Status log missing: {slog}") from None
        except (OSError, LogParseError) as e:
            raise AgentIOError(f"Cannot read status log {slog}: {e}") from e
        if rec is None:
            raise AgentIOError(f"Status log is empty: {slog}")
        return [
            ('down_speed', str(rec.down_speed)),
            ('up_speed', str(rec.up_speed)),
            ('downloaded', str(rec.downloaded)),
            ('uploaded', str(rec.uploaded)),
            ('eta', 'inf' if rec.eta is None else str(rec.eta)),
            ('num_peers', str(rec.num_peers)),
        ]

    def output(self, sid_text: str) -> str:
        """进程合并输出的最后 64 KiB（无论是否仍在运行）"""
        path = Path(self.get(sid_text).output_path)
        try:
            with open(path, 'rb') as f:
                f.seek(0, os.SEEK_END)
                size = f.tell()
                f.seek(max(0, size - OUTPUT_TAIL_BYTES))
                data = f.read()
        except FileNotFoundError:
            return ''
        except OSError as e:
            raise AgentIOError(f"Cannot read output: {e}") from e
        return data.decode('utf-8', errors='ignore')

    # -- files ---------------------------------------------------------------

    def _session_files(self, record: SessionRecord) -> List[Path]:
        files = [Path(record.slog_path)] if Path(record.slog_path).is_file() else []
        return files + find_vlog_files(Path(record.vlog_path))

    def _declared_paths(self) -> Set[str]:
        declared = set()
        for record in self.sessions.values():
            declared.add(os.path.abspath(record.slog_path))
            declared.add(os.path.abspath(record.vlog_path))
            declared.update(os.path.abspath(p) for p in find_vlog_files(Path(record.vlog_path)))
        return declared

    def _unique_archive(self, name: str) -> Path:
        candidate = self.archive_dir / f"{name}.tar.gz"
        n = 2
        while candidate.exists():
            candidate = self.archive_dir / f"{name}-{n}.tar.gz"
            n += 1
        return candidate

    def archive(self, args: Dict[str, str]) -> Tuple[Path, int]:
        """
        把列出的文件打包为一个 .tar.gz 并删除原文件

        要么全部归档并删除，要么什么都不删除。
        """
        with self.lock:
            files: List[Path] = []
            name = args.get('NAME')
            if 'ID' in args:
                record = self._get(args['ID'])
                files += self._session_files(record)
                name = name or f"session-{record.id}"
            listed = [f for f in args.get('FILES', '').split(',') if f]
            declared = self._declared_paths()
            for entry in listed:
                if self.resolve(entry) not in declared:
                    raise BadArgs(f"{entry} is not a session file")
                files.append(Path(self.resolve(entry)))
            if not files:
                raise BadArgs('ARCHIVE needs FILES or a session ID with existing logs')
            unique: List[Path] = []
            for path in files:
                if path not in unique:
                    unique.append(path)
            arcnames = [p.name for p in unique]
            if len(set(arcnames)) != len(arcnames):
                raise BadArgs('Archived files must have distinct file names')
            if name is not None and not TOKEN_SAFE.match(name):
                raise BadArgs(f"Bad archive name {name!r}")
            missing = [str(p) for p in unique if not p.is_file()]
            if missing:
                raise AgentIOError(f"Missing file(s): {', '.join(missing)}")

            target = self._unique_archive(name or f"archive-{int(time.time())}")
            partial = target.with_name(target.name + '.partial')
            try:
                with open(partial, 'wb') as raw:
                    with tarfile.open(fileobj=raw, mode='w:gz') as tar:
                        for path in unique:
                            tar.add(str(path), arcname=path.name)
                    raw.flush()
                    os.fsync(raw.fileno())
                os.replace(partial, target)
            except OSError as e:
                partial.unlink(missing_ok=True)
                raise AgentIOError(f"Archive failed: {e}") from e

            for path in unique:
                path.unlink()
        logger.info(f"Archived {len(unique)} file(s) into {target}")
        return target, len(unique)

    def cleanup(self, flags: Dict[str, str]) -> Dict[str, int]:
        """
        删除标志为 1 的文件类别；ALL=1 覆盖其他所有标志

        Returns:
            Dict[str, int]: 每个类别删除的条目数
        """
        wanted = {key for key in CLEANUP_KEYS if flags.get(key) == '1'}
        if not wanted:
            raise BadArgs('CLEANUP with every flag 0 does nothing')
        if 'ALL' in wanted:
            wanted = {'DOWN', 'VLOGS', 'SLOGS', 'ARCHIVE'}

        removed = {key: 0 for key in sorted(wanted)}
        with self.lock:
            records = list(self.sessions.values())
            try:
                if 'DOWN' in wanted:
                    # 只删除种子声明的载荷，下载目录中的其他文件保留
                    payloads = sorted({Path(r.download_dir) / r.payload_name
                                       for r in records if r.payload_name})
                    for entry in payloads:
                        if entry.is_dir() and not entry.is_symlink():
                            shutil.rmtree(entry)
                        elif entry.exists() or entry.is_symlink():
                            entry.unlink()
                        else:
                            continue
                        removed['DOWN'] += 1
                if 'VLOGS' in wanted:
                    for r in records:
                        for path in find_vlog_files(Path(r.vlog_path)):
                            path.unlink()
                            removed['VLOGS'] += 1
                if 'SLOGS' in wanted:
                    for r in records:
                        path = Path(r.slog_path)
                        if path.is_file():
                            path.unlink()
                            removed['SLOGS'] += 1
                if 'ARCHIVE' in wanted:
                    for path in sorted(self.archive_dir.glob('*.tar.gz')):
                        path.unlink()
                        removed['ARCHIVE'] += 1
            except OSError as e:
                done = ', '.join(f"{k}={v}" for k, v in removed.items())
                raise AgentIOError(f"Cleanup stopped at {e} (removed so far: {done})") from e
        logger.info(f"Cleanup {sorted(wanted)}: {removed}")
        return removed


class CommandDispatcher:
    """命令信封 → 响应信封；任何异常都不会逃出 dispatch"""

    def __init__(self, manager: SessionManager):
        self.manager = manager
        self.handlers: Dict[CommandKind, Callable[[CommandEnvelope], ResponseEnvelope]] = {
            CommandKind.START_CLIENT: self.handle_start_client,
            CommandKind.STOP_CLIENT: self.handle_stop_client,
            CommandKind.GET_CLIENTS: self.handle_get_clients,
            CommandKind.GET_STATUS: self.handle_get_status,
            CommandKind.GET_OUTPUT: self.handle_get_output,
            CommandKind.ARCHIVE: self.handle_archive,
            CommandKind.CLEANUP: self.handle_cleanup,
        }

    def dispatch(self, cmd: CommandEnvelope) -> ResponseEnvelope:
        logger.info(f"{cmd.kind.value} {' '.join(f'{k}={v}' for k, v in cmd.args)}")
        try:
            return self.handlers[cmd.kind](cmd)
        except AgentError as e:
            logger.warning(f"{cmd.kind.value} -> ERR {e.code.value}: {e}")
            return ResponseEnvelope.err(e.code, _one_line(str(e)))
        except Exception as e:
            logger.error(f"{cmd.kind.value} failed unexpectedly: {e}", exc_info=True)
            return ResponseEnvelope.err(ErrorCode.IO_ERROR, _one_line(f"internal error: {e}"))

    def handle_frame(self, data: bytes) -> Tuple[bytes, bool]:
        """
        处理一个完整帧

        Returns:
            Tuple[bytes, bool]: (响应帧, 是否保持连接)
        """
        try:
            cmd = decode_command(data)
        except WireProtocolError as e:
            code = error_code_for(e)
            logger.warning(f"Rejected frame: ERR {code.value}: {e}")
            return encode_response(ResponseEnvelope.err(code, _one_line(str(e)))), False
        return encode_response(self.dispatch(cmd)), True

    def handle_start_client(self, cmd: CommandEnvelope) -> ResponseEnvelope:
        record = self.manager.start(cmd.as_dict())
        return ResponseEnvelope.ok([('id', str(record.id))])

    def handle_stop_client(self, cmd: CommandEnvelope) -> ResponseEnvelope:
        record = self.manager.stop(cmd.get('ID'))
        return ResponseEnvelope.ok([('id', str(record.id)), ('state', record.state.value)])

    def handle_get_clients(self, cmd: CommandEnvelope) -> ResponseEnvelope:
        sessions = self.manager.list()
        body = [('clients', ','.join(str(sid) for sid, _ in sessions))]
        body += [(f"state_{sid}", state.value) for sid, state in sessions]
        return ResponseEnvelope.ok(body)

    def handle_get_status(self, cmd: CommandEnvelope) -> ResponseEnvelope:
        return ResponseEnvelope.ok(self.manager.status(cmd.get('ID')))

    def handle_get_output(self, cmd: CommandEnvelope) -> ResponseEnvelope:
        return ResponseEnvelope.ok([('output', escape_text(self.manager.output(cmd.get('ID'))))])

    def handle_archive(self, cmd: CommandEnvelope) -> ResponseEnvelope:
        path, count = self.manager.archive(cmd.as_dict())
        return ResponseEnvelope.ok([('archive', str(path)), ('files', str(count))])

    def handle_cleanup(self, cmd: CommandEnvelope) -> ResponseEnvelope:
        removed = self.manager.cleanup(cmd.as_dict())
        return ResponseEnvelope.ok([(key.lower(), str(count)) for key, count in removed.items()])


def _one_line(text: str) -> str:
    return text.replace('\n', ' ').replace('\r', ' ')


class AgentRequestHandler(socketserver.BaseRequestHandler):
    """一个连接：逐帧读取、处理、回复；帧错误时回复ERR后关闭"""

    def handle(self):
        dispatcher: CommandDispatcher = self.server.dispatcher
        peer = '%s:%s' % self.client_address[:2]
        logger.debug(f"Connection from {peer}")
        while True:
            try:
                data = recv_frame(self.request)
            except WireProtocolError as e:
                logger.warning(f"Bad frame from {peer}: {e}")
                self._reply(encode_response(ResponseEnvelope.err(ErrorCode.BAD_ARGS, _one_line(str(e)))))
                return
            except OSError as e:
                logger.debug(f"Connection from {peer} dropped: {e}")
                return
            if data is None:
                return
            response, keep_open = dispatcher.handle_frame(data)
            if not self._reply(response) or not keep_open:
                return

    def _reply(self, data: bytes) -> bool:
        try:
            send_frame(self.request, data)
            return True
        except OSError:
            return False


class AgentServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: Tuple[str, int], dispatcher: CommandDispatcher):
        self.dispatcher = dispatcher
        try:
            super().__init__(address, AgentRequestHandler)
        except OSError as e:
            raise BindFailure(f"Cannot bind {address[0]}:{address[1]}: {e}") from e


class Agent:
    """把会话管理、TCP服务与可选的HTTP监视组合在一起"""

    def __init__(self, state_dir: Path, registry: AdapterRegistry, bind: str = '127.0.0.1',
                 port: int = 5000, stop_grace: float = 5.0, poll_interval: float = 1.0,
                 monitor_port: Optional[int] = None):
        self.state_dir = Path(state_dir)
        self.run_dir = self.state_dir / 'run'
        self.manager = SessionManager(self.state_dir, registry, stop_grace, poll_interval)
        self.dispatcher = CommandDispatcher(self.manager)
        self.server = AgentServer((bind, port), self.dispatcher)
        self.monitor_port = monitor_port
        self._monitor = None
        self._threads: List[threading.Thread] = []

    @property
    def address(self) -> Tuple[str, int]:
        return self.server.server_address[:2]

    def _start_monitor(self):
        from src.monitor_app import MonitorServer
        self._monitor = MonitorServer(self.manager, self.address[0], self.monitor_port)
        self._monitor.start()

    def start_background(self) -> 'Agent':
        """在后台线程中服务（测试与嵌入使用）"""
        self.manager.start_polling()
        if self.monitor_port is not None:
            self._start_monitor()
        thread = threading.Thread(target=self.server.serve_forever, name='agent-server', daemon=True)
        thread.start()
        self._threads.append(thread)
        return self

    def serve_forever(self):
        self.manager.start_polling()
        if self.monitor_port is not None:
            self._start_monitor()
        create_pid_file(self.run_dir, SERVICE_NAME)
        host, port = self.address
        print(f"✅ Agent listening on {host}:{port} (state dir {self.state_dir})", flush=True)
        try:
            self.server.serve_forever()
        finally:
            remove_pid_file(self.run_dir, SERVICE_NAME)

    def shutdown(self):
        self.server.shutdown()
        self.server.server_close()
        if self._monitor is not None:
            self._monitor.stop()
        self.manager.shutdown()
        for thread in self._threads:
            thread.join(timeout=5)


def serve(bind_host: str, port: int, state_dir: Path, registry: Optional[AdapterRegistry] = None, **kwargs):
    agent = Agent(state_dir, registry or default_registry(), bind_host, port, **kwargs)
    agent.serve_forever()


def build_parser(settings: SettingsManager) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='swarmforge agent', description='swarmforge node agent')
    parser.add_argument('--bind', default='127.0.0.1')
    parser.add_argument('--port', type=int, default=settings.get_port('agent'))
    parser.add_argument('--state-dir', default=str(settings.get_state_dir()))
    parser.add_argument('--monitor-port', type=int, default=None)
    parser.add_argument('--clients', default=None, help='JSON manifest: client name -> executable')
    parser.add_argument('--stop-grace', type=float, default=settings.get_stop_grace())
    parser.add_argument('--poll-interval', type=float, default=settings.get_poll_interval())
    parser.add_argument('--log-level', default=settings.get_log_level())
    return parser


def main(argv=None) -> int:
    settings = SettingsManager()
    args = build_parser(settings).parse_args(argv)
    setup_logging(args.log_level)

    state_dir = Path(args.state_dir)
    if is_service_running(state_dir / 'run', SERVICE_NAME):
        print(f"⚠️ An agent is already running for {state_dir}")
        return 1
    try:
        registry = load_manifest(Path(args.clients)) if args.clients else default_registry()
        agent = Agent(state_dir, registry, args.bind, args.port, args.stop_grace,
                      args.poll_interval, args.monitor_port)
    except (AdapterError, OSError, ValueError) as e:
        print(f"❌ {e}")
        return 1
    except BindFailure as e:
        print(f"❌ {e}")
        return 2

    def _terminate(signum, frame):
        threading.Thread(target=agent.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, _terminate)
    signal.signal(signal.SIGINT, _terminate)
    agent.serve_forever()
    print("✅ Agent stopped", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
