#!/usr/bin/env python3
"""
通用工具
swarmforge 整体使用的通用函数（进程、PID文件、日志、硬件信息）
"""

import logging
import os
import platform
from pathlib import Path
from typing import Dict, Optional

import psutil

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(level: str = 'INFO'):
    """统一的日志初始化（每个入口脚本调用一次）"""
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)


def is_process_alive(pid: int) -> bool:
    try:
        proc = psutil.Process(pid)
        return proc.is_running() and proc.status() != psutil.STATUS_ZOMBIE
    except psutil.NoSuchProcess:
        return False


def terminate_process_tree(pid: int, grace: float = 5.0) -> Optional[int]:
    """
    终止进程及其子进程：先 SIGTERM，等待 grace 秒后 SIGKILL

    Returns:
        Optional[int]: 主进程的退出码（无法获取时为 None）
    """
    try:
        parent = psutil.Process(pid)
    except psutil.NoSuchProcess:
        return None

    try:
        children = parent.children(recursive=True)
    except psutil.NoSuchProcess:
        children = []

    procs = [parent] + children
    for proc in procs:
        try:
            proc.terminate()
        except psutil.NoSuchProcess:
            pass

    gone, alive = psutil.wait_procs(procs, timeout=grace)
    for proc in alive:
        try:
            proc.kill()
        except psutil.NoSuchProcess:
            pass
    if alive:
        more, _ = psutil.wait_procs(alive, timeout=grace)
        gone += more

    for proc in gone:
        if proc.pid == pid:
            return getattr(proc, 'returncode', None)
    return None


def get_toolkit_root() -> Path:
    """获取工具包的根目录"""
    return Path(__file__).parent.parent


def create_pid_file(run_dir: Path, service_name: str, pid: Optional[int] = None) -> Path:
    """在 run_dir 下创建PID文件"""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    pid_file = run_dir / f"{service_name}.pid"
    pid_file.write_text(str(pid if pid is not None else os.getpid()))
    return pid_file


def read_pid_file(run_dir: Path, service_name: str) -> Optional[int]:
    pid_file = Path(run_dir) / f"{service_name}.pid"
    if pid_file.exists():
        try:
            return int(pid_file.read_text().strip())
        except ValueError:
            return None
    return None


def remove_pid_file(run_dir: Path, service_name: str):
    pid_file = Path(run_dir) / f"{service_name}.pid"
    if pid_file.exists():
        pid_file.unlink()


def is_service_running(run_dir: Path, service_name: str) -> bool:
    """基于PID文件检查服务是否在运行；进程已不存在时清理PID文件"""
    pid = read_pid_file(run_dir, service_name)
    if pid is None:
        return False
    if is_process_alive(pid):
        return True
    remove_pid_file(run_dir, service_name)
    return False


def hardware_info() -> Dict[str, str]:
    """采集本机硬件概要，随实验一起存入数据库"""
    try:
        freq = psutil.cpu_freq()
        cpu_mhz = str(int(freq.max)) if freq and freq.max else ''
    except (NotImplementedError, FileNotFoundError):
        cpu_mhz = ''
    return {
        'hostname': platform.node(),
        'cpu': platform.processor() or platform.machine(),
        'cpu_count': str(psutil.cpu_count() or 0),
        'cpu_mhz': cpu_mhz,
        'memory': str(psutil.virtual_memory().total),
        'os': f"{platform.system()} {platform.release()}",
        'net': ','.join(sorted(psutil.net_if_addrs())),
    }


if __name__ == "__main__":
    print(f"Toolkit root: {get_toolkit_root()}")
    for key, value in hardware_info().items():
        print(f"  {key}: {value}")
