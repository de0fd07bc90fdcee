"""测试共用的fixture"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from config.experiment import Role  # noqa: E402
from src.agent import Agent  # noqa: E402
from src.client_adapters import default_registry  # noqa: E402
from src.swarm_simulator import SimConfig, SimPeer  # noqa: E402
from src.torrent_meta import make_torrent  # noqa: E402

KIB = 1024
MIB = 1024 * 1024


@pytest.fixture
def small_torrent(tmp_path):
    """1 MiB、256 KiB 分块的单文件torrent"""
    path = tmp_path / 'small.torrent'
    info = make_torrent(path, 'small.bin', MIB, 256 * KIB)
    return path, info


@pytest.fixture
def agent(tmp_path):
    """进程内Agent，监听随机端口"""
    state_dir = tmp_path / 'agent-state'
    instance = Agent(state_dir, default_registry(), '127.0.0.1', 0,
                     stop_grace=2.0, poll_interval=0.2).start_background()
    yield instance
    instance.shutdown()


def tiny_swarm(seed: int = 7, leechers: int = 2, file_size: int = MIB, piece_size: int = 256 * KIB,
               down_cap: int = 256 * KIB, up_cap: int = 128 * KIB) -> SimConfig:
    """一个不限速做种者 + 若干限速下载者"""
    peers = [SimPeer('seed', '10.0.0.254:6881', Role.SEEDER)]
    peers += [SimPeer(f"l{i:02d}", f"10.0.1.{i + 1}:6881", Role.LEECHER, down_cap, up_cap)
              for i in range(leechers)]
    return SimConfig(seed=seed, peers=tuple(peers), file_size=file_size, piece_size=piece_size)
