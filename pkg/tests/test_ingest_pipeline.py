"""模拟器 → 日志文件 → 解析 → 存储 → 查询 的整条流水线"""

from collections import Counter

import pytest

from conftest import MIB, tiny_swarm
from src.ingest import PeerLogs, ingest_experiment
from src.log_parsers import VlogDialect
from src.storage import open_store
from src.swarm_simulator import emit_logs, simulate

EVERYTHING = (0, 1 << 62)
HARDWARE = {'cpu_description': 'test x1', 'ram_bytes': 1, 'os_version': 'test', 'net_info': 'lo'}


def run_pipeline(result, tmp_path, dialect):
    paths = {p.peer_id: (tmp_path / f"{p.peer_id}.slog", tmp_path / f"{p.peer_id}.vlog")
             for p in result.config.peers}
    emit_logs(result, dialect, paths)
    logs = [PeerLogs.from_paths(p.peer_id, 'simulated', p.addr, *paths[p.peer_id], seeder=p.is_seeder)
            for p in result.config.peers]
    store = open_store(tmp_path / 'pipeline.db')
    report = ingest_experiment(store, 'pipeline', logs, hardware=HARDWARE)
    return store, report


@pytest.fixture(scope='module')
def simulated():
    return simulate(tiny_swarm(seed=3, leechers=6, file_size=4 * MIB))


@pytest.mark.parametrize('dialect', list(VlogDialect))
def test_store_holds_exact_event_multiset(simulated, tmp_path, dialect):
    store, report = run_pipeline(simulated, tmp_path, dialect)
    with store:
        total = 0
        for peer in simulated.config.peers:
            peer_id = report.peer_ids[peer.peer_id]
            stored = store.query_messages(peer_id, *EVERYTHING)
            expected = simulated.verbose_records(peer.peer_id)
            assert len(stored) == len(expected)
            assert Counter(stored) == Counter(expected)
            total += len(expected)
        assert store.message_total() == total == report.verbose_rows
        assert report.skipped_lines == 0


@pytest.mark.parametrize('dialect', list(VlogDialect))
def test_status_rows_survive(simulated, tmp_path, dialect):
    store, report = run_pipeline(simulated, tmp_path, dialect)
    with store:
        for peer in simulated.config.peers:
            assert store.query_status(report.peer_ids[peer.peer_id]) == simulated.status[peer.peer_id]


def test_experiment_metadata(simulated, tmp_path):
    store, report = run_pipeline(simulated, tmp_path, VlogDialect.UNIFIED_FILE)
    with store:
        meta = store.get_experiment(report.experiment_id)
        assert meta.num_peers == len(simulated.config.peers)
        assert meta.num_seeders == 1
        assert meta.file_size == 4 * MIB
        assert meta.file_name == simulated.config.file_name
        assert meta.start_time == 1267437600
        peer = store.get_peer(report.peer_ids['l00'])
        assert peer.cpu_description == 'test x1'
        assert report.raw_bytes > 0


def test_noise_lines_are_counted_not_stored(tmp_path):
    result = simulate(tiny_swarm(leechers=1))
    paths = {'l00': (tmp_path / 'l00.slog', tmp_path / 'l00.vlog')}
    emit_logs(result, VlogDialect.UNIFIED_FILE, paths)
    with open(tmp_path / 'l00.vlog', 'a', encoding='utf-8') as f:
        f.write('libtorrent: tracker announce\n\nalert: done\n')
    logs = [PeerLogs.from_paths('l00', 'simulated', '10.0.1.1:6881', *paths['l00'])]
    with open_store(tmp_path / 'noise.db') as store:
        report = ingest_experiment(store, 'noise', logs, hardware=HARDWARE)
        assert report.skipped_lines == 2
        assert report.verbose_rows == len(result.verbose_records('l00'))


def test_second_experiment_in_same_store(simulated, tmp_path):
    store, first = run_pipeline(simulated, tmp_path, VlogDialect.UNIFIED_FILE)
    with store:
        logs = [PeerLogs.from_paths('seed', 'simulated', '10.0.0.254:6881',
                                    tmp_path / 'seed.slog', tmp_path / 'seed.vlog', seeder=True)]
        second = ingest_experiment(store, 'again', logs, hardware=HARDWARE)
        assert second.experiment_id == first.experiment_id + 1
        assert store.find_peer('seed').experiment_id == second.experiment_id
        assert store.find_peer('seed', first.experiment_id).experiment_id == first.experiment_id
