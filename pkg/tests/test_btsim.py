"""模拟客户端 btsim 的命令行"""

import signal

import pytest

from conftest import KIB, MIB
from src import btsim
from src.log_parsers import Direction, MessageKind, VlogDialect, parse_status_line, parse_verbose_stream
from src.swarm_simulator import simulate


@pytest.fixture(autouse=True)
def keep_signal_handlers(monkeypatch):
    monkeypatch.setattr(btsim.signal, 'signal', lambda signum, handler: signal.getsignal(signum))


def argv(tmp_path, torrent, *extra):
    return ['--torrent', str(torrent), '--slog', str(tmp_path / 'out' / 'p.slog'),
            '--vlog', str(tmp_path / 'out' / 'p.vlog'), '--download-dir', str(tmp_path / 'dl'),
            '--tick-delay', '0', *extra]


class TestStandalone:

    def test_leecher_runs_to_completion(self, tmp_path, small_torrent):
        path, info = small_torrent
        assert btsim.main(argv(tmp_path, path, '--down', str(256 * KIB), '--up', str(64 * KIB))) == 0

        lines = (tmp_path / 'out' / 'p.slog').read_text().splitlines()
        records = [parse_status_line(line) for line in lines]
        assert records[-1].downloaded == info.length
        assert records[-1].percent == 100
        assert all(r.down_speed <= 256 * KIB for r in records)
        assert (tmp_path / 'dl' / info.name).stat().st_size == info.length

        with open(tmp_path / 'out' / 'p.vlog', encoding='utf-8') as stream:
            verbose = list(parse_verbose_stream(stream, VlogDialect.UNIFIED_FILE))
        received = [r for r in verbose if r.kind is MessageKind.PIECE and r.direction is Direction.RECEIVED]
        assert len(received) == info.length // (16 * KIB)

    def test_matches_in_process_simulation(self, tmp_path, small_torrent):
        path, info = small_torrent
        args = btsim.build_parser().parse_args(argv(tmp_path, path, '--down', str(MIB)))
        expected = simulate(btsim.standalone_config(args, info.length, info.piece_length, info.name))
        assert btsim.run(args) == 0
        written = (tmp_path / 'out' / 'p.slog').read_text().splitlines()
        assert [parse_status_line(line) for line in written] == list(expected.status['self'])

    def test_seeder_writes_full_payload(self, tmp_path, small_torrent):
        path, info = small_torrent
        assert btsim.main(argv(tmp_path, path, '--role', 'seeder')) == 0
        assert (tmp_path / 'dl' / info.name).stat().st_size == info.length


class TestErrors:

    def test_bad_torrent(self, tmp_path):
        bogus = tmp_path / 'bogus.torrent'
        bogus.write_bytes(b'not bencoded')
        assert btsim.main(argv(tmp_path, bogus)) == 2

    def test_roster_needs_peer_id(self, tmp_path, small_torrent):
        path, _ = small_torrent
        roster = tmp_path / 'roster.json'
        roster.write_text('{}')
        assert btsim.main(argv(tmp_path, path, '--roster', str(roster))) == 2
