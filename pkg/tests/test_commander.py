"""Commander：目标选择、扇出隔离与完整场景"""

import argparse
import json
import socket

import pytest

from conftest import KIB, MIB
from config.experiment import NodeSpec, PlacementSpec, Role, SwarmSpec, UnknownNodeId, synthetic_addr
from src.bootstrap import LocalExecTransport
from src.client_adapters import BTSIM_SCRIPT
from src.commander import (
    Commander, CommanderError, MissingSwarm, NodeResult, ScenarioRunner, ScenarioSummary, TargetSelector,
    build_sim_config, cleanup_flags, exit_code, render_summary, scenario_timeout,
)
from src.log_collector import SharedFilesystemCollector
from src.storage import SwarmStore
from src.swarm_simulator import UNLIMITED_RATE
from src.torrent_meta import read_torrent
from src.wire_protocol import CommandKind, ErrorCode, ResponseEnvelope
from src.wire_transport import AgentClient

INVENTORY = [NodeSpec(f"n{i}", f"10.1.0.{i}", client_paths={'simulated': '/x'}) for i in range(1, 4)]


def free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        sock.bind(('127.0.0.1', 0))
        return sock.getsockname()[1]


def placement(index, node_id, role=Role.LEECHER, base='logs', **kwargs):
    peer_id = f"p{index:03d}"
    values = dict(down_limit=256 * KIB, up_limit=128 * KIB) if role is Role.LEECHER else {}
    values.update(kwargs)
    return PlacementSpec(
        node_id=node_id, client='simulated', role=role, download_dir=f"dl/{peer_id}",
        slog_path=f"{base}/{peer_id}.slog", vlog_path=f"{base}/{peer_id}.vlog",
        peer_id=peer_id, addr=synthetic_addr(index), **values,
    )


def three_peer_swarm(torrent_path, node_ids=('n1', 'n2', 'n3')) -> SwarmSpec:
    return SwarmSpec('e2e', str(torrent_path), (
        placement(0, node_ids[0], Role.SEEDER),
        placement(1, node_ids[1]),
        placement(2, node_ids[2]),
    ), seed=11)


class TestTargetSelector:

    @pytest.mark.parametrize('text', [None, 'ALL', 'all', ' ALL '])
    def test_all(self, text):
        selector = TargetSelector.parse(text, text)
        assert selector.node_ids is None
        assert selector.session_ids is None
        assert selector.resolve(INVENTORY) == INVENTORY

    def test_subset_keeps_inventory_order(self):
        selector = TargetSelector.parse('n3, n1', '2,1')
        assert [n.node_id for n in selector.resolve(INVENTORY)] == ['n1', 'n3']
        assert selector.session_ids == frozenset({1, 2})

    def test_unknown_node(self):
        with pytest.raises(UnknownNodeId):
            TargetSelector.parse('n1,n9').resolve(INVENTORY)

    def test_non_integer_session(self):
        with pytest.raises(CommanderError):
            TargetSelector.parse(None, '1,two')


class TestResults:

    def test_render_ok(self):
        result = NodeResult('n1', True, (('session', '3'), ('state', 'RUNNING')))
        assert result.render() == 'n1\tstatus=OK\tsession=3\tstate=RUNNING'
        assert result.get('state') == 'RUNNING'

    def test_render_error(self):
        result = NodeResult('n2', False, (('session', '4'),), error='no such session', code='BAD_ID')
        assert result.render() == 'n2\tstatus=ERR\tcode=BAD_ID\tsession=4\tmessage=no such session'

    def test_exit_code(self):
        ok = NodeResult('n1', True)
        bad = NodeResult('n2', False, error='x', code='UNREACHABLE')
        assert exit_code([ok, ok]) == 0
        assert exit_code([ok, bad]) == 1
        assert exit_code([]) == 1


class TestFanOut:

    def test_unreachable_node_is_isolated(self, agent):
        live = NodeSpec('live', '127.0.0.1', agent_port=agent.address[1], client_paths={'simulated': '/x'})
        dead = NodeSpec('dead', '127.0.0.1', agent_port=free_port(), client_paths={'simulated': '/x'})
        commander = Commander([dead, live], connect_timeout=1.0, stop_grace=1.0)
        results = commander.cmd_getclients(TargetSelector())
        assert [r.node_id for r in results] == ['dead', 'live']
        assert not results[0].ok
        assert results[0].code == 'UNREACHABLE'
        assert results[1].ok
        assert results[1] == Commander([live]).cmd_getclients(TargetSelector())[0]

    def test_status_without_sessions(self, agent):
        live = NodeSpec('live', '127.0.0.1', agent_port=agent.address[1], client_paths={'simulated': '/x'})
        results = Commander([live]).cmd_status(TargetSelector())
        assert results == [NodeResult('live', True, (('sessions', '0'),))]

    def test_unknown_session(self, agent):
        live = NodeSpec('live', '127.0.0.1', agent_port=agent.address[1], client_paths={'simulated': '/x'})
        results = Commander([live]).cmd_stop(TargetSelector.parse(None, '42'))
        assert len(results) == 1
        assert not results[0].ok
        assert results[0].get('session') == '42'

    def test_session_listing_error_is_reported(self, agent, monkeypatch):
        live = NodeSpec('live', '127.0.0.1', agent_port=agent.address[1], client_paths={'simulated': '/x'})
        forward = AgentClient.request

        def failing_listing(client, cmd):
            if cmd.kind is CommandKind.GET_CLIENTS:
                return ResponseEnvelope.err(ErrorCode.IO_ERROR, 'session table unavailable')
            return forward(client, cmd)

        monkeypatch.setattr(AgentClient, 'request', failing_listing)
        results = Commander([live]).cmd_stop(TargetSelector())
        assert results == [NodeResult('live', False, error='session table unavailable', code='IO_ERROR')]
        assert exit_code(results) == 1


class TestStartArgs:

    def test_simulated_placement(self, small_torrent):
        path, _ = small_torrent
        swarm = three_peer_swarm(path)
        args = Commander(INVENTORY, swarm).start_args(swarm.placements[1], path.parent / 'roster.json', 0.05)
        assert args['TORRENT'] == str(path.resolve())
        assert args['DOWN'] == str(256 * KIB)
        assert args['UP'] == str(128 * KIB)
        assert args['ROLE'] == 'leecher'
        assert args['PEER_ID'] == 'p001'
        assert args['TICK_DELAY'] == '0.05'
        assert args['ROSTER'].endswith('roster.json')

    def test_unlimited_seeder(self, small_torrent):
        path, _ = small_torrent
        swarm = three_peer_swarm(path)
        args = Commander(INVENTORY, swarm).start_args(swarm.placements[0])
        assert 'DOWN' not in args and 'UP' not in args
        assert 'ROSTER' not in args
        assert args['ROLE'] == 'seeder'

    def test_requires_swarm(self):
        with pytest.raises(MissingSwarm):
            Commander(INVENTORY).start_args(placement(1, 'n1'))

    def test_node_without_placements_is_no_target(self, small_torrent):
        path, _ = small_torrent
        commander = Commander(INVENTORY, three_peer_swarm(path, node_ids=('n1', 'n1', 'n3')))
        results = commander.cmd_start(TargetSelector.parse('n2'))
        assert results == []
        assert exit_code(results) == 1


class TestScenarioHelpers:

    def test_sim_config(self, small_torrent):
        path, info = small_torrent
        config = build_sim_config(three_peer_swarm(path), info)
        assert [p.peer_id for p in config.peers] == ['p000', 'p001', 'p002']
        assert config.peers[0].down_cap == UNLIMITED_RATE
        assert config.peers[1].down_cap == 256 * KIB
        assert config.file_size == MIB
        assert config.seed == 11

    def test_timeout(self, small_torrent):
        path, _ = small_torrent
        swarm = three_peer_swarm(path)
        assert scenario_timeout(swarm, MIB, 1.0, grace=0) == 40
        assert scenario_timeout(swarm, MIB, 0.5, grace=5) == 25

    def test_cleanup_needs_a_flag(self):
        args = argparse.Namespace(clean_all=False, clean_down=False, clean_vlogs=False,
                                  clean_slogs=False, clean_archive=False)
        with pytest.raises(CommanderError):
            cleanup_flags(args)
        args.clean_vlogs = True
        assert cleanup_flags(args) == {'ALL': 0, 'DOWN': 0, 'VLOGS': 1, 'SLOGS': 0, 'ARCHIVE': 0}

    def test_render_summary(self):
        summary = ScenarioSummary('s', 'x.db', 1, 2.0, peers=[{
            'peer': 'p001', 'node': 'n2', 'role': 'leecher', 'session': 1, 'state': 'EXITED',
            'complete': True, 'completion_time': 9, 'plateau': None,
        }], classes=[{'down_limit': 262144, 'peers': 1, 'mean_plateau': 262144.0}])
        assert render_summary(summary) == [
            'n2\tpeer=p001\trole=leecher\tsession=1\tstate=EXITED\tcomplete=True\tcompletion_time=9\tplateau=',
            'class\tdown_limit=262144\tpeers=1\tmean_plateau=262144.0',
        ]
        assert summary.all_complete

    def test_missing_torrent_aborts_before_start(self, tmp_path):
        transport = LocalExecTransport(default_state_dir=tmp_path / 'state')
        commander = Commander(INVENTORY, three_peer_swarm(tmp_path / 'absent.torrent'), transport)
        with pytest.raises(CommanderError):
            ScenarioRunner(commander, tmp_path / 'run').run()
        assert transport.processes == {}
        assert not (tmp_path / 'run').exists()


class TestEndToEnd:
    """三个本地Agent、一个做种者两个下载者，运行两次"""

    def run_once(self, tmp_path, torrent_path, label):
        nodes = [NodeSpec(f"n{i}", '127.0.0.1', agent_port=free_port(),
                          client_paths={'simulated': str(BTSIM_SCRIPT)},
                          state_dir=str(tmp_path / label / f"agent-n{i}"))
                 for i in range(1, 4)]
        transport = LocalExecTransport(stop_grace=2.0, startup_timeout=20.0)
        commander = Commander(nodes, three_peer_swarm(torrent_path), transport, connect_timeout=2.0,
                              stop_grace=2.0)
        run_dir = tmp_path / label / 'run'
        try:
            summary = ScenarioRunner(commander, run_dir, tick_delay=0.05,
                                     collector=SharedFilesystemCollector(), poll_interval=0.25).run()
        finally:
            commander.close()
        return summary, run_dir

    def test_two_runs_produce_the_same_store(self, tmp_path, small_torrent):
        torrent_path, _ = small_torrent
        first, first_dir = self.run_once(tmp_path, torrent_path, 'first')
        second, second_dir = self.run_once(tmp_path, torrent_path, 'second')

        for summary, run_dir in ((first, first_dir), (second, second_dir)):
            assert summary.all_complete
            assert [p['peer'] for p in summary.peers] == ['p000', 'p001', 'p002']
            assert all(p['archive'] for p in summary.peers)
            assert sorted(f.name for f in (run_dir / 'archives').iterdir()) == [
                'e2e-p000.tar.gz', 'e2e-p001.tar.gz', 'e2e-p002.tar.gz']
            assert json.loads((run_dir / 'roster.json').read_text())
            saved = json.loads((run_dir / 'summary.json').read_text())
            assert saved['experiment_id'] == summary.experiment_id

        with SwarmStore(first_dir / 'experiment.db', read_only=True) as a, \
                SwarmStore(second_dir / 'experiment.db', read_only=True) as b:
            assert a.dump_canonical() == b.dump_canonical()
            assert a.get_experiment(first.experiment_id).file_size == read_torrent(torrent_path).length
