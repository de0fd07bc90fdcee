"""客户端适配器：命令行生成与注册表"""

import json
import sys

import pytest

from src.client_adapters import (
    BTSIM_SCRIPT, AdapterError, AdapterRegistry, AdapterSpec, DuplicateAdapter, LaunchRequest, MissingPath,
    UnknownAdapter, UnsafeArgument, build_simulated, check_argv, default_registry, load_manifest,
)
from src.log_parsers import VlogDialect

RATE_FLAGS = {'--down', '--up', '--maxdown', '--maxup', '--max-download-rate', '--max-upload-rate'}

REQUEST = LaunchRequest(
    torrent='/srv/test.torrent',
    download_dir='/srv/dl',
    slog='/srv/logs/p1.slog',
    vlog='/srv/logs/p1.vlog',
    down_limit=524288,
    up_limit=262144,
    extra=(('role', 'leecher'),),
)


@pytest.fixture
def registry():
    return default_registry({'simulated': '/opt/swarmforge/bin/btsim',
                             'hrktorrent': '/opt/swarmforge/bin/hrktorrent-wrapper'})


class TestResolve:

    def test_builtins(self):
        registry = default_registry()
        assert registry.names() == ['hrktorrent', 'simulated', 'tribler']
        simulated = registry.resolve('simulated')
        assert simulated.executable == (sys.executable, str(BTSIM_SCRIPT))
        assert simulated.vlog_dialect is VlogDialect.UNIFIED_FILE

    def test_dialects(self):
        registry = default_registry()
        assert registry.resolve('hrktorrent').vlog_dialect is VlogDialect.PER_PEER_FILES
        assert registry.resolve('tribler').vlog_dialect is VlogDialect.UNIFIED_FILE

    def test_unknown(self):
        with pytest.raises(UnknownAdapter):
            default_registry().resolve('azureus')

    def test_override_for_unknown_client(self):
        with pytest.raises(UnknownAdapter):
            default_registry({'azureus': '/usr/bin/azureus'})

    def test_frozen(self, registry):
        with pytest.raises(AdapterError):
            registry.register(AdapterSpec('extra', ('x',), VlogDialect.UNIFIED_FILE, build_simulated))

    def test_duplicate(self):
        registry = AdapterRegistry()
        spec = AdapterSpec('simulated', ('btsim',), VlogDialect.UNIFIED_FILE, build_simulated)
        registry.register(spec)
        with pytest.raises(DuplicateAdapter):
            registry.register(spec)
        assert 'simulated' in registry

    def test_manifest(self, tmp_path):
        path = tmp_path / 'clients.json'
        path.write_text(json.dumps({'tribler': '/opt/tribler/run'}))
        assert load_manifest(path).resolve('tribler').executable == ('/opt/tribler/run',)

    def test_bad_manifest(self, tmp_path):
        path = tmp_path / 'clients.json'
        path.write_text(json.dumps(['tribler']))
        with pytest.raises(AdapterError):
            load_manifest(path)


class TestCommandLine:

    def test_simulated_golden(self, registry):
        argv = registry.resolve('simulated').build_command_line(REQUEST)
        assert argv == [
            '/opt/swarmforge/bin/btsim', '--torrent', '/srv/test.torrent', '--role', 'leecher',
            '--down', '524288', '--up', '262144', '--slog', '/srv/logs/p1.slog',
            '--vlog', '/srv/logs/p1.vlog', '--download-dir', '/srv/dl',
        ]

    def test_simulated_options(self, registry):
        request = LaunchRequest('/t', '/d', '/s', '/v', extra=(
            ('role', 'seeder'), ('peer_id', 'p001'), ('roster', '/srv/roster.json'), ('tick_delay', '0.05')))
        argv = registry.resolve('simulated').build_command_line(request)
        assert argv[argv.index('--role') + 1] == 'seeder'
        assert argv[-6:] == ['--peer-id', 'p001', '--roster', '/srv/roster.json', '--tick-delay', '0.05']

    def test_unlimited_caps_omit_flags(self, registry):
        request = LaunchRequest('/t', '/d', '/s', '/v')
        for name in registry.names():
            argv = registry.resolve(name).build_command_line(request)
            assert not RATE_FLAGS.intersection(argv)

    def test_hrktorrent_golden(self, registry):
        argv = registry.resolve('hrktorrent').build_command_line(REQUEST)
        assert argv == [
            '/opt/swarmforge/bin/hrktorrent-wrapper', '--dir', '/srv/dl', '--status-log', '/srv/logs/p1.slog',
            '--verbose-log', '/srv/logs/p1.vlog', '--maxdown', '512', '--maxup', '256', '/srv/test.torrent',
        ]

    def test_tribler_golden(self):
        argv = default_registry().resolve('tribler').build_command_line(REQUEST)
        assert argv == [
            'tribler-cli', '--torrent', '/srv/test.torrent', '--output-dir', '/srv/dl',
            '--status-file', '/srv/logs/p1.slog', '--verbose-file', '/srv/logs/p1.vlog',
            '--max-download-rate', '512', '--max-upload-rate', '256',
        ]

    def test_deterministic(self, registry):
        spec = registry.resolve('simulated')
        assert spec.build_command_line(REQUEST) == spec.build_command_line(REQUEST)

    def test_small_limit_rounds_up_to_one_kib(self, registry):
        request = LaunchRequest('/t', '/d', '/s', '/v', down_limit=100)
        argv = registry.resolve('hrktorrent').build_command_line(request)
        assert argv[argv.index('--maxdown') + 1] == '1'

    @pytest.mark.parametrize('field', ['torrent', 'download_dir', 'slog', 'vlog'])
    def test_missing_path(self, registry, field):
        values = dict(torrent='/t', download_dir='/d', slog='/s', vlog='/v')
        values[field] = ''
        with pytest.raises(MissingPath):
            registry.resolve('simulated').build_command_line(LaunchRequest(**values))

    @pytest.mark.parametrize('path', ['/srv/a;rm -rf /', '/srv/$(id)', '/srv/`x`', '/srv/a|b', '/srv/a\nb'])
    def test_shell_metacharacters(self, registry, path):
        with pytest.raises(UnsafeArgument):
            registry.resolve('simulated').build_command_line(LaunchRequest(path, '/d', '/s', '/v'))

    def test_spaces_are_fine(self):
        check_argv(['/srv/my torrents/a b.torrent'])
