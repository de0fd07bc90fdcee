"""归档取回与解包"""

import io
import tarfile

import pytest
import requests

from config.experiment import NodeSpec
from src.agent import SessionManager
from src.client_adapters import default_registry
from src.log_collector import (
    CollectionError, HttpArchiveCollector, SharedFilesystemCollector, collector_for, extract_archive,
)
from src.monitor_app import MonitorServer


def make_archive(path, members):
    with tarfile.open(path, 'w:gz') as tar:
        for name, data in members.items():
            info = tarfile.TarInfo(name)
            info.size = len(data)
            tar.addfile(info, io.BytesIO(data))
    return path


def node(**kwargs):
    return NodeSpec('n1', '127.0.0.1', client_paths={'simulated': '/x'}, **kwargs)


class TestExtract:

    def test_extracts_files(self, tmp_path):
        archive = make_archive(tmp_path / 'a.tar.gz', {'p1.slog': b'status\n', 'p1.vlog': b'verbose\n'})
        files = extract_archive(archive, tmp_path / 'out')
        assert [f.name for f in files] == ['p1.slog', 'p1.vlog']
        assert (tmp_path / 'out' / 'p1.vlog').read_bytes() == b'verbose\n'

    @pytest.mark.parametrize('name', ['../escape.log', '/etc/passwd'])
    def test_rejects_paths_outside(self, tmp_path, name):
        archive = make_archive(tmp_path / 'evil.tar.gz', {'ok.log': b'x', name: b'y'})
        with pytest.raises(CollectionError):
            extract_archive(archive, tmp_path / 'out')
        assert not (tmp_path / 'escape.log').exists()
        assert not (tmp_path / 'out' / 'ok.log').exists()

    def test_rejects_links(self, tmp_path):
        archive = tmp_path / 'link.tar.gz'
        with tarfile.open(archive, 'w:gz') as tar:
            info = tarfile.TarInfo('link.log')
            info.type = tarfile.SYMTYPE
            info.linkname = '/etc/passwd'
            tar.addfile(info)
        with pytest.raises(CollectionError):
            extract_archive(archive, tmp_path / 'out')

    def test_not_an_archive(self, tmp_path):
        bogus = tmp_path / 'bogus.tar.gz'
        bogus.write_bytes(b'plain text')
        with pytest.raises(CollectionError):
            extract_archive(bogus, tmp_path / 'out')


class TestSharedFilesystem:

    def test_copy(self, tmp_path):
        source = make_archive(tmp_path / 'session-1.tar.gz', {'a.slog': b'1'})
        copied = SharedFilesystemCollector().fetch(node(), str(source), tmp_path / 'collected')
        assert copied == tmp_path / 'collected' / 'session-1.tar.gz'
        assert copied.read_bytes() == source.read_bytes()

    def test_missing_source(self, tmp_path):
        with pytest.raises(CollectionError):
            SharedFilesystemCollector().fetch(node(), str(tmp_path / 'nope.tar.gz'), tmp_path / 'c')


class TestHttp:

    @pytest.fixture
    def monitor(self, tmp_path):
        manager = SessionManager(tmp_path / 'agent-state', default_registry())
        server = MonitorServer(manager, '127.0.0.1', 0)
        server.start()
        yield manager, server
        server.stop()

    def test_download(self, monitor, tmp_path):
        manager, server = monitor
        source = make_archive(manager.archive_dir / 'session-3.tar.gz', {'p.slog': b'abc'})
        remote = '/somewhere/on/the/node/session-3.tar.gz'
        fetched = HttpArchiveCollector(timeout=5).fetch(node(monitor_port=server.port), remote, tmp_path / 'in')
        assert fetched.read_bytes() == source.read_bytes()
        assert [f.name for f in extract_archive(fetched, tmp_path / 'unpacked')] == ['p.slog']

    def test_missing_archive(self, monitor, tmp_path):
        _, server = monitor
        with pytest.raises(CollectionError):
            HttpArchiveCollector(timeout=5).fetch(node(monitor_port=server.port), 'x/none.tar.gz', tmp_path / 'in')
        assert not (tmp_path / 'in' / 'none.tar.gz').exists()

    def test_node_without_monitor(self, tmp_path):
        with pytest.raises(CollectionError):
            HttpArchiveCollector().fetch(node(), 'a.tar.gz', tmp_path)

    @pytest.mark.parametrize('failure', [
        requests.exceptions.ChunkedEncodingError('connection broken'),
        OSError(28, 'No space left on device'),
        None,
    ])
    def test_cut_off_stream_leaves_nothing(self, monkeypatch, tmp_path, failure):
        class CutResponse:
            headers = {'Content-Length': str(3 * 1024)}

            def __enter__(self):
                return self

            def __exit__(self, *exc):
                return False

            def raise_for_status(self):
                pass

            def iter_content(self, chunk_size):
                yield b'\x1f\x8b' + b'\0' * 1022
                if failure is not None:
                    raise failure

        monkeypatch.setattr('src.log_collector.requests.get', lambda *args, **kwargs: CutResponse())
        with pytest.raises(CollectionError):
            HttpArchiveCollector(timeout=5).fetch(node(monitor_port=1), 'x/session-1.tar.gz', tmp_path / 'in')
        assert list((tmp_path / 'in').iterdir()) == []


def test_collector_for():
    assert isinstance(collector_for('shared'), SharedFilesystemCollector)
    assert isinstance(collector_for('http', 3.0), HttpArchiveCollector)
    with pytest.raises(CollectionError):
        collector_for('scp')
