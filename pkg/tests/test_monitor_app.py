"""Agent HTTP监视接口"""

import pytest

from src.agent import SessionManager, SessionRecord, SessionState
from src.client_adapters import default_registry
from src.monitor_app import VERSION, MonitorApp

STATUS_LINE = ('2010-03-01T10:00:12Z ds=524288 us=262144 d=6291456 u=1048576 eta=58 peers=49 '
               'pct=12.50 size=50331648 name=test.bin\n')


def fake_session(manager, sid, slog, state=SessionState.RUNNING):
    record = SessionRecord(
        id=sid, client='simulated', torrent_path='/t', download_dir='/d', slog_path=str(slog),
        vlog_path=str(slog) + '.vlog', output_path='/o', argv=['btsim'], pid=4242, state=state,
    )
    manager.sessions[sid] = record
    return record


@pytest.fixture
def manager(tmp_path):
    return SessionManager(tmp_path / 'state', default_registry())


@pytest.fixture
def client(manager):
    app = MonitorApp(manager).app
    app.config['TESTING'] = True
    return app.test_client()


class TestHealth:

    def test_healthy(self, client, manager, tmp_path):
        fake_session(manager, 1, tmp_path / 'a.slog')
        fake_session(manager, 2, tmp_path / 'b.slog', SessionState.EXITED)
        data = client.get('/health').get_json()
        assert data['status'] == 'healthy'
        assert data['version'] == VERSION
        assert data['running_sessions'] == 1
        assert 'cpu' in data['hardware']


class TestSessions:

    def test_empty(self, client):
        assert client.get('/sessions').get_json() == {'sessions': [], 'total_count': 0}

    def test_listing(self, client, manager, tmp_path):
        fake_session(manager, 2, tmp_path / 'b.slog', SessionState.STOPPED)
        fake_session(manager, 1, tmp_path / 'a.slog')
        data = client.get('/sessions').get_json()
        assert data['total_count'] == 2
        assert [s['id'] for s in data['sessions']] == [1, 2]
        assert data['sessions'][1]['state'] == 'STOPPED'

    def test_status(self, client, manager, tmp_path):
        slog = tmp_path / 'a.slog'
        slog.write_text(STATUS_LINE)
        fake_session(manager, 1, slog)
        data = client.get('/sessions/1/status').get_json()
        assert data == {'id': 1, 'down_speed': '524288', 'up_speed': '262144', 'downloaded': '6291456',
                        'uploaded': '1048576', 'eta': '58', 'num_peers': '49'}

    def test_status_unknown_session(self, client):
        assert client.get('/sessions/9/status').status_code == 404

    def test_status_without_log(self, client, manager, tmp_path):
        fake_session(manager, 1, tmp_path / 'missing.slog')
        response = client.get('/sessions/1/status')
        assert response.status_code == 409
        assert 'missing' in response.get_json()['error']


class TestArchives:

    def test_download(self, client, manager):
        (manager.archive_dir / 'session-1.tar.gz').write_bytes(b'\x1f\x8barchive')
        response = client.get('/archives/session-1.tar.gz')
        assert response.status_code == 200
        assert response.data == b'\x1f\x8barchive'

    @pytest.mark.parametrize('name', ['session-1.zip', 'absent.tar.gz', '..%2Fsecret.tar.gz'])
    def test_rejected(self, client, name):
        assert client.get(f"/archives/{name}").status_code == 404
