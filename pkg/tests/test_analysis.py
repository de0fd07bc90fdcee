"""时间序列、消息统计、比较与导出"""

import random
from decimal import Decimal
from fractions import Fraction

import pytest

from src.analysis import (
    AccelSeries, AnalysisError, DisjointWindows, EmptyWindow, ExportError, MessageStats, SeriesTooShort,
    SpeedSeries, acceleration_series, compare, detect_bootstrap, download_phase, download_window,
    export_plot, message_stats, plateau_summary, speed_series,
)
from src.log_parsers import Direction, MessageKind, StatusRecord, VerboseRecord, from_epoch
from src.storage import ExperimentMeta, PeerMeta, UnknownPeer, open_store

T0 = 1267437600
SIZE = 1 << 20


def random_speed(rng: random.Random, n: int) -> SpeedSeries:
    t, points = 0, []
    for _ in range(n):
        t += rng.choice([1, 1, 1, 2, 5])
        points.append((t, rng.randrange(0, 1 << 20)))
    return SpeedSeries(1, 'down', tuple(points))


def add_status(store, pid, seconds, speeds, start=T0, done_at=None):
    downloaded = 0
    records = []
    for s, v in zip(seconds, speeds):
        downloaded = min(SIZE, downloaded + v)
        if done_at is not None and s >= done_at:
            downloaded = SIZE
        records.append(StatusRecord(from_epoch(start + s), v, v // 2, downloaded, 0,
                                    0 if downloaded == SIZE else 10, 3,
                                    Decimal(downloaded * 10000 // SIZE).scaleb(-2), SIZE, 'a.bin'))
    store.insert_status(pid, records)


@pytest.fixture
def store(tmp_path):
    with open_store(tmp_path / 'analysis.db') as handle:
        handle.add_experiment(ExperimentMeta('exp', 2, 0, T0, 'a.bin', SIZE))
        yield handle


def new_peer(store, name, down_limit=None):
    return store.add_peer(PeerMeta(1, name, 'simulated', '10.0.0.1:6881', down_limit=down_limit))


class TestAcceleration:

    def test_matches_finite_difference(self):
        rng = random.Random(1000)
        for _ in range(1000):
            speed = random_speed(rng, rng.randint(2, 40))
            accel = acceleration_series(speed)
            pts = speed.points
            assert len(accel.points) == len(pts) - 1
            for i, (t, a) in enumerate(accel.points):
                assert t == pts[i][0]
                assert a == Fraction(pts[i + 1][1] - pts[i][1], pts[i + 1][0] - pts[i][0])

    def test_telescoping(self):
        rng = random.Random(77)
        for _ in range(200):
            speed = random_speed(rng, rng.randint(2, 60))
            accel = acceleration_series(speed)
            times = [t for t, _ in speed.points]
            total = sum(a * (t1 - t0) for (t0, a), t1 in zip(accel.points, times[1:]))
            assert total == speed.points[-1][1] - speed.points[0][1]

    def test_single_point(self):
        with pytest.raises(SeriesTooShort):
            acceleration_series(SpeedSeries(1, 'down', ((0, 5),)))


class TestSpeedSeries:

    def test_relative_times_and_gaps(self, store):
        pid = new_peer(store, 'p')
        add_status(store, pid, [0, 1, 2, 5], [100, 200, 300, 600])
        speed = speed_series(store, pid)
        assert speed.points == ((0, 100), (1, 200), (2, 300), (5, 600))
        assert acceleration_series(speed).points[-1] == (2, Fraction(100))

    def test_upload_direction_and_window(self, store):
        pid = new_peer(store, 'p')
        add_status(store, pid, range(10), [100 * i for i in range(10)])
        up = speed_series(store, 'p', 'up', window=(3, 6))
        assert up.points == ((3, 150), (4, 200), (5, 250))

    def test_empty_window(self, store):
        pid = new_peer(store, 'p')
        add_status(store, pid, range(3), [1, 2, 3])
        with pytest.raises(EmptyWindow):
            speed_series(store, pid, window=(10, 20))

    def test_bad_direction(self, store):
        pid = new_peer(store, 'p')
        with pytest.raises(AnalysisError):
            speed_series(store, pid, 'sideways')

    def test_unknown_peer(self, store):
        with pytest.raises(UnknownPeer):
            speed_series(store, 'ghost')


class TestBootstrap:

    @pytest.mark.parametrize('accels, expected', [
        ([50, 20, 1, -2], 2),
        ([1, 0, -1], 0),
        ([1, 0, 40], None),
        ([80, -80, 4, 4], 2),
    ])
    def test_detect(self, accels, expected):
        accel = AccelSeries(1, 'down', tuple((t, Fraction(a)) for t, a in enumerate(accels)))
        assert detect_bootstrap(accel, 100) == expected

    def test_empty(self):
        with pytest.raises(SeriesTooShort):
            detect_bootstrap(AccelSeries(1, 'down', ()), 100)

    def test_plateau_summary(self):
        speed = SpeedSeries(1, 'down', tuple(enumerate([10, 20, 40, 80, 100, 100, 99, 100])))
        summary = plateau_summary(speed, 100)
        assert summary.ramp_end == 4
        assert summary.mean == Fraction(399, 4)
        assert summary.max_abs_accel == 1
        assert summary.positive_prefix

    def test_never_stable(self):
        speed = SpeedSeries(1, 'down', tuple(enumerate([0, 100, 0, 100])))
        assert plateau_summary(speed, 100).ramp_end is None

    def test_download_phase(self, store):
        pid = new_peer(store, 'p')
        add_status(store, pid, range(8), [SIZE // 8] * 8, done_at=4)
        assert download_window(store, pid) == (0, 4)
        phase = download_phase(speed_series(store, pid), download_window(store, pid))
        assert [t for t, _ in phase.points] == [0, 1, 2, 3]


class TestMessageStats:

    def test_totals_match_row_counts(self, store):
        rng = random.Random(4)
        pid = new_peer(store, 'p')
        add_status(store, pid, range(100), [1] * 100)
        records = sorted((VerboseRecord(from_epoch(T0 + rng.randrange(100)), rng.choice(list(Direction)),
                                        rng.choice([MessageKind.CHOKE, MessageKind.UNCHOKE,
                                                    MessageKind.INTERESTED]), '10.0.0.2:6881')
                          for _ in range(500)), key=lambda r: r.timestamp)
        store.insert_verbose(pid, records)
        for _ in range(50):
            a = rng.randrange(100)
            b = a + rng.randrange(1, 30)
            stats = message_stats(store, pid, (a, b))
            assert stats.total == store.count_messages(pid, T0 + a, T0 + b)
            assert stats.window == (a, b)
        whole = message_stats(store, pid)
        assert whole.total == 500
        sent, received = whole.counts[MessageKind.CHOKE]
        assert sent + received == sum(1 for r in records if r.kind is MessageKind.CHOKE)
        assert whole.counts[MessageKind.PIECE] == (0, 0)


class TestCompare:

    def test_with_itself(self, store):
        pid = new_peer(store, 'p', down_limit=400)
        add_status(store, pid, range(20), [100, 200, 400] + [400] * 17)
        result = compare(store, pid, pid)
        assert result.window == (T0, T0 + 20)
        assert result.speed_a == result.speed_b
        assert result.stats_a == result.stats_b
        assert result.plateau_ratio == 1.0

    def test_common_window(self, store):
        a, b = new_peer(store, 'a'), new_peer(store, 'b')
        add_status(store, a, range(0, 10), [1] * 10)
        add_status(store, b, range(5, 15), [2] * 10)
        result = compare(store, 'a', 'b')
        assert result.window == (T0 + 5, T0 + 10)
        assert [t for t, _ in result.speed_a.points] == [0, 1, 2, 3, 4]
        narrowed = compare(store, 'a', 'b', window=(1, 3))
        assert narrowed.window == (T0 + 6, T0 + 8)

    def test_disjoint(self, store):
        a, b = new_peer(store, 'a'), new_peer(store, 'b')
        add_status(store, a, range(0, 5), [1] * 5)
        add_status(store, b, range(10, 15), [1] * 5)
        with pytest.raises(DisjointWindows):
            compare(store, a, b)

    def test_window_outside_span(self, store):
        a = new_peer(store, 'a')
        add_status(store, a, range(0, 5), [1] * 5)
        with pytest.raises(DisjointWindows):
            compare(store, a, a, window=(10, 20))

    def test_needs_status(self, store):
        a, b = new_peer(store, 'a'), new_peer(store, 'b')
        add_status(store, a, range(3), [1] * 3)
        with pytest.raises(EmptyWindow):
            compare(store, a, b)


class TestExport:

    def test_csv_speed(self, tmp_path):
        speed = SpeedSeries(1, 'down', tuple(enumerate([5, 6, 7])))
        path = export_plot(speed, 'csv', tmp_path / 'speed.csv')
        assert path.read_text().splitlines() == ['t,v', '0,5', '1,6', '2,7']

    def test_csv_acceleration(self, tmp_path):
        accel = AccelSeries(1, 'down', ((0, Fraction(1, 2)), (1, Fraction(-3))))
        lines = export_plot(accel, 'CSV', tmp_path / 'a.csv').read_text().splitlines()
        assert lines == ['t,a', '0,0.5', '1,-3']

    def test_csv_messages(self, tmp_path):
        counts = {kind: (kind.code, 0) for kind in MessageKind}
        lines = export_plot(MessageStats(1, (0, 10), counts), 'csv', tmp_path / 'm.csv').read_text().splitlines()
        assert len(lines) == 10
        assert lines[1] == 'choke,0,0'
        assert lines[-1] == 'cancel,8,0'

    @pytest.mark.parametrize('obj', [
        SpeedSeries(1, 'down', tuple(enumerate([0, 10, 20, 20]))),
        AccelSeries(1, 'up', ((0, Fraction(10)), (1, Fraction(0)))),
    ])
    def test_svg_is_reproducible(self, tmp_path, obj):
        first = export_plot(obj, 'svg', tmp_path / 'one.svg').read_bytes()
        second = export_plot(obj, 'svg', tmp_path / 'two.svg').read_bytes()
        assert first == second
        assert first.lstrip().startswith(b'<?xml')

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ExportError):
            export_plot(SpeedSeries(1, 'down', ()), 'png', tmp_path / 'x.png')

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / 'file'
        blocker.write_text('')
        with pytest.raises(ExportError):
            export_plot(SpeedSeries(1, 'down', ((0, 1),)), 'csv', blocker / 'sub' / 'x.csv')
