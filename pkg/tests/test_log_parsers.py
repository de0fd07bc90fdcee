"""状态日志与详细日志的解析"""

import io
from decimal import Decimal

import pytest

from src.log_parsers import (
    AmbiguousDialect, Direction, MalformedLine, MessageKind, VerboseParser, VerboseRecord, VlogDialect,
    bitfield_to_hex, detect_dialect, find_vlog_files, hex_to_bitfield, parse_status_line,
    parse_status_stream, parse_timestamp, parse_verbose_line, peer_from_filename, per_peer_vlog_path,
    read_last_status, render_status_line, render_verbose_line,
)

STATUS_LINE = ('2010-03-01T10:00:12Z ds=524288 us=262144 d=6291456 u=1048576 eta=58 peers=49 '
               'pct=12.50 size=50331648 name=test.bin')


class TestStatusLog:

    def test_reference_line(self):
        rec = parse_status_line(STATUS_LINE)
        assert rec.down_speed == 524288
        assert rec.up_speed == 262144
        assert rec.downloaded == 6291456
        assert rec.eta == 58
        assert rec.num_peers == 49
        assert rec.percent == Decimal('12.50')
        assert rec.file_name == 'test.bin'
        assert render_status_line(rec) == STATUS_LINE

    def test_seeder_eta_infinite(self):
        line = ('2010-03-01T10:00:00Z ds=0 us=100 d=0 u=100 eta=inf peers=3 pct=100.00 '
                'size=10 name=a.bin')
        rec = parse_status_line(line)
        assert rec.eta is None
        assert rec.is_complete
        assert render_status_line(rec) == line

    def test_file_name_with_spaces(self):
        line = STATUS_LINE.replace('name=test.bin', 'name=my test file.bin')
        assert parse_status_line(line).file_name == 'my test file.bin'

    @pytest.mark.parametrize('line, column', [
        ('garbage', 1),
        (STATUS_LINE.replace('ds=524288', 'ds=fast'), 22),
        (STATUS_LINE.replace('us=', 'ux='), 32),
        (STATUS_LINE.replace('pct=12.50', 'pct=12.5'), None),
        (STATUS_LINE.replace('pct=12.50', 'pct=101.00'), None),
        (STATUS_LINE.replace('d=6291456', 'd=99999999'), None),
        (STATUS_LINE.split(' name=')[0], None),
        (STATUS_LINE.replace('2010-03-01', '2010-02-30'), 1),
        (STATUS_LINE.replace('2010-03-01', '2010-13-01'), 1),
        (STATUS_LINE.replace('ds=524288', 'ds=007'), 22),
        (STATUS_LINE.replace('pct=12.50', 'pct=012.50'), None),
    ])
    def test_malformed(self, line, column):
        with pytest.raises(MalformedLine) as info:
            parse_status_line(line, line_no=3)
        assert info.value.line_no == 3
        if column is not None:
            assert info.value.column == column

    def test_complete_with_eta(self):
        line = STATUS_LINE.replace('pct=12.50', 'pct=100.00').replace('d=6291456', 'd=50331648')
        with pytest.raises(MalformedLine):
            parse_status_line(line)

    def test_stream_skips_blank_lines(self):
        records = list(parse_status_stream(io.StringIO(STATUS_LINE + '\n\n' + STATUS_LINE + '\n')))
        assert len(records) == 2

    def test_last_line_ignores_partial_tail(self, tmp_path):
        path = tmp_path / 'p.slog'
        second = STATUS_LINE.replace('10:00:12', '10:00:13').replace('ds=524288', 'ds=1')
        path.write_text(STATUS_LINE + '\n' + second + '\n' + second[:30])
        assert read_last_status(path).down_speed == 1

    def test_last_line_of_empty_file(self, tmp_path):
        path = tmp_path / 'empty.slog'
        path.write_text('')
        assert read_last_status(path) is None


class TestVerboseLog:

    def test_unified_piece(self):
        line = '2010-03-01T10:00:03Z RCV piece peer=10.0.1.7:6881 index=4 begin=16384 length=16384'
        rec = parse_verbose_line(line, VlogDialect.UNIFIED_FILE)
        assert rec.direction is Direction.RECEIVED
        assert rec.kind is MessageKind.PIECE
        assert rec.remote_peer == '10.0.1.7:6881'
        assert (rec.piece_index, rec.block_offset, rec.block_length) == (4, 16384, 16384)
        assert render_verbose_line(rec, VlogDialect.UNIFIED_FILE) == line

    def test_per_peer_takes_peer_from_file(self):
        line = '2010-03-01T10:00:03Z SND unchoke'
        rec = parse_verbose_line(line, VlogDialect.PER_PEER_FILES, remote_peer='10.0.1.7:6881')
        assert rec.remote_peer == '10.0.1.7:6881'
        assert render_verbose_line(rec, VlogDialect.PER_PEER_FILES) == line

    def test_bitfield(self):
        line = '2010-03-01T10:00:00Z SND bitfield peer=10.0.0.2:6881 bitfield=f0'
        rec = parse_verbose_line(line, VlogDialect.UNIFIED_FILE)
        assert hex_to_bitfield(rec.bitfield_hex, 4) == [True] * 4

    def test_noise_and_unknown_kinds(self):
        assert parse_verbose_line('libtorrent: connecting', VlogDialect.UNIFIED_FILE) is None
        assert parse_verbose_line('2010-03-01T10:00:00Z RCV keepalive peer=1.2.3.4:1',
                                  VlogDialect.UNIFIED_FILE) is None

    @pytest.mark.parametrize('line', [
        '2010-03-01T10:00:03Z RCV piece peer=10.0.1.7:6881 index=4',
        '2010-03-01T10:00:03Z RCV choke peer=10.0.1.7:6881 index=4',
        '2010-03-01T10:00:03Z RCV have peer=10.0.1.7:6881 index=x',
        '2010-03-01T10:00:03Z RCV have peer=nonsense index=1',
        '2010-03-01T10:00:03Z RCV bitfield peer=10.0.1.7:6881 bitfield=F0',
        '2010-03-01T10:00:03Z RCV have peer=10.0.1.7:6881 index=1 index=2',
        '2010-03-01T10:00:03Z RCV have peer=10.0.1.7:6881 colour=red',
        '2010-03-01T10:00:03Z RCV choke',
        '2010-03-01T10:00:03Z RCV have peer=10.0.1.7:6881 index=01',
    ])
    def test_malformed(self, line):
        with pytest.raises(MalformedLine):
            parse_verbose_line(line, VlogDialect.UNIFIED_FILE)

    @pytest.mark.parametrize('date', ['2010-02-30', '2010-13-01'])
    def test_impossible_date(self, date):
        line = f"{date}T10:00:03Z RCV have peer=10.0.1.7:6881 index=1"
        with pytest.raises(MalformedLine) as info:
            parse_verbose_line(line, VlogDialect.UNIFIED_FILE, line_no=7)
        assert (info.value.column, info.value.line_no) == (1, 7)

    def test_parser_counts_skipped_lines(self):
        text = ('debug: hello\n'
                '2010-03-01T10:00:00Z SND interested peer=1.1.1.1:1\n'
                '\n'
                '2010-03-01T10:00:01Z RCV unchoke peer=1.1.1.1:1\n'
                'more noise\n')
        parser = VerboseParser(VlogDialect.UNIFIED_FILE)
        records = list(parser.parse(io.StringIO(text)))
        assert [r.kind for r in records] == [MessageKind.INTERESTED, MessageKind.UNCHOKE]
        assert parser.skipped == 2
        assert parser.parsed == 2

    def test_timestamps_must_not_go_backwards(self):
        text = ('2010-03-01T10:00:05Z SND interested peer=1.1.1.1:1\n'
                '2010-03-01T10:00:04Z RCV unchoke peer=1.1.1.1:1\n')
        with pytest.raises(MalformedLine) as info:
            list(VerboseParser(VlogDialect.UNIFIED_FILE).parse(io.StringIO(text)))
        assert info.value.line_no == 2

    def test_record_round_trip(self):
        ts = parse_timestamp('2010-03-01T10:00:00Z')
        records = [
            VerboseRecord(ts, Direction.SENT, MessageKind.REQUEST, '10.0.0.9:6881', 1, 0, 16384),
            VerboseRecord(ts, Direction.RECEIVED, MessageKind.HAVE, '10.0.0.9:6881', 7),
            VerboseRecord(ts, Direction.RECEIVED, MessageKind.BITFIELD, '10.0.0.9:6881', bitfield_hex='a0'),
            VerboseRecord(ts, Direction.SENT, MessageKind.NOT_INTERESTED, '10.0.0.9:6881'),
        ]
        for rec in records:
            for dialect in VlogDialect:
                remote = rec.remote_peer if dialect is VlogDialect.PER_PEER_FILES else None
                assert parse_verbose_line(render_verbose_line(rec, dialect), dialect, remote) == rec


class TestBitfield:

    def test_msb_first(self):
        assert bitfield_to_hex([True, False, False, False, False, False, False, False, True]) == '8080'
        assert hex_to_bitfield('8080', 9) == [True] + [False] * 7 + [True]

    def test_empty(self):
        assert bitfield_to_hex([]) == ''


class TestDialect:

    def test_single_plain_file_is_unified(self, tmp_path):
        assert detect_dialect([tmp_path / 'tribler.vlog']) is VlogDialect.UNIFIED_FILE

    def test_embedded_addresses_are_per_peer(self, tmp_path):
        files = [tmp_path / f"vlog.10.0.1.{i}:6881.log" for i in range(1, 8)]
        assert detect_dialect(files) is VlogDialect.PER_PEER_FILES
        assert peer_from_filename(files[6]) == '10.0.1.7:6881'

    @pytest.mark.parametrize('name, addr', [
        ('p1.vlog.10.0.0.2:6881.log', '10.0.0.2:6881'),
        ('run.1.2.vlog.192.168.1.20:51413.log', '192.168.1.20:51413'),
        ('p1.vlog.localhost:7000.log', 'localhost:7000'),
        ('p1.vlog', None),
    ])
    def test_peer_from_filename(self, name, addr):
        assert peer_from_filename(name) == addr

    def test_empty_is_ambiguous(self):
        with pytest.raises(AmbiguousDialect):
            detect_dialect([])

    def test_mixed_is_ambiguous(self, tmp_path):
        with pytest.raises(AmbiguousDialect):
            detect_dialect([tmp_path / 'a.vlog', tmp_path / 'a.vlog.1.2.3.4:5.log'])

    def test_find_vlog_files(self, tmp_path):
        base = tmp_path / 'p1.vlog'
        for addr in ('10.0.0.3:6881', '10.0.0.2:6881'):
            per_peer_vlog_path(base, addr).write_text('')
        (tmp_path / 'p1.vlogx').write_text('')
        (tmp_path / 'p10.vlog.10.0.0.2:6881.log').write_text('')
        found = find_vlog_files(base)
        assert [p.name for p in found] == ['p1.vlog.10.0.0.2:6881.log', 'p1.vlog.10.0.0.3:6881.log']
        base.write_text('')
        assert find_vlog_files(base)[0] == base
