#!/usr/bin/env python3
"""
swarmforge 统一入口

子命令：
    agent       节点守护进程
    commander   操作员CLI（bootstrap/start/stop/status/.../run）
    parse       把一个peer的日志导入存储文件
    analyze     peer（单客户端）/ compare（客户端比较），输出CSV与SVG
    simulate    根据名册运行模拟并写出全部peer的日志
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional, Tuple

sys.path.insert(0, str(Path(__file__).parent.parent))

from config.settings import SettingsManager
from lib.utils import setup_logging
from src.analysis import (
    AnalysisError, acceleration_series, compare, export_plot, message_stats, speed_series,
)
from src.ingest import PeerLogs, ingest_experiment
from src.log_parsers import LogParseError, VlogDialect, find_vlog_files
from src.storage import StorageError, SwarmStore
from src.swarm_simulator import UNLIMITED_RATE, SimulationError, emit_logs, load_roster, simulate
from src.torrent_meta import TorrentError, read_torrent


def parse_window(text: Optional[str]) -> Optional[Tuple[int, int]]:
    """'a:b' → (a, b)，单位为秒，相对会话开始"""
    if not text:
        return None
    try:
        start, end = (int(part) for part in text.split(':', 1))
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must look like a:b, got {text!r}") from None
    if end <= start:
        raise argparse.ArgumentTypeError(f"window end must be after start: {text!r}")
    return start, end


# ---------------------------------------------------------------------------
# parse
# ---------------------------------------------------------------------------

def _vlog_files(paths: List[str]) -> List[Path]:
    files: List[Path] = []
    for path in map(Path, paths):
        found = find_vlog_files(path)
        files += found if found else [path]
    return files


def cmd_parse(args: argparse.Namespace) -> int:
    peer = PeerLogs(
        name=args.name or Path(args.slog).stem,
        client=args.client,
        addr=args.addr,
        slog=Path(args.slog),
        vlog_files=tuple(_vlog_files(args.vlog)),
        dialect=VlogDialect(args.dialect) if args.dialect else None,
        down_limit=args.down,
        up_limit=args.up,
        seeder=args.seeder,
    )
    with SwarmStore(Path(args.db)) as store:
        report = ingest_experiment(store, args.swarm_id, [peer])
        size = store.file_size()
    print(f"✅ Experiment {report.experiment_id}: {report.status_rows} status rows, "
          f"{report.verbose_rows} verbose rows, {report.skipped_lines} skipped lines")
    if report.raw_bytes:
        print(f"   store {size} bytes / raw logs {report.raw_bytes} bytes = {size / report.raw_bytes:.3f}")
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _export(obj, out: Path, stem: str, formats: List[str]) -> List[Path]:
    return [export_plot(obj, fmt, out / f"{stem}.{fmt}") for fmt in formats]


def cmd_analyze_peer(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    with SwarmStore(Path(args.db), read_only=True) as store:
        for direction in ('down', 'up'):
            speed = speed_series(store, args.peer, direction, args.window)
            written += _export(speed, out, f"{args.peer}-speed-{direction}", args.format)
            if len(speed.points) >= 2:
                written += _export(acceleration_series(speed), out, f"{args.peer}-accel-{direction}",
                                   args.format)
        written += _export(message_stats(store, args.peer, args.window), out, f"{args.peer}-messages",
                           args.format)
    for path in written:
        print(path)
    return 0


def cmd_analyze_compare(args: argparse.Namespace) -> int:
    peers = [p for p in args.peers.split(',') if p]
    if len(peers) != 2:
        print("❌ --peers needs exactly two peers: P,Q")
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    a, b = peers
    with SwarmStore(Path(args.db), read_only=True) as store:
        result = compare(store, a, b, args.window)
    written = []
    for peer, speed, stats in ((a, result.speed_a, result.stats_a), (b, result.speed_b, result.stats_b)):
        written += _export(speed, out, f"compare-{peer}-speed", args.format)
        written += _export(stats, out, f"compare-{peer}-messages", args.format)
    for path in written:
        print(path)
    for peer, plateau in ((a, result.plateau_a), (b, result.plateau_b)):
        mean = '' if plateau.mean is None else f"{float(plateau.mean):.1f}"
        print(f"{peer}\tramp_end={'' if plateau.ramp_end is None else plateau.ramp_end}\tplateau={mean}")
    ratio = result.plateau_ratio
    print(f"ratio\t{'' if ratio is None else f'{ratio:.3f}'}")
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> int:
    torrent = read_torrent(Path(args.torrent))
    config = load_roster(Path(args.roster).read_text(encoding='utf-8'),
                         torrent.length, torrent.piece_length, torrent.name)
    result = simulate(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dialect = VlogDialect(args.dialect)
    paths = {p.peer_id: (out / f"{p.peer_id}.slog", out / f"{p.peer_id}.vlog") for p in config.peers}
    emit_logs(result, dialect, paths)
    print(f"✅ Simulated {len(config.peers)} peers for {result.ticks} ticks, "
          f"{len(result.events)} events -> {out}")

    if args.db:
        peers = [PeerLogs.from_paths(p.peer_id, 'simulated', p.addr, *paths[p.peer_id], dialect=dialect,
                                     down_limit=None if p.down_cap >= UNLIMITED_RATE else p.down_cap,
                                     up_limit=None if p.up_cap >= UNLIMITED_RATE else p.up_cap,
                                     seeder=p.is_seeder)
                 for p in config.peers]
        with SwarmStore(Path(args.db)) as store:
            report = ingest_experiment(store, args.swarm_id, peers, torrent.name, torrent.length)
        print(f"✅ Stored as experiment {report.experiment_id} in {args.db}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser(settings: SettingsManager) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='swarmforge', description='BitTorrent swarm management and analysis')
    parser.add_argument('--log-level', default=settings.get_log_level())
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('agent', help='run the node agent', add_help=False)
    sub.add_parser('commander', help='drive agents', add_help=False)

    p = sub.add_parser('parse', help='ingest one peer\'s logs')
    p.add_argument('--slog', required=True)
    p.add_argument('--vlog', nargs='+', default=[])
    p.add_argument('--db', required=True)
    p.add_argument('--name', default=None)
    p.add_argument('--client', default='unknown')
    p.add_argument('--addr', default='')
    p.add_argument('--swarm-id', default='manual')
    p.add_argument('--dialect', choices=[d.value for d in VlogDialect], default=None)
    p.add_argument('--down', type=int, default=None)
    p.add_argument('--up', type=int, default=None)
    p.add_argument('--seeder', action='store_true')
    p.set_defaults(func=cmd_parse)

    analyze = sub.add_parser('analyze', help='speed, acceleration and message statistics')
    modes = analyze.add_subparsers(dest='mode', required=True)
    for name, func in (('peer', cmd_analyze_peer), ('compare', cmd_analyze_compare)):
        m = modes.add_parser(name)
        m.add_argument('--db', required=True)
        if name == 'peer':
            m.add_argument('--peer', required=True)
        else:
            m.add_argument('--peers', required=True, help='P,Q')
        m.add_argument('--window', type=parse_window, default=None, help='a:b seconds')
        m.add_argument('--out', default='.')
        m.add_argument('--format', nargs='+', choices=('csv', 'svg'), default=['csv', 'svg'])
        m.set_defaults(func=func)

    s = sub.add_parser('simulate', help='simulate a roster and write every peer\'s logs')
    s.add_argument('--roster', required=True)
    s.add_argument('--torrent', required=True)
    s.add_argument('--out', required=True)
    s.add_argument('--dialect', choices=[d.value for d in VlogDialect], default=VlogDialect.UNIFIED_FILE.value)
    s.add_argument('--db', default=None)
    s.add_argument('--swarm-id', default='simulated')
    s.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == 'agent':
        from src.agent import main as agent_main
        return agent_main(argv[1:])
    if argv and argv[0] == 'commander':
        from src.commander import main as commander_main
        return commander_main(argv[1:])

    settings = SettingsManager()
    args = build_parser(settings).parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except (AnalysisError, StorageError, LogParseError, SimulationError, TorrentError, OSError) as e:
        print(f"❌ {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
