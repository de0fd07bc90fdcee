#!/usr/bin/env python3
"""
btsim - 模拟BitTorrent客户端
由Agent像真实客户端一样启动；运行确定性模拟并按墙钟节奏只输出本peer的日志
"""

import argparse
import logging
import signal
import sys
import threading
import time
from pathlib import Path
from typing import Dict, List

sys.path.insert(0, str(Path(__file__).parent.parent))

from config.experiment import Role
from lib.utils import setup_logging
from src.log_parsers import VerboseRecord, VlogDialect
from src.swarm_simulator import (
    DEFAULT_BLOCK_SIZE, UNLIMITED_RATE, PeerLogWriter, SimConfig, SimPeer, SimulationError,
    load_roster, simulate,
)
from src.torrent_meta import TorrentError, read_torrent

logger = logging.getLogger(__name__)

SELF_ADDR = '10.0.0.1:6881'
SEED_ADDR = '10.0.0.254:6881'


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='btsim', description='Simulated BitTorrent client')
    parser.add_argument('--torrent', required=True)
    parser.add_argument('--role', choices=[r.value for r in Role], default='leecher')
    parser.add_argument('--down', type=int, default=None, help='download cap in bytes/s')
    parser.add_argument('--up', type=int, default=None, help='upload cap in bytes/s')
    parser.add_argument('--slog', required=True)
    parser.add_argument('--vlog', required=True)
    parser.add_argument('--download-dir', required=True)
    parser.add_argument('--dialect', choices=[d.value for d in VlogDialect],
                        default=VlogDialect.UNIFIED_FILE.value)
    parser.add_argument('--peer-id', default=None)
    parser.add_argument('--roster', default=None, help='shared swarm roster (JSON)')
    parser.add_argument('--tick-delay', type=float, default=1.0,
                        help='wall-clock seconds per simulated tick (0 = as fast as possible)')
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--block-size', type=int, default=DEFAULT_BLOCK_SIZE)
    parser.add_argument('--unchoke-slots', type=int, default=4)
    parser.add_argument('--optimistic-slots', type=int, default=1)
    parser.add_argument('--rechoke-period', type=int, default=10)
    parser.add_argument('--max-ticks', type=int, default=10000)
    parser.add_argument('--log-level', default='INFO')
    return parser


def standalone_config(args: argparse.Namespace, size: int, piece: int, name: str) -> SimConfig:
    """没有名册时：本peer + （作为下载者时）一个不限速的合成做种者"""
    me = SimPeer(
        peer_id=args.peer_id or 'self',
        addr=SELF_ADDR,
        role=Role(args.role),
        down_cap=args.down or UNLIMITED_RATE,
        up_cap=args.up or UNLIMITED_RATE,
    )
    peers = [me]
    if me.role is Role.LEECHER:
        peers.insert(0, SimPeer('seed', SEED_ADDR, Role.SEEDER))
    return SimConfig(
        seed=args.seed, peers=tuple(peers), file_size=size, piece_size=piece, file_name=name,
        block_size=args.block_size, unchoke_slots=args.unchoke_slots,
        optimistic_slots=args.optimistic_slots, rechoke_period=args.rechoke_period,
        max_ticks=args.max_ticks,
    )


def group_by_tick(config: SimConfig, records: List[VerboseRecord]) -> Dict[int, List[VerboseRecord]]:
    grouped: Dict[int, List[VerboseRecord]] = {}
    for rec in records:
        tick = int((rec.timestamp - config.epoch).total_seconds()) // config.tick
        grouped.setdefault(tick, []).append(rec)
    return grouped


def run(args: argparse.Namespace) -> int:
    try:
        torrent = read_torrent(Path(args.torrent))
    except (OSError, TorrentError) as e:
        print(f"❌ Cannot read torrent: {e}", flush=True)
        return 2

    try:
        if args.roster:
            if not args.peer_id:
                print("❌ --peer-id is required with --roster", flush=True)
                return 2
            config = load_roster(Path(args.roster).read_text(encoding='utf-8'),
                                 torrent.length, torrent.piece_length, torrent.name)
        else:
            config = standalone_config(args, torrent.length, torrent.piece_length, torrent.name)
        peer_id = args.peer_id or 'self'
        me = config.peer(peer_id)
        result = simulate(config)
    except KeyError:
        print(f"❌ Peer {args.peer_id} is not in the roster", flush=True)
        return 2
    except (OSError, SimulationError) as e:
        print(f"❌ Simulation failed: {e}", flush=True)
        return 3

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda signum, frame: stop.set())
    signal.signal(signal.SIGINT, lambda signum, frame: stop.set())

    download_dir = Path(args.download_dir)
    download_dir.mkdir(parents=True, exist_ok=True)
    payload = download_dir / torrent.name

    statuses = result.status[peer_id]
    events = group_by_tick(config, result.verbose_records(peer_id))
    dialect = VlogDialect(args.dialect)
    print(f"✅ btsim {peer_id} ({me.role.value}) {torrent.name} {torrent.length} bytes, "
          f"{len(statuses)} ticks", flush=True)

    started = time.monotonic()
    with PeerLogWriter(Path(args.slog), Path(args.vlog), dialect) as writer:
        writer.ensure_unified()
        for n, status in enumerate(statuses):
            if stop.is_set():
                print("⚠️ Stopped before completion", flush=True)
                break
            tick = int((status.timestamp - config.epoch).total_seconds()) // config.tick
            for rec in events.get(tick, []):
                writer.write_verbose(rec)
            writer.write_status(status)
            writer.flush()

            with open(payload, 'ab') as f:
                f.truncate(torrent.length if me.is_seeder else status.downloaded)
            print(f"tick {tick} pct={status.percent:.2f} ds={status.down_speed} us={status.up_speed}",
                  flush=True)

            if args.tick_delay > 0:
                deadline = started + (n + 1) * args.tick_delay
                stop.wait(max(0.0, deadline - time.monotonic()))

    print(f"✅ btsim {peer_id} finished", flush=True)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
