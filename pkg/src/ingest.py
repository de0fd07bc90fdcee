#!/usr/bin/env python3
"""
日志入库
把一个实验中各peer的状态日志与详细日志解析后写入存储
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from lib.utils import hardware_info
from src.log_parsers import (
    VerboseParser, VlogDialect, detect_dialect, find_vlog_files, parse_status_stream,
    peer_from_filename, to_epoch,
)
from src.storage import ExperimentMeta, PeerMeta, SwarmStore

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PeerLogs:
    """一个peer的日志文件及其元信息"""
    name: str
    client: str
    addr: str
    slog: Path
    vlog_files: Sequence[Path] = ()
    dialect: Optional[VlogDialect] = None
    down_limit: Optional[int] = None
    up_limit: Optional[int] = None
    seeder: bool = False

    @classmethod
    def from_paths(cls, name: str, client: str, addr: str, slog: Path, vlog: Path, **kwargs) -> 'PeerLogs':
        """vlog 为基础路径：自动找到统一文件或按对端拆分的文件"""
        return cls(name, client, addr, Path(slog), tuple(find_vlog_files(Path(vlog))), **kwargs)


@dataclass
class IngestReport:
    experiment_id: int
    peer_ids: Dict[str, int] = field(default_factory=dict)
    status_rows: int = 0
    verbose_rows: int = 0
    skipped_lines: int = 0
    raw_bytes: int = 0


def _peer_hardware() -> Dict[str, object]:
    info = hardware_info()
    cpu = info['cpu']
    if info.get('cpu_mhz'):
        cpu = f"{cpu} @ {info['cpu_mhz']} MHz"
    return {
        'cpu_description': f"{cpu} x{info['cpu_count']}",
        'ram_bytes': int(info['memory']),
        'os_version': info['os'],
        'net_info': info['net'],
    }


def ingest_peer(store: SwarmStore, experiment_id: int, logs: PeerLogs, report: IngestReport,
                hardware: Optional[Dict[str, object]] = None) -> int:
    peer_id = store.add_peer(PeerMeta(
        experiment_id=experiment_id,
        name=logs.name,
        client_name=logs.client,
        addr=logs.addr,
        down_limit=logs.down_limit,
        up_limit=logs.up_limit,
        **(hardware if hardware is not None else _peer_hardware()),
    ))
    report.peer_ids[logs.name] = peer_id

    if logs.slog.exists():
        report.raw_bytes += logs.slog.stat().st_size
        with open(logs.slog, 'r', encoding='utf-8') as f:
            report.status_rows += store.insert_status(peer_id, parse_status_stream(f))

    vlogs = list(logs.vlog_files)
    if vlogs:
        dialect = logs.dialect or detect_dialect(vlogs)
        for path in vlogs:
            report.raw_bytes += path.stat().st_size
            remote = peer_from_filename(path) if dialect is VlogDialect.PER_PEER_FILES else None
            parser = VerboseParser(dialect, remote)
            with open(path, 'r', encoding='utf-8') as f:
                report.verbose_rows += store.insert_verbose(peer_id, parser.parse(f))
            report.skipped_lines += parser.skipped

    logger.info(f"Ingested {logs.name}: peer_id={peer_id}")
    return peer_id


def _first_status_epoch(path: Path) -> Optional[int]:
    if not path.exists():
        return None
    with open(path, 'r', encoding='utf-8') as f:
        for rec in parse_status_stream(f):
            return to_epoch(rec.timestamp)
    return None


def _transfer_info(path: Path):
    if not path.exists():
        return None
    with open(path, 'r', encoding='utf-8') as f:
        for rec in parse_status_stream(f):
            return rec.file_name, rec.transfer_size
    return None


def ingest_experiment(store: SwarmStore, swarm_id: str, peers: List[PeerLogs],
                      file_name: Optional[str] = None, file_size: Optional[int] = None,
                      hardware: Optional[Dict[str, object]] = None, vacuum: bool = True) -> IngestReport:
    """
    新建一个实验并导入全部peer的日志

    开始时间取各peer最早的状态记录；文件名与大小缺省时取自状态日志。
    """
    starts = [t for t in (_first_status_epoch(p.slog) for p in peers) if t is not None]
    if file_name is None or file_size is None:
        info = next((i for i in (_transfer_info(p.slog) for p in peers) if i), ('', 0))
        file_name = file_name if file_name is not None else info[0]
        file_size = file_size if file_size is not None else info[1]

    experiment_id = store.add_experiment(ExperimentMeta(
        swarm_id=swarm_id,
        num_peers=len(peers),
        num_seeders=sum(1 for p in peers if p.seeder),
        start_time=min(starts) if starts else 0,
        file_name=file_name,
        file_size=file_size,
    ))
    report = IngestReport(experiment_id)
    hw = hardware if hardware is not None else _peer_hardware()
    for logs in sorted(peers, key=lambda p: p.name):
        ingest_peer(store, experiment_id, logs, report, hw)
    if vacuum:
        store.vacuum()
    logger.info(f"Experiment {experiment_id}: {report.status_rows} status rows, "
                f"{report.verbose_rows} verbose rows, {report.skipped_lines} skipped lines")
    return report
