#!/usr/bin/env python3
"""
设置管理模块
管理swarmforge的运行时设置（端口、状态目录、轮询间隔等）
"""

import os
from pathlib import Path
from typing import Dict, Optional

from dotenv import dotenv_values, set_key

DEFAULTS: Dict[str, str] = {
    'SWARMFORGE_AGENT_PORT': '5000',
    'SWARMFORGE_MONITOR_PORT': '5001',
    'SWARMFORGE_POLL_INTERVAL': '1.0',
    'SWARMFORGE_TICK_DELAY': '1.0',
    'SWARMFORGE_STOP_GRACE': '5.0',
    'SWARMFORGE_CONNECT_TIMEOUT': '5.0',
    'SWARMFORGE_LOG_LEVEL': 'INFO',
}


class SettingsManager:
    """进行设置的读取、保存、管理的类"""

    def __init__(self, config_dir: Optional[Path] = None):
        if config_dir is None:
            home = os.environ.get('SWARMFORGE_HOME')
            config_dir = Path(home) if home else Path.home() / '.swarmforge'
        self.config_dir = Path(config_dir)
        self.env_file = self.config_dir / '.env'
        self.toolkit_root = Path(__file__).parent.parent

    def ensure_config_dir(self):
        """创建设置目录"""
        self.config_dir.mkdir(parents=True, exist_ok=True)

    def load_env(self) -> Dict[str, str]:
        """读取设置：默认值 < .env 文件 < 进程环境变量"""
        env_vars = dict(DEFAULTS)
        if self.env_file.exists():
            env_vars.update({k: v for k, v in dotenv_values(self.env_file).items() if v is not None})
        for key in list(env_vars) + [k for k in os.environ if k.startswith('SWARMFORGE_')]:
            if key in os.environ:
                env_vars[key] = os.environ[key]
        return env_vars

    def save_value(self, key: str, value: str):
        """保存单个设置"""
        self.ensure_config_dir()
        if not self.env_file.exists():
            self.env_file.write_text("# swarmforge configuration\n")
        set_key(str(self.env_file), key, value, quote_mode='never')
        os.chmod(self.env_file, 0o600)

    def _get(self, key: str) -> str:
        return self.load_env()[key]

    def get_port(self, service: str = 'agent') -> int:
        """获取服务的端口号"""
        port_map = {
            'agent': 'SWARMFORGE_AGENT_PORT',
            'monitor': 'SWARMFORGE_MONITOR_PORT',
        }
        return int(self._get(port_map.get(service, 'SWARMFORGE_AGENT_PORT')))

    def get_state_dir(self) -> Path:
        """获取Agent/Commander的状态目录"""
        env_vars = self.load_env()
        return Path(env_vars.get('SWARMFORGE_STATE_DIR', str(self.config_dir / 'state')))

    def get_poll_interval(self) -> float:
        return float(self._get('SWARMFORGE_POLL_INTERVAL'))

    def get_tick_delay(self) -> float:
        """模拟客户端每个tick对应的墙钟秒数"""
        return float(self._get('SWARMFORGE_TICK_DELAY'))

    def get_stop_grace(self) -> float:
        return float(self._get('SWARMFORGE_STOP_GRACE'))

    def get_connect_timeout(self) -> float:
        return float(self._get('SWARMFORGE_CONNECT_TIMEOUT'))

    def get_log_level(self) -> str:
        return self._get('SWARMFORGE_LOG_LEVEL').upper()


if __name__ == "__main__":
    manager = SettingsManager()
    print(f"Config directory: {manager.config_dir}")
    print(f"Agent port: {manager.get_port('agent')}")
    print(f"State dir: {manager.get_state_dir()}")
