#!/usr/bin/env python3
"""
Agent 的只读HTTP监视接口

此模块负责以下职责：
1. 健康检查（/health）
2. 会话一览与单个会话状态（/sessions, /sessions/<id>/status）
3. 归档文件下载（/archives/<name>），供 HttpArchiveCollector 使用

扩展点：
- 新的只读端点
- 认证
"""

import logging
import sys
import threading
import time
from datetime import datetime
from pathlib import Path
from typing import Optional

sys.path.insert(0, str(Path(__file__).parent.parent))

try:
    from flask import Flask, Response, abort, jsonify, send_from_directory
    from werkzeug.serving import make_server
except ImportError:
    print("Error: Flask is not installed. Run: pip install flask")
    sys.exit(1)

from lib.utils import hardware_info
from src.wire_protocol import TOKEN_SAFE

logger = logging.getLogger(__name__)

VERSION = '1.0.0'


class MonitorApp:
    """
    Flask 监视应用

    只读取 SessionManager 的状态，从不修改会话表。
    """

    def __init__(self, manager):
        self.manager = manager
        self.started = time.time()
        self.app = Flask(__name__)
        self._configure_routes()
        self._configure_app()

    def _configure_app(self):
        self.app.config['DEBUG'] = False
        self.app.config['TESTING'] = False

    def _configure_routes(self):
        self.app.route('/health', methods=['GET'])(self.health_check)
        self.app.route('/sessions', methods=['GET'])(self.get_sessions)
        self.app.route('/sessions/<int:session_id>/status', methods=['GET'])(self.get_session_status)
        self.app.route('/archives/<name>', methods=['GET'])(self.get_archive)

    def health_check(self) -> Response:
        running = sum(1 for _, state in self.manager.list() if state.value == 'RUNNING')
        return jsonify({
            'status': 'healthy',
            'timestamp': datetime.now().isoformat(),
            'version': VERSION,
            'uptime': round(time.time() - self.started, 1),
            'running_sessions': running,
            'hardware': hardware_info(),
        })

    def get_sessions(self) -> Response:
        with self.manager.lock:
            sessions = [r.to_dict() for _, r in sorted(self.manager.sessions.items())]
        return jsonify({'sessions': sessions, 'total_count': len(sessions)})

    def get_session_status(self, session_id: int) -> Response:
        """
        单个会话最后一条状态记录

        Returns:
            Response: 会话不存在时 404，状态日志不可读时 409
        """
        from src.agent import AgentError, NoSuchId
        try:
            fields = self.manager.status(str(session_id))
        except NoSuchId as e:
            return jsonify({'error': str(e)}), 404
        except AgentError as e:
            return jsonify({'error': str(e)}), 409
        return jsonify({'id': session_id, **dict(fields)})

    def get_archive(self, name: str) -> Response:
        if not TOKEN_SAFE.match(name) or not name.endswith('.tar.gz'):
            abort(404)
        return send_from_directory(str(self.manager.archive_dir), name, as_attachment=True)


class MonitorServer:
    """在后台线程中运行 MonitorApp（与 Agent 同一进程）"""

    def __init__(self, manager, host: str = '127.0.0.1', port: Optional[int] = None):
        self.monitor = MonitorApp(manager)
        self.host = host
        self.port = port or 0
        self._server = None
        self._thread: Optional[threading.Thread] = None

    def start(self):
        try:
            self._server = make_server(self.host, self.port, self.monitor.app, threaded=True)
        except (OSError, SystemExit) as e:
            logger.error(f"Monitor failed to bind {self.host}:{self.port}: {e}")
            print(f"❌ Monitor failed to start on {self.host}:{self.port}")
            return
        self.port = self._server.server_port
        self._thread = threading.Thread(target=self._server.serve_forever, name='monitor', daemon=True)
        self._thread.start()
        print(f"🌐 Monitor listening on http://{self.host}:{self.port}", flush=True)
        logger.info(f"Monitor started on {self.host}:{self.port}")

    def stop(self):
        if self._server is not None:
            self._server.shutdown()
            self._thread.join(timeout=5)
            self._server = None
