"""HTTP service for the human prototype-labelling step.

Serves the session state as JSON, accepts one label per POST, persists every
accepted label to the session file immediately, and shuts itself down once
all prototypes are labelled. The static frontend bundle is served from `/`.
"""

import base64
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from . import dataio

log = logging.getLogger(__name__)

API_VERSION = 1

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json",
    ".png": "image/png",
    ".svg": "image/svg+xml",
    ".map": "application/json",
    ".ico": "image/x-icon",
}


class LabelSession:
    """Session file plus the overlay cards, guarded by one lock so
    concurrent POSTs serialize."""

    def __init__(self, session_path, classes, card_dir):
        self.session_path = Path(session_path)
        self.classes = list(classes)
        self.card_dir = Path(card_dir)
        self.rows = dataio.read_jsonl(self.session_path)
        self.lock = threading.Lock()

    def view(self):
        with self.lock:
            protos = []
            for row in self.rows:
                card = self.card_dir / ("proto_%02d.png" % row["cluster_id"])
                png = base64.b64encode(card.read_bytes()).decode("ascii")
                protos.append({"cluster_id": row["cluster_id"],
                               "frame_png_base64": png,
                               "label": row["label"]})
            return {"v": API_VERSION, "prototypes": protos,
                    "classes": self.classes}

    def status(self):
        with self.lock:
            labelled = sum(1 for r in self.rows if r["label"] is not None)
            return {"labelled": labelled, "total": len(self.rows)}

    def set_label(self, cluster_id, label):
        """'ok', 'unknown' (no such cluster) or 'invalid' (label outside the
        class list)."""
        if not isinstance(label, int) or isinstance(label, bool) \
                or not 0 <= label < len(self.classes):
            return "invalid"
        with self.lock:
            for row in self.rows:
                if row["cluster_id"] == cluster_id:
                    row["label"] = label
                    dataio.write_jsonl(self.session_path, self.rows)
                    return "ok"
            return "unknown"

    def complete(self):
        with self.lock:
            return all(r["label"] is not None for r in self.rows)


def _make_handler(session, static_dir, on_complete):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            log.debug("http: " + fmt, *args)

        def _send_json(self, obj, code=200):
            body = json.dumps(obj).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/api/session":
                self._send_json(session.view())
            elif self.path == "/api/session/status":
                self._send_json(session.status())
            else:
                self._send_static()

        def _send_static(self):
            if static_dir is None:
                self._send_json({"error": "no frontend bundle configured"},
                                404)
                return
            rel = self.path.lstrip("/") or "index.html"
            target = (Path(static_dir) / rel).resolve()
            root = Path(static_dir).resolve()
            if root not in target.parents and target != root:
                self._send_json({"error": "not found"}, 404)
                return
            if not target.is_file():
                self._send_json({"error": "not found"}, 404)
                return
            body = target.read_bytes()
            self.send_response(200)
            self.send_header("Content-Type", _CONTENT_TYPES.get(
                target.suffix, "application/octet-stream"))
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):
            if self.path != "/api/session/labels":
                self._send_json({"error": "not found"}, 404)
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                payload = json.loads(self.rfile.read(length) or b"{}")
                cluster_id = payload["cluster_id"]
                label = payload["label"]
            except (ValueError, KeyError, json.JSONDecodeError):
                self._send_json({"error": "malformed request body"}, 400)
                return
            outcome = session.set_label(cluster_id, label)
            if outcome == "unknown":
                self._send_json({"error": "unknown cluster_id"}, 404)
            elif outcome == "invalid":
                self._send_json({"error": "label outside class list"}, 422)
            else:
                self._send_json(session.status())
                if session.complete() and on_complete is not None:
                    on_complete()

    return Handler


def make_server(out_dir, classes, host="127.0.0.1", port=0, static_dir=None,
                exit_when_done=True):
    """A ready-to-run labelling server over out_dir's prototype session.

    Returns the ThreadingHTTPServer; call serve_forever() (or use
    serve_labelling for the blocking CLI behavior). With exit_when_done the
    server shuts itself down right after the final label lands.
    """
    out_dir = Path(out_dir)
    session = LabelSession(out_dir / "prototypes" / "session.jsonl", classes,
                           out_dir / "prototypes")
    holder = {}

    def stop():
        # close the listening socket too, otherwise late requests queue in
        # the accept backlog and hang instead of being refused
        holder["server"].shutdown()
        holder["server"].server_close()

    def on_complete():
        log.info("all prototypes labelled, shutting down")
        threading.Thread(target=stop, daemon=True).start()

    handler = _make_handler(session, static_dir,
                            on_complete if exit_when_done else None)
    server = ThreadingHTTPServer((host, port), handler)
    holder["server"] = server
    server.label_session = session
    return server


def serve_labelling(out_dir, classes, host="127.0.0.1", port=8433,
                    static_dir=None, exit_when_done=True):
    server = make_server(out_dir, classes, host, port, static_dir,
                         exit_when_done)
    log.info("labelling service on http://%s:%d/", *server.server_address)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return server.label_session.status()
