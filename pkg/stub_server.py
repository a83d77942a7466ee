import logging
import threading
import uuid

from flask import Flask, jsonify, request
from werkzeug.serving import make_server

from exceptions import BackendError
from models import ChatRequest

logger = logging.getLogger(__name__)


def create_stub_app(backend):
    """Flask app speaking the OpenAI chat-completions protocol on top of any backend"""
    app = Flask(__name__)
    app.config["RECEIVED_BODIES"] = []

    def chat_completions():
        body = request.get_json(silent=True)
        if not isinstance(body, dict):
            return jsonify({"error": {"message": "Request body must be a JSON object"}}), 400
        app.config["RECEIVED_BODIES"].append(body)

        messages = body.get("messages") or []
        system = next((m.get("content", "") for m in messages if m.get("role") == "system"), "")
        user = next((m.get("content", "") for m in messages if m.get("role") == "user"), "")
        chat_request = ChatRequest(
            system=system,
            user=user,
            temperature=float(body.get("temperature", 0.0)),
            max_new_tokens=int(body.get("max_tokens", 1024)),
            model=body.get("model", ""),
        )

        try:
            response = backend.complete(chat_request)
        except BackendError as e:
            logger.error(f"Stub backend failed: {e.detail}")
            status = 503 if e.retryable else 500
            return jsonify({"error": {"message": e.detail}}), status

        return jsonify({
            "id": f"chatcmpl-{uuid.uuid4().hex[:12]}",
            "object": "chat.completion",
            "model": chat_request.model,
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": response.text},
                "finish_reason": "stop",
            }],
            "usage": {
                "prompt_tokens": response.usage.prompt_tokens,
                "completion_tokens": response.usage.completion_tokens,
                "total_tokens": response.usage.total,
            },
        })

    app.add_url_rule("/v1/chat/completions", "chat_completions_v1", chat_completions, methods=["POST"])
    app.add_url_rule("/chat/completions", "chat_completions", chat_completions, methods=["POST"])
    return app


class StubServer:
    """Serve a Flask app from a background thread; port 0 picks a free port"""

    def __init__(self, app, host="127.0.0.1", port=0):
        self.app = app
        self._server = make_server(host, port, app, threaded=True)
        self.host = host
        self.port = self._server.server_port
        self._thread = threading.Thread(target=self._server.serve_forever, name="StubServer")
        self._thread.daemon = True

    @property
    def base_url(self):
        return f"http://{self.host}:{self.port}/v1"

    def start(self):
        self._thread.start()
        logger.info(f"Stub server listening on {self.base_url}")
        return self

    def wait(self, poll=0.5):
        while self._thread.is_alive():
            self._thread.join(timeout=poll)

    def stop(self):
        self._server.shutdown()
        self._thread.join(timeout=5)
        logger.info("Stub server stopped")

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
