import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

_OUTPUT_1 = re.compile(r"# Output \(a\)\n(.*?)\n\n# Output \(b\)", re.S)


class ScriptedJudge:
    """Chat-completions stand-in whose answer depends on which text is shown first.

    ``script`` maps the first-shown output text to a list of actions consumed
    one per request (the last action repeats). An action is either a reply
    string, an int HTTP status, or ``"<malformed>"`` for a non-JSON body.
    """

    def __init__(self):
        self.script = {}
        self.requests = []
        self._lock = threading.Lock()

    def next_action(self, first_output):
        with self._lock:
            self.requests.append(first_output)
            actions = self.script[first_output]
            return actions.pop(0) if len(actions) > 1 else actions[0]


@pytest.fixture
def judge_server():
    state = ScriptedJudge()

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            prompt = body["messages"][0]["content"]
            first = _OUTPUT_1.search(prompt).group(1)
            action = state.next_action(first)
            if isinstance(action, int):
                self.send_response(action)
                self.end_headers()
                return
            if action == "<malformed>":
                payload = b"not json"
            else:
                payload = json.dumps(
                    {"choices": [{"index": 0, "message": {"role": "assistant", "content": action}}]}
                ).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    state.url = f"http://127.0.0.1:{server.server_address[1]}/v1"
    yield state
    server.shutdown()
    server.server_close()


# --- acceptance summary -------------------------------------------------------

_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion (or one part of it)."""
    results = request.config.stash.setdefault(_CRITERIA, {})

    def record(key, ok, detail):
        results.setdefault(key, []).append((bool(ok), detail))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_CRITERIA, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=lambda k: int(k)):
        parts = results[key]
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'} - {detail}")
