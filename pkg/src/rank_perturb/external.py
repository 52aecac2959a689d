"""Client for external scorers speaking newline-delimited JSON over stdio."""

from __future__ import annotations

import json
import logging
import math
import queue
import subprocess
import threading

from .embedding import EmbeddingStore, Query, TokenDoc

log = logging.getLogger(__name__)

PROTOCOL_HELLO = "rank-perturb/1"


class ExternalRankerError(RuntimeError):
    """Protocol failure talking to a child scorer. Carries the raw reply."""

    def __init__(self, message: str, raw: str | None = None):
        super().__init__(message if raw is None else f"{message} (raw reply: {raw!r})")
        self.raw = raw


class _Sentinel:
    pass


_EOF = _Sentinel()


class ExternalRanker:
    """Scores documents by round-tripping requests to a child process.

    The child is handed one JSON object per line on stdin and must answer
    each with one JSON line on stdout, in order. A handshake line is
    exchanged at startup. Requests are serialised with a lock so the
    in-order reply contract holds even with concurrent callers; replies are
    pulled off a reader thread so a stuck child turns into a timeout
    instead of a hang.
    """

    kind = "external"

    def __init__(self, store: EmbeddingStore, command: list[str],
                 timeout: float = 10.0):
        if not command:
            raise ExternalRankerError("external ranker command is empty")
        if timeout <= 0:
            raise ExternalRankerError("timeout must be positive")
        self.store = store
        self.command = list(command)
        self.timeout = float(timeout)
        self.name = "?"
        self.version = "?"
        self._lock = threading.Lock()
        self._next_id = 0
        self._proc = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )
        self._replies: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()
        try:
            self._handshake()
        except Exception:
            self.close()
            raise

    def _pump(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._replies.put(line)
        self._replies.put(_EOF)

    def _send(self, obj: dict) -> None:
        assert self._proc.stdin is not None
        try:
            self._proc.stdin.write(json.dumps(obj, sort_keys=True) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ExternalRankerError(f"child process closed stdin: {exc}") from exc

    def _recv_line(self, what: str) -> str:
        try:
            line = self._replies.get(timeout=self.timeout)
        except queue.Empty:
            raise ExternalRankerError(
                f"timed out after {self.timeout}s waiting for {what}") from None
        if line is _EOF:
            code = self._proc.poll()
            raise ExternalRankerError(
                f"child process closed stdout waiting for {what} (exit code {code})")
        return line

    def _recv_json(self, what: str) -> dict:
        raw = self._recv_line(what)
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError:
            raise ExternalRankerError(f"unparseable {what}", raw=raw) from None
        if not isinstance(obj, dict):
            raise ExternalRankerError(f"{what} is not a JSON object", raw=raw)
        return obj

    def _handshake(self) -> None:
        self._send({"hello": PROTOCOL_HELLO})
        reply = self._recv_json("handshake reply")
        if "hello" not in reply or "version" not in reply:
            raise ExternalRankerError(
                "handshake reply missing hello/version", raw=json.dumps(reply))
        self.name = str(reply["hello"])
        self.version = str(reply["version"])
        log.info("external ranker up: %s %s (%s)", self.name, self.version,
                 " ".join(self.command))

    def score(self, query: Query, doc: TokenDoc) -> float:
        with self._lock:
            req_id = str(self._next_id)
            self._next_id += 1
            self._send({
                "id": req_id,
                "query": self.store.words(query.token_ids),
                "doc": self.store.words(doc.token_ids),
            })
            reply = self._recv_json(f"reply to request {req_id}")
        raw = json.dumps(reply)
        if reply.get("id") != req_id:
            raise ExternalRankerError(
                f"reply id {reply.get('id')!r} does not match request {req_id!r}", raw=raw)
        if "score" not in reply or isinstance(reply["score"], (bool, str)) \
                or not isinstance(reply["score"], (int, float)):
            raise ExternalRankerError("reply lacks a numeric score", raw=raw)
        value = float(reply["score"])
        if not math.isfinite(value):
            raise ExternalRankerError("reply score is not finite", raw=raw)
        return value

    def close(self) -> None:
        proc = self._proc
        if proc.stdin is not None:
            try:
                proc.stdin.close()
            except OSError:
                pass
        try:
            proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()

    def __enter__(self) -> "ExternalRanker":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()
