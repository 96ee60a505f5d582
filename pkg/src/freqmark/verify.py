"""Black-box ownership verification with an exact binomial threshold.

The suspect model is only seen through a prediction oracle. Under the null
hypothesis (the model does not carry the watermark) each verification query
lands on the target class with probability ``1/C`` (or a supplied empirical
rate), so the number of hits is Binomial(n, rate).
"""
from __future__ import annotations

import io
import json
import math
import threading
import time
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

import numpy as np
from PIL import Image

from .data import Dataset
from .metrics import predict_labels

DEFAULT_QUERIES = 500
DEFAULT_ALPHA = 1e-6
MAX_FAILURE_RATE = 0.05


class InsufficientQueries(ValueError):
    def __init__(self, n: int, alpha: float, rate: float, minimum: int):
        self.minimum = minimum
        super().__init__(f"insufficient queries: with n={n} no threshold reaches alpha={alpha:g} "
                         f"at null rate {rate:g}; need at least n={minimum}")


def _log_pmf(n: int, k: int, p: float) -> float:
    if p == 0:
        return 0.0 if k == 0 else -math.inf
    if p == 1:
        return 0.0 if k == n else -math.inf
    return (math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
            + k * math.log(p) + (n - k) * math.log1p(-p))


def binomial_tail(n: int, m: int, p: float) -> float:
    """``P[X >= m]`` for ``X ~ Binomial(n, p)`` by summing the exact pmf terms."""
    if m <= 0:
        return 1.0
    if m > n:
        return 0.0
    logs = [_log_pmf(n, k, p) for k in range(m, n + 1)]
    top = max(logs)
    if top == -math.inf:
        return 0.0
    return min(1.0, math.exp(top) * math.fsum(math.exp(v - top) for v in logs))


def _check_args(n: int, classes: int, alpha: float, null_rate: float | None) -> float:
    if n < 1:
        raise ValueError("need at least one query")
    if classes < 2:
        raise ValueError("need at least two classes")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    rate = 1.0 / classes if null_rate is None else float(null_rate)
    if not 0 < rate < 1:
        raise ValueError("null rate must lie in (0, 1)")
    return rate


def min_queries(alpha: float, rate: float) -> int:
    """Smallest ``n`` for which an all-hit outcome is significant (``rate**n < alpha``)."""
    n = max(1, math.ceil(math.log(alpha) / math.log(rate)))
    while rate ** n >= alpha:
        n += 1
    return n


def compute_threshold(n: int, classes: int, alpha: float = DEFAULT_ALPHA,
                      null_rate: float | None = None) -> float:
    """Smallest ``m/n`` with ``P[Binomial(n, rate) >= m] < alpha``.

    Raises :class:`InsufficientQueries` when no ``m <= n`` qualifies.
    """
    rate = _check_args(n, classes, alpha, null_rate)
    # the tail is decreasing in m: bisect on the smallest qualifying m
    lo, hi = 0, n + 1
    if binomial_tail(n, n, rate) >= alpha:
        raise InsufficientQueries(n, alpha, rate, min_queries(alpha, rate))
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if binomial_tail(n, mid, rate) < alpha:
            hi = mid
        else:
            lo = mid
    return hi / n


@dataclass
class VerificationReport:
    queries: int
    answered: int
    failures: int
    target: int
    wsr: float
    threshold: float
    alpha: float
    null_rate: float
    p_value: float
    decision: str  # "owned" | "not-owned" | "withheld"

    @property
    def owned(self) -> bool:
        return self.decision == "owned"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_markdown(self) -> str:
        rows = [("queries", self.queries), ("answered", self.answered), ("failures", self.failures),
                ("target class", self.target), ("WSR", f"{100 * self.wsr:.2f}%"),
                ("threshold", f"{100 * self.threshold:.2f}%"), ("alpha", f"{self.alpha:g}"),
                ("null rate", f"{self.null_rate:.4g}"), ("p-value", f"{self.p_value:.3g}"),
                ("decision", self.decision)]
        return "\n".join(["| field | value |", "|---|---|", *[f"| {k} | {v} |" for k, v in rows]])


def _query(oracle: Any, images: np.ndarray, parallelism: int, min_interval: float
           ) -> tuple[np.ndarray, np.ndarray]:
    """Labels for every image plus a mask of failed queries."""
    labels = np.full(len(images), -1, dtype=np.int64)
    if parallelism <= 1 and min_interval <= 0:
        try:
            return predict_labels(oracle, images), np.zeros(len(images), dtype=bool)
        except Exception:
            pass  # fall back to one query at a time so failures are counted individually
    lock = threading.Lock()
    last = [0.0]

    def one(i: int) -> int:
        if min_interval > 0:
            with lock:
                wait = last[0] + min_interval - time.monotonic()
                if wait > 0:
                    time.sleep(wait)
                last[0] = time.monotonic()
        try:
            return int(predict_labels(oracle, images[i:i + 1])[0])
        except Exception:
            return -1

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        for i, lab in enumerate(pool.map(one, range(len(images)))):
            labels[i] = lab
    return labels, labels < 0


def verify_ownership(oracle: Any, verification: Dataset, target: int, tau: float | None = None,
                     alpha: float = DEFAULT_ALPHA, null_rate: float | None = None,
                     parallelism: int = 1, min_interval: float = 0.0) -> VerificationReport:
    """Query the suspect with every verification sample and decide ownership.

    ``tau=None`` derives the threshold from ``alpha`` for the number of
    answered queries. The decision is withheld when more than 5% of the
    queries fail.
    """
    if not len(verification):
        raise ValueError("verification set is empty")
    classes = verification.num_classes
    rate = _check_args(len(verification), classes, alpha, null_rate)
    labels, failed = _query(oracle, verification.images, parallelism, min_interval)
    answered = int((~failed).sum())
    hits = int((labels[~failed] == target).sum())
    wsr_value = hits / answered if answered else 0.0
    p_value = binomial_tail(answered, hits, rate) if answered else 1.0
    if tau is None:
        try:
            tau = compute_threshold(max(answered, 1), classes, alpha, rate)
        except InsufficientQueries:
            tau = math.inf
    if failed.mean() > MAX_FAILURE_RATE or not answered:
        decision = "withheld"
    else:
        decision = "owned" if wsr_value >= tau else "not-owned"
    return VerificationReport(len(verification), answered, int(failed.sum()), target, wsr_value,
                              float(tau), alpha, rate, p_value, decision)


# ---------------------------------------------------------------------------
# HTTP wire contract: POST PNG bytes, response body is the class index


class HttpOracle:
    """Hard-label oracle behind an HTTP endpoint."""

    def __init__(self, url: str, timeout: float = 10.0):
        self.url = url
        self.timeout = timeout

    def query_one(self, image: np.ndarray) -> int:
        buf = io.BytesIO()
        Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
        req = urllib.request.Request(self.url, data=buf.getvalue(), method="POST",
                                     headers={"Content-Type": "image/png"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return int(resp.read().decode().strip())

    def predict(self, images: np.ndarray) -> np.ndarray:
        return np.array([self.query_one(img) for img in images], dtype=np.int64)


def serve_oracle(model: Any, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Expose ``model`` (anything :func:`predict_labels` accepts) over HTTP.

    Starts a daemon thread and returns the server; ``server.server_address``
    holds the bound port and ``server.shutdown()`` stops it.
    """

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):  # noqa: N802
            body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
            try:
                with Image.open(io.BytesIO(body)) as im:
                    img = np.asarray(im.convert("RGB"), dtype=np.uint8)
                label = int(predict_labels(model, img[None])[0])
            except Exception as exc:
                self.send_error(400, str(exc))
                return
            payload = str(label).encode()
            self.send_response(200)
            self.send_header("Content-Type", "text/plain")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer((host, port), Handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server
