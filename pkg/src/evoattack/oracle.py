"""Target-model abstraction: query-counted confidence lookups.

Every oracle exposes the same surface: ``query`` returns a full confidence
vector, ``query_binary`` only the argmax as a one-hot vector, and both count
exactly one logical query. ``query_uncounted`` exists for sanity checks and
post-run verification that must not draw on the attack's query budget.

Two analytic desk-scale oracles are built in (half-brightness and prototype
distance) so attack behaviour can be checked against closed forms, plus an
HTTP client for any service speaking the JSON wire protocol below:

    POST /predict  {"shape": [H, W, C], "data": [floats in 0..1]}
                   -> {"probs": [K floats]}   (sum 1 +/- 1e-4, or one-hot
                                               when the service is binary_only)
    GET  /info     -> {"classes": K, "shape": [H, W, C], "binary_only": bool}
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import numpy as np
import requests

from .tensors import ImageTensor, ShapeError

PROB_SUM_TOLERANCE = 1e-4
DEFAULT_MC_SIGMA = 30.0 / 255.0


class OracleError(RuntimeError):
    """Base class for oracle failures."""


class TransportError(OracleError):
    """Network-level failure; retryable up to the configured bound."""


class ProtocolError(OracleError):
    """Well-delivered but non-conforming response; fatal for the query."""


@dataclass(frozen=True)
class ConfidenceVector:
    """K non-negative per-label confidences summing to 1 (within 1e-6)."""

    probs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 2:
            raise ValueError("confidence vector needs at least two classes")
        if np.any(arr < 0.0) or not np.all(np.isfinite(arr)):
            raise ValueError("confidences must be finite and non-negative")
        if abs(float(arr.sum()) - 1.0) > 1e-6:
            raise ValueError(f"confidences sum to {arr.sum()}, expected 1")
        arr.flags.writeable = False
        object.__setattr__(self, "probs", arr)

    def __len__(self) -> int:
        return self.probs.size

    def top_two(self) -> tuple[int, int]:
        """Indices of the highest and second-highest confidence; ties break
        toward the lower index."""
        order = np.argsort(-self.probs, kind="stable")
        return int(order[0]), int(order[1])

    @property
    def label(self) -> int:
        return self.top_two()[0]

    def prob(self, index: int) -> float:
        return float(self.probs[index])

    def as_one_hot(self) -> "ConfidenceVector":
        hot = np.zeros(self.probs.size, dtype=np.float64)
        hot[self.label] = 1.0
        return ConfidenceVector(hot)


class OracleStats:
    """Query counter; increments are atomic under concurrent access."""

    def __init__(self):
        self._lock = threading.Lock()
        self._total = 0
        self.queries_at_first_success: int | None = None

    @property
    def total_queries(self) -> int:
        with self._lock:
            return self._total

    def count(self, n: int = 1) -> None:
        with self._lock:
            self._total += n

    def mark_first_success(self, queries: int) -> None:
        if self.queries_at_first_success is None:
            self.queries_at_first_success = queries


class Oracle:
    """Base class: shape checking, counting, and batch fan-out."""

    def __init__(self, num_classes: int, input_shape: tuple[int, int, int], *,
                 binary_only: bool = False, concurrent_safe: bool = True):
        if num_classes < 2:
            raise ValueError("an oracle needs at least two classes")
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.binary_only = binary_only
        self.concurrent_safe = concurrent_safe
        self.stats = OracleStats()

    # Subclasses implement _predict (and may override _predict_batch).
    def _predict(self, arr: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _predict_batch(self, batch: np.ndarray) -> np.ndarray:
        return np.stack([self._predict(arr) for arr in batch])

    def _check_shape(self, image: ImageTensor) -> np.ndarray:
        if image.shape != self.input_shape:
            raise ShapeError(f"oracle expects {self.input_shape}, got {image.shape}")
        return image.data

    def query(self, image: ImageTensor) -> ConfidenceVector:
        arr = self._check_shape(image)
        probs = self._predict(arr)
        self.stats.count(1)
        return ConfidenceVector(probs)

    def query_binary(self, image: ImageTensor) -> ConfidenceVector:
        """One-hot argmax of the underlying model; still one query."""
        return self.query(image).as_one_hot()

    def query_uncounted(self, image: ImageTensor) -> ConfidenceVector:
        """Same answer as query() without touching the budget counter."""
        arr = self._check_shape(image)
        return ConfidenceVector(self._predict(arr))

    def query_binary_batch(self, batch: np.ndarray) -> np.ndarray:
        """Argmax labels for a (B, H, W, C) batch; counts B queries."""
        if batch.shape[1:] != self.input_shape:
            raise ShapeError(f"oracle expects {self.input_shape}, got {batch.shape[1:]}")
        probs = self._predict_batch(batch)
        self.stats.count(batch.shape[0])
        # Stable argmax with ties toward the lower index.
        return np.argmax(probs, axis=1)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


class HalfBrightnessOracle(Oracle):
    """Two-class softmax over (mean of left half, mean of right half).

    Fully analytic: class 0 wins when the left half is brighter. The
    temperature scales how sharply the confidence responds to the brightness
    gap, so clean margins can be dialed in exactly.
    """

    def __init__(self, height: int, width: int, channels: int = 1, *,
                 temperature: float = 0.05, binary_only: bool = False):
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        if width < 2:
            raise ValueError("need at least two columns to split")
        super().__init__(2, (height, width, channels), binary_only=binary_only)
        self.temperature = temperature
        self._split = width // 2

    def _predict(self, arr: np.ndarray) -> np.ndarray:
        left = float(np.mean(arr[:, : self._split, :]))
        right = float(np.mean(arr[:, self._split :, :]))
        probs = _softmax(np.array([left, right], dtype=np.float64) / self.temperature)
        if self.binary_only:
            hot = np.zeros(2, dtype=np.float64)
            hot[int(np.argmax(probs))] = 1.0
            return hot
        return probs

    def _predict_batch(self, batch: np.ndarray) -> np.ndarray:
        left = np.mean(batch[:, :, : self._split, :], axis=(1, 2, 3))
        right = np.mean(batch[:, :, self._split :, :], axis=(1, 2, 3))
        probs = _softmax(np.stack([left, right], axis=1) / self.temperature)
        if self.binary_only:
            hot = np.zeros_like(probs)
            hot[np.arange(len(probs)), np.argmax(probs, axis=1)] = 1.0
            return hot
        return probs


class PrototypeOracle(Oracle):
    """K-class softmax over negative Euclidean distances to stored images."""

    def __init__(self, prototypes: list[ImageTensor], *, temperature: float = 1.0,
                 binary_only: bool = False):
        if len(prototypes) < 2:
            raise ValueError("need at least two prototypes")
        shape = prototypes[0].shape
        if any(p.shape != shape for p in prototypes):
            raise ShapeError("prototypes must share one shape")
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        super().__init__(len(prototypes), shape, binary_only=binary_only)
        self.temperature = temperature
        self._protos = np.stack([p.data for p in prototypes])

    @classmethod
    def from_files(cls, paths, *, temperature: float = 1.0, binary_only: bool = False):
        from .tensors import load_image

        return cls([load_image(p) for p in paths], temperature=temperature,
                   binary_only=binary_only)

    def _predict(self, arr: np.ndarray) -> np.ndarray:
        diffs = self._protos - arr[None, ...]
        dists = np.sqrt(np.sum(diffs * diffs, axis=(1, 2, 3)))
        probs = _softmax(-dists / self.temperature)
        if self.binary_only:
            hot = np.zeros(self.num_classes, dtype=np.float64)
            hot[int(np.argmax(probs))] = 1.0
            return hot
        return probs

    def _predict_batch(self, batch: np.ndarray) -> np.ndarray:
        diffs = self._protos[None, ...] - batch[:, None, ...]
        dists = np.sqrt(np.sum(diffs * diffs, axis=(2, 3, 4)))
        probs = _softmax(-dists / self.temperature)
        if self.binary_only:
            hot = np.zeros_like(probs)
            hot[np.arange(len(probs)), np.argmax(probs, axis=1)] = 1.0
            return hot
        return probs


class RemoteOracle(Oracle):
    """Client for the JSON-over-HTTP prediction protocol.

    Transport failures are retried up to ``retries`` times per logical query
    and never double-count; non-conforming payloads fail the query outright.
    """

    def __init__(self, url: str, *, retries: int = 2, timeout: float = 10.0,
                 retry_wait: float = 0.1, expected_classes: int | None = None,
                 expected_shape: tuple[int, int, int] | None = None):
        self.url = url.rstrip("/")
        self.retries = retries
        self.timeout = timeout
        self.retry_wait = retry_wait
        self._session = requests.Session()
        info = self._fetch_info()
        classes = int(info["classes"])
        shape = tuple(int(d) for d in info["shape"])
        if expected_classes is not None and classes != expected_classes:
            raise ProtocolError(f"service reports {classes} classes, config says {expected_classes}")
        if expected_shape is not None and shape != tuple(expected_shape):
            raise ProtocolError(f"service reports shape {shape}, config says {tuple(expected_shape)}")
        super().__init__(classes, shape, binary_only=bool(info.get("binary_only", False)),
                         concurrent_safe=True)

    def _http(self, method: str, path: str, payload: dict | None = None) -> dict:
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._session.request(method, self.url + path, json=payload,
                                             timeout=self.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                if attempt < self.retries:
                    time.sleep(self.retry_wait)
                continue
            if resp.status_code >= 500:
                last_exc = TransportError(f"{path} -> HTTP {resp.status_code}")
                if attempt < self.retries:
                    time.sleep(self.retry_wait)
                continue
            if resp.status_code != 200:
                raise ProtocolError(f"{path} -> HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolError(f"{path} returned non-JSON body") from exc
        raise TransportError(f"{path} failed after {self.retries + 1} attempts: {last_exc}")

    def _fetch_info(self) -> dict:
        info = self._http("GET", "/info")
        for key in ("classes", "shape"):
            if key not in info:
                raise ProtocolError(f"/info response missing {key!r}")
        if len(info["shape"]) != 3:
            raise ProtocolError(f"/info shape must have 3 entries, got {info['shape']}")
        return info

    def info(self) -> dict:
        return self._fetch_info()

    def _predict(self, arr: np.ndarray) -> np.ndarray:
        payload = {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
        body = self._http("POST", "/predict", payload)
        return self._validate_probs(body)

    def _validate_probs(self, body: dict) -> np.ndarray:
        if "probs" not in body:
            raise ProtocolError("/predict response missing 'probs'")
        probs = np.asarray(body["probs"], dtype=np.float64)
        if probs.ndim != 1 or probs.size != self.num_classes:
            raise ProtocolError(f"expected {self.num_classes} probs, got shape {probs.shape}")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ProtocolError("probs must be finite and non-negative")
        if self.binary_only:
            ones = np.isclose(probs, 1.0, atol=1e-9)
            zeros = np.isclose(probs, 0.0, atol=1e-9)
            if ones.sum() != 1 or not np.all(ones | zeros):
                raise ProtocolError("binary_only service must answer one-hot")
            return np.where(ones, 1.0, 0.0)
        total = float(probs.sum())
        if abs(total - 1.0) > PROB_SUM_TOLERANCE:
            raise ProtocolError(f"probs sum to {total}, outside 1 +/- {PROB_SUM_TOLERANCE}")
        return probs / total


def monte_carlo_confidence(
    oracle: Oracle,
    image: ImageTensor,
    n_samples: int,
    sigma: float,
    rng: np.random.Generator,
) -> ConfidenceVector:
    """Estimate class confidences from binary outcomes under Gaussian noise.

    Draws ``n_samples`` noise fields in one call (shape (n, H, W, C)), clamps
    each noised image into [0, 1], and averages the one-hot outcomes. Counts
    exactly ``n_samples`` queries.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if image.shape != oracle.input_shape:
        raise ShapeError(f"oracle expects {oracle.input_shape}, got {image.shape}")
    noise = rng.normal(0.0, sigma, size=(n_samples, *image.shape))
    batch = np.clip(image.data[None, ...] + noise, 0.0, 1.0)
    labels = oracle.query_binary_batch(batch)
    counts = np.bincount(labels, minlength=oracle.num_classes).astype(np.float64)
    return ConfidenceVector(counts / n_samples)
