"""Random-forest regression with out-of-bag error and a canonical model file."""

from __future__ import annotations

import hashlib
import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import _core

MODEL_MAGIC = b"aiwcforest v1\n"
RESPONSES = ("log10", "raw")
MAX_SEED = 2**64 - 1


class DegenerateResponseError(ValueError):
    """The response has zero variance, so the OOB error is undefined."""


class SchemaMismatchError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ForestParams:
    num_trees: int = 500
    mtry: int = 30
    min_node_size: int = 9
    seed: int = 0

    def __post_init__(self):
        for name in ("num_trees", "mtry", "min_node_size"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if not 0 <= self.seed <= MAX_SEED:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def triple(self) -> tuple[int, int, int]:
        return (self.num_trees, self.mtry, self.min_node_size)


def schema_fingerprint(feature_names, devices, response: str) -> str:
    doc = json.dumps({"features": list(feature_names), "devices": list(devices),
                      "response": response}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode()).hexdigest()


def oob_statistics(y: np.ndarray, oob_sum: np.ndarray, oob_count: np.ndarray):
    """(error %, r squared, rows used) from accumulated OOB predictions.

    Error % is ``100 * MSE_oob / Var(y)`` with the population variance of
    every training response; rows never out-of-bag are left out of the MSE.
    Returns ``(None, None, used)`` for a constant response.
    """
    used = oob_count > 0
    n_used = int(used.sum())
    var = float(np.var(y))
    if var <= 0.0 or n_used == 0:
        return None, None, n_used
    pred = oob_sum[used] / oob_count[used]
    mse = float(np.mean((pred - y[used]) ** 2))
    error = 100.0 * mse / var
    return error, 1.0 - error / 100.0, n_used


@dataclass(frozen=True, eq=False)
class Forest:
    params: ForestParams
    feature_names: tuple[str, ...]
    devices: tuple[str, ...]
    response: str
    feat: np.ndarray
    thr: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    offsets: np.ndarray
    inbag: np.ndarray  # (num_trees, n_train) bootstrap multiplicities
    oob_error_pct: float | None
    r_squared: float | None
    oob_rows: int

    @property
    def num_trees(self) -> int:
        return len(self.offsets) - 1

    @property
    def predictor_width(self) -> int:
        return len(self.feature_names) + len(self.devices)

    @property
    def schema(self) -> str:
        return schema_fingerprint(self.feature_names, self.devices, self.response)

    def tree(self, t: int) -> dict[str, np.ndarray]:
        o, e = self.offsets[t], self.offsets[t + 1]
        return {"feat": self.feat[o:e], "thr": self.thr[o:e], "left": self.left[o:e],
                "right": self.right[o:e], "value": self.value[o:e]}

    def tree_predictions(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.predictor_width:
            raise SchemaMismatchError(
                f"expected {self.predictor_width} predictor columns, got {X.shape[-1]}")
        return _core.predict_forest(self.feat, self.thr, self.left, self.right,
                                    self.value, self.offsets, X)

    def predict_response(self, X: np.ndarray) -> np.ndarray:
        """Mean leaf value over trees, in response units."""
        return self.tree_predictions(X).mean(axis=0)

    def to_seconds(self, response: np.ndarray) -> np.ndarray:
        return 10.0 ** response if self.response == "log10" else np.asarray(response)

    def check_schema(self, feature_names, devices=None) -> None:
        if tuple(feature_names) != self.feature_names:
            raise SchemaMismatchError("feature schema differs from the one the model was trained on")
        if devices is not None:
            unknown = sorted(set(devices) - set(self.devices))
            if unknown:
                raise SchemaMismatchError(f"device(s) unknown to the model: {unknown}")

    def encode(self, features, devices) -> np.ndarray:
        from ..dataset import encode_predictors
        features = np.asarray(features, dtype=float).reshape(len(devices), -1)
        if features.shape[1] != len(self.feature_names):
            raise SchemaMismatchError(
                f"expected {len(self.feature_names)} features, got {features.shape[1]}")
        self.check_schema(self.feature_names, devices)
        return encode_predictors(features, list(devices), self.devices)

    def predict(self, data) -> np.ndarray:
        """Predicted seconds for every row of a :class:`~aiwcpred.dataset.Dataset`."""
        self.check_schema(data.feature_names, data.devices)
        return self.to_seconds(self.predict_response(data.predictors(self.devices)))

    def predict_row(self, features, device: str) -> float:
        return float(self.to_seconds(self.predict_response(self.encode([features], [device])))[0])

    def rank_devices(self, features) -> list[tuple[str, float]]:
        """All known devices sorted by predicted time, fastest first."""
        X = self.encode([features] * len(self.devices), self.devices)
        secs = self.to_seconds(self.predict_response(X))
        return sorted(zip(self.devices, (float(s) for s in secs)), key=lambda kv: (kv[1], kv[0]))

    # -- persistence ---------------------------------------------------------

    _ARRAYS = ("feat", "thr", "left", "right", "value", "offsets", "inbag")

    def to_bytes(self) -> bytes:
        header = {
            "format": "aiwcforest",
            "version": 1,
            "params": asdict(self.params),
            "feature_names": list(self.feature_names),
            "devices": list(self.devices),
            "response": self.response,
            "schema": self.schema,
            "oob_error_pct": self.oob_error_pct,
            "r_squared": self.r_squared,
            "oob_rows": self.oob_rows,
            "arrays": [],
        }
        blobs = []
        for name in self._ARRAYS:
            a = np.ascontiguousarray(getattr(self, name))
            a = a.astype(a.dtype.newbyteorder("<"), copy=False)
            blob = zlib.compress(a.tobytes(), 6)
            header["arrays"].append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                                     "bytes": len(blob)})
            blobs.append(blob)
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return MODEL_MAGIC + head + b"\n" + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Forest":
        if not data.startswith(MODEL_MAGIC):
            raise ModelFormatError("not an aiwcforest v1 model file")
        rest = data[len(MODEL_MAGIC):]
        head, sep, body = rest.partition(b"\n")
        if not sep:
            raise ModelFormatError("truncated model header")
        try:
            header = json.loads(head)
            arrays = {}
            pos = 0
            for spec in header["arrays"]:
                blob = body[pos:pos + spec["bytes"]]
                pos += spec["bytes"]
                a = np.frombuffer(zlib.decompress(blob), dtype=np.dtype(spec["dtype"]))
                arrays[spec["name"]] = a.reshape(spec["shape"]).astype(a.dtype.newbyteorder("="))
            if pos != len(body):
                raise ModelFormatError("trailing bytes after model arrays")
            forest = cls(params=ForestParams(**header["params"]),
                         feature_names=tuple(header["feature_names"]),
                         devices=tuple(header["devices"]), response=header["response"],
                         oob_error_pct=header["oob_error_pct"], r_squared=header["r_squared"],
                         oob_rows=header["oob_rows"], **arrays)
        except (KeyError, TypeError, ValueError, zlib.error) as exc:
            if isinstance(exc, ModelFormatError):
                raise
            raise ModelFormatError(f"corrupt model file: {exc}") from None
        if forest.schema != header["schema"]:
            raise ModelFormatError("schema fingerprint does not match the stored schema")
        return forest

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Forest":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class _Prepared:
    X: np.ndarray
    Xt: np.ndarray
    order: np.ndarray
    list_of: np.ndarray
    y: np.ndarray


def _prepare(X, y) -> _Prepared:
    X = np.ascontiguousarray(X, dtype=float)
    order, list_of = _core.presort(X)
    return _Prepared(X, np.ascontiguousarray(X.T), order, list_of, np.ascontiguousarray(y, dtype=float))


def _grow(prep: _Prepared, seed: int, first: int, count: int, mtry: int, min_node_size: int,
          jobs: int = 1):
    """Grow trees ``first .. first+count-1``; the result is independent of ``jobs``."""
    def chunk(a, b):
        return _core.grow_forest(prep.X, prep.Xt, prep.order, prep.list_of, prep.y,
                                 np.uint64(seed), a, b - a, mtry, min_node_size)

    if jobs <= 1 or count < 2:
        return chunk(first, first + count)
    bounds = np.linspace(first, first + count, min(jobs, count) + 1).astype(int)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(chunk, bounds[:-1], bounds[1:]))
    offs = [np.zeros(1, dtype=np.int64)]
    base = 0
    for p in parts:
        offs.append(p[5][1:] + base)
        base += p[5][-1]
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(5)) + (
        np.concatenate(offs), np.vstack([p[6] for p in parts]), np.vstack([p[7] for p in parts]))


def fit_arrays(X, y, params: ForestParams, feature_names, devices, response="log10",
               jobs: int = 1) -> Forest:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n < 2:
        raise ValueError("need at least 2 training rows")
    if params.mtry > p:
        raise ValueError(f"mtry {params.mtry} exceeds the {p} predictor columns")
    if response not in RESPONSES:
        raise ValueError(f"response must be one of {RESPONSES}")
    prep = _prepare(X, y)
    feat, thr, left, right, value, offsets, inbag, oob = _grow(
        prep, params.seed, 0, params.num_trees, params.mtry, params.min_node_size, jobs)
    mask = ~np.isnan(oob)
    err, r2, used = oob_statistics(prep.y, np.where(mask, oob, 0.0).sum(axis=0), mask.sum(axis=0))
    return Forest(params=params, feature_names=tuple(feature_names), devices=tuple(devices),
                  response=response, feat=feat, thr=thr, left=left, right=right, value=value,
                  offsets=offsets, inbag=inbag, oob_error_pct=err, r_squared=r2, oob_rows=used)


def fit(data, params: ForestParams, response: str = "log10", jobs: int = 1) -> Forest:
    """Fit a forest to a :class:`~aiwcpred.dataset.Dataset`."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    return fit_arrays(data.predictors(), data.response(response), params,
                      data.feature_names, data.devices, response, jobs)


def oob_predictions(forest: Forest, X) -> np.ndarray:
    """Per-row mean over the trees that left the row out (NaN if none did)."""
    per_tree = forest.tree_predictions(X)
    if per_tree.shape[1] != forest.inbag.shape[1]:
        raise SchemaMismatchError("row count differs from the training set")
    oob = forest.inbag == 0
    count = oob.sum(axis=0)
    total = np.where(oob, per_tree, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def oob_error(forest: Forest, data) -> float:
    """OOB error % recomputed from the trees and in-bag counts on ``data``.

    ``data`` must be the training set the forest was fitted on.
    """
    forest.check_schema(data.feature_names, data.devices)
    if forest.inbag.shape[1] != len(data):
        raise SchemaMismatchError("dataset row count differs from the training set")
    y = data.response(forest.response)
    per_tree = forest.tree_predictions(data.predictors(forest.devices))
    oob = forest.inbag == 0
    err, _, used = oob_statistics(y, np.where(oob, per_tree, 0.0).sum(axis=0), oob.sum(axis=0))
    if used == 0:
        raise ValueError("no row is out-of-bag for any tree")
    if err is None:
        raise DegenerateResponseError("response has zero variance; OOB error is undefined")
    return err


class OobCurve:
    """OOB error of every forest-size prefix for fixed (mtry, min_node_size, seed).

    Because tree ``t`` does not depend on the forest size, the OOB error of
    a forest of ``N`` trees can be read off after growing ``N`` trees once;
    asking for a larger ``N`` later only grows the missing trees.
    """

    def __init__(self, prep: _Prepared, mtry: int, min_node_size: int, seed: int):
        self._prep = prep
        self.mtry = mtry
        self.min_node_size = min_node_size
        self.seed = seed
        n = len(prep.y)
        self._sum = np.zeros(n)
        self._count = np.zeros(n, dtype=np.int64)
        self.errors: list[float | None] = []

    def error(self, num_trees: int) -> float | None:
        have = len(self.errors)
        if num_trees > have:
            oob = _grow(self._prep, self.seed, have, num_trees - have, self.mtry,
                        self.min_node_size)[7]
            for row in oob:
                m = ~np.isnan(row)
                self._sum[m] += row[m]
                self._count[m] += 1
                err, _, used = oob_statistics(self._prep.y, self._sum, self._count)
                self.errors.append(err if used else float("nan"))
        return self.errors[num_trees - 1]


class OobCache:
    """Memoized OOB errors for one training set, shared across tuning runs."""

    def __init__(self, data, response: str = "log10", seed: int = 0):
        X = data.predictors()
        self.width = X.shape[1]
        self._prep = _prepare(X, data.response(response))
        self.seed = seed
        self._curves: dict[tuple[int, int], OobCurve] = {}
        self.degenerate = float(np.var(self._prep.y)) <= 0.0

    def __call__(self, num_trees: int, mtry: int, min_node_size: int) -> float:
        if self.degenerate:
            raise DegenerateResponseError("response has zero variance; OOB error is undefined")
        if mtry > self.width:
            raise ValueError(f"mtry {mtry} exceeds the {self.width} predictor columns")
        ForestParams(num_trees, mtry, min_node_size, self.seed)
        key = (mtry, min_node_size)
        if key not in self._curves:
            self._curves[key] = OobCurve(self._prep, mtry, min_node_size, self.seed)
        err = self._curves[key].error(num_trees)
        if err is None or err != err:
            raise ValueError(f"no out-of-bag rows for num_trees={num_trees}")
        return err
