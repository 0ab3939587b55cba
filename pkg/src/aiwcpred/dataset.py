"""Feature/runtime datasets: joining, validation, CSV I/O and synthesis.

The synthetic generator stands in for measured runtimes.  Its ground truth,
in log10 seconds, is::

    log10 t = log10 base(size)
            + 0.85 * log10(total_instruction_count)
            + 0.25 * log10(total_memory_footprint)
            + 0.15 * global_memory_address_entropy / log2(total_memory_footprint)
            - 0.10 * log10(work_items)
            + 0.35 * yokota_branch_entropy
            + speed[device]
            + par[class] * (log10(work_items) - WI_CENTRE)
            + branch[class] * yokota_branch_entropy
            - 8.5
            + noise

with ``base = {tiny: 1, small: 1.25, medium: 1.5, large: 2}``, per-class
sensitivities in :data:`CLASS_SENSITIVITY` and Gaussian noise of standard
deviation ``noise`` (log10 units) per iteration.  The first five terms form
the fixed feature function g; the class terms make the best device depend
on the kernel.  :func:`true_log10_time` evaluates this model from a
persisted latent description.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .characterizer import (FEATURE_CSV_KEYS, FEATURE_NAMES, FeatureVector, format_value)

log = logging.getLogger(__name__)

SIZES = ("tiny", "small", "medium", "large")
_SIZE_RANK = {s: i for i, s in enumerate(SIZES)}
RUNTIME_HEADER = ("application", "kernel", "size", "device", "iterations", "mean_time_s")
ITERATION_HEADER = ("application", "kernel", "size", "device", "iteration", "time_s")

SIZE_BASE = {"tiny": 1.0, "small": 1.25, "medium": 1.5, "large": 2.0}
SIZE_WORK_SCALE = {"tiny": 1, "small": 8, "medium": 64, "large": 512}
WI_CENTRE = 5.0
CLASS_SENSITIVITY = {
    # (parallelism, branch entropy) sensitivity per device class
    "cpu": (0.12, -0.10),
    "gpu": (-0.10, 0.30),
    "mic": (-0.03, 0.10),
}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class RowKey:
    kernel: str
    size: str
    device: str
    application: str

    def sort_key(self):
        return (self.kernel, _SIZE_RANK.get(self.size, len(SIZES)), self.device, self.application)


@dataclass(frozen=True)
class RuntimeRecord:
    application: str
    kernel: str
    size: str
    device_id: str
    iteration_times: tuple[float, ...]
    mean_time: float

    def __post_init__(self):
        if not self.iteration_times:
            raise DatasetError("a runtime record needs at least one iteration")
        if any(t <= 0 for t in self.iteration_times) or self.mean_time <= 0:
            raise DatasetError("runtimes must be positive")
        if not math.isclose(self.mean_time, float(np.mean(self.iteration_times)), rel_tol=1e-6):
            raise DatasetError(
                f"mean_time {self.mean_time} is not the mean of the iterations for "
                f"{self.application}/{self.kernel}/{self.size}/{self.device_id}")


class Dataset:
    """Rows of (kernel, size, device) with their feature vector and mean runtime.

    Rows are kept sorted by (kernel, size, device) so anything keyed on row
    position, such as bootstrap draws, ignores the input order.
    """

    def __init__(self, keys, features, times, feature_names=FEATURE_NAMES, iteration_times=None):
        keys = list(keys)
        features = np.asarray(features, dtype=float).reshape(len(keys), len(feature_names))
        times = np.asarray(times, dtype=float)
        if len(keys) != len(times):
            raise DatasetError("keys and times differ in length")
        if features.shape[1] != len(feature_names):
            raise DatasetError(f"expected {len(feature_names)} feature columns, got {features.shape[1]}")
        if len(keys) and not np.all(times > 0):
            raise DatasetError("measured_time must be positive")
        for k in keys:
            if not k.kernel:
                raise DatasetError("kernel id must be non-empty")
        if len(set(keys)) != len(keys):
            raise DatasetError("duplicate (application, kernel, size, device) rows")
        order = sorted(range(len(keys)), key=lambda i: keys[i].sort_key())
        self.keys: list[RowKey] = [keys[i] for i in order]
        self.features = features[order]
        self.times = times[order]
        self.feature_names = tuple(feature_names)
        self.iteration_times = None
        if iteration_times is not None:
            self.iteration_times = [tuple(iteration_times[i]) for i in order]
        self.orphans: list[tuple] = []

    def __len__(self):
        return len(self.keys)

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.keys == other.keys
                and self.feature_names == other.feature_names
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.times, other.times))

    @property
    def devices(self) -> tuple[str, ...]:
        return tuple(sorted({k.device for k in self.keys}))

    @property
    def kernels(self) -> tuple[str, ...]:
        return tuple(sorted({k.kernel for k in self.keys}))

    @property
    def kernel_column(self) -> np.ndarray:
        return np.array([k.kernel for k in self.keys])

    def response(self, kind: str = "log10") -> np.ndarray:
        if kind == "log10":
            return np.log10(self.times)
        if kind == "raw":
            return self.times.copy()
        raise ValueError(f"unknown response transform {kind!r}")

    def predictors(self, devices=None) -> np.ndarray:
        """Feature columns followed by a one-hot encoding of the device."""
        devices = tuple(devices) if devices is not None else self.devices
        return encode_predictors(self.features, [k.device for k in self.keys], devices)

    def take(self, index) -> "Dataset":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        index = index.astype(np.intp)
        sub = Dataset([self.keys[i] for i in index], self.features[index], self.times[index],
                      self.feature_names,
                      None if self.iteration_times is None else [self.iteration_times[i] for i in index])
        return sub

    def with_kernels(self, kernels) -> "Dataset":
        kernels = set(kernels)
        return self.take([i for i, k in enumerate(self.keys) if k.kernel in kernels])

    def without_kernels(self, kernels) -> "Dataset":
        kernels = set(kernels)
        return self.take([i for i, k in enumerate(self.keys) if k.kernel not in kernels])

    def rows(self):
        """Yield ``(kernel, application, size, device, FeatureVector, time)``."""
        for k, f, t in zip(self.keys, self.features, self.times):
            yield k.kernel, k.application, k.size, k.device, _feature_vector(f, self.feature_names), float(t)


def _feature_vector(values, names):
    if tuple(names) == FEATURE_NAMES:
        return FeatureVector.from_values(_native(v, n) for v, n in zip(values, names))
    return dict(zip(names, values))


_INT_FIELDS = {n for n, t in FeatureVector.__annotations__.items() if t == "int"}


def _native(v, name):
    return int(v) if name in _INT_FIELDS else float(v)


def encode_predictors(features: np.ndarray, row_devices, devices) -> np.ndarray:
    index = {d: i for i, d in enumerate(devices)}
    onehot = np.zeros((len(row_devices), len(devices)))
    for r, d in enumerate(row_devices):
        if d not in index:
            raise DatasetError(f"unknown device {d!r}")
        onehot[r, index[d]] = 1.0
    return np.hstack([np.asarray(features, dtype=float).reshape(len(row_devices), -1), onehot])


# ---------------------------------------------------------------------------
# CSV I/O

def _read_csv(path_or_text) -> tuple[list[str], list[list[str]]]:
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text):
        text = Path(path_or_text).read_text()
    else:
        text = path_or_text
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetError("empty CSV") from None
    return header, [row for row in reader if row]


def _float(text: str, where: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DatasetError(f"{where}: not a number: {text!r}") from None


def read_features(path_or_text) -> dict[tuple[str, str, str], np.ndarray]:
    header, rows = _read_csv(path_or_text)
    expected = list(FEATURE_CSV_KEYS + FEATURE_NAMES)
    if header != expected:
        raise DatasetError("features CSV header does not match the feature schema")
    out = {}
    for n, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DatasetError(f"features CSV line {n}: expected {len(header)} fields")
        key = tuple(row[:3])
        if key[2] not in _SIZE_RANK:
            raise DatasetError(f"features CSV line {n}: unknown size {key[2]!r}")
        if key in out:
            raise DatasetError(f"features CSV line {n}: duplicate key {key}")
        out[key] = np.array([_float(v, f"features CSV line {n}") for v in row[3:]])
    return out


def read_runtimes(path_or_text) -> dict[tuple[str, str, str, str], tuple[int, float]]:
    header, rows = _read_csv(path_or_text)
    if tuple(header) != RUNTIME_HEADER:
        raise DatasetError(f"runtimes CSV header must be {','.join(RUNTIME_HEADER)}")
    out = {}
    for n, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DatasetError(f"runtimes CSV line {n}: expected {len(header)} fields")
        key = tuple(row[:4])
        if key[2] not in _SIZE_RANK:
            raise DatasetError(f"runtimes CSV line {n}: unknown size {key[2]!r}")
        if key in out:
            raise DatasetError(f"runtimes CSV line {n}: duplicate key {key}")
        t = _float(row[5], f"runtimes CSV line {n}")
        if t <= 0:
            raise DatasetError(f"runtimes CSV line {n}: mean_time_s must be positive")
        out[key] = (int(row[4]), t)
    return out


def read_iterations(path_or_text) -> dict[tuple[str, str, str, str], list[float]]:
    header, rows = _read_csv(path_or_text)
    if tuple(header) != ITERATION_HEADER:
        raise DatasetError(f"iterations CSV header must be {','.join(ITERATION_HEADER)}")
    out: dict = {}
    for n, row in enumerate(rows, start=2):
        out.setdefault(tuple(row[:4]), []).append(_float(row[5], f"iterations CSV line {n}"))
    return out


def load(features_csv, runtimes_csv, iterations_csv=None) -> Dataset:
    """Inner-join features and runtimes on (application, kernel, size).

    Runtime rows without features and feature rows without runtimes are
    logged and listed in ``Dataset.orphans``.
    """
    feats = read_features(features_csv)
    runs = read_runtimes(runtimes_csv)
    iters = read_iterations(iterations_csv) if iterations_csv is not None else None
    keys, fs, ts, its = [], [], [], []
    orphans = []
    matched = set()
    for key, (count, mean) in runs.items():
        app, kernel, size, device = key
        fkey = (app, kernel, size)
        if fkey not in feats:
            orphans.append(("runtime", *key))
            continue
        matched.add(fkey)
        keys.append(RowKey(kernel=kernel, size=size, device=device, application=app))
        fs.append(feats[fkey])
        ts.append(mean)
        if iters is not None:
            rec = RuntimeRecord(app, kernel, size, device, tuple(iters.get(key, ())) or (mean,), mean)
            if len(rec.iteration_times) != count and key in iters:
                raise DatasetError(f"{key}: {count} iterations declared, {len(rec.iteration_times)} found")
            its.append(rec.iteration_times)
    for fkey in feats:
        if fkey not in matched:
            orphans.append(("features", *fkey))
    for o in orphans:
        log.warning("unmatched %s row: %s", o[0], ",".join(o[1:]))
    if not keys:
        raise DatasetError("join produced zero rows")
    ds = Dataset(keys, np.array(fs), ts, iteration_times=its if iters is not None else None)
    ds.orphans = orphans
    return ds


def features_csv_text(ds: Dataset) -> str:
    lines = [",".join(FEATURE_CSV_KEYS + ds.feature_names)]
    seen = set()
    for k, f in zip(ds.keys, ds.features):
        fkey = (k.application, k.kernel, k.size)
        if fkey in seen:
            continue
        seen.add(fkey)
        lines.append(",".join([*fkey] + [format_value(_native(v, n)) for v, n in zip(f, ds.feature_names)]))
    return "\n".join(lines) + "\n"


def runtimes_csv_text(ds: Dataset) -> str:
    lines = [",".join(RUNTIME_HEADER)]
    for i, (k, t) in enumerate(zip(ds.keys, ds.times)):
        n = len(ds.iteration_times[i]) if ds.iteration_times is not None else 1
        lines.append(",".join([k.application, k.kernel, k.size, k.device, str(n), format_value(float(t))]))
    return "\n".join(lines) + "\n"


def iterations_csv_text(ds: Dataset) -> str:
    if ds.iteration_times is None:
        raise DatasetError("dataset has no per-iteration times")
    lines = [",".join(ITERATION_HEADER)]
    for k, its in zip(ds.keys, ds.iteration_times):
        for j, t in enumerate(its):
            lines.append(",".join([k.application, k.kernel, k.size, k.device, str(j), format_value(t)]))
    return "\n".join(lines) + "\n"


def write(ds: Dataset, features_path, runtimes_path, iterations_path=None) -> None:
    Path(features_path).write_text(features_csv_text(ds))
    Path(runtimes_path).write_text(runtimes_csv_text(ds))
    if iterations_path is not None:
        Path(iterations_path).write_text(iterations_csv_text(ds))


# ---------------------------------------------------------------------------
# synthesis

DEFAULT_DEVICE_CLASSES = ("cpu",) * 3 + ("gpu",) * 11 + ("mic",)


@dataclass
class SynthConfig:
    kernel_count: int = 37
    device_count: int = 15
    sizes: tuple[str, ...] = SIZES
    application_count: int = 11
    # log10 speed offset per device; drawn from the seed when None
    device_speeds: tuple[float, ...] | None = None
    device_classes: tuple[str, ...] | None = None
    instructions_per_item: tuple[float, float] = (20.0, 4000.0)
    base_work_items: tuple[int, int] = (64, 4096)
    noise: float = 0.01
    iterations: int = 50
    seed: int = 0
    latent: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kernel_count < 1 or self.device_count < 1 or self.application_count < 1:
            raise ValueError("counts must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.sizes or any(s not in _SIZE_RANK for s in self.sizes):
            raise ValueError(f"sizes must be drawn from {SIZES}")
        if self.device_speeds is not None and len(self.device_speeds) != self.device_count:
            raise ValueError("device_speeds must have device_count entries")
        if self.device_classes is not None:
            if len(self.device_classes) != self.device_count:
                raise ValueError("device_classes must have device_count entries")
            if any(c not in CLASS_SENSITIVITY for c in self.device_classes):
                raise ValueError(f"device classes must be drawn from {sorted(CLASS_SENSITIVITY)}")


@dataclass
class SynthOutput:
    features_csv: str
    runtimes_csv: str
    iterations_csv: str
    latent: dict

    def write(self, outdir) -> dict[str, Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = {
            "features": outdir / "features.csv",
            "runtimes": outdir / "runtimes.csv",
            "iterations": outdir / "iterations.csv",
            "latent": outdir / "latent.json",
        }
        paths["features"].write_text(self.features_csv)
        paths["runtimes"].write_text(self.runtimes_csv)
        paths["iterations"].write_text(self.iterations_csv)
        paths["latent"].write_text(json.dumps(self.latent, indent=1) + "\n")
        return paths


def _round9(x: float) -> float:
    return float(f"{x:.9g}")


def _device_classes(count: int) -> tuple[str, ...]:
    if count == len(DEFAULT_DEVICE_CLASSES):
        return DEFAULT_DEVICE_CLASSES
    # same mix, scaled to the requested count
    order = ("gpu", "cpu", "mic", "gpu", "gpu", "cpu", "gpu", "gpu")
    return tuple(order[i % len(order)] for i in range(count))


def _synth_features(rng: np.random.Generator, base_wi: int, ipw: float, profile: dict, size: str) -> list:
    work_items = int(base_wi * SIZE_WORK_SCALE[size])
    instr_pi = max(2, int(round(ipw * (1.0 + 0.15 * _SIZE_RANK[size]))))
    total_instr = work_items * instr_pi
    barriers_pi = profile["barriers"]
    if barriers_pi == 0:
        min_itb = max_itb = instr_pi - 1
        median_itb = float(min_itb)
    else:
        seg = (instr_pi - 1 - barriers_pi) / (barriers_pi + 1)
        min_itb = max(0, int(seg * profile["itb_low"]))
        max_itb = max(min_itb, int(seg * profile["itb_high"]))
        median_itb = min_itb + (max_itb - min_itb) * profile["itb_mid"]
        median_itb = math.floor(median_itb * 2) / 2  # may be half-integer
    max_simd = profile["max_simd"]
    mean_simd = 1.0 + (max_simd - 1) * profile["simd_frac"]
    sd_simd = (max_simd - 1) * profile["simd_spread"] * 0.5
    footprint = max(1, int(work_items * profile["addr_per_item"]))
    ninety = max(1, int(math.ceil(footprint * profile["hot_frac"])))
    gmae = math.log2(footprint) * profile["randomness"]
    lmae = []
    level = gmae
    for n in range(1, 11):
        level = max(0.0, level - profile["locality"] * (1.0 + 0.1 * n))
        lmae.append(level)
    sites = profile["branch_sites"]
    if sites:
        sites_90 = max(1, int(math.ceil(sites * profile["site_frac"])))
        yokota = profile["yokota"]
        linear = min(1.0, yokota * profile["linear_ratio"])
    else:
        sites_90, yokota, linear = 0, 0.0, 0.0
    values = [
        profile["opcodes"], total_instr, work_items, work_items * barriers_pi,
        min_itb, max_itb, median_itb, max_simd, mean_simd, sd_simd,
        footprint, ninety, gmae, *lmae, sites, sites_90, yokota, linear,
    ]
    return [v if isinstance(v, int) else _round9(v) for v in values]


def _kernel_profile(rng: np.random.Generator) -> dict:
    max_simd = int(rng.choice([1, 2, 4, 8, 16]))
    sites = int(rng.choice([0, 0, 1, 2, 3, 4, 6, 8, 12, 16]))
    return {
        "opcodes": int(rng.integers(3, 14)),
        "barriers": int(rng.choice([0, 0, 0, 1, 2, 4])),
        "itb_low": float(rng.uniform(0.2, 0.9)),
        "itb_high": float(rng.uniform(1.0, 2.5)),
        "itb_mid": float(rng.uniform(0.2, 0.8)),
        "max_simd": max_simd,
        "simd_frac": float(rng.uniform(0.0, 1.0)) if max_simd > 1 else 0.0,
        "simd_spread": float(rng.uniform(0.0, 1.0)) if max_simd > 1 else 0.0,
        "addr_per_item": float(rng.uniform(0.5, 12.0)),
        "hot_frac": float(rng.uniform(0.3, 0.9)),
        "randomness": float(rng.uniform(0.55, 0.98)),
        "locality": float(rng.uniform(0.05, 1.2)),
        "branch_sites": sites,
        "site_frac": float(rng.uniform(0.3, 1.0)),
        "yokota": float(rng.uniform(0.0, 0.9)) if sites else 0.0,
        "linear_ratio": float(rng.uniform(0.8, 1.1)),
    }


def true_log10_time(features: dict, size: str, device: str, latent: dict) -> float:
    """Noise-free log10 runtime from the persisted latent model."""
    dev = latent["devices"][device]
    sens_par, sens_br = latent["class_sensitivity"][dev["class"]]
    instr = features["total_instruction_count"]
    wi = features["work_items"]
    fp = features["total_memory_footprint"]
    gmae = features["global_memory_address_entropy"]
    yok = features["yokota_branch_entropy"]
    g = (0.85 * math.log10(instr) + 0.25 * math.log10(fp)
         + (0.15 * gmae / math.log2(fp) if fp > 1 else 0.0)
         - 0.10 * math.log10(wi) + 0.35 * yok)
    return (math.log10(latent["size_base"][size]) + g + dev["speed"]
            + sens_par * (math.log10(wi) - latent["wi_centre"]) + sens_br * yok
            + latent["offset"])


def synthesize(config: SynthConfig | None = None) -> SynthOutput:
    """Generate features, runtimes, per-iteration times and the latent model."""
    config = config or SynthConfig()
    rng = np.random.default_rng(config.seed)
    classes = config.device_classes or _device_classes(config.device_count)
    if config.device_speeds is not None:
        speeds = list(config.device_speeds)
    else:
        # well separated offsets, shuffled across classes
        speeds = list(np.round(np.linspace(-0.7, 0.7, config.device_count), 6))
        rng.shuffle(speeds)
    devices = {f"dev{d:02d}": {"class": classes[d], "speed": float(speeds[d])}
               for d in range(config.device_count)}
    latent = {
        "model": "log10 t = log10 size_base + g(features) + speed + class terms + offset + noise",
        "size_base": {s: SIZE_BASE[s] for s in SIZES},
        "wi_centre": WI_CENTRE,
        "offset": -8.5,
        "class_sensitivity": {c: list(v) for c, v in CLASS_SENSITIVITY.items()},
        "devices": devices,
        "noise": config.noise,
        "seed": config.seed,
    }

    apps = [f"app{a:02d}" for a in range(config.application_count)]
    feat_lines = [",".join(FEATURE_CSV_KEYS + FEATURE_NAMES)]
    run_lines = [",".join(RUNTIME_HEADER)]
    iter_lines = [",".join(ITERATION_HEADER)]
    lo, hi = config.instructions_per_item
    wlo, whi = config.base_work_items
    for k in range(config.kernel_count):
        app = apps[k % len(apps)]
        kernel = f"kernel{k:02d}"
        profile = _kernel_profile(rng)
        ipw = float(np.exp(rng.uniform(math.log(lo), math.log(hi))))
        base_wi = int(np.exp(rng.uniform(math.log(wlo), math.log(whi))))
        for size in config.sizes:
            values = _synth_features(rng, base_wi, ipw, profile, size)
            feat_lines.append(",".join([app, kernel, size] + [format_value(v) for v in values]))
            fdict = dict(zip(FEATURE_NAMES, values))
            for device in devices:
                mu = true_log10_time(fdict, size, device, latent)
                if config.noise > 0:
                    logs = mu + rng.normal(0.0, config.noise, config.iterations)
                else:
                    logs = np.full(config.iterations, mu)
                its = [_round9(10.0 ** v) for v in logs]
                mean = _round9(float(np.mean(its)))
                run_lines.append(",".join([app, kernel, size, device, str(len(its)), format_value(mean)]))
                iter_lines.extend(",".join([app, kernel, size, device, str(j), format_value(t)])
                                  for j, t in enumerate(its))
    return SynthOutput("\n".join(feat_lines) + "\n", "\n".join(run_lines) + "\n",
                       "\n".join(iter_lines) + "\n", latent)


def bundled_paths() -> dict[str, Path]:
    """The shipped 37-kernel x 4-size x 15-device synthetic sample."""
    root = Path(__file__).parent / "data" / "synthetic"
    return {"features": root / "features.csv", "runtimes": root / "runtimes.csv",
            "latent": root / "latent.json"}


def load_bundled() -> Dataset:
    p = bundled_paths()
    return load(p["features"], p["runtimes"])
