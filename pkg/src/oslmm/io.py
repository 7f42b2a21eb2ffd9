"""Run configuration, CSV tables, manifests and the posterior archive format.

Every writer is deterministic (fixed float formatting, sorted JSON keys, no
timestamps) and atomic: content goes to a temporary file in the target
directory which is then renamed over the destination.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import KernelParams
from .model import Dataset, NoiseModel
from .samplers import ChainConfig, GibbsState, HyperPriors, PosteriorSamples

__all__ = [
    "ConfigError",
    "DataError",
    "ArchiveError",
    "RunConfig",
    "default_seed",
    "atomic_write",
    "format_float",
    "write_dataset_csv",
    "read_dataset_csv",
    "write_trajectories_csv",
    "read_trajectories_csv",
    "write_basis_csv",
    "read_basis_csv",
    "write_json",
    "array_sha256",
    "save_archive",
    "load_archive",
    "ARCHIVE_VERSION",
]

ARCHIVE_MAGIC = b"OSLMMARC"
ARCHIVE_VERSION = 1
SEED_ENV = "OSLMM_SEED"


class ConfigError(ValueError):
    """Invalid or unreadable run/generator configuration."""


class DataError(ValueError):
    """Malformed dataset or trajectory table."""


class ArchiveError(ValueError):
    """Corrupt, truncated or incompatible posterior archive."""


def default_seed() -> int:
    """Seed used when a config omits one; ``$OSLMM_SEED`` overrides 0."""
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Everything ``fit`` needs besides the data.

    ``length_f`` / ``length_scale`` are initial length-scales of the latent
    and mixing (``h`` or ``w``) processes; ``None`` picks a tenth of the time
    span.  ``variance_scale`` is the initial GP variance of ``h`` or ``w``.
    """

    model: str = "oslmm"
    latent_dim: int = 3
    chain: ChainConfig = field(default_factory=ChainConfig)
    priors: HyperPriors = field(default_factory=HyperPriors)
    length_f: float | None = None
    length_scale: float | None = None
    variance_scale: float = 1.0
    out: str | None = None

    def __post_init__(self):
        if self.model not in ("oslmm", "slmm"):
            raise ConfigError(f"model must be 'oslmm' or 'slmm', got {self.model!r}")
        if not isinstance(self.latent_dim, int) or self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be a positive integer, got {self.latent_dim!r}")
        for name in ("length_f", "length_scale"):
            v = getattr(self, name)
            if v is not None and not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v)):
                raise ConfigError(f"{name} must be positive, got {v!r}")
        if not self.variance_scale > 0:
            raise ConfigError("variance_scale must be positive")

    _CHAIN_KEYS = tuple(f.name for f in dataclasses.fields(ChainConfig))
    _PRIOR_KEYS = tuple(f.name for f in dataclasses.fields(HyperPriors))

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a JSON object")
        own = {"model", "latent_dim", "length_f", "length_scale", "variance_scale", "out"}
        allowed = own | {"chain", "priors"}
        unknown = sorted(set(raw) - allowed)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        chain_raw = dict(raw.get("chain", {}))
        prior_raw = dict(raw.get("priors", {}))
        bad = sorted(set(chain_raw) - set(cls._CHAIN_KEYS)) + sorted(set(prior_raw) - set(cls._PRIOR_KEYS))
        if bad:
            raise ConfigError(f"unknown config keys: {', '.join(bad)}")
        chain_raw.setdefault("seed", default_seed())
        try:
            chain = ChainConfig(**chain_raw)
            priors = HyperPriors(**prior_raw)
            return cls(chain=chain, priors=priors, **{k: raw[k] for k in own if k in raw})
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(_read_json(path))

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "latent_dim": self.latent_dim,
            "chain": dataclasses.asdict(self.chain),
            "priors": dataclasses.asdict(self.priors),
            "length_f": self.length_f,
            "length_scale": self.length_scale,
            "variance_scale": self.variance_scale,
            "out": self.out,
        }


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}") from exc


# --------------------------------------------------------------------------
# low-level writers
# --------------------------------------------------------------------------

def atomic_write(path, data: bytes | str) -> Path:
    """Write ``data`` to ``path`` through a temporary file and rename."""
    path = Path(path)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def format_float(x: float) -> str:
    """17 significant digits: parses back to the identical double."""
    return "%.17g" % x


def write_json(path, obj) -> Path:
    return atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _render_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _read_csv(path, kind: str):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {kind} {path}: {exc.strerror}") from exc
    if not rows:
        raise DataError(f"{path}: empty file")
    return rows[0], rows[1:]


def _parse_table(path, header, body, n_keys: int, prefix: str):
    """Parse rows of ``key..., value_1..value_n``; errors name row and column."""
    n_cols = len(header)
    if n_cols <= n_keys:
        raise DataError(f"{path}: header has no {prefix}_* columns")
    for j, name in enumerate(header[n_keys:], start=1):
        if name != f"{prefix}_{j}":
            raise DataError(f"{path}: column {n_keys + j} should be '{prefix}_{j}', found {name!r}")
    out = np.empty((len(body), n_cols))
    for i, row in enumerate(body, start=2):
        if len(row) != n_cols:
            raise DataError(f"{path}: row {i} has {len(row)} fields, expected {n_cols}")
        for j, cell in enumerate(row):
            try:
                out[i - 2, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {i}, column {j + 1} ({header[j]}): "
                                f"cannot parse {cell!r} as a number") from None
            if not math.isfinite(out[i - 2, j]):
                raise DataError(f"{path}: row {i}, column {j + 1} ({header[j]}): non-finite value")
    return out


def _group_by_trial(path, table):
    trial_ids = table[:, 0]
    if not np.all(trial_ids == np.round(trial_ids)):
        raise DataError(f"{path}: trial column must hold integers")
    groups = []
    for k in np.unique(trial_ids):
        groups.append((int(k), table[trial_ids == k]))
    return groups


# --------------------------------------------------------------------------
# datasets and trajectories
# --------------------------------------------------------------------------

def write_dataset_csv(path, trials) -> Path:
    """One row per (trial, time): ``trial, time, channel_1..channel_P``."""
    trials = [trials] if isinstance(trials, Dataset) else list(trials)
    P = trials[0].n_channels
    header = ["trial", "time"] + [f"channel_{p + 1}" for p in range(P)]
    rows = []
    for k, d in enumerate(trials):
        for t, row in zip(d.times, d.observations.T):
            rows.append([str(k), format_float(t)] + [format_float(v) for v in row])
    return atomic_write(path, _render_csv(header, rows))


def read_dataset_csv(path) -> list[Dataset]:
    header, body = _read_csv(path, "dataset")
    if header[:2] != ["trial", "time"]:
        raise DataError(f"{path}: header must start with 'trial,time'")
    if not body:
        raise DataError(f"{path}: no data rows")
    table = _parse_table(path, header, body, 2, "channel")
    trials = []
    for k, block in _group_by_trial(path, table):
        try:
            trials.append(Dataset(block[:, 1], block[:, 2:].T))
        except ValueError as exc:
            raise DataError(f"{path}: trial {k}: {exc}") from exc
    return trials


def write_trajectories_csv(path, times, trajectories, prefix: str = "dim") -> Path:
    """Latent trajectories, ``(K, Q, T)``, as ``trial, time, dim_1..dim_Q``."""
    X = np.asarray(trajectories, dtype=float)
    if X.ndim == 2:
        X = X[None]
    header = ["trial", "time"] + [f"{prefix}_{q + 1}" for q in range(X.shape[1])]
    rows = []
    for k in range(X.shape[0]):
        for t in range(X.shape[2]):
            rows.append([str(k), format_float(times[t])] + [format_float(v) for v in X[k, :, t]])
    return atomic_write(path, _render_csv(header, rows))


def read_trajectories_csv(path, prefix: str = "dim"):
    """Inverse of :func:`write_trajectories_csv`; returns ``(times, X)``."""
    header, body = _read_csv(path, "trajectory table")
    if header[:2] != ["trial", "time"]:
        raise DataError(f"{path}: header must start with 'trial,time'")
    if not body:
        raise DataError(f"{path}: no data rows")
    table = _parse_table(path, header, body, 2, prefix)
    groups = _group_by_trial(path, table)
    times = groups[0][1][:, 1]
    blocks = []
    for k, block in groups:
        if block.shape[0] != times.size or not np.array_equal(block[:, 1], times):
            raise DataError(f"{path}: trial {k} has a different time grid")
        blocks.append(block[:, 2:].T)
    return times, np.stack(blocks)


def write_basis_csv(path, bases) -> Path:
    """Per-trial bases ``(K, P, Q)`` as ``trial, channel, dim_1..dim_Q``."""
    B = np.asarray(bases, dtype=float)
    if B.ndim == 2:
        B = B[None]
    header = ["trial", "channel"] + [f"dim_{q + 1}" for q in range(B.shape[2])]
    rows = [[str(k), str(p + 1)] + [format_float(v) for v in B[k, p]]
            for k in range(B.shape[0]) for p in range(B.shape[1])]
    return atomic_write(path, _render_csv(header, rows))


def read_basis_csv(path) -> np.ndarray:
    header, body = _read_csv(path, "basis table")
    table = _parse_table(path, header, body, 2, "dim")
    return np.stack([block[:, 2:] for _, block in _group_by_trial(path, table)])


def array_sha256(a) -> str:
    a = np.ascontiguousarray(a, dtype="<f8")
    return hashlib.sha256(a.tobytes()).hexdigest()


# --------------------------------------------------------------------------
# posterior archive
# --------------------------------------------------------------------------
#
# layout: MAGIC (8 bytes) | header length (uint64, little endian) |
#         header (UTF-8 JSON) | payload (concatenated little-endian float64)
# The header holds the version, run config, seed, an index of
# {name, shape, offset} entries and the sha256 of the payload.

def _sample_arrays(posterior: PosteriorSamples) -> dict:
    arrays = {
        "F": posterior.stack("F"),
        "sigma_y2": posterior.stack("sigma_y2"),
        "length_f": posterior.stack("length_f"),
    }
    if posterior.kind == "oslmm":
        arrays.update(H=posterior.stack("H"), V=posterior.stack("V"), U=posterior.stack("U"),
                      length_h=posterior.stack("length_h"), variance_h=posterior.stack("variance_h"))
    else:
        arrays.update(W=posterior.stack("W"), sigma_p2=posterior.stack("sigma_p2"),
                      length_w=posterior.stack("length_w"), variance_w=posterior.stack("variance_w"))
    arrays["sample_log_density"] = np.array([s.log_density for s in posterior.samples])
    arrays["log_density_trace"] = np.asarray(posterior.log_density, dtype=float)
    arrays["times"] = np.asarray(posterior.times, dtype=float)
    return arrays


def save_archive(path, posterior: PosteriorSamples, config: RunConfig) -> Path:
    """Serialise samples and config.  Per-iteration wall-clock timings are not
    stored so that equal seeds give byte-identical archives."""
    if not posterior.samples:
        raise ArchiveError("posterior has no samples to archive")
    arrays = _sample_arrays(posterior)
    index = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        raw = np.ascontiguousarray(arrays[name], dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(np.shape(arrays[name])), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": ARCHIVE_VERSION,
        "kind": posterior.kind,
        "config": config.to_dict(),
        "seed": posterior.config.seed,
        "chain": dataclasses.asdict(posterior.config),
        "n_samples": len(posterior.samples),
        "index": index,
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return atomic_write(path, ARCHIVE_MAGIC + struct.pack("<Q", len(head)) + head + payload)


def _read_archive_bytes(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ArchiveError(f"cannot read archive {path}: {exc.strerror}") from exc
    if blob[:8] != ARCHIVE_MAGIC:
        raise ArchiveError(f"{path}: not a posterior archive")
    if len(blob) < 16:
        raise ArchiveError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: corrupt header") from exc
    return header, blob[16 + n:]


def load_archive(path):
    """Load an archive, verifying version and checksum.

    Returns
    -------
    (RunConfig, PosteriorSamples)
    """
    header, payload = _read_archive_bytes(path)
    version = header.get("version")
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"{path}: archive version {version!r} is not supported "
                           f"(expected {ARCHIVE_VERSION})")
    if hashlib.sha256(payload).hexdigest() != header.get("checksum"):
        raise ArchiveError(f"{path}: checksum mismatch, archive is corrupt")
    arrays = {}
    for entry in header["index"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        stop = start + 8 * count
        if stop > len(payload):
            raise ArchiveError(f"{path}: array {entry['name']!r} runs past the payload")
        arrays[entry["name"]] = np.frombuffer(payload[start:stop], dtype="<f8").reshape(entry["shape"]).copy()
    config = RunConfig.from_dict(header["config"])
    chain = ChainConfig(**header["chain"])
    kind = header["kind"]
    samples = []
    for i in range(header["n_samples"]):
        common = dict(F=arrays["F"][i], kern_f=KernelParams(1.0, float(arrays["length_f"][i])))
        if kind == "oslmm":
            state = GibbsState(
                kind, noise=NoiseModel(float(arrays["sigma_y2"][i])), H=arrays["H"][i],
                V=arrays["V"][i], U=arrays["U"][i],
                kern_h=KernelParams(float(arrays["variance_h"][i]), float(arrays["length_h"][i])),
                **common)
        else:
            state = GibbsState(
                kind, noise=NoiseModel(float(arrays["sigma_y2"][i]), arrays["sigma_p2"][i]),
                W=arrays["W"][i],
                kern_w=KernelParams(float(arrays["variance_w"][i]), float(arrays["length_w"][i])),
                **common)
        state.log_density = float(arrays["sample_log_density"][i])
        samples.append(state)
    posterior = PosteriorSamples(kind, chain, samples, arrays["log_density_trace"], arrays["times"])
    return config, posterior
