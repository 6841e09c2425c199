"""THZD1 dataset file: header + contiguous float32 frames + label block.

Layout: magic "THZD1", little-endian u32 header length, UTF-8 JSON header,
then all frames as (1024, 2) little-endian binary32 in (scheme, snr, index)
row-major order, then one u8 scheme code and one binary32 snr per frame.
The byte stream is a pure function of the DatasetSpec.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .constellations import ModulationScheme, SCHEME_NAMES
from .errors import FormatError, IoError, MissingLevel, ValidationError
from .siggen import FRAME_LEN, NYQUIST_BANDWIDTH_HZ, DatasetSpec, synthesize_cell

MAGIC = b"THZD1"
FORMAT_VERSION = 1
FRAME_BYTES = FRAME_LEN * 2 * 4
LABEL_BYTES = 1 + 4


def worker_count() -> int:
    """Worker cap from TRUSTBENCH_THREADS (default 1)."""
    raw = os.environ.get("TRUSTBENCH_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"TRUSTBENCH_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def _header_bytes(spec: DatasetSpec) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "spec": spec.to_json_dict(),
        "schemes": [
            {
                "name": s.name,
                "code": int(s),
                "bits_per_symbol": s.bits_per_symbol,
            }
            for s in ModulationScheme
        ],
        "frame_shape": [FRAME_LEN, 2],
        "sample_dtype": "<f4",
        "layout": "frames by (scheme, snr, index) row-major; "
        "then per-frame labels (u8 scheme code, <f4 snr_db)",
        "frame_count": spec.frame_count,
        "metadata": {"nyquist_bandwidth_hz": NYQUIST_BANDWIDTH_HZ},
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def generate_dataset(spec: DatasetSpec, path, workers: int | None = None) -> "Dataset":
    """Synthesize the full dataset and stream it to ``path``.

    Cells are generated (possibly by a thread pool) and written strictly in
    (scheme, snr) order, so the file bytes do not depend on the worker
    count.
    """
    if workers is None:
        workers = worker_count()
    cells = [
        (scheme, snr_idx)
        for scheme in ModulationScheme
        for snr_idx in range(spec.n_levels)
    ]
    header = _header_bytes(spec)
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(np.array(len(header), dtype="<u4").tobytes())
            fh.write(header)

            def make(cell):
                scheme, snr_idx = cell
                return synthesize_cell(spec, scheme, snr_idx)

            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    for block in pool.map(make, cells):
                        fh.write(np.ascontiguousarray(block, dtype="<f4").tobytes())
            else:
                for cell in cells:
                    fh.write(np.ascontiguousarray(make(cell), dtype="<f4").tobytes())

            labels = np.zeros(
                spec.frame_count, dtype=np.dtype([("code", "u1"), ("snr", "<f4")])
            )
            i = 0
            for scheme, snr_idx in cells:
                n = spec.frames_per_cell
                labels["code"][i : i + n] = int(scheme)
                labels["snr"][i : i + n] = spec.snr_grid_db[snr_idx]
                i += n
            fh.write(labels.tobytes())
    except OSError as exc:
        raise IoError(path, str(exc)) from exc
    return Dataset(path)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Dataset:
    """Read-only view over a THZD1 file, frames memory-mapped."""

    def __init__(self, path):
        self.path = str(path)
        try:
            with open(path, "rb") as fh:
                magic = fh.read(5)
                if magic != MAGIC:
                    raise FormatError(path, 0, f"bad magic {magic!r}")
                raw_len = fh.read(4)
                if len(raw_len) != 4:
                    raise FormatError(path, 5, "truncated header length")
                header_len = int(np.frombuffer(raw_len, dtype="<u4")[0])
                header_raw = fh.read(header_len)
                if len(header_raw) != header_len:
                    raise FormatError(path, 9, "truncated header")
                try:
                    header = json.loads(header_raw.decode())
                except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                    raise FormatError(path, 9, f"header not valid JSON: {exc}")
            file_size = os.path.getsize(path)
        except FormatError:
            raise
        except OSError as exc:
            raise IoError(path, str(exc)) from exc

        self.header = header
        self.spec = DatasetSpec.from_json_dict(header["spec"])
        n = int(header["frame_count"])
        data_start = 5 + 4 + header_len
        expected = data_start + n * FRAME_BYTES + n * LABEL_BYTES
        if file_size != expected:
            raise FormatError(
                path,
                min(file_size, expected),
                f"file size {file_size}, expected {expected}",
            )
        self.frame_count = n
        self.frames = np.memmap(
            self.path, dtype="<f4", mode="r", offset=data_start, shape=(n, FRAME_LEN, 2)
        )
        labels = np.memmap(
            self.path,
            dtype=np.dtype([("code", "u1"), ("snr", "<f4")]),
            mode="r",
            offset=data_start + n * FRAME_BYTES,
            shape=(n,),
        )
        self.scheme_codes = np.asarray(labels["code"], dtype=np.int64)
        self.snr_db = np.asarray(labels["snr"], dtype=np.float64)

    def __len__(self) -> int:
        return self.frame_count

    @property
    def snr_grid_db(self) -> tuple:
        return self.spec.snr_grid_db

    def cell_indices(self, scheme: ModulationScheme, snr_idx: int) -> np.ndarray:
        fpc = self.spec.frames_per_cell
        base = (int(scheme) * self.spec.n_levels + snr_idx) * fpc
        return np.arange(base, base + fpc, dtype=np.int64)

    def view(self, indices=None) -> "DatasetView":
        if indices is None:
            indices = np.arange(self.frame_count, dtype=np.int64)
        return DatasetView(self, np.asarray(indices, dtype=np.int64))

    def sha256(self) -> str:
        return file_sha256(self.path)


class DatasetView:
    """A subset of frames (by global index) presented as model inputs."""

    def __init__(self, dataset: Dataset, indices: np.ndarray):
        self.dataset = dataset
        self.indices = np.asarray(indices, dtype=np.int64)

    def __len__(self) -> int:
        return self.indices.size

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.scheme_codes[self.indices]

    @property
    def snr_db(self) -> np.ndarray:
        return self.dataset.snr_db[self.indices]

    def frames(self, dtype=np.float32) -> np.ndarray:
        """All frames of the view as a (N, 1024, 2, 1) batch."""
        x = np.asarray(self.dataset.frames[self.indices], dtype=dtype)
        return x[..., None]

    def batches(self, batch_size: int):
        """Yield (X, y, idx) batches in index order."""
        for lo in range(0, self.indices.size, batch_size):
            sel = self.indices[lo : lo + batch_size]
            x = np.asarray(self.dataset.frames[sel], dtype=np.float32)[..., None]
            yield x, self.dataset.scheme_codes[sel], sel

    def restrict_snr(self, lo_db=-np.inf, hi_db=np.inf) -> "DatasetView":
        snr = self.snr_db
        keep = (snr >= lo_db) & (snr <= hi_db)
        return DatasetView(self.dataset, self.indices[keep])

    def at_level(self, snr_db: float) -> "DatasetView":
        keep = self.snr_db == snr_db
        if not np.any(keep):
            raise MissingLevel(f"no frames at {snr_db} dB in this view")
        return DatasetView(self.dataset, self.indices[keep])

    def levels(self) -> np.ndarray:
        return np.unique(self.snr_db)

    def subsample(self, per_class: int, seed: int) -> "DatasetView":
        """Balanced deterministic subsample: per_class frames per scheme."""
        from .rng import substream

        picked = []
        labels = self.labels
        for code in np.unique(labels):
            pool = self.indices[labels == code]
            rng = substream(seed, "subsample", int(code))
            take = min(per_class, pool.size)
            picked.append(rng.permutation(pool)[:take])
        return DatasetView(self.dataset, np.sort(np.concatenate(picked)))
