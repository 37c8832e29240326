"""Volumes, synthetic cases, splits and the labeled/unlabeled patch sampler.

Two on-disk formats are supported:

* NIfTI-1 (``.nii`` / ``.nii.gz``) through nibabel.
* A raw format (``.fbv``): the 8-byte magic ``b"FBAVOL01"``, a little-endian
  uint32 header length, a UTF-8 JSON header
  ``{"dtype": "<i1", "shape": [...], "spacing": [...]}`` and finally the
  C-ordered little-endian array bytes.
"""

from __future__ import annotations

import csv
import json
import math
import os
import queue
import struct
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import nibabel as nib
import numpy as np
import torch
from scipy import ndimage

from .errors import ConfigError

RAW_MAGIC = b"FBAVOL01"
MAX_RAW_HEADER = 1 << 20
MAX_DIMS = 7


class VolumeFormatError(ValueError):
    """A volume file could not be parsed."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{path}: {reason}")


@dataclass
class Volume:
    data: np.ndarray
    spacing: Tuple[float, ...]

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.data.ndim:
            raise ValueError(f"spacing {self.spacing} does not match {self.data.ndim}-D data")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing entries must be positive, got {self.spacing}")


@dataclass
class Case:
    case_id: str
    image: np.ndarray
    label: Optional[np.ndarray] = None
    spacing: Tuple[float, ...] = ()

    def __post_init__(self):
        if not self.spacing:
            self.spacing = (1.0,) * self.image.ndim
        if self.label is not None and self.label.shape != self.image.shape:
            raise ValueError(f"case {self.case_id}: label shape {self.label.shape} != image {self.image.shape}")

    def unlabeled(self) -> "Case":
        return Case(self.case_id, self.image, None, self.spacing)


# --------------------------------------------------------------------------
# IO


def _is_nifti(path: str) -> bool:
    return path.endswith(".nii") or path.endswith(".nii.gz")


def save_volume(volume: Volume, path) -> None:
    path = str(path)
    data = np.asarray(volume.data)
    if _is_nifti(path):
        affine = np.diag(list(volume.spacing[:3]) + [1.0] * (4 - min(3, data.ndim)))
        img = nib.Nifti1Image(data, affine)
        img.header.set_data_dtype(data.dtype)
        img.header.set_zooms(volume.spacing)
        nib.save(img, path)
        return
    le = data.astype(data.dtype.newbyteorder("<"), copy=False)
    header = json.dumps({
        "dtype": le.dtype.str,
        "shape": list(data.shape),
        "spacing": list(volume.spacing),
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(le).tobytes())


def load_volume(path) -> Volume:
    path = str(path)
    if _is_nifti(path):
        return _load_nifti(path)
    return _load_raw(path)


def _load_nifti(path: str) -> Volume:
    try:
        img = nib.load(path)
        data = np.asarray(img.dataobj)
        zooms = img.header.get_zooms()[: data.ndim]
    except Exception as exc:  # nibabel/gzip/zlib raise several unrelated types
        raise VolumeFormatError(path, f"unreadable NIfTI: {exc}") from exc
    return Volume(data, zooms)


def _load_raw(path: str) -> Volume:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != RAW_MAGIC:
        raise VolumeFormatError(path, "bad magic, not an FBAVOL01 file")
    if len(blob) < 12:
        raise VolumeFormatError(path, "truncated before header length")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if hlen > MAX_RAW_HEADER or 12 + hlen > len(blob):
        raise VolumeFormatError(path, f"header length {hlen} exceeds file size")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
        dtype = np.dtype(header["dtype"])
        shape = [int(s) for s in header["shape"]]
        spacing = [float(s) for s in header["spacing"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise VolumeFormatError(path, f"malformed header: {exc}") from exc
    if len(shape) > MAX_DIMS or any(s < 0 for s in shape):
        raise VolumeFormatError(path, f"invalid shape {shape}")
    count = math.prod(shape)
    nbytes = count * dtype.itemsize
    if nbytes > 2 ** 40:
        raise VolumeFormatError(path, f"dimension overflow: shape {shape} needs {nbytes} bytes")
    payload = blob[12 + hlen:]
    if len(payload) != nbytes:
        raise VolumeFormatError(path, f"expected {nbytes} data bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    try:
        return Volume(data, spacing)
    except ValueError as exc:
        raise VolumeFormatError(path, str(exc)) from exc


def load_manifest(path) -> List[Case]:
    """Read a ``case_id,image_path,label_path`` CSV; an empty label path marks an unlabeled case."""
    path = Path(path)
    cases = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"case_id", "image_path", "label_path"} - set(reader.fieldnames or [])
        if missing:
            raise ConfigError(f"manifest {path} lacks columns {sorted(missing)}")
        for row in reader:
            image = load_volume(path.parent / row["image_path"])
            label = None
            if row["label_path"]:
                label = load_volume(path.parent / row["label_path"]).data.astype(np.int64)
            cases.append(Case(row["case_id"], image.data.astype(np.float32), label, image.spacing))
    return cases


def write_manifest(cases: Sequence[Case], out_dir, suffix: str = ".nii.gz") -> Path:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "image_path", "label_path"])
        for case in cases:
            image_rel = f"images/{case.case_id}{suffix}"
            save_volume(Volume(case.image, case.spacing), out_dir / image_rel)
            label_rel = ""
            if case.label is not None:
                label_rel = f"labels/{case.case_id}{suffix}"
                save_volume(Volume(case.label.astype(np.uint8), case.spacing), out_dir / label_rel)
            writer.writerow([case.case_id, image_rel, label_rel])
    return manifest


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    num_cases: int = 40
    shape: Tuple[int, ...] = (96, 96)
    num_blobs: int = 2
    noise_sigma: float = 0.8
    seed: int = 0
    contrast: float = 1.0
    contrast_jitter: float = 0.3
    background_amplitude: float = 0.8
    background_scale: float = 0.12
    radius_range: Tuple[float, float] = (0.08, 0.2)
    spacing: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.radius_range = tuple(float(r) for r in self.radius_range)
        if self.spacing is not None:
            self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.shape) not in (2, 3):
            raise ConfigError(f"synthetic shape must be 2-D or 3-D, got {self.shape}")
        if min(self.shape) < 16:
            raise ConfigError(f"synthetic shape {self.shape} is degenerate: every axis needs >= 16 voxels")
        if self.num_cases < 1 or self.num_blobs < 1:
            raise ConfigError("num_cases and num_blobs must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


def _random_rotation(rng: np.random.Generator, ndim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(ndim, ndim)))
    return q * np.sign(np.diag(r))


def render_case(cfg: SynthConfig, rng: np.random.Generator):
    """Draw one case; returns ``(image, label, background, offset)``."""
    shape = np.array(cfg.shape)
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=float) for s in cfg.shape], indexing="ij"), axis=-1)
    label = np.zeros(cfg.shape, dtype=bool)
    for _ in range(cfg.num_blobs):
        center = rng.uniform(0.3, 0.7, size=len(shape)) * shape
        radii = rng.uniform(*cfg.radius_range, size=len(shape)) * shape.min()
        rot = _random_rotation(rng, len(shape))
        local = (grid - center) @ rot
        label |= ((local / radii) ** 2).sum(axis=-1) <= 1.0
    smooth = ndimage.gaussian_filter(rng.normal(size=cfg.shape), sigma=cfg.background_scale * shape.min(),
                                     mode="reflect")
    smooth /= smooth.std() + 1e-12
    background = cfg.background_amplitude * smooth
    offset = cfg.contrast * (1.0 + cfg.contrast_jitter * rng.uniform(-1.0, 1.0))
    noise = rng.normal(scale=cfg.noise_sigma, size=cfg.shape) if cfg.noise_sigma > 0 else 0.0
    image = background + offset * label + noise
    return image.astype(np.float32), label.astype(np.int64), background.astype(np.float32), offset


def generate_synthetic(cfg: SynthConfig) -> List[Case]:
    """Deterministic synthetic cases: smooth background, ellipsoid blobs, Gaussian noise."""
    rng = np.random.default_rng(cfg.seed)
    spacing = cfg.spacing or (1.0,) * len(cfg.shape)
    cases = []
    width = len(str(cfg.num_cases - 1))
    for i in range(cfg.num_cases):
        image, label, _, _ = render_case(cfg, rng)
        cases.append(Case(f"synth_{i:0{width}d}", image, label, spacing))
    return cases


def write_synthetic_dataset(cfg: SynthConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    manifest = write_manifest(generate_synthetic(cfg), out_dir)
    with open(out_dir / "synth_config.json", "w") as fh:
        json.dump(asdict(cfg), fh, indent=2)
    return manifest


def slice_cases(cases: Sequence[Case], axis: int = -1) -> List[Case]:
    """Split 3-D cases into 2-D slice cases so labeling happens per slice."""
    out = []
    for case in cases:
        ax = axis % case.image.ndim
        spacing = tuple(s for i, s in enumerate(case.spacing) if i != ax)
        for k in range(case.image.shape[ax]):
            label = None if case.label is None else np.take(case.label, k, axis=ax)
            out.append(Case(f"{case.case_id}:{k}", np.take(case.image, k, axis=ax), label, spacing))
    return out


def zscore(image: np.ndarray) -> np.ndarray:
    image = image.astype(np.float32)
    return (image - image.mean()) / (image.std() + 1e-8)


# --------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class Split:
    labeled: Tuple[str, ...]
    unlabeled: Tuple[str, ...]
    test: Tuple[str, ...]


def make_split(cases: Sequence[Case], labeled_fraction: float, num_test: int, seed: int) -> Split:
    """Partition case ids; a pure function of (ids, labels present, fraction, num_test, seed).

    Test cases are drawn first (from labeled cases), then
    ``round(labeled_fraction * train_size)`` labeled training cases.
    """
    if not 0.0 < labeled_fraction <= 1.0:
        raise ConfigError(f"labeled_fraction must lie in (0, 1], got {labeled_fraction}")
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise ConfigError("case ids must be unique")
    has_label = {c.case_id: c.label is not None for c in cases}
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    with_label = [i for i in order if has_label[i]]
    if num_test > len(with_label):
        raise ConfigError(f"num_test={num_test} exceeds the {len(with_label)} labeled cases")
    test = with_label[:num_test]
    train = [i for i in order if i not in set(test)]
    n_labeled = int(round(labeled_fraction * len(train)))
    candidates = [i for i in train if has_label[i]]
    if n_labeled > len(candidates):
        raise ConfigError(f"need {n_labeled} labeled training cases, only {len(candidates)} carry labels")
    labeled = candidates[:n_labeled]
    unlabeled = [i for i in train if i not in set(labeled)]
    return Split(tuple(labeled), tuple(unlabeled), tuple(test))


@dataclass
class TrainPools:
    """The only view of a dataset the training sampler gets: no test cases, no hidden labels."""

    labeled: List[Case]
    unlabeled: List[Case]


class Dataset:
    def __init__(self, cases: Sequence[Case], labeled_fraction: float = 0.2, num_test: int = 0, seed: int = 0):
        self.labeled_fraction = labeled_fraction
        self.split = make_split(cases, labeled_fraction, num_test, seed)
        by_id = {c.case_id: c for c in cases}
        self._labeled = [by_id[i] for i in self.split.labeled]
        self._unlabeled = [by_id[i].unlabeled() for i in self.split.unlabeled]
        self._test = [by_id[i] for i in self.split.test]

    def train_pools(self) -> TrainPools:
        norm = lambda c: Case(c.case_id, zscore(c.image), c.label, c.spacing)  # noqa: E731
        return TrainPools([norm(c) for c in self._labeled], [norm(c) for c in self._unlabeled])

    def test_cases(self) -> List[Case]:
        return list(self._test)

    def labeled_cases(self) -> List[Case]:
        return list(self._labeled)


# --------------------------------------------------------------------------
# batches


@dataclass
class BatchSpec:
    labeled: int = 2
    unlabeled: int = 2
    patch: Tuple[int, ...] = (64, 64)
    augment: bool = True

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        if self.labeled < 0 or self.unlabeled < 0 or self.labeled + self.unlabeled < 1:
            raise ConfigError("batch needs a non-negative labeled/unlabeled count summing to >= 1")


@dataclass
class Batch:
    image: torch.Tensor     # (n, 1, *patch) float32
    label: torch.Tensor     # (n, *patch) int64, zeros on unlabeled rows
    labeled: torch.Tensor   # (n,) bool
    case_ids: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.image.shape[0]


def _crop(arrays, patch, rng):
    shape = arrays[0].shape
    pad = [(max(0, p - s) // 2, max(0, p - s) - max(0, p - s) // 2) for s, p in zip(shape, patch)]
    if any(a or b for a, b in pad):
        arrays = [np.pad(a, pad, mode="constant") for a in arrays]
        shape = arrays[0].shape
    start = [int(rng.integers(0, s - p + 1)) for s, p in zip(shape, patch)]
    sl = tuple(slice(b, b + p) for b, p in zip(start, patch))
    return [a[sl] for a in arrays]


def augment_pair(image, label, rng):
    """Random axis flips and in-plane 90-degree rotations, applied identically to both arrays."""
    for ax in range(image.ndim):
        if rng.random() < 0.5:
            image, label = np.flip(image, ax), np.flip(label, ax)
    k = int(rng.integers(0, 4))
    if image.shape[-1] != image.shape[-2]:
        k = 2 * (k % 2)
    image = np.rot90(image, k, axes=(-2, -1))
    label = np.rot90(label, k, axes=(-2, -1))
    return np.ascontiguousarray(image), np.ascontiguousarray(label)


class BatchSampler:
    """Draws mixed batches; each worker owns the RNG stream ``(seed, worker_id)``."""

    def __init__(self, pools: TrainPools, spec: BatchSpec, seed: int = 0, worker_id: int = 0):
        if spec.labeled and not pools.labeled:
            raise ConfigError("labeled pool is empty")
        if spec.unlabeled and not pools.unlabeled:
            raise ConfigError("unlabeled pool is empty")
        self.pools = pools
        self.spec = spec
        self.rng = np.random.default_rng([seed, worker_id])

    def _draw(self, pool: List[Case], count: int) -> List[Case]:
        idx = self.rng.choice(len(pool), size=count, replace=count > len(pool))
        return [pool[i] for i in idx]

    def sample(self) -> Batch:
        images, labels, flags, ids = [], [], [], []
        for pool, count, is_labeled in ((self.pools.labeled, self.spec.labeled, True),
                                        (self.pools.unlabeled, self.spec.unlabeled, False)):
            for case in self._draw(pool, count):
                lab = case.label if is_labeled else np.zeros(case.image.shape, dtype=np.int64)
                img, lab = _crop([case.image, lab], self.spec.patch, self.rng)
                if self.spec.augment:
                    img, lab = augment_pair(img, lab, self.rng)
                images.append(img)
                labels.append(lab)
                flags.append(is_labeled)
                ids.append(case.case_id)
        return Batch(
            image=torch.from_numpy(np.stack(images).astype(np.float32)).unsqueeze(1),
            label=torch.from_numpy(np.stack(labels).astype(np.int64)),
            labeled=torch.tensor(flags, dtype=torch.bool),
            case_ids=ids,
        )


def sample_batch(pools: TrainPools, spec: BatchSpec, seed: int = 0) -> Batch:
    return BatchSampler(pools, spec, seed).sample()


class BatchStream:
    """Round-robin over ``num_workers`` samplers feeding bounded queues.

    Consumption order is fixed, so the stream is deterministic for a given
    worker count regardless of thread scheduling.
    """

    def __init__(self, pools: TrainPools, spec: BatchSpec, seed: int, num_workers: int = 1, prefetch: int = 2):
        if num_workers < 1:
            raise ConfigError("num_workers must be >= 1")
        self.samplers = [BatchSampler(pools, spec, seed, w) for w in range(num_workers)]
        self._threads: List[threading.Thread] = []
        self._queues: List[queue.Queue] = []
        self._stop = threading.Event()
        if num_workers > 1:
            for sampler in self.samplers:
                q: queue.Queue = queue.Queue(maxsize=prefetch)
                t = threading.Thread(target=self._fill, args=(sampler, q), daemon=True)
                self._queues.append(q)
                self._threads.append(t)
                t.start()

    def _fill(self, sampler: BatchSampler, q: queue.Queue) -> None:
        while not self._stop.is_set():
            batch = sampler.sample()
            while not self._stop.is_set():
                try:
                    q.put(batch, timeout=0.1)
                    break
                except queue.Full:
                    continue

    def __iter__(self) -> Iterator[Batch]:
        w = 0
        while True:
            if self._queues:
                yield self._queues[w].get()
            else:
                yield self.samplers[w].sample()
            w = (w + 1) % len(self.samplers)

    def close(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=1.0)
