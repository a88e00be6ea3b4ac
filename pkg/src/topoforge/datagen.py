"""Dataset generation: sample design conditions, label them with the SIMP
optimizer, and read/write the packed binary dataset format.

Sampling rules: the design area is the full square minus one circle (radius
under a quarter of the edge length, center anywhere in the square); 1-4
loaded elements inside the design area with integer component values in
{-2,-1,1,2} u {0} (never both zero); volume fraction uniform in [0.2, 0.8].
Masks that would sever the fixed left edge, or leave a load point with no
4-connected material path to it, are rejected and resampled.

File format (little-endian):
  header   32 bytes: magic b"TFDS", u32 version=1, u32 n_train, u32 n_val,
           u32 n_test, 12 reserved zero bytes
  records  fixed 6300 bytes each, train block then val block then test block:
           mask     128 bytes   1024 bits, row-major, np.packbits order
           fx       1024 bytes  int8, row-major
           fy       1024 bytes  int8, row-major
           volfrac  4 bytes     float32
           label    4096 bytes  float32 x 1024, row-major density field
           label_c  8 bytes     float64 compliance of the (float32) label
           seed     8 bytes     uint64 per-sample seed id
           iters    4 bytes     uint32 SIMP iterations
           converged 1 byte     0/1
           pad      3 bytes     zeros
A JSON manifest (same path + ".manifest.json") records the generation seed,
counts, sampler and optimizer configuration, and aggregate label stats.
"""

from __future__ import annotations

import json
import multiprocessing
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import fem, simp
from .simp import DesignSpec, SimpConfig

MAGIC = b"TFDS"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIII12x")
RECORD_SIZE = 128 + 1024 + 1024 + 4 + 4096 + 8 + 8 + 4 + 1 + 3

GRID = 32
RADIUS_MAX = 0.25 * GRID
LOAD_VALUES = (-2, -1, 0, 1, 2)
LOAD_PAIRS = tuple((a, b) for a in LOAD_VALUES for b in LOAD_VALUES if (a, b) != (0, 0))
VOLFRAC_RANGE = (0.2, 0.8)
_SPLIT_SALT = 0x5EED


class DatasetFormatError(ValueError):
    """Corrupt or unsupported dataset file."""


@dataclass(eq=False)
class Sample:
    spec: DesignSpec
    label: np.ndarray
    label_compliance: float
    seed: int
    iterations: int
    converged: bool

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Sample)
            and np.array_equal(self.spec.mask, other.spec.mask)
            and np.array_equal(self.spec.fx, other.spec.fx)
            and np.array_equal(self.spec.fy, other.spec.fy)
            and self.spec.volfrac == other.spec.volfrac
            and np.array_equal(self.label, other.label)
            and self.label_compliance == other.label_compliance
            and (self.seed, self.iterations, self.converged)
            == (other.seed, other.iterations, other.converged)
        )


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list

    def __iter__(self):
        yield from self.train
        yield from self.val
        yield from self.test

    def __len__(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)


def sample_design_area(rng: np.random.Generator) -> np.ndarray:
    """Square mask with one circular void; element centers inside the circle
    are 0. Resamples until the left-edge column keeps at least one element."""
    yy, xx = np.mgrid[0:GRID, 0:GRID]
    cx_grid = xx + 0.5
    cy_grid = yy + 0.5
    while True:
        cx, cy = rng.uniform(0.0, GRID, size=2)
        radius = rng.uniform(0.0, RADIUS_MAX)
        inside = (cx_grid - cx) ** 2 + (cy_grid - cy) ** 2 < radius ** 2
        mask = (~inside).astype(np.uint8)
        if mask[:, 0].any():
            return mask


def sample_loads(rng: np.random.Generator, mask: np.ndarray):
    """Pick 1-4 distinct design-area elements and assign each a nonzero
    integer (fx, fy) pair, uniform over the 24 admissible pairs."""
    design_flat = np.flatnonzero(mask.ravel())
    if design_flat.size == 0:
        raise fem.FemParameterError("mask has no design elements")
    count = int(rng.integers(1, 5))
    cells = rng.choice(design_flat, size=count, replace=False)
    fx = np.zeros((GRID, GRID), dtype=np.int8)
    fy = np.zeros((GRID, GRID), dtype=np.int8)
    for cell in cells:
        vx, vy = LOAD_PAIRS[int(rng.integers(0, len(LOAD_PAIRS)))]
        fx.flat[cell] = vx
        fy.flat[cell] = vy
    return fx, fy, count


def _loads_reach_fixed_edge(mask: np.ndarray, fx: np.ndarray, fy: np.ndarray) -> bool:
    """Every loaded element must be 4-connected through the design area to the
    left-edge column, so the label is not a mechanically meaningless field."""
    labels, _ = ndimage.label(mask)
    edge_components = set(np.unique(labels[:, 0][mask[:, 0] == 1]))
    loaded = (fx != 0) | (fy != 0)
    return all(labels[pos] in edge_components for pos in zip(*np.nonzero(loaded)))


def sample_spec(rng: np.random.Generator) -> DesignSpec:
    """One admissible DesignSpec (rejection-samples loads, then the mask)."""
    while True:
        mask = sample_design_area(rng)
        for _ in range(16):
            fx, fy, _ = sample_loads(rng, mask)
            if _loads_reach_fixed_edge(mask, fx, fy):
                volfrac = float(np.float32(rng.uniform(*VOLFRAC_RANGE)))
                return DesignSpec(mask=mask, fx=fx, fy=fy, volfrac=volfrac)


def _label_one(args):
    spec, seed, config = args
    try:
        result = simp.optimize(spec, config)
    except Exception as exc:
        return ("error", f"{type(exc).__name__}: {exc}")
    label = result.rho.astype(np.float32)
    # Recompute compliance from the float32 field that is actually stored, so
    # re-evaluating the stored label reproduces label_compliance exactly.
    f = simp.element_forces_to_nodal(spec.fx, spec.fy)
    sol = fem.assemble_and_solve(spec.shape, label.astype(np.float64),
                                 config.material, f, fem.left_edge_fixed_dofs(spec.shape))
    return ("ok", Sample(
        spec=spec,
        label=label,
        label_compliance=sol.compliance,
        seed=seed,
        iterations=result.iterations,
        converged=result.converged,
    ))


def split_counts(n: int):
    """8:1:1 within rounding: floor n/10 for val, floor n/10-ish for test."""
    n_train = (8 * n) // 10
    n_val = n // 10
    return n_train, n_val, n - n_train - n_val


def generate(
    n: int,
    seed: int,
    config: SimpConfig | None = None,
    workers: int | None = None,
) -> tuple[DatasetSplit, dict]:
    """Sample and label ``n`` specs; deterministic 8:1:1 split by ``seed``.

    Returns the split plus a manifest dict. Per-sample SIMP failures are
    counted and skipped rather than aborting the batch.
    """
    if n < 10:
        raise fem.FemParameterError(f"need at least 10 samples for an 8:1:1 split, got {n}")
    if config is None:
        config = SimpConfig()

    root = np.random.SeedSequence(seed)
    children = root.spawn(n)
    jobs = []
    for child in children:
        child_seed = int(child.generate_state(1, np.uint64)[0])
        rng = np.random.default_rng(child)
        jobs.append((sample_spec(rng), child_seed, config))

    workers = workers or multiprocessing.cpu_count()
    if workers > 1 and n > 8:
        with multiprocessing.Pool(workers) as pool:
            outcomes = pool.map(_label_one, jobs, chunksize=8)
    else:
        outcomes = [_label_one(job) for job in jobs]

    samples = [payload for status, payload in outcomes if status == "ok"]
    errors = [payload for status, payload in outcomes if status == "error"]

    perm = np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_SALT])).permutation(
        len(samples))
    n_train, n_val, n_test = split_counts(len(samples))
    ordered = [samples[i] for i in perm]
    split = DatasetSplit(
        train=ordered[:n_train],
        val=ordered[n_train:n_train + n_val],
        test=ordered[n_train + n_val:],
    )
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "requested": n,
        "labeled": len(samples),
        "failed": len(errors),
        "errors": errors[:20],
        "counts": {"train": n_train, "val": n_val, "test": n_test},
        "sampler": {
            "grid": GRID,
            "volfrac_range": list(VOLFRAC_RANGE),
            "radius_max": RADIUS_MAX,
            "load_points": [1, 4],
            "load_values": list(LOAD_VALUES),
        },
        "simp": {
            "rmin": config.rmin, "move": config.move, "eta": config.eta,
            "tol": config.tol, "max_iter": config.max_iter,
            "bisect_tol": config.bisect_tol,
            "material": {"e0": config.material.e0, "emin": config.material.emin,
                         "nu": config.material.nu, "penal": config.material.penal},
        },
        "mean_iterations": float(np.mean([s.iterations for s in samples])) if samples else 0.0,
        "converged_fraction": float(np.mean([s.converged for s in samples])) if samples else 0.0,
    }
    return split, manifest


def _pack_record(sample: Sample) -> bytes:
    parts = [
        np.packbits(sample.spec.mask.astype(np.uint8)).tobytes(),
        sample.spec.fx.astype("<i1").tobytes(),
        sample.spec.fy.astype("<i1").tobytes(),
        np.float32(sample.spec.volfrac).astype("<f4").tobytes(),
        sample.label.astype("<f4").tobytes(),
        struct.pack("<d", sample.label_compliance),
        struct.pack("<Q", sample.seed),
        struct.pack("<I", sample.iterations),
        struct.pack("<B", 1 if sample.converged else 0),
        b"\x00\x00\x00",
    ]
    record = b"".join(parts)
    assert len(record) == RECORD_SIZE
    return record


def _unpack_record(buf: bytes) -> Sample:
    off = 0
    mask = np.unpackbits(np.frombuffer(buf, np.uint8, 128, off), count=GRID * GRID)
    mask = mask.reshape(GRID, GRID).astype(np.uint8)
    off += 128
    fx = np.frombuffer(buf, "<i1", GRID * GRID, off).reshape(GRID, GRID).copy()
    off += 1024
    fy = np.frombuffer(buf, "<i1", GRID * GRID, off).reshape(GRID, GRID).copy()
    off += 1024
    volfrac = float(np.frombuffer(buf, "<f4", 1, off)[0])
    off += 4
    label = np.frombuffer(buf, "<f4", GRID * GRID, off).reshape(GRID, GRID).copy()
    off += 4096
    label_c, seed, iters, conv = struct.unpack_from("<dQIB", buf, off)
    return Sample(
        spec=DesignSpec(mask=mask, fx=fx, fy=fy, volfrac=volfrac),
        label=label,
        label_compliance=label_c,
        seed=seed,
        iterations=iters,
        converged=bool(conv),
    )


def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest.json")


def write_dataset(path, split: DatasetSplit, manifest: dict | None = None) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, FORMAT_VERSION,
                             len(split.train), len(split.val), len(split.test)))
        for sample in split:
            fh.write(_pack_record(sample))
    if manifest is not None:
        manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_dataset(path) -> DatasetSplit:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise DatasetFormatError(f"{path}: file shorter than the {HEADER.size}-byte header")
    magic, version, n_train, n_val, n_test = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(
            f"{path}: unsupported format version {version}, this build reads {FORMAT_VERSION}")
    total = n_train + n_val + n_test
    expected = HEADER.size + total * RECORD_SIZE
    if len(raw) != expected:
        have = (len(raw) - HEADER.size) // RECORD_SIZE
        raise DatasetFormatError(
            f"{path}: truncated or padded file: header promises {total} records "
            f"({expected} bytes), found {have} whole records ({len(raw)} bytes)")
    samples = [
        _unpack_record(raw[HEADER.size + i * RECORD_SIZE:HEADER.size + (i + 1) * RECORD_SIZE])
        for i in range(total)
    ]
    return DatasetSplit(
        train=samples[:n_train],
        val=samples[n_train:n_train + n_val],
        test=samples[n_train + n_val:],
    )


def validate_sample(sample: Sample, vol_tol: float = 1e-3) -> None:
    """Assert every DesignSpec and label invariant; raises on violation."""
    sample.spec.validate()
    label = sample.label
    mask_on = sample.spec.mask.astype(bool)
    if label.shape != sample.spec.mask.shape:
        raise DatasetFormatError("label shape does not match mask")
    if label.min() < 0 or label.max() > 1:
        raise DatasetFormatError("label densities outside [0, 1]")
    if np.any(label[~mask_on] != 0):
        raise DatasetFormatError("label is nonzero on a void element")
    vol_err = abs(float(label[mask_on].mean()) - sample.spec.volfrac)
    if vol_err > vol_tol:
        raise DatasetFormatError(f"label volume error {vol_err:.2e} exceeds {vol_tol}")


def validate_dataset(split: DatasetSplit, vol_tol: float = 1e-3) -> int:
    count = 0
    for sample in split:
        validate_sample(sample, vol_tol)
        count += 1
    return count
