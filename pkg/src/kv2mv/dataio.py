"""On-disk volume container, dataset catalog, and patient-level splitting.

Volume files are a single JSON header line followed by the raw little-endian
payload in slice-major, row-major order, e.g ::

    {"patient_id": "p00001", "modality": "kVCT", "dims": [30, 64, 64],
     "spacing_mm": [1.0, 1.0], "thickness_mm": 2.0, "dtype": "int16-le",
     "crc32": 1234567}\\n
    <raw voxels>

The same container (different dtype tags) carries preprocessed float slices
and masks.  CRC32 over the payload catches truncation and bit rot cheaply.
"""

import json
import math
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

MODALITIES = ("kVCT", "MVCT")
REGIONS = ("head", "neck", "body")
SPLITS = ("train", "validation", "test")

_DTYPES = {
    "int16-le": np.dtype("<i2"),
    "float32-le": np.dtype("<f4"),
    "uint8-le": np.dtype("u1"),
}
_DTYPE_TAGS = {v: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    """Malformed header or unsupported payload encoding."""


class CorruptionError(IOError):
    """Payload does not match the header (length or checksum)."""


@dataclass
class HUVolume:
    """A patient's CT stack in Hounsfield units plus geometry metadata."""

    patient_id: str
    modality: str
    voxels: np.ndarray  # int16 [n_slices, d, d]
    pixel_spacing_mm: tuple
    slice_thickness_mm: float

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.voxels.dtype != np.int16:
            raise ValueError(f"voxels must be int16, got {self.voxels.dtype}")
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"voxels must be [n_slices, d, d], got shape {self.voxels.shape}")
        if self.voxels.min() < -1024:
            raise ValueError(f"HU below -1024 present (min {self.voxels.min()})")
        if any(s <= 0 for s in self.pixel_spacing_mm) or self.slice_thickness_mm <= 0:
            raise ValueError("spacing and thickness must be positive")

    @property
    def n_slices(self):
        return self.voxels.shape[0]


def write_array(path, arr, meta=None):
    """Write an array in the container format; returns the payload CRC32."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_TAGS:
        raise FormatError(f"unsupported array dtype {arr.dtype}")
    payload = arr.tobytes()
    header = dict(meta or {})
    header["dims"] = list(arr.shape)
    header["dtype"] = _DTYPE_TAGS[arr.dtype]
    header["crc32"] = zlib.crc32(payload)
    blob = json.dumps(header, separators=(",", ":")).encode() + b"\n" + payload
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)
    return header["crc32"]


def read_array(path):
    """Read a container file back as (array, header dict)."""
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid header: {exc}") from exc
        if header.get("dtype") not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype {header.get('dtype')!r}")
        dtype = _DTYPES[header["dtype"]]
        dims = header["dims"]
        expected = int(np.prod(dims)) * dtype.itemsize
        payload = f.read()
    if len(payload) != expected:
        raise CorruptionError(
            f"{path}: expected {expected} payload bytes, found {len(payload)}"
        )
    if zlib.crc32(payload) != header.get("crc32"):
        raise CorruptionError(f"{path}: CRC32 mismatch, file is corrupted")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr, header


def write_volume(vol: HUVolume, path) -> int:
    """Persist an HUVolume; returns the payload checksum recorded on disk."""
    return write_array(
        path,
        vol.voxels.astype("<i2"),
        meta={
            "patient_id": vol.patient_id,
            "modality": vol.modality,
            "spacing_mm": list(vol.pixel_spacing_mm),
            "thickness_mm": vol.slice_thickness_mm,
        },
    )


def read_volume(path) -> HUVolume:
    arr, header = read_array(path)
    if header["dtype"] != "int16-le":
        raise FormatError(f"{path}: volume files must be int16-le, got {header['dtype']}")
    return HUVolume(
        patient_id=header["patient_id"],
        modality=header["modality"],
        voxels=arr.astype(np.int16),
        pixel_spacing_mm=tuple(header["spacing_mm"]),
        slice_thickness_mm=header["thickness_mm"],
    )


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------


@dataclass
class CatalogEntry:
    patient_id: str
    modality: str
    path: str
    n_slices: int
    region_labels: list
    artifact_flags: list = None  # per-slice bools once preprocess has run
    checksum: int = 0

    def to_dict(self):
        return {
            "patient_id": self.patient_id,
            "modality": self.modality,
            "path": self.path,
            "n_slices": self.n_slices,
            "region_labels": self.region_labels,
            "artifact_flags": self.artifact_flags,
            "checksum": self.checksum,
        }


@dataclass
class Catalog:
    entries: list = field(default_factory=list)

    def validate(self):
        per_patient = {}
        for e in self.entries:
            per_patient.setdefault(e.patient_id, []).append(e.modality)
            if len(e.region_labels) != e.n_slices:
                raise ValueError(
                    f"{e.patient_id}/{e.modality}: {len(e.region_labels)} region labels "
                    f"for {e.n_slices} slices"
                )
            if any(r not in REGIONS for r in e.region_labels):
                raise ValueError(f"{e.patient_id}: unknown region label")
        for pid, mods in per_patient.items():
            if sorted(mods) != sorted(MODALITIES):
                raise ValueError(f"{pid}: expected exactly one kVCT and one MVCT entry, got {mods}")

    def patient_ids(self):
        return sorted({e.patient_id for e in self.entries})

    def entry(self, patient_id, modality):
        for e in self.entries:
            if e.patient_id == patient_id and e.modality == modality:
                return e
        raise KeyError(f"no catalog entry for ({patient_id}, {modality})")


def write_catalog(catalog: Catalog, path):
    catalog.validate()
    blob = json.dumps({"entries": [e.to_dict() for e in catalog.entries]}, indent=1)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(blob)
    os.replace(tmp, path)


def read_catalog(path) -> Catalog:
    with open(path) as f:
        raw = json.load(f)
    cat = Catalog(entries=[CatalogEntry(**e) for e in raw["entries"]])
    cat.validate()
    return cat


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


@dataclass
class SplitAssignment:
    assignment: dict  # patient_id -> split name
    fractions: tuple
    seed: int

    def patients(self, split):
        return sorted(p for p, s in self.assignment.items() if s == split)

    def to_dict(self):
        return {"assignment": self.assignment, "fractions": list(self.fractions), "seed": self.seed}


def split_by_patient(catalog: Catalog, fractions=(0.7, 0.2, 0.1), seed=0) -> SplitAssignment:
    """Deterministic patient-level split into train/validation/test.

    Train and validation take floor(fraction * n) patients each and test takes
    the remainder, which lands on 36/10/6 for 52 patients at (0.7, 0.2, 0.1).
    Empty splits are topped up from the largest one so all three are populated.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    patients = catalog.patient_ids()
    n = len(patients)
    if n < 3:
        raise ValueError(f"need at least 3 patients to populate all splits, got {n}")
    counts = {
        "train": math.floor(fractions[0] * n),
        "validation": math.floor(fractions[1] * n),
    }
    counts["test"] = n - counts["train"] - counts["validation"]
    while min(counts.values()) == 0:
        empty = min(counts, key=lambda s: counts[s])
        largest = max(counts, key=lambda s: counts[s])
        counts[empty] += 1
        counts[largest] -= 1

    order = list(patients)
    np.random.default_rng(seed).shuffle(order)
    assignment = {}
    start = 0
    for split in SPLITS:
        for pid in order[start : start + counts[split]]:
            assignment[pid] = split
        start += counts[split]
    return SplitAssignment(assignment=assignment, fractions=tuple(fractions), seed=seed)


def write_split(split: SplitAssignment, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(split.to_dict(), f, indent=1)
    os.replace(tmp, path)


def read_split(path) -> SplitAssignment:
    with open(path) as f:
        raw = json.load(f)
    return SplitAssignment(
        assignment=raw["assignment"], fractions=tuple(raw["fractions"]), seed=raw["seed"]
    )


def pair_artifact_flags(catalog: Catalog, patient_id):
    """Per-slice pair flags: kV or MV side tripping its own threshold."""
    kv = catalog.entry(patient_id, "kVCT").artifact_flags
    mv = catalog.entry(patient_id, "MVCT").artifact_flags
    if kv is None or mv is None:
        raise ValueError(f"{patient_id}: artifact flags missing, run preprocessing first")
    return [bool(a or b) for a, b in zip(kv, mv)]


def build_datasets(catalog: Catalog, split: SplitAssignment) -> dict:
    """Slice-index lists for D_All / D_Art per split.

    D_All keeps head and neck slices only (body slices are dropped); D_Art is
    the artifact-flagged subset of D_All.  Entries are (patient_id, slice_index).
    """
    out = {
        ds: {s: [] for s in SPLITS} for ds in ("D_All", "D_Art")
    }
    for pid in catalog.patient_ids():
        split_name = split.assignment.get(pid)
        if split_name is None:
            raise ValueError(f"patient {pid} missing from split assignment")
        regions = catalog.entry(pid, "kVCT").region_labels
        flags = pair_artifact_flags(catalog, pid)
        for idx, (region, flagged) in enumerate(zip(regions, flags)):
            if region == "body":
                continue
            out["D_All"][split_name].append((pid, idx))
            if flagged:
                out["D_Art"][split_name].append((pid, idx))
    return out
