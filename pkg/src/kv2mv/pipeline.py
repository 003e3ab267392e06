"""Directory-level orchestration: cohort generation, preprocessing, loading.

On-disk layout produced by the stages:

  raw dir         p00001_kv.vol, p00001_mv.vol, ..., catalog.json
  preprocessed    p00001_pp_kv.vol / _pp_mv.vol (float32, head+neck slices),
                  p00001_pp_mask.vol (uint8), pairs.json, catalog.json
                  (with per-modality artifact flags), split.json

All paths inside catalogs and manifests are relative to their directory, so
trees can be moved around freely.
"""

import json
import os

import numpy as np

from kv2mv import dataio, preprocess
from kv2mv.dataio import Catalog, CatalogEntry
from kv2mv.phantomgen import PhantomSpec, generate_patient
from kv2mv.preprocess import SlicePair


def generate_cohort(spec: PhantomSpec, n_patients: int, seed: int, out_dir) -> str:
    """Generate a cohort of volume pairs; returns the catalog path."""
    if n_patients < 1:
        raise ValueError("need at least one patient")
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(n_patients):
        pair = generate_patient(spec, seed + i)
        for vol in (pair.kv, pair.mv):
            tag = "kv" if vol.modality == "kVCT" else "mv"
            fname = f"{pair.patient_id}_{tag}.vol"
            checksum = dataio.write_volume(vol, os.path.join(out_dir, fname))
            entries.append(
                CatalogEntry(
                    patient_id=pair.patient_id,
                    modality=vol.modality,
                    path=fname,
                    n_slices=vol.n_slices,
                    region_labels=list(pair.region_labels),
                    artifact_flags=None,
                    checksum=checksum,
                )
            )
    catalog_path = os.path.join(out_dir, "catalog.json")
    dataio.write_catalog(Catalog(entries=entries), catalog_path)
    return catalog_path


def preprocess_run(in_dir, out_dir, max_shift: int = 8) -> str:
    """Align, classify, normalize and mask every patient of a raw cohort.

    Writes per-patient slice tensors, a pairs manifest, and a catalog updated
    with per-modality artifact flags.  Returns the pairs manifest path.
    """
    os.makedirs(out_dir, exist_ok=True)
    catalog = dataio.read_catalog(os.path.join(in_dir, "catalog.json"))
    manifest = {}
    for pid in catalog.patient_ids():
        kv_entry = catalog.entry(pid, "kVCT")
        mv_entry = catalog.entry(pid, "MVCT")
        kv_vol = dataio.read_volume(os.path.join(in_dir, kv_entry.path))
        mv_vol = dataio.read_volume(os.path.join(in_dir, mv_entry.path))
        pairs, kv_flags, mv_flags, shift = preprocess.preprocess_patient(
            kv_vol, mv_vol, kv_entry.region_labels, max_shift=max_shift
        )
        kv_entry.artifact_flags = kv_flags
        mv_entry.artifact_flags = mv_flags

        files = {
            "kv": f"{pid}_pp_kv.vol",
            "mv": f"{pid}_pp_mv.vol",
            "mask": f"{pid}_pp_mask.vol",
        }
        dataio.write_array(
            os.path.join(out_dir, files["kv"]),
            np.stack([p.kv for p in pairs]).astype("<f4"),
            meta={"patient_id": pid, "kind": "pp_kv"},
        )
        dataio.write_array(
            os.path.join(out_dir, files["mv"]),
            np.stack([p.mv for p in pairs]).astype("<f4"),
            meta={"patient_id": pid, "kind": "pp_mv"},
        )
        dataio.write_array(
            os.path.join(out_dir, files["mask"]),
            np.stack([p.body_mask for p in pairs]).astype(np.uint8),
            meta={"patient_id": pid, "kind": "pp_mask"},
        )
        manifest[pid] = {
            "files": files,
            "slice_indices": [p.slice_index for p in pairs],
            "regions": [p.region for p in pairs],
            "artifact_flags": [p.is_artifact for p in pairs],
            "alignment_shift": list(shift),
        }

    pairs_path = os.path.join(out_dir, "pairs.json")
    tmp = f"{pairs_path}.tmp"
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    os.replace(tmp, pairs_path)
    dataio.write_catalog(catalog, os.path.join(out_dir, "catalog.json"))
    return pairs_path


def load_pairs(pp_dir) -> dict:
    """Load every preprocessed SlicePair, keyed by (patient_id, slice_index)."""
    with open(os.path.join(pp_dir, "pairs.json")) as f:
        manifest = json.load(f)
    out = {}
    for pid, info in manifest.items():
        kv, _ = dataio.read_array(os.path.join(pp_dir, info["files"]["kv"]))
        mv, _ = dataio.read_array(os.path.join(pp_dir, info["files"]["mv"]))
        mask, _ = dataio.read_array(os.path.join(pp_dir, info["files"]["mask"]))
        for row, orig_idx in enumerate(info["slice_indices"]):
            out[(pid, orig_idx)] = SlicePair(
                kv=np.ascontiguousarray(kv[row], dtype=np.float32),
                mv=np.ascontiguousarray(mv[row], dtype=np.float32),
                body_mask=mask[row].astype(bool),
                region=info["regions"][row],
                is_artifact=bool(info["artifact_flags"][row]),
                patient_id=pid,
                slice_index=orig_idx,
            )
    return out


def select_pairs(pairs_index: dict, slice_list) -> list:
    """Materialize a dataset slice list [(pid, idx), ...] into SlicePairs."""
    return [pairs_index[(pid, idx)] for pid, idx in slice_list]


def load_datasets(pp_dir, split_path=None) -> dict:
    """Convenience: pairs for D_All / D_Art x train/validation/test.

    Returns {"D_All": {"train": [...], ...}, "D_Art": {...}}.
    """
    catalog = dataio.read_catalog(os.path.join(pp_dir, "catalog.json"))
    split = dataio.read_split(split_path or os.path.join(pp_dir, "split.json"))
    lists = dataio.build_datasets(catalog, split)
    index = load_pairs(pp_dir)
    return {
        ds: {sp: select_pairs(index, lists[ds][sp]) for sp in lists[ds]} for ds in lists
    }
