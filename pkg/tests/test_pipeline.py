import numpy as np

from kv2mv import dataio, pipeline


def test_generated_tree_roundtrips(smoke_dirs):
    catalog = dataio.read_catalog(smoke_dirs["raw"] / "catalog.json")
    assert len(catalog.patient_ids()) == 6
    for pid in catalog.patient_ids():
        for modality in dataio.MODALITIES:
            entry = catalog.entry(pid, modality)
            vol = dataio.read_volume(smoke_dirs["raw"] / entry.path)
            assert vol.patient_id == pid
            assert vol.modality == modality
            assert vol.n_slices == entry.n_slices


def test_preprocessed_catalog_carries_flags(smoke_dirs):
    catalog = dataio.read_catalog(smoke_dirs["pp"] / "catalog.json")
    for pid in catalog.patient_ids():
        kv_flags = catalog.entry(pid, "kVCT").artifact_flags
        assert kv_flags is not None and any(kv_flags)
        mv_flags = catalog.entry(pid, "MVCT").artifact_flags
        assert mv_flags is not None and not any(mv_flags)


def test_loaded_pairs_match_manifest(smoke_dirs):
    index = pipeline.load_pairs(str(smoke_dirs["pp"]))
    assert index
    for (pid, idx), pair in index.items():
        pair.validate()
        assert pair.patient_id == pid
        assert pair.slice_index == idx
        assert pair.kv.dtype == np.float32


def test_dataset_selection_respects_membership(smoke_dirs, smoke_datasets):
    catalog = dataio.read_catalog(smoke_dirs["pp"] / "catalog.json")
    split = dataio.read_split(smoke_dirs["pp"] / "split.json")
    lists = dataio.build_datasets(catalog, split)
    for ds in ("D_All", "D_Art"):
        for sp in ("train", "validation", "test"):
            pairs = smoke_datasets[ds][sp]
            assert len(pairs) == len(lists[ds][sp])
            for p in pairs:
                assert split.assignment[p.patient_id] == sp
                if ds == "D_Art":
                    assert p.is_artifact


def test_artifact_fraction_calibration(smoke_datasets):
    n_all = sum(len(smoke_datasets["D_All"][sp]) for sp in ("train", "validation", "test"))
    n_art = sum(len(smoke_datasets["D_Art"][sp]) for sp in ("train", "validation", "test"))
    assert 0.10 <= n_art / n_all <= 0.20
