import json

import pytest

from kv2mv import dataio, pipeline
from kv2mv.phantomgen import PhantomSpec

SMOKE_SPEC = dict(image_size=32, n_slices=14, n_implants=2)


@pytest.fixture(scope="session")
def smoke_dirs(tmp_path_factory):
    """Small end-to-end cohort: raw volumes, split, preprocessed pairs."""
    root = tmp_path_factory.mktemp("smoke_cohort")
    raw = root / "raw"
    pp = root / "pp"
    pipeline.generate_cohort(PhantomSpec(**SMOKE_SPEC), n_patients=6, seed=200, out_dir=str(raw))
    catalog = dataio.read_catalog(raw / "catalog.json")
    split = dataio.split_by_patient(catalog, seed=0)
    pipeline.preprocess_run(str(raw), str(pp))
    dataio.write_split(split, pp / "split.json")
    return {"root": root, "raw": raw, "pp": pp}


@pytest.fixture(scope="session")
def smoke_datasets(smoke_dirs):
    return pipeline.load_datasets(str(smoke_dirs["pp"]))


@pytest.fixture(scope="session")
def smoke_train_config(tmp_path_factory):
    """2-epoch smoke config file for CLI-level experiment runs."""
    path = tmp_path_factory.mktemp("cfg") / "smoke.json"
    path.write_text(
        json.dumps(
            {
                "model": {"depth": 3, "base_channels": 6},
                "train": {"max_epochs": 2, "patience": 2, "seed": 0},
            }
        )
    )
    return str(path)
