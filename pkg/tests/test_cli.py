import json
import os

from kv2mv.cli import main


def test_phantom_generate_and_split(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps({"image_size": 32, "n_slices": 8}))
    out = tmp_path / "raw"
    rc = main(
        [
            "phantom",
            "generate",
            "--spec",
            str(spec_path),
            "--patients",
            "3",
            "--seed",
            "4",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    assert (out / "catalog.json").exists()
    rc = main(["dataset", "split", "--catalog", str(out / "catalog.json"), "--seed", "1"])
    assert rc == 0
    assert (out / "split.json").exists()


def test_invalid_spec_exits_2(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps({"image_size": 13}))
    rc = main(
        ["phantom", "generate", "--spec", str(spec_path), "--patients", "1", "--out", str(tmp_path / "x")]
    )
    assert rc == 2


def test_bad_fractions_exit_2(smoke_dirs):
    rc = main(
        [
            "dataset",
            "split",
            "--catalog",
            str(smoke_dirs["raw"] / "catalog.json"),
            "--fractions",
            "0.9,0.2,0.1",
        ]
    )
    assert rc == 2


def test_corrupt_volume_exits_3(tmp_path, smoke_dirs):
    import shutil

    raw = tmp_path / "raw"
    shutil.copytree(smoke_dirs["raw"], raw)
    victim = next(p for p in os.listdir(raw) if p.endswith("_kv.vol"))
    blob = bytearray((raw / victim).read_bytes())
    blob[-1] ^= 0xFF
    (raw / victim).write_bytes(bytes(blob))
    rc = main(["preprocess", "run", "--in", str(raw), "--out", str(tmp_path / "pp")])
    assert rc == 3


def test_train_and_evaluate_roundtrip(tmp_path, smoke_dirs, smoke_train_config):
    run_dir = tmp_path / "run"
    rc = main(
        [
            "train",
            "--data",
            str(smoke_dirs["pp"]),
            "--out",
            str(run_dir),
            "--config",
            smoke_train_config,
            "--epochs",
            "1",
        ]
    )
    assert rc == 0
    assert (run_dir / "log.csv").exists()
    assert (run_dir / "checkpoints" / "best.ckpt").exists()

    eval_dir = tmp_path / "eval"
    rc = main(
        [
            "evaluate",
            "--checkpoint",
            str(run_dir / "checkpoints" / "best.ckpt"),
            "--data",
            str(smoke_dirs["pp"]),
            "--out",
            str(eval_dir),
            "--dataset",
            "D_Art",
        ]
    )
    assert rc == 0
    assert (eval_dir / "records.json").exists()
    assert (eval_dir / "metrics.csv").exists()


def test_evaluate_requires_checkpoint_or_identity(smoke_dirs, tmp_path):
    rc = main(
        ["evaluate", "--data", str(smoke_dirs["pp"]), "--out", str(tmp_path / "e")]
    )
    assert rc == 2
