"""Optimization loop: AdamW, paired augmentation, early stopping, checkpoints.

All randomness flows through numpy SeedSequence streams keyed by
(seed, epoch, sample index), so runs are reproducible and training can resume
mid-stream bit for bit.  Checkpoints are a single file: JSON header (manifest
plus tensor table) followed by raw little-endian float32 payloads.
"""

import csv
import json
import math
import os
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from kv2mv import metrics
from kv2mv.losses import LossSpec, build_weight_map, combine
from kv2mv.model import ModelConfig, ModelParams, UNet, build_model, config_hash
from kv2mv.preprocess import SlicePair

CKPT_MAGIC = b"KV2MVCKP"


@dataclass
class AugmentSpec:
    """Paired geometric augmentation probabilities and limits."""

    hflip_prob: float = 0.5
    ssr_prob: float = 0.8
    shift_limit: float = 0.0625  # fraction of the image side
    scale_limit: float = 0.1
    rotate_limit: float = 5.0  # degrees

    def __post_init__(self):
        for name in ("hflip_prob", "ssr_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0,1]")
        for name in ("shift_limit", "scale_limit", "rotate_limit"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self):
        return {
            "hflip_prob": self.hflip_prob,
            "ssr_prob": self.ssr_prob,
            "shift_limit": self.shift_limit,
            "scale_limit": self.scale_limit,
            "rotate_limit": self.rotate_limit,
        }


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 5e-4
    batch_size: int = 4
    max_epochs: int = 20
    patience: int = 5
    seed: int = 0
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    loss: LossSpec = field(default_factory=lambda: LossSpec(terms=("l1w",), w=100.0))
    dataset: str = "D_All"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.dataset not in ("D_All", "D_Art"):
            raise ValueError(f"dataset must be D_All or D_Art, got {self.dataset!r}")

    def to_dict(self):
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "augment": self.augment.to_dict(),
            "loss": self.loss.to_dict(),
            "dataset": self.dataset,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "augment" in d:
            d["augment"] = AugmentSpec(**d["augment"])
        if "loss" in d:
            d["loss"] = LossSpec.from_dict(d["loss"])
        return cls(**d)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _affine_warp(img, angle_deg, scale, shift_yx, order, cval):
    d = img.shape[0]
    c = (d - 1) / 2.0
    theta = math.radians(angle_deg)
    ca, sa = math.cos(theta), math.sin(theta)
    # output point -> input point: undo translation, then rotation/scale
    inv = np.array([[ca, sa], [-sa, ca]]) / scale
    center = np.array([c, c])
    offset = center - inv @ (center + np.asarray(shift_yx))
    return ndimage.affine_transform(
        img, inv, offset=offset, order=order, mode="constant", cval=cval
    )


def augment_pair(pair: SlicePair, rng, spec: AugmentSpec = None) -> SlicePair:
    """Randomly flip and jointly shift/scale/rotate a pair.

    One draw decides the horizontal flip, one decides whether the combined
    shift/scale/rotate fires; its three parameters are then drawn uniformly
    within the configured limits.  kv, mv and the body mask all receive the
    same transform (bilinear for images, nearest for the mask) and the
    background is re-standardized to -1 afterwards.
    """
    spec = spec or AugmentSpec()
    kv, mv, mask = pair.kv, pair.mv, pair.body_mask
    changed = False
    if rng.random() < spec.hflip_prob:
        kv, mv, mask = kv[:, ::-1], mv[:, ::-1], mask[:, ::-1]
        changed = True
    if rng.random() < spec.ssr_prob and (
        spec.shift_limit > 0 or spec.scale_limit > 0 or spec.rotate_limit > 0
    ):
        d = kv.shape[0]
        shift = (
            rng.uniform(-spec.shift_limit, spec.shift_limit) * d,
            rng.uniform(-spec.shift_limit, spec.shift_limit) * d,
        )
        scale = 1.0 + rng.uniform(-spec.scale_limit, spec.scale_limit)
        angle = rng.uniform(-spec.rotate_limit, spec.rotate_limit)
        kv = _affine_warp(np.ascontiguousarray(kv), angle, scale, shift, order=1, cval=-1.0)
        mv = _affine_warp(np.ascontiguousarray(mv), angle, scale, shift, order=1, cval=-1.0)
        mask = _affine_warp(
            np.ascontiguousarray(mask).astype(np.uint8), angle, scale, shift, order=0, cval=0
        ).astype(bool)
        changed = True
    if not changed:
        return pair
    kv = np.ascontiguousarray(kv, dtype=np.float32)
    mv = np.ascontiguousarray(mv, dtype=np.float32)
    mask = np.ascontiguousarray(mask)
    kv[~mask] = -1.0
    mv[~mask] = -1.0
    return SlicePair(
        kv=kv,
        mv=mv,
        body_mask=mask,
        region=pair.region,
        is_artifact=pair.is_artifact,
        patient_id=pair.patient_id,
        slice_index=pair.slice_index,
    )


def _sample_rng(seed, epoch, index):
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(tensors, manifest: dict, path):
    """Single-file checkpoint: JSON header + raw little-endian float32 blobs."""
    table = []
    chunks = []
    offset = 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(
            t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else t, dtype="<f4"
        )
        blob = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    header = json.dumps(
        {"manifest": manifest, "tensors": table, "payload_crc32": zlib.crc32(payload)},
        separators=(",", ":"),
    ).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        f.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path, expected_config: ModelConfig = None):
    """Load (tensors, manifest); verifies CRC and, if given, the config hash."""
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        header_len = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(header_len))
        payload = f.read()
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise ValueError(f"{path}: checkpoint payload is corrupted (CRC mismatch)")
    tensors = OrderedDict()
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start : start + n], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    manifest = header["manifest"]
    if expected_config is not None:
        if manifest.get("config_hash") != config_hash(expected_config):
            raise ValueError(
                f"{path}: checkpoint was written for a different architecture "
                f"(config hash {manifest.get('config_hash')})"
            )
    return tensors, manifest


def params_from_checkpoint(path) -> ModelParams:
    tensors, manifest = load_checkpoint(path)
    config = ModelConfig.from_dict(manifest["model_config"])
    net = UNet(config)
    names = {n for n, _ in net.named_parameters()}
    params = OrderedDict((n, t) for n, t in tensors.items() if n in names)
    return ModelParams(config=config, tensors=params)


def load_model_from_checkpoint(path, expected_config: ModelConfig = None) -> UNet:
    """Rebuild a module (weights and norm statistics) from a checkpoint."""
    tensors, manifest = load_checkpoint(path, expected_config)
    config = ModelConfig.from_dict(manifest["model_config"])
    net = UNet(config)
    state = net.state_dict()
    for name in state:
        if name in tensors:
            state[name] = tensors[name].to(state[name].dtype).reshape(state[name].shape)
    net.load_state_dict(state)
    net.eval()
    return net


def _optimizer_tensors(net, optim):
    out = OrderedDict()
    for name, p in net.named_parameters():
        st = optim.state.get(p)
        if not st:
            continue
        out[f"optim.{name}.step"] = torch.as_tensor(float(st["step"]))
        out[f"optim.{name}.exp_avg"] = st["exp_avg"]
        out[f"optim.{name}.exp_avg_sq"] = st["exp_avg_sq"]
    return out


def _restore_optimizer(net, optim, tensors):
    for name, p in net.named_parameters():
        key = f"optim.{name}.step"
        if key not in tensors:
            continue
        optim.state[p] = {
            "step": torch.tensor(float(tensors[key])),
            "exp_avg": tensors[f"optim.{name}.exp_avg"].reshape(p.shape).clone(),
            "exp_avg_sq": tensors[f"optim.{name}.exp_avg_sq"].reshape(p.shape).clone(),
        }


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _to_batch(pairs):
    kv = torch.from_numpy(np.stack([p.kv for p in pairs])[:, None])
    mv = torch.from_numpy(np.stack([p.mv for p in pairs])[:, None])
    return kv, mv


def _weights_for(pairs, w):
    maps = [build_weight_map(p.body_mask, p.is_artifact, w).w_pixels for p in pairs]
    return torch.from_numpy(np.stack(maps)[:, None])


def eval_batches(pairs, batch_size):
    """Deterministic, augmentation-free batches for validation and test."""
    for start in range(0, len(pairs), batch_size):
        yield pairs[start : start + batch_size]


def predict_pairs(net: UNet, pairs, batch_size=8):
    """Run the network over pairs; returns [n, d, d] float32 predictions."""
    net.eval()
    preds = []
    with torch.no_grad():
        for chunk in eval_batches(pairs, batch_size):
            kv, _ = _to_batch(chunk)
            preds.append(net(kv)[:, 0].numpy())
    return np.concatenate(preds, axis=0)


def _val_psnr_art(net, pairs):
    art = [p for p in pairs if p.is_artifact]
    if not art:
        return None
    preds = predict_pairs(net, art)
    vals = [
        metrics.masked_psnr(pred, p.mv, p.body_mask) for pred, p in zip(preds, art)
    ]
    return float(np.mean(vals))


def _fmt_float(v):
    return "" if v is None else f"{v:.8f}"


def write_log_csv(log_rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_psnr_art"])
        for row in log_rows:
            writer.writerow(
                [
                    row["epoch"],
                    _fmt_float(row["train_loss"]),
                    _fmt_float(row["val_loss"]),
                    _fmt_float(row["val_psnr_art"]),
                ]
            )


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    datasets: dict,
    loss_fn=None,
    out_dir=None,
    resume_from=None,
):
    """Train the network; returns (best ModelParams, per-epoch log rows).

    ``datasets`` maps "train" and "validation" to SlicePair lists.  Early
    stopping monitors total validation loss with the configured patience; the
    best-validation weights are checkpointed (``checkpoints/best.ckpt`` when
    ``out_dir`` is given) and returned.  A non-finite training loss aborts,
    keeping the last good checkpoint.  ``loss_fn(pred, gt, weights)`` may
    override the configured loss (used by tests).
    """
    train_pairs = datasets["train"]
    val_pairs = datasets["validation"]
    if not train_pairs or not val_pairs:
        raise ValueError("train and validation sets must be non-empty")

    spec = train_config.loss
    if loss_fn is None:
        loss_fn = lambda pred, gt, weights: combine(spec, pred, gt, weights)  # noqa: E731

    net = build_model(model_config, seed=train_config.seed)
    optim = torch.optim.AdamW(
        net.parameters(),
        lr=train_config.learning_rate,
        weight_decay=train_config.weight_decay,
    )

    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)

    base_manifest = {
        "model_config": model_config.to_dict(),
        "config_hash": config_hash(model_config),
        "train_config": train_config.to_dict(),
    }

    best_val = math.inf
    best_epoch = 0
    best_state = None
    log_rows = []
    start_epoch = 1

    if resume_from is not None:
        tensors, manifest = load_checkpoint(resume_from, expected_config=model_config)
        state = net.state_dict()
        for name in state:
            if name in tensors:
                state[name] = tensors[name].to(state[name].dtype).reshape(state[name].shape)
        net.load_state_dict(state)
        _restore_optimizer(net, optim, tensors)
        start_epoch = manifest["epoch"] + 1
        best_val = manifest["best_val"]
        best_epoch = manifest["best_epoch"]
        log_rows = list(manifest.get("log_rows", []))
        if manifest.get("best_state_in_file"):
            best_state = OrderedDict(
                (n[len("best.") :], t) for n, t in tensors.items() if n.startswith("best.")
            )

    def model_tensors():
        return OrderedDict(
            (name, t.detach().clone()) for name, t in net.state_dict().items()
        )

    aborted = False
    for epoch in range(start_epoch, train_config.max_epochs + 1):
        order = np.random.default_rng(
            np.random.SeedSequence([train_config.seed, 104729 + epoch])
        ).permutation(len(train_pairs))

        net.train()
        epoch_losses = []
        for start in range(0, len(order), train_config.batch_size):
            idxs = order[start : start + train_config.batch_size]
            batch_pairs = [
                augment_pair(
                    train_pairs[i],
                    _sample_rng(train_config.seed, epoch, int(i)),
                    train_config.augment,
                )
                for i in idxs
            ]
            kv, mv = _to_batch(batch_pairs)
            weights = _weights_for(batch_pairs, spec.w)
            optim.zero_grad()
            pred = net(kv)
            loss = loss_fn(pred, mv, weights)
            if not torch.isfinite(loss):
                aborted = True
                break
            loss.backward()
            optim.step()
            epoch_losses.append(float(loss.detach()))
        if aborted:
            log_rows.append(
                {"epoch": epoch, "train_loss": None, "val_loss": None, "val_psnr_art": None}
            )
            break

        net.eval()
        val_losses = []
        with torch.no_grad():
            for chunk in eval_batches(val_pairs, train_config.batch_size):
                kv, mv = _to_batch(chunk)
                weights = _weights_for(chunk, spec.w)
                val_losses.append(float(loss_fn(net(kv), mv, weights)) * len(chunk))
        val_loss = sum(val_losses) / len(val_pairs)
        train_loss = float(np.mean(epoch_losses)) if epoch_losses else None

        log_rows.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "val_psnr_art": _val_psnr_art(net, val_pairs),
            }
        )

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = model_tensors()
            if ckpt_dir is not None:
                save_checkpoint(
                    best_state,
                    {**base_manifest, "epoch": epoch, "val_loss": val_loss},
                    os.path.join(ckpt_dir, "best.ckpt"),
                )

        if ckpt_dir is not None:
            last = model_tensors()
            last.update(_optimizer_tensors(net, optim))
            if best_state is not None:
                for name, t in best_state.items():
                    last[f"best.{name}"] = t
            save_checkpoint(
                last,
                {
                    **base_manifest,
                    "epoch": epoch,
                    "val_loss": val_loss,
                    "best_val": best_val,
                    "best_epoch": best_epoch,
                    "best_state_in_file": best_state is not None,
                    "log_rows": log_rows,
                },
                os.path.join(ckpt_dir, "last.ckpt"),
            )
            write_log_csv(log_rows, os.path.join(out_dir, "log.csv"))

        if epoch - best_epoch >= train_config.patience:
            break

    if out_dir is not None:
        write_log_csv(log_rows, os.path.join(out_dir, "log.csv"))

    if best_state is None:
        best_state = model_tensors()
    param_names = {n for n, _ in net.named_parameters()}
    best_params = ModelParams(
        config=model_config,
        tensors=OrderedDict((n, t) for n, t in best_state.items() if n in param_names),
    )
    return best_params, log_rows
