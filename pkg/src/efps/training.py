"""Joint training of the three stages and MAE evaluation.

Per-pixel samples are flattened to dense float arrays once (stack of the
four RGB-derived maps, the two-channel event map, the collapsed event map,
and the ground-truth normal), optionally replicated K times by rotation.
Each epoch shuffles with a seeded generator, anneals the learning rate on
the cosine schedule, and optimizes L_total = L_e + L_n with Adam; ablations
without an interpolation stage drop L_e.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Adam, Tensor, cosine_lr, no_grad
from .networks import (
    EFPSModel,
    NetConfig,
    NetError,
    angular_error_degrees,
    batched_mae_loss,
    batched_scale_invariant_loss,
)
from .obsmap import ObservationMapSet, augment_rotations


@dataclass
class SampleArrays:
    """Column-stacked training samples; all float32 unless built otherwise."""

    stack4: np.ndarray  # (P, 4, m, m): r, g, b, normalized
    o_e2: np.ndarray  # (P, 2, m, m): event polarities
    o_e_raw: np.ndarray  # (P, 1, m, m): collapsed event map
    normals: np.ndarray  # (P, 3)

    def __len__(self) -> int:
        return self.stack4.shape[0]


def build_sample_arrays(samples, dtype=np.float32) -> SampleArrays:
    """Flatten labeled ObservationMapSet records into dense arrays."""
    samples = list(samples)
    if not samples:
        raise NetError("empty dataset")
    stack4 = np.empty((len(samples), 4) + samples[0].o_n.shape, dtype=dtype)
    o_e2 = np.empty((len(samples), 2) + samples[0].o_n.shape, dtype=dtype)
    o_e_raw = np.empty((len(samples), 1) + samples[0].o_n.shape, dtype=dtype)
    normals = np.empty((len(samples), 3), dtype=dtype)
    for i, s in enumerate(samples):
        if s.normal is None:
            raise NetError("sample missing ground-truth normal")
        stack4[i, 0] = s.o_r
        stack4[i, 1] = s.o_g
        stack4[i, 2] = s.o_b
        stack4[i, 3] = s.o_n
        o_e2[i] = np.moveaxis(s.o_e2, 2, 0)
        o_e_raw[i, 0] = s.o_e
        normals[i] = s.normal
    return SampleArrays(stack4, o_e2, o_e_raw, normals)


def augment_samples(samples, k: int) -> list:
    """Expand each sample into its K rotations (K=1 returns the input list)."""
    out: list[ObservationMapSet] = []
    for s in samples:
        out.extend(augment_rotations(s, k))
    return out


def _batch_losses(model: EFPSModel, arrays: SampleArrays, idx) -> tuple:
    stack4 = Tensor(arrays.stack4[idx])
    o_e2 = Tensor(arrays.o_e2[idx])
    o_e_raw = Tensor(arrays.o_e_raw[idx])
    normals = Tensor(arrays.normals[idx])
    n_hat, o_e_hat = model(stack4, o_e2=o_e2, o_e_raw=o_e_raw)
    l_n = batched_mae_loss(normals, n_hat)
    if o_e_hat is None:
        return l_n, None
    target = Tensor(arrays.stack4[idx][:, 3:4])
    l_e = batched_scale_invariant_loss(o_e_hat, target)
    return l_n, l_e


def train(
    samples,
    config: NetConfig,
    ablation: str = "full",
    seed: int = 0,
    dtype=np.float32,
    model: EFPSModel | None = None,
):
    """Optimize a model over labeled samples; returns (model, history).

    `samples` is either a SampleArrays or an iterable of ObservationMapSet
    (augmented here by config.k_aug in the latter case).  History holds one
    mean L_total per epoch.
    """
    if isinstance(samples, SampleArrays):
        arrays = samples
    else:
        arrays = build_sample_arrays(augment_samples(samples, config.k_aug), dtype)
    if len(arrays) == 0:
        raise NetError("empty dataset")
    if model is None:
        model = EFPSModel(config, ablation=ablation, seed=seed, dtype=dtype)
    model.train()
    optimizer = Adam(list(model.parameters()), lr=config.lr)
    rng = np.random.default_rng(seed)
    history: list[float] = []
    step = 0
    for epoch in range(config.epochs):
        optimizer.lr = cosine_lr(epoch, config.epochs, config.lr)
        order = rng.permutation(len(arrays))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            if idx.size < 2:
                continue  # batch statistics need at least two samples
            l_n, l_e = _batch_losses(model, arrays, idx)
            loss = l_n if l_e is None else l_e + l_n
            value = float(loss.data)
            if not np.isfinite(value):
                raise NetError(f"training diverged at step {step}")
            model.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(value)
            step += 1
        history.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
    return model, history


def predict_normals(model: EFPSModel, arrays: SampleArrays, batch_size: int = 1024) -> np.ndarray:
    """Unit normals for every sample, in eval mode, graph-free."""
    model.eval()
    out = np.empty((len(arrays), 3), dtype=np.float64)
    with no_grad():
        for start in range(0, len(arrays), batch_size):
            idx = slice(start, min(start + batch_size, len(arrays)))
            n_hat, _ = model(
                Tensor(arrays.stack4[idx]),
                o_e2=Tensor(arrays.o_e2[idx]),
                o_e_raw=Tensor(arrays.o_e_raw[idx]),
            )
            out[idx] = n_hat.data
    model.train()
    return out


def evaluate(model: EFPSModel, objects: dict) -> dict:
    """Masked MAE in degrees per object plus the average over objects.

    `objects` maps a name to a SampleArrays; returns {name: mae_degrees}
    plus an "average" entry.
    """
    if not objects:
        raise NetError("empty evaluation set")
    report: dict[str, float] = {}
    for name, arrays in objects.items():
        if len(arrays) == 0:
            raise NetError(f"object {name} has an empty mask")
        pred = predict_normals(model, arrays)
        errors = angular_error_degrees(arrays.normals.astype(np.float64), pred)
        report[name] = float(errors.mean())
    report["average"] = float(np.mean([v for k, v in report.items() if k != "average"]))
    return report
