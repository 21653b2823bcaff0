#!/usr/bin/env python3
"""Hybrid objective, batch-split training loop and evaluation.

The GP models standardised targets: u fields minus the training-mean field,
divided by their pooled standard deviation, so the unit-amplitude kernel
matches the data and queries far from every training feature fall back to
the mean field. ``sigma2`` stays in units of u.

Each batch of s records is split into a known half, whose labels are used,
and an unknown half, whose labels are inferred from the known half with the
current deep kernel and scored by the diffusion energy loss. With P output
entries and standardised targets y_i the minimized quantity per batch is

    (sum_i y_i^T A^-1 y_i + P * log det A) / (P * s)    (data, A = K + sigma2/scale^2 I)
    + beta / scale^2 * mean_{j unknown} [L(D_j, yhat_j) - L(D_j, mean field)]
    + gamma * mean squared autoencoder reconstruction

The energy gain over the mean field differs from the energy itself by a term
that does not depend on the network, so gradients are those of the energy.

Random streams are derived from the config seed through numpy SeedSequence
spawn keys: (epoch, 0) orders an epoch, (epoch, batch, 1) splits a batch,
(epoch, batch, 2) draws the denoising corruption, (0, 0, 3) picks the
conditioning subset used at evaluation time.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pcgp import common as rc
from pcgp import deepnet, gp_core, physics
from pcgp.config import TrainConfig
from pcgp.datagen import Dataset
from pcgp.deepnet import AdamState, NetworkParams

_CONDITIONING_KEY = (0, 0, 3)


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=keys)))


@dataclass(frozen=True, eq=False)
class BatchSplit:
    known: np.ndarray
    unknown: np.ndarray


@dataclass(frozen=True, eq=False)
class Checkpoint:
    params: NetworkParams
    epoch: int
    val_mse: float


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_mse: float


@dataclass(frozen=True, eq=False)
class Batch:
    """Row-aligned arrays for one batch; every array has one row per record."""

    inputs: np.ndarray
    noisy: np.ndarray | None
    targets: np.ndarray
    diffusivities: np.ndarray
    ny: int
    nx: int
    h: float

    def __post_init__(self):
        if len(self.inputs) < 2:
            raise rc.InputError("a batch needs at least two records")


@dataclass(frozen=True, eq=False)
class TargetScaling:
    """Affine map between u fields and the standardised values the GP sees."""

    mean: np.ndarray
    scale: float

    @classmethod
    def fit(cls, solutions) -> "TargetScaling":
        Y = np.atleast_2d(np.asarray(solutions, dtype=np.float64))
        mean = Y.mean(axis=0)
        scale = float(np.sqrt(np.mean((Y - mean) ** 2)))
        return cls(mean, scale if scale > 0 else 1.0)

    @classmethod
    def identity(cls, size: int) -> "TargetScaling":
        return cls(np.zeros(size), 1.0)

    def standardize(self, Y) -> np.ndarray:
        return (np.asarray(Y, dtype=np.float64) - self.mean) / self.scale

    def restore(self, standard) -> np.ndarray:
        return self.mean + self.scale * np.asarray(standard)

    def noise(self, sigma2: float) -> float:
        """Noise variance in standardised units."""
        return sigma2 / self.scale**2


def network_inputs(diffusivities: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Fields as seen by the network: ``input_scale`` times log D (or D)."""
    values = np.log(diffusivities) if cfg.log_input else np.asarray(diffusivities, dtype=np.float64)
    return cfg.input_scale * values


def split_batch(s: int, known_count: int, seed) -> BatchSplit:
    if not 0 < known_count < s:
        raise rc.InputError(f"known_count must satisfy 0 < {known_count} < {s}")
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    order = np.random.Generator(np.random.PCG64(seq)).permutation(s)
    return BatchSplit(np.sort(order[:known_count]), np.sort(order[known_count:]))


def infer_unknown(
    params: NetworkParams, Xk, Yk, Xuk, cfg: TrainConfig, scaling: TargetScaling | None = None
) -> np.ndarray:
    """Predict unknown labels from known ones, one factorization for all entries.

    Yk is (n_entries, |known|); the result is (n_entries, |unknown|). Without
    ``scaling`` the labels go to the GP as given.
    """
    Zk = deepnet.encode(params, np.atleast_2d(Xk))
    Zu = deepnet.encode(params, np.atleast_2d(Xuk))
    Yk = np.asarray(Yk, dtype=np.float64)
    if Yk.ndim != 2 or Yk.shape[1] != Zk.shape[0]:
        raise rc.InputError(f"known targets have shape {Yk.shape}, expected (entries, {Zk.shape[0]})")
    if scaling is None:
        scaling = TargetScaling.identity(Yk.shape[0])
    ws = gp_core.gram_matrix(Zk, cfg.l, scaling.noise(cfg.sigma2), cfg.jitter, cfg.squared_kernel)
    standard = gp_core.posterior_mean(ws, Zk, Zu, scaling.standardize(Yk.T), cfg.l, cfg.squared_kernel).mean
    return scaling.restore(standard).T


class HybridLoss:
    """The per-batch loss head handed to deepnet.backprop.

    ``scaling`` defaults to one fitted on the batch's own targets; training
    passes the one fitted on the whole training set.
    """

    def __init__(self, batch: Batch, split: BatchSplit, cfg: TrainConfig, scaling: TargetScaling | None = None):
        self.batch = batch
        self.split = split
        self.cfg = cfg
        self.scaling = scaling if scaling is not None else TargetScaling.fit(batch.targets)
        self.clean_inputs = batch.inputs
        self.noisy_inputs = batch.noisy if cfg.gamma > 0 else None
        self.terms: dict[str, float] = {}

    def head(self, Z: np.ndarray, R: np.ndarray | None) -> tuple[float, np.ndarray, np.ndarray | None]:
        cfg, batch, scaling = self.cfg, self.batch, self.scaling
        Y = scaling.standardize(batch.targets)
        s, entries = Y.shape
        noise = scaling.noise(cfg.sigma2)
        norm = 1.0 / (entries * s)

        ws = gp_core.gram_matrix(Z, cfg.l, noise, cfg.jitter, cfg.squared_kernel)
        alpha = ws.solve(Y)
        data = norm * (float(np.sum(Y * alpha)) + entries * ws.logdet())
        Gbar = norm * (entries * ws.solve(np.eye(ws.n)) - alpha @ alpha.T)

        physics_term = 0.0
        if cfg.beta > 0:
            known, unknown = self.split.known, self.split.unknown
            wsk = gp_core.gram_matrix(Z[known], cfg.l, noise, cfg.jitter, cfg.squared_kernel)
            W = wsk.solve(Y[known])
            Kuk = ws.K[np.ix_(unknown, known)]
            D = batch.diffusivities[unknown]
            losses, G = physics.diffusion_vloss_batch(D, scaling.restore(Kuk @ W), batch.ny, batch.nx, batch.h)
            reference, _ = physics.diffusion_vloss_batch(
                D, np.broadcast_to(scaling.mean, D.shape), batch.ny, batch.nx, batch.h
            )
            weight = cfg.beta / scaling.scale**2
            physics_term = weight * float(np.mean(losses - reference))
            # chain through restore: d(field)/d(standardised) = scale
            G = G * (weight * scaling.scale / len(unknown))
            Gbar[np.ix_(unknown, known)] += G @ W.T
            Gbar[np.ix_(known, known)] -= wsk.solve(Kuk.T @ G) @ W.T

        recon = 0.0
        dR = None
        if R is not None:
            diff = R - batch.inputs
            recon = cfg.gamma * float(np.mean(diff * diff))
            dR = (2.0 * cfg.gamma / diff.size) * diff

        self.terms = {"data": data, "physics": physics_term, "reconstruction": recon}
        dZ = gp_core.kernel_matrix_adjoint(Z, Gbar, cfg.l, cfg.squared_kernel)
        return data + physics_term + recon, dZ, dR


def batch_loss(
    params: NetworkParams, batch: Batch, split: BatchSplit, cfg: TrainConfig, scaling: TargetScaling | None = None
) -> float:
    graph = HybridLoss(batch, split, cfg, scaling)
    Z = deepnet.encode(params, graph.clean_inputs)
    R = deepnet.reconstruct(params, graph.noisy_inputs) if graph.noisy_inputs is not None else None
    loss, _, _ = graph.head(Z, R)
    return loss


def batch_loss_and_grad(
    params: NetworkParams, batch: Batch, split: BatchSplit, cfg: TrainConfig, scaling: TargetScaling | None = None
):
    return deepnet.backprop(params, HybridLoss(batch, split, cfg, scaling))


def make_batch(ds: Dataset, indices, cfg: TrainConfig, noise: np.ndarray | None = None) -> Batch:
    indices = np.asarray(indices)
    D = ds.diffusivities()[indices]
    inputs = network_inputs(D, cfg)
    noisy = inputs + noise if noise is not None else inputs
    return Batch(inputs, noisy, ds.solutions()[indices], D, ds.ny, ds.nx, ds.h)


class Conditioner:
    """GP posterior over a fixed conditioning subset of the training set.

    Predictions are produced one query at a time, so the same record gives
    bitwise-identical output whatever batch it is predicted in.
    """

    def __init__(self, params: NetworkParams, train_ds: Dataset, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.indices = conditioning_indices(len(train_ds), cfg)
        inputs = network_inputs(train_ds.diffusivities()[self.indices], cfg)
        self.scaling = TargetScaling.fit(train_ds.solutions())
        self.features = deepnet.encode(params, inputs)
        noise = self.scaling.noise(cfg.sigma2)
        self.ws = gp_core.gram_matrix(self.features, cfg.l, noise, cfg.jitter, cfg.squared_kernel)
        targets = self.scaling.standardize(train_ds.solutions()[self.indices])
        self.weights = gp_core.posterior_weights(self.ws, targets)

    def _feature(self, diffusivity: np.ndarray) -> np.ndarray:
        return deepnet.encode(self.params, network_inputs(diffusivity, self.cfg))

    def predict_one(self, diffusivity: np.ndarray) -> np.ndarray:
        z = self._feature(diffusivity)
        k = gp_core.cross_kernel(z, self.features, self.cfg.l, self.cfg.squared_kernel)[0]
        return self.scaling.restore(k @ self.weights)

    def variance_one(self, diffusivity: np.ndarray) -> float:
        z = self._feature(diffusivity)
        variance = gp_core.posterior_variance(self.ws, self.features, z, self.cfg.l, self.cfg.squared_kernel)[0]
        return float(variance) * self.scaling.scale**2

    def predict(self, diffusivities: np.ndarray) -> np.ndarray:
        return np.stack([self.predict_one(d) for d in np.atleast_2d(diffusivities)])


def conditioning_indices(count: int, cfg: TrainConfig) -> np.ndarray:
    if count <= cfg.max_conditioning:
        return np.arange(count)
    chosen = _stream(cfg.seed, *_CONDITIONING_KEY).choice(count, cfg.max_conditioning, replace=False)
    return np.sort(chosen)


def predict_fields(params: NetworkParams, train_ds: Dataset, diffusivities: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Posterior-mean u fields (m, nx*ny) for flattened diffusivities (m, nx*ny)."""
    return Conditioner(params, train_ds, cfg).predict(diffusivities)


def predict_variance(params: NetworkParams, train_ds: Dataset, diffusivity: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Posterior variance for one flattened query, broadcast over the grid.

    Every output entry shares the kernel, so the variance is one number per
    query; it is returned as a field for export next to the mean.
    """
    variance = Conditioner(params, train_ds, cfg).variance_one(np.asarray(diffusivity, dtype=np.float64))
    return np.full(train_ds.nx * train_ds.ny, variance)


def mse(prediction: np.ndarray, truth: np.ndarray) -> float:
    diff = np.asarray(prediction) - np.asarray(truth)
    return float(np.mean(diff * diff))


def validation_mse(params: NetworkParams, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig) -> float:
    return mse(predict_fields(params, train_ds, val_ds.diffusivities(), cfg), val_ds.solutions())


def _check_compatible(ds: Dataset, cfg: TrainConfig, name: str) -> None:
    if (ds.ny, ds.nx) != (cfg.ny, cfg.nx):
        raise rc.InputError(f"{name} grid {ds.ny}x{ds.nx} does not match config {cfg.ny}x{cfg.nx}")


def train(dataset: Dataset, val_dataset: Dataset, cfg: TrainConfig) -> tuple[Checkpoint, list[EpochRecord]]:
    """Run the batch-split training loop and keep the best validation checkpoint."""
    cfg.validate()
    _check_compatible(dataset, cfg, "training set")
    _check_compatible(val_dataset, cfg, "validation set")
    s = cfg.batch_size
    n_batches = len(dataset) // s
    if n_batches == 0:
        raise rc.InputError(f"training set has {len(dataset)} records, fewer than batch_size {s}")

    params = deepnet.init_network(cfg.layer_dims(), cfg.encoder_end, cfg.seed, cfg.activation)
    if cfg.epochs == 0:
        return Checkpoint(params, 0, validation_mse(params, dataset, val_dataset, cfg)), []

    D = dataset.diffusivities()
    X = network_inputs(D, cfg)
    Y = dataset.solutions()
    scaling = TargetScaling.fit(Y)
    corruption = cfg.input_scale * cfg.dae_noise
    state = AdamState.zeros_like(params)
    history: list[EpochRecord] = []
    best: Checkpoint | None = None
    for epoch in range(1, cfg.epochs + 1):
        order = _stream(cfg.seed, epoch, 0).permutation(len(dataset))
        losses = []
        for b in range(n_batches):
            rows = order[b * s:(b + 1) * s]
            split = split_batch(s, cfg.known_count, np.random.SeedSequence(cfg.seed, spawn_key=(epoch, b, 1)))
            noisy = None
            if cfg.gamma > 0:
                noisy = X[rows] + corruption * _stream(cfg.seed, epoch, b, 2).standard_normal(X[rows].shape)
            batch = Batch(X[rows], noisy, Y[rows], D[rows], dataset.ny, dataset.nx, dataset.h)
            graph = HybridLoss(batch, split, cfg, scaling)
            try:
                loss, grads = deepnet.backprop(params, graph)
            except rc.NumericalError as exc:
                raise rc.NumericalError(
                    f"epoch {epoch}, batch {b}: {exc}", jitter=exc.jitter, tensor=exc.tensor
                ) from exc
            params, state = deepnet.adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            losses.append(loss)
            rc.debug(
                f"epoch {epoch} batch {b}: loss {loss:.6g} "
                + " ".join(f"{k}={v:.6g}" for k, v in graph.terms.items())
            )
        train_loss = float(np.mean(losses))
        val = validation_mse(params, dataset, val_dataset, cfg)
        history.append(EpochRecord(epoch, train_loss, val))
        improved = best is None or val < best.val_mse
        if improved:
            best = Checkpoint(params, epoch, val)
        rc.info(f"epoch {epoch}/{cfg.epochs}: train loss {train_loss:.6g}, val MSE {val:.6g}{' *' if improved else ''}")
    return best, history


@dataclass(frozen=True)
class ProbeStats:
    x: float
    y: float
    index: int
    pred_mean: float
    pred_std: float
    ref_mean: float
    ref_std: float


@dataclass(frozen=True, eq=False)
class Metrics:
    test_mse: float
    baseline_mse: float
    probes: tuple[ProbeStats, ...]
    predictions: np.ndarray
    truth: np.ndarray

    @property
    def errors(self) -> np.ndarray:
        return self.predictions - self.truth

    def report(self) -> dict[str, float | int]:
        out: dict[str, float | int] = {
            "test_mse": self.test_mse,
            "baseline_mse": self.baseline_mse,
            "test_count": len(self.truth),
        }
        for n, probe in enumerate(self.probes):
            for key in ("x", "y", "pred_mean", "pred_std", "ref_mean", "ref_std"):
                out[f"probe{n}_{key}"] = getattr(probe, key)
        return out


def probe_index(x: float, y: float, nx: int, ny: int) -> int:
    """Flat index of the grid node nearest to (x, y) in the unit square."""
    j = int(round(x * (nx - 1)))
    i = int(round(y * (ny - 1)))
    return i * nx + j


def probe_statistics(predictions: np.ndarray, truth: np.ndarray, probes, nx: int, ny: int) -> tuple[ProbeStats, ...]:
    stats = []
    for x, y in probes:
        index = probe_index(x, y, nx, ny)
        pred, ref = predictions[:, index], truth[:, index]
        stats.append(ProbeStats(x, y, index, float(pred.mean()), float(pred.std()), float(ref.mean()), float(ref.std())))
    return tuple(stats)


def baseline_mse(train_ds: Dataset, test_ds: Dataset) -> float:
    """MSE of predicting the training-ensemble mean field for every test record."""
    mean_field = train_ds.solutions().mean(axis=0)
    return mse(np.broadcast_to(mean_field, (len(test_ds), mean_field.size)), test_ds.solutions())


def evaluate(checkpoint: Checkpoint, train_ds: Dataset, test_ds: Dataset, cfg: TrainConfig) -> Metrics:
    _check_compatible(train_ds, cfg, "training set")
    _check_compatible(test_ds, cfg, "test set")
    predictions = predict_fields(checkpoint.params, train_ds, test_ds.diffusivities(), cfg)
    truth = test_ds.solutions()
    return Metrics(
        test_mse=mse(predictions, truth),
        baseline_mse=baseline_mse(train_ds, test_ds),
        probes=probe_statistics(predictions, truth, cfg.probes, test_ds.nx, test_ds.ny),
        predictions=predictions,
        truth=truth,
    )


def write_history_csv(history: list[EpochRecord], path: str | Path) -> None:
    lines = ["epoch,train_loss,val_mse"]
    lines.extend(f"{r.epoch},{r.train_loss:.17g},{r.val_mse:.17g}" for r in history)
    Path(path).write_text("\n".join(lines) + "\n")
