"""Image-quality metrics, the downstream classifier proxy and SNR sweeps."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .channel import ChannelConfig
from .data import ImageDataset, batch_iter
from .layers import Conv2d, Conv2dSpec, Layer, Linear, count_params
from .models import end_to_end
from .tensor import DEFAULT_DTYPE, Tape, Tensor, backward, relu, reshape
from .training import AdamState, TrainConfig, adam_step, cross_entropy_loss

log = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    return a, b


def psnr_per_image(pred, target) -> np.ndarray:
    a, b = _pair(pred, target)
    mse = ((a - b) ** 2).reshape(len(a), -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        vals = 10.0 * np.log10(1.0 / mse)
    return np.minimum(vals, PSNR_CAP_DB)


def psnr(pred, target) -> float:
    """Mean per-image PSNR in dB for unit-range images (peak 1)."""
    return float(psnr_per_image(pred, target).mean())


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable Gaussian over the last two axes, valid region only
    k = len(g)
    rows = sliding_window_view(x, k, axis=-1) @ g
    return np.swapaxes(sliding_window_view(np.swapaxes(rows, -1, -2), k, axis=-1) @ g, -1, -2)


def ssim_per_image(pred, target) -> np.ndarray:
    """Single-scale SSIM per image, averaged over the valid window positions and channels."""
    a, b = _pair(pred, target)
    g = gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / \
        ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return smap.reshape(len(a), -1).mean(axis=1)


def ssim(pred, target) -> float:
    return float(ssim_per_image(pred, target).mean())


# -- classifier proxy --------------------------------------------------------

class ClassifierProxy(Layer):
    """Small CNN standing in for the downstream recognition network."""

    def __init__(self, num_classes: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.num_classes = num_classes
        self.clean_accuracy: float | None = None
        self.conv1 = Conv2d(Conv2dSpec(3, 32, 2, kernel=3, padding=1), rng, dtype)
        self.conv2 = Conv2d(Conv2dSpec(32, 64, 2, kernel=3, padding=1), rng, dtype)
        self.fc1 = Linear(64 * 8 * 8, 128, rng, dtype)
        self.fc2 = Linear(128, num_classes, rng, dtype)
        self.named("classifier")

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def __call__(self, images: Tensor) -> Tensor:
        squeeze = images.ndim == 3
        x = reshape(images, (1,) + images.shape) if squeeze else images
        h = relu(self.conv2(relu(self.conv1(x))))
        h = reshape(h, (h.shape[0], -1))
        logits = self.fc2(relu(self.fc1(h)))
        return reshape(logits, (self.num_classes,)) if squeeze else logits

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        for start in range(0, len(images), batch_size):
            logits = self(Tensor(np.asarray(images[start:start + batch_size], DEFAULT_DTYPE)))
            out.append(logits.data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy_percent(classifier: ClassifierProxy, images: np.ndarray, labels) -> float:
    pred = classifier.predict(images)
    return float(100.0 * np.mean(pred == np.asarray(labels)))


def train_classifier_proxy(ds: ImageDataset, cfg: TrainConfig, rng: np.random.Generator,
                           test_ds: ImageDataset | None = None) -> ClassifierProxy:
    """Train the proxy with cross-entropy on clean images."""
    clf = ClassifierProxy(ds.num_classes, rng)
    state = AdamState(clf.parameters())
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for images, labels in batch_iter(ds, cfg.batch_size, True, rng):
            for p in state.params:
                p.grad = None
            with Tape() as tape:
                loss = cross_entropy_loss(clf(Tensor(images)), labels)
            backward(loss, tape)
            adam_step(state.params, state, cfg)
            losses.append(loss.item())
        log.info("classifier epoch %d loss %.4f", epoch, float(np.mean(losses)))
    if test_ds is not None:
        clf.clean_accuracy = accuracy_percent(clf, test_ds.images, test_ds.labels)
        log.info("classifier clean accuracy %.2f%% (%d params)", clf.clean_accuracy,
                 count_params(clf))
    return clf


# -- sweeps --------------------------------------------------------------------

@dataclass(frozen=True)
class MetricRecord:
    snr_db: float
    psnr_db: float
    ssim: float
    accuracy_percent: float | None = None


DEFAULT_SWEEP = tuple(range(5, 26, 2))


def reconstruct(model, images: np.ndarray, cfg: ChannelConfig, rng: np.random.Generator,
                batch_size: int = 128) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        recon, _ = end_to_end(model, Tensor(images[start:start + batch_size]), cfg, rng)
        out.append(recon.data)
    return np.concatenate(out)


def snr_sweep(model, classifier: ClassifierProxy | None, ds_test: ImageDataset,
              snr_list=DEFAULT_SWEEP, mode: str = "awgn", seed: int = 0,
              batch_size: int = 128, noiseless: bool = False) -> list[MetricRecord]:
    """One :class:`MetricRecord` per evaluation SNR, in the order given.

    Each sweep point uses its own rng stream spawned from ``seed``, so
    results do not depend on evaluation order.
    """
    snr_list = list(snr_list)
    if not snr_list:
        raise ValueError("snr_list must be non-empty")
    streams = np.random.SeedSequence(seed).spawn(len(snr_list))
    records = []
    for snr, ss in zip(snr_list, streams):
        rng = np.random.default_rng(ss)
        cfg = ChannelConfig(mode=mode, snr_db=float(snr), noiseless=noiseless)
        recon = reconstruct(model, ds_test.images, cfg, rng, batch_size)
        acc = None
        if classifier is not None:
            acc = accuracy_percent(classifier, recon, ds_test.labels)
        rec = MetricRecord(float(snr), psnr(recon, ds_test.images),
                           ssim(recon, ds_test.images), acc)
        log.info("sweep %s", rec)
        records.append(rec)
    return records
