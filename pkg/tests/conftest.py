import numpy as np
import pytest

from dadjscc.data import write_cifar_file


def synthetic_images(n, rng, num_classes=10):
    """Smooth, class-tinted 32x32 RGB images as uint8 (plus labels)."""
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:32, 0:32] / 31.0
    imgs = np.empty((n, 3, 32, 32))
    hues = np.random.default_rng(1234).uniform(0.2, 0.8, size=(num_classes, 3))
    for i, lab in enumerate(labels):
        fx, fy = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        for ch in range(3):
            wave = np.sin(2 * np.pi * (fx * xx + fy * yy) + phase[ch])
            imgs[i, ch] = hues[lab, ch] + 0.25 * wave + 0.1 * (xx - 0.5) * (ch - 1)
    imgs += rng.normal(0, 0.02, imgs.shape)
    return np.clip(np.rint(imgs * 255), 0, 255).astype(np.uint8), labels


@pytest.fixture(scope="session")
def synthetic_cifar10(tmp_path_factory):
    """A CIFAR-10-format directory: 5 train batches of 100 images, 200 test images."""
    root = tmp_path_factory.mktemp("cifar10")
    rng = np.random.default_rng(7)
    for i in range(1, 6):
        imgs, labels = synthetic_images(100, rng)
        write_cifar_file(root / f"data_batch_{i}.bin", imgs, labels)
    imgs, labels = synthetic_images(200, rng)
    write_cifar_file(root / "test_batch.bin", imgs, labels)
    return root


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance" in getattr(rep, "nodeid", "") and rep.when == "call" or \
                    (outcome == "error" and "test_acceptance" in getattr(rep, "nodeid", "")):
                lines.append((rep.nodeid.split("::")[-1], "PASS" if outcome == "passed" else "FAIL"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, status in sorted(lines):
            terminalreporter.write_line(f"{status}  {name}")
