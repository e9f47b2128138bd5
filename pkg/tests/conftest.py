import numpy as np
import pytest
import torch
from PIL import Image

from aesop_sr.data import prepare_dataset
from aesop_sr.images import ResampleSpec

torch.set_num_threads(1)


def make_synthetic_image(rng: np.random.Generator, height: int = 96, width: int = 96) -> np.ndarray:
    """Natural-ish test image: smooth gradients, plenty of sharp rectangles
    and thin lines (regressable edge content), and a light band-limited
    texture.  Returns [H, W, 3] uint8."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.zeros((height, width, 3))
    for c in range(3):
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img[:, :, c] = 0.5 + 0.25 * np.sin(2 * np.pi * (fx * xx / width + fy * yy / height) + phase)
    for _ in range(8):
        top, left = rng.integers(0, height - 12), rng.integers(0, width - 12)
        h, w = rng.integers(5, 28), rng.integers(5, 28)
        color = rng.uniform(0.02, 0.98, size=3)
        img[top : top + h, left : left + w] = color
    for _ in range(5):  # thin hard strokes, mostly above the x2 LR Nyquist
        color = rng.uniform(0.0, 1.0, size=3)
        thickness = int(rng.integers(1, 3))
        if rng.random() < 0.5:
            row = int(rng.integers(0, height - thickness))
            img[row : row + thickness, :] = color
        else:
            col = int(rng.integers(0, width - thickness))
            img[:, col : col + thickness] = color
    noise = rng.standard_normal((height, width, 3))
    kernel = np.ones((3, 3)) / 9.0
    for c in range(3):
        padded = np.pad(noise[:, :, c], 1, mode="reflect")
        smooth = sum(
            padded[i : i + height, j : j + width] * kernel[i, j] for i in range(3) for j in range(3)
        )
        img[:, :, c] += 0.05 * smooth
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def write_image_folder(path, count: int, size: int = 96, seed: int = 0) -> None:
    path.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        rng = np.random.default_rng((seed, i))
        Image.fromarray(make_synthetic_image(rng, size, size)).save(path / f"img_{i:03d}.png")


@pytest.fixture(scope="session")
def image_folder(tmp_path_factory):
    folder = tmp_path_factory.mktemp("images")
    write_image_folder(folder, count=12, size=96)
    return folder


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, image_folder):
    out = tmp_path_factory.mktemp("dataset_x2")
    return prepare_dataset(image_folder, out, ResampleSpec(scale=2))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
