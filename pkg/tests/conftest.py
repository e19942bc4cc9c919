import numpy as np
import pytest
import torch

from pasta_vit.data import ImageSet, make_synthetic
from pasta_vit.vit import ModelConfig, init_model

torch.set_num_threads(1)

TINY = ModelConfig(image_size=16, channels=3, patch_size=4, embed_dim=16, num_heads=2, depth=2,
                   mlp_ratio=2.0, num_classes=3)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model64():
    """Depth-2, dim-16 model in double precision with non-trivial weights."""
    model = init_model(TINY, seed=3).double()
    g = torch.Generator().manual_seed(11)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=g, dtype=torch.float64))
    return model


@pytest.fixture
def tiny_images64():
    g = torch.Generator().manual_seed(5)
    return torch.randn(3, 3, 16, 16, generator=g, dtype=torch.float64)


@pytest.fixture
def tiny_data():
    """Small labelled set in float32 with a mean/std so clamping is meaningful."""
    train, test = make_synthetic(60, 30, image_size=16, num_classes=3, seed=1)
    return train, test


def make_set(images, labels, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25)):
    return ImageSet(images, torch.as_tensor(labels, dtype=torch.long), mean, std,
                    tuple(f"c{i}" for i in range(int(max(labels)) + 1)))


def _scalar(v):
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def rel_err(a, b):
    a, b = _scalar(a), _scalar(b)
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def central_diff(f, tensor, index, h=1e-4):
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        up = float(f())
        tensor[index] = orig - h
        down = float(f())
        tensor[index] = orig
    return (up - down) / (2 * h)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
