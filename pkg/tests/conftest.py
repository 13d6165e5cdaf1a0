import pytest
import torch
import torch.nn as nn

torch.set_num_threads(1)


class ToyEmbedder(nn.Module):
    """Tiny conv + pool feature extractor (well under 10^3 parameters)."""

    def __init__(self, channels: int = 3, width: int = 4):
        super().__init__()
        self.conv = nn.Conv2d(channels, width, 3, stride=2, padding=1)
        self.pool = nn.AdaptiveAvgPool2d(2)
        self.feature_dim = width * 4

    def forward(self, x):
        return torch.tanh(self.pool(self.conv(x)).flatten(1))


class ToyClassifier(nn.Module):
    def __init__(self, num_classes: int = 3, channels: int = 3):
        super().__init__()
        self.embed = ToyEmbedder(channels)
        self.head = nn.Linear(self.embed.feature_dim, num_classes)

    def features(self, x):
        return self.embed(x)

    def forward(self, x):
        return self.head(self.features(x))


@pytest.fixture
def toy_embedder():
    torch.manual_seed(0)
    return ToyEmbedder().eval()


@pytest.fixture
def toy_classifier():
    torch.manual_seed(1)
    return ToyClassifier().eval()


@pytest.fixture(scope="session")
def backbone_cache(request):
    return request.config.cache.mkdir("a2xp_backbone")


@pytest.fixture(scope="session")
def pretext_net(backbone_cache):
    """The default desk-scale objective backbone (pretext-trained once, cached on disk)."""
    from a2xp.config import ExperimentConfig
    from a2xp.experiment import pretext_backbone

    return pretext_backbone(ExperimentConfig(), 7, (3, 32, 32), cache_dir=backbone_cache)


@pytest.fixture(scope="session")
def shapes_seed100():
    from a2xp.data import synthetic_shapes_domains

    return synthetic_shapes_domains(300, seed=100)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record the one-line verdict of an acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
