"""Analytic gradients of the full mixer-plus-classifier loss against central finite differences."""

import torch

from a2xp.generalization import build_heads
from a2xp.mixer import MixerConfig, forward
from a2xp.objective import LossConfig, ObjectiveNetwork, loss
from a2xp.prompts import ExpertBank, PaddingPrompt, border_mask

from conftest import ToyClassifier, ToyEmbedder

SHAPE = (3, 12, 12)
B = 2
STEP = 1e-4
TOL = 1e-3
PROBES_PER_TENSOR = 10


def _setup(cfg: MixerConfig):
    torch.manual_seed(0)
    emb = ToyEmbedder().double().eval()
    assert sum(p.numel() for p in emb.parameters()) <= 1000
    heads = build_heads(emb, emb.feature_dim, seed=1, init_scale=1.0, dtype=torch.float64)
    net = ObjectiveNetwork(ToyClassifier().double())
    g = torch.Generator().manual_seed(2)
    mask = border_mask(SHAPE, B)
    prompts = [PaddingPrompt((torch.randn(SHAPE, generator=g, dtype=torch.float64) * mask), B, mask) for _ in range(3)]
    bank = ExpertBank.from_prompts(prompts, ["a", "b", "c"], normalize=cfg.use_expert_norm)
    bank.values.requires_grad_(True)
    x = torch.rand(4, *SHAPE, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 1])
    return heads, net, bank, x, y


def _objective(heads, net, bank, cfg, x, y):
    out = forward(heads, bank, cfg, x, use_cache=False)
    return loss(net(out.prompted), y, LossConfig())


def gradient_probe_errors(cfg: MixerConfig = MixerConfig(), seed: int = 0) -> list[tuple[str, float]]:
    """Relative errors of analytic vs central-difference gradients on random probes."""
    heads, net, bank, x, y = _setup(cfg)
    value = _objective(heads, net, bank, cfg, x, y)
    tensors = {"head_T.weight": heads.head_T.weight, "head_T.bias": heads.head_T.bias,
               "head_E.weight": heads.head_E.weight, "experts": bank.values}
    grads = torch.autograd.grad(value, list(tensors.values()))
    g = torch.Generator().manual_seed(seed)
    border = bank.mask.flatten().nonzero().flatten()
    errors = []
    for (name, t), grad in zip(tensors.items(), grads):
        flat = t.data.view(-1)
        for _ in range(PROBES_PER_TENSOR):
            if name == "experts":
                e = int(torch.randint(len(bank), (1,), generator=g))
                i = e * bank.mask.numel() + int(border[torch.randint(len(border), (1,), generator=g)])
            else:
                i = int(torch.randint(flat.numel(), (1,), generator=g))
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + STEP
                up = _objective(heads, net, bank, cfg, x, y).item()
                flat[i] = orig - STEP
                down = _objective(heads, net, bank, cfg, x, y).item()
                flat[i] = orig
            numeric = (up - down) / (2 * STEP)
            analytic = grad.reshape(-1)[i].item()
            denom = max(abs(analytic), abs(numeric), 1e-10)
            errors.append((f"{name}[{i}]", abs(analytic - numeric) / denom))
    return errors


def test_gradients_match_finite_differences():
    errors = gradient_probe_errors()
    assert len(errors) >= 20
    worst = max(errors, key=lambda e: e[1])
    assert worst[1] < TOL, worst


def test_gradients_without_normalization_or_tanh():
    errors = gradient_probe_errors(MixerConfig(False, False, True), seed=1)
    assert max(e for _, e in errors) < TOL
