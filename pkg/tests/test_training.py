import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

import condseg.training as training
from condseg.data import PhantomConfig, SliceSample, generate_synthetic_dataset, preprocess_volume, resize_slice
from condseg.evaluation import aggregate, evaluate_model
from condseg.networks import BackboneConfig, FusionSpec, build_model
from condseg.training import TrainConfig, TrainHistory, TrainingDiverged, focal_loss, train

TINY = BackboneConfig(base_channels=4)


def central_difference_grad(f, x, eps=1e-6):
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = f(x).item()
        flat[i] = orig - eps
        lo = f(x).item()
        flat[i] = orig
        grad.view(-1)[i] = (hi - lo) / (2 * eps)
    return grad


def test_focal_closed_forms():
    uniform = torch.zeros(2, 4, 3, 3)
    targets = torch.randint(0, 4, (2, 3, 3))
    assert focal_loss(uniform, targets, 0.0).item() == pytest.approx(math.log(4), abs=1e-6)
    assert focal_loss(torch.zeros(1, 4), torch.tensor([2]), 0.5).item() == pytest.approx(
        0.75 ** 0.5 * math.log(4), abs=1e-6
    )
    perfect = torch.full((1, 4, 2, 2), -1e4)
    perfect[:, 1] = 1e4
    assert focal_loss(perfect, torch.ones(1, 2, 2, dtype=torch.long)).item() == 0.0


def test_focal_gamma_zero_is_cross_entropy():
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        logits = torch.randn(3, 4, 5, 6, generator=g) * 3
        targets = torch.randint(0, 4, (3, 5, 6), generator=g)
        assert focal_loss(logits, targets, 0.0).item() == pytest.approx(
            F.cross_entropy(logits, targets).item(), abs=1e-6
        )


def test_focal_pointwise_properties():
    pt = torch.linspace(0.01, 0.99, 50, dtype=torch.float64)
    logits = torch.stack([torch.log(pt), torch.log1p(-pt)], dim=1)
    targets = torch.zeros(50, dtype=torch.long)
    per = [focal_loss(logits[i:i + 1], targets[i:i + 1], 0.5).item() for i in range(50)]
    assert all(a >= b for a, b in zip(per, per[1:]))
    ce = [focal_loss(logits[i:i + 1], targets[i:i + 1], 0.0).item() for i in range(50)]
    assert all(f <= c for f, c in zip(per, ce))


@pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0])
def test_focal_gradient_finite_differences(gamma):
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(2, 4, 2, 3, generator=g, dtype=torch.float64)
    targets = torch.randint(0, 4, (2, 2, 3), generator=g)
    x = logits.clone().requires_grad_(True)
    focal_loss(x, targets, gamma).backward()
    numeric = central_difference_grad(lambda t: focal_loss(t, targets, gamma), logits.clone())
    torch.testing.assert_close(x.grad, numeric, rtol=1e-4, atol=1e-9)


def test_focal_input_errors():
    with pytest.raises(ValueError):
        focal_loss(torch.zeros(1, 4, 2, 2), torch.full((1, 2, 2), 4))
    with pytest.raises(ValueError):
        focal_loss(torch.zeros(1, 4, 2, 2), torch.zeros(1, 2, 2), gamma=-1)


def small_slices(n_subjects=3, size=32, seed=0):
    """Synthetic slices downsampled to ``size`` for fast training."""
    out = []
    for vol in generate_synthetic_dataset(n_subjects, seed, PhantomConfig(n_slices=2)):
        for s in preprocess_volume(vol):
            labels = resize_slice(s.labels, size, size, labels=True)
            out.append(SliceSample(s.subject_id, s.phase, s.slice_index,
                                   resize_slice(s.image, size, size), labels, s.z))
    return out


def test_descent_step():
    torch.manual_seed(0)
    model = build_model(TINY)
    model.train()
    slices = small_slices()[:4]
    images, labels, z = training._tensors(slices)
    before = focal_loss(model(images, z), labels).item()
    opt = torch.optim.Adam(model.parameters(), lr=1e-5)
    opt.zero_grad()
    focal_loss(model(images, z), labels).backward()
    opt.step()
    assert focal_loss(model(images, z), labels).item() < before


def test_train_is_deterministic():
    slices = small_slices()
    cfg = TrainConfig(max_epochs=3, patience=3, batch_size=4, seed=5, learning_rate=1e-3)
    runs = []
    for _ in range(2):
        torch.manual_seed(123)
        model = build_model(TINY)
        state, hist = train(model, slices[:8], slices[8:], cfg, progress=None)
        runs.append((state, hist))
    assert runs[0][1] == runs[1][1]
    for k in runs[0][0]:
        assert torch.equal(runs[0][0][k], runs[1][0][k])


def _scripted(monkeypatch, scores, model):
    """Replace validation Dice with ``scores`` and snapshot weights per epoch."""
    snapshots = []
    it = iter(scores)

    def fake(records):
        snapshots.append({k: v.clone() for k, v in model.state_dict().items()})
        return next(it), 0.0

    monkeypatch.setattr(training, "aggregate", fake)
    return snapshots


def test_patience_one_stops_at_epoch_two(monkeypatch):
    slices = small_slices()
    model = build_model(TINY)
    _scripted(monkeypatch, [0.5, 0.4, 0.3, 0.2], model)
    _, hist = train(model, slices[:4], slices[4:6], TrainConfig(max_epochs=4, patience=1, batch_size=4), progress=None)
    assert (hist.best_epoch, hist.stopped_epoch, len(hist.epochs)) == (1, 2, 2)


def test_best_weights_restored(monkeypatch):
    slices = small_slices()
    model = build_model(TINY)
    snapshots = _scripted(monkeypatch, [0.3, 0.6, 0.5, 0.55, 0.59, 0.1], model)
    cfg = TrainConfig(max_epochs=6, patience=3, batch_size=4, learning_rate=1e-3)
    state, hist = train(model, slices[:4], slices[4:6], cfg, progress=None)
    assert (hist.best_epoch, hist.stopped_epoch, hist.best_score) == (2, 5, 0.6)
    for k, v in snapshots[1].items():
        assert torch.equal(state[k], v)
        assert torch.equal(model.state_dict()[k], v)


def test_restored_weights_reproduce_best_score():
    slices = small_slices()
    torch.manual_seed(0)
    model = build_model(TINY)
    cfg = TrainConfig(max_epochs=4, patience=4, batch_size=4, learning_rate=1e-3)
    _, hist = train(model, slices[:8], slices[8:], cfg, progress=None)
    assert aggregate(evaluate_model(model, slices[8:]))[0] == hist.best_score


def test_divergence_dumps_state(tmp_path):
    slices = small_slices()[:2]
    bad = SliceSample("x", "ED", 0, np.full_like(slices[0].image, np.nan), slices[0].labels, slices[0].z)
    with pytest.raises(TrainingDiverged) as info:
        train(build_model(TINY), [bad], slices, TrainConfig(max_epochs=2, patience=1), dump_dir=tmp_path,
              progress=None)
    assert info.value.state["epoch"] == 1
    assert (tmp_path / "diverged.json").exists() and (tmp_path / "diverged_state.pt").exists()


def test_empty_sets_rejected():
    slices = small_slices()[:2]
    with pytest.raises(ValueError):
        train(build_model(TINY), [], slices, progress=None)
    with pytest.raises(ValueError):
        train(build_model(TINY), slices, [], progress=None)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


def test_history_roundtrip(tmp_path):
    hist = TrainHistory([{"epoch": 1, "train_loss": 0.5, "val_loss": 0.4, "val_dice": 0.3}], 1, 1, 0.3)
    hist.write(tmp_path / "h.jsonl")
    assert TrainHistory.read(tmp_path / "h.jsonl") == hist


def test_overfit_single_slice():
    one = max(small_slices(), key=lambda s: np.count_nonzero(s.labels))
    torch.manual_seed(0)
    model = build_model(BackboneConfig(base_channels=8))
    cfg = TrainConfig(max_epochs=200, patience=200, batch_size=16, learning_rate=1e-2)
    _, hist = train(model, [one] * 50, [one], cfg, progress=None)
    assert hist.epochs[-1]["train_loss"] < 0.01
