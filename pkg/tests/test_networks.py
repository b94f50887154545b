import numpy as np
import pytest
import torch

from condseg.conditioning import FILM_HIDDEN
from condseg.data import SliceSample
from condseg.networks import (
    ARCHITECTURES,
    VARIANTS,
    BackboneConfig,
    FusionSpec,
    ModelConfigError,
    all_fusion_specs,
    build_model,
    count_parameters,
    forward_volume,
    load_checkpoint,
    save_checkpoint,
)

SMALL = BackboneConfig(base_channels=4)
ALL_SPECS = [spec for arch in ARCHITECTURES for spec in all_fusion_specs(arch)]


def inputs(batch=2, size=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    image = torch.randn(batch, 1, size, size, generator=g)
    z = torch.rand(batch, 3, generator=g) * 30
    return image, z


def test_grid_has_eighteen_variants():
    assert len(ALL_SPECS) == 18
    assert len({(s.architecture, s.variant) for s in ALL_SPECS}) == 18
    assert [s.variant for s in all_fusion_specs("unet")] == list(VARIANTS)


def test_invalid_specs():
    with pytest.raises(ModelConfigError):
        FusionSpec("unet", "film", "early")
    with pytest.raises(ModelConfigError):
        FusionSpec("unet", "concat_raw", "decoder")
    with pytest.raises(ModelConfigError):
        FusionSpec("resnet")
    with pytest.raises(ModelConfigError):
        FusionSpec.from_variant("unet", "attention-late")


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: f"{s.architecture}.{s.variant}")
def test_forward_shape_and_gradients(spec):
    torch.manual_seed(0)
    model = build_model(SMALL, spec)
    image, z = inputs()
    logits = model(image, z)
    assert logits.shape == (2, 4, 32, 32)
    assert torch.isfinite(logits).all()
    logits.square().mean().backward()
    no_grad = [n for n, p in model.named_parameters() if p.grad is None]
    assert not no_grad


def test_input_size_check():
    model = build_model(SMALL)
    with pytest.raises(ValueError):
        model(torch.zeros(1, 1, 24, 40), torch.zeros(1, 3))


def test_bottleneck_shape_at_full_size():
    seen = {}
    for variant, channels in (("baseline", 256), ("concat_raw-middle", 259)):
        model = build_model(BackboneConfig(), FusionSpec.from_variant("unet", variant)).eval()
        hook = model.decoder[0].up.register_forward_hook(lambda m, i, o: seen.__setitem__("x", i[0].shape))
        with torch.no_grad():
            model(torch.zeros(1, 1, 224, 224), torch.zeros(1, 3))
        hook.remove()
        assert seen["x"] == (1, channels, 14, 14)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_baseline_ignores_z(arch):
    model = build_model(SMALL, FusionSpec(arch)).eval()
    image, z = inputs()
    with torch.no_grad():
        assert torch.equal(model(image, z), model(image, z * 0 + 77.0))


@pytest.mark.parametrize("arch", ARCHITECTURES)
@pytest.mark.parametrize("site", ["decoder", "late"])
def test_film_at_init_equals_baseline(arch, site):
    torch.manual_seed(3)
    base = build_model(SMALL, FusionSpec(arch)).eval()
    film = build_model(SMALL, FusionSpec(arch, "film", site)).eval()
    missing, unexpected = film.load_state_dict(base.state_dict(), strict=False)
    assert not unexpected
    assert all("film" in name for name in missing)
    image, z = inputs()
    with torch.no_grad():
        torch.testing.assert_close(film(image, z), base(image, z), rtol=0, atol=1e-6)


def _delta(arch, variant, cfg=SMALL):
    return count_parameters(build_model(cfg, FusionSpec.from_variant(arch, variant))) - count_parameters(
        build_model(cfg, FusionSpec(arch))
    )


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_parameter_deltas(arch):
    b = SMALL.base_channels
    bottleneck = SMALL.bottleneck_channels
    classes = SMALL.num_classes
    mlp = 3 * 6 + 6 + 6 * 12 + 12 + 12 * 6 + 6 + 6 * 3 + 3
    assert mlp == 207

    def film(c):
        return 3 * FILM_HIDDEN + FILM_HIDDEN + FILM_HIDDEN * 2 * c + 2 * c

    assert _delta(arch, "concat_raw-early") == 3 * 9 * b
    assert _delta(arch, "concat_raw-middle") == 3 * 9 * bottleneck
    assert _delta(arch, "concat_raw-late") == 3 * classes
    assert _delta(arch, "concat_mlp-early") == 3 * 9 * b + mlp
    assert _delta(arch, "concat_mlp-middle") == 3 * 9 * bottleneck + mlp
    assert _delta(arch, "concat_mlp-late") == 3 * classes + mlp
    assert _delta(arch, "film-late") == film(b)
    assert _delta(arch, "film-decoder") == sum(film(w) for w in SMALL.widths())


def test_late_concat_full_size_delta():
    assert _delta("unet", "concat_raw-late", BackboneConfig()) == 12


def _slices(n=3, size=32, subject="p1", phase="ED"):
    rng = np.random.default_rng(0)
    return [
        SliceSample(subject, phase, i, rng.normal(size=(size, size)).astype(np.float32),
                    np.zeros((size, size), np.uint8), np.array([1.0, 2.0, 3.0]))
        for i in (2, 0, 1)[:n]
    ]


def test_forward_volume_orders_slices_and_checks_volume():
    model = build_model(SMALL).eval()
    slices = _slices()
    pred = forward_volume(model, slices)
    assert pred.shape == (3, 32, 32) and pred.dtype == np.uint8
    ordered = sorted(slices, key=lambda s: s.slice_index)
    single = forward_volume(model, [ordered[1]])
    np.testing.assert_array_equal(pred[1], single[0])
    mixed = slices[:2] + _slices(1, subject="p2")
    with pytest.raises(ValueError):
        forward_volume(model, mixed)


def test_argmax_tie_goes_to_lowest_index():
    model = build_model(SMALL).eval()
    with torch.no_grad():
        model.classifier.weight.zero_()
        model.classifier.bias.copy_(torch.tensor([0.0, 2.0, 2.0, 2.0]))
    pred = forward_volume(model, _slices(1))
    assert (pred == 1).all()


def test_checkpoint_roundtrip(tmp_path):
    model = build_model(SMALL, FusionSpec("encoder_decoder", "concat_mlp", "middle")).eval()
    save_checkpoint(model, tmp_path / "m.pt", run_id="x")
    loaded, meta = load_checkpoint(tmp_path / "m.pt")
    assert meta["run_id"] == "x"
    assert loaded.fusion == model.fusion and loaded.cfg == model.cfg
    image, z = inputs()
    with torch.no_grad():
        assert torch.equal(loaded(image, z), model(image, z))
