"""Unit tests for attention maps, Grad-CAM and heatmap averaging."""

from dataclasses import replace

import numpy as np
import pytest

from ecg_xai.exceptions import EcgContractError, EcgDataError
from ecg_xai.explain import (
    ExplainConfig,
    average_all,
    average_maps,
    cls_attention_map,
    explain_segments,
    export_averaged_maps,
    grad_cam,
    grad_cam_maps,
    load_averaged_maps,
    resample_to_1500,
    scale_unit,
)
from ecg_xai.models import HeatmapBundle, MapSource
from ecg_xai.networks import build_network, vit_forward
from ecg_xai.tensor import Tensor, conv1d, matmul, mean, relu

ATTENTION = MapSource("attention", layer=0, head=0)


def _bundle(resampled_map, label="SR", predicted="SR", signal=None):
    resampled_map = np.asarray(resampled_map, dtype=np.float64)
    return HeatmapBundle(
        source=ATTENTION,
        raw_map=resampled_map,
        resampled_map=resampled_map,
        resampled_signal=(
            np.zeros_like(resampled_map) if signal is None else np.asarray(signal)
        ),
        patient_id="P1",
        label=label,
        predicted=predicted,
        original_length=len(resampled_map),
    )


def test_scale_unit_examples():
    """Test min-max scaling, constants and already-scaled maps."""
    # Act and Assert: Three reference maps.
    np.testing.assert_allclose(scale_unit([2.0, 4.0, 6.0]), [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(scale_unit([5.0, 5.0]), [0.0, 0.0])
    np.testing.assert_allclose(scale_unit([0.0, 0.25, 1.0]), [0.0, 0.25, 1.0])


def test_scale_unit_rejects_empty_map():
    """Test an empty map cannot be scaled."""
    # Act and Assert: Empty input.
    with pytest.raises(EcgContractError, match="empty"):
        scale_unit(np.zeros(0))


def test_resample_constant_map():
    """Test a constant map stays constant on the common axis."""
    # Act: Resample a flat map of 50 cells.
    out = resample_to_1500(np.full(50, 0.3), original_length=600)

    # Assert: Length and value.
    assert out.shape == (1500,)
    np.testing.assert_allclose(out, 0.3)


def test_resample_ramp_midpoint():
    """Test a two-point ramp crosses one half in the middle of the axis."""
    # Act: Resample [0, 1].
    out = resample_to_1500(np.array([0.0, 1.0]), original_length=1500)

    # Assert: Endpoints and index 750.
    assert out[0] == 0.0
    assert out[-1] == 1.0
    assert out[750] == pytest.approx(0.5, abs=1e-3)


def test_resample_preserves_linear_maps(rng):
    """Test linear interpolation reproduces an affine map at any probe."""
    # Arrange: An affine map over 37 evenly spread cells.
    length = 873
    cells = np.linspace(0.0, length - 1, 37)
    values = 0.002 * cells - 0.4

    # Act: Resample.
    out = resample_to_1500(values, length)

    # Assert: 20 probes equal the affine function at their coordinate.
    targets = np.linspace(0.0, length - 1, 1500)
    probes = rng.choice(1500, size=20, replace=False)
    np.testing.assert_allclose(out[probes], 0.002 * targets[probes] - 0.4, atol=1e-12)


def test_resample_does_not_extrapolate():
    """Test values outside the known positions take the nearest end value."""
    # Act: Knots only in the middle of a 1000-sample segment.
    out = resample_to_1500(
        np.array([1.0, 3.0]), 1000, positions=np.array([250.0, 750.0])
    )

    # Assert: Flat ends, bounded interior.
    assert out[0] == 1.0
    assert out[-1] == 3.0
    assert out.min() >= 1.0 and out.max() <= 3.0


def test_resample_rejects_short_segments():
    """Test segments shorter than two samples are rejected."""
    # Act and Assert: original_length 1.
    with pytest.raises(EcgContractError, match="original_length"):
        resample_to_1500(np.ones(3), original_length=1)


def test_cls_attention_map_completes_cls_row(tiny_vit_config, rng, make_segment):
    """Test the map and the CLS self-weight together sum to one."""
    # Arrange: Tiny ViT and a segment.
    model = build_network("vit", tiny_vit_config, rng).eval()
    segment = make_segment(length=900)

    # Act: Map of head 1 and the full attention tensor.
    heat = cls_attention_map(model, segment, head=1)
    _, attention = vit_forward(
        model,
        segment.padded[None, :],
        np.array([900]),
        collect_attention=True,
    )

    # Assert: 50 patch values; with CLS -> CLS the row is a distribution.
    assert heat.shape == (50,)
    assert heat.sum() + attention[-1][0, 1, 0, 0] == pytest.approx(1.0, abs=1e-5)


def test_cls_attention_map_ignores_masked_patches(tiny_vit_config, rng, make_segment):
    """Test padded patches get zero attention when masking is on."""
    # Arrange: Masking ViT and a 600-sample segment.
    config = replace(tiny_vit_config, mask_padding=True)
    model = build_network("vit", config, rng)

    # Act: Head-mean map over all layers.
    heat = cls_attention_map(model, make_segment(length=600), layer="all", head=None)

    # Assert: Patches 20..49 are exactly zero.
    assert np.all(heat[20:] == 0.0)
    assert heat[:20].sum() > 0


def test_cls_attention_map_range_checks(tiny_vit_config, rng, make_segment):
    """Test out-of-range layers and heads are contract errors."""
    # Arrange: One-layer, two-head model.
    model = build_network("vit", tiny_vit_config, rng)
    segment = make_segment()

    # Act and Assert: Layer 1 and head 2 do not exist.
    with pytest.raises(EcgContractError, match="layer"):
        cls_attention_map(model, segment, layer=1)
    with pytest.raises(EcgContractError, match="head"):
        cls_attention_map(model, segment, head=2)


def test_cls_attention_map_needs_vit(tiny_resnet_config, rng, make_segment):
    """Test attention maps are only defined for the ViT."""
    # Arrange: A ResNet.
    model = build_network("resnet", tiny_resnet_config, rng)

    # Act and Assert: Rejected.
    with pytest.raises(EcgContractError, match="ViT"):
        cls_attention_map(model, make_segment())


def test_grad_cam_is_nonnegative(tiny_resnet_config, rng, make_segment):
    """Test Grad-CAM gives a nonnegative map over the final positions."""
    # Arrange: Tiny ResNet.
    model = build_network("resnet", tiny_resnet_config, rng).eval()

    # Act: Map for each class.
    maps = [grad_cam(model, make_segment(length=800), k) for k in range(3)]

    # Assert: Shape and sign; parameters keep no gradient.
    for heat in maps:
        assert heat.shape == (tiny_resnet_config.final_length,)
        assert np.all(heat >= 0.0)
    assert all(param.grad is None for param in model.parameters())


def test_grad_cam_zero_head_gives_zero_map(tiny_resnet_config, rng, make_segment):
    """Test a classifier with zero weights has no gradient and no map."""
    # Arrange: Zero the classifier and the dense head.
    model = build_network("resnet", tiny_resnet_config, rng).eval()
    model.classifier.weight.data[:] = 0.0
    model.head_dense.weight.data[:] = 0.0

    # Act: Map for class 0.
    heat = grad_cam(model, make_segment(), target_class=0)

    # Assert: All zeros.
    np.testing.assert_array_equal(heat, 0.0)


def test_explaining_leaves_parameters_unchanged(
    tiny_vit_config, tiny_resnet_config, rng, make_segment
):
    """Test attention maps and Grad-CAM do not modify the explained networks."""
    # Arrange: A ViT, a ResNet and snapshots of their state.
    vit = build_network("vit", tiny_vit_config, rng).eval()
    resnet = build_network("resnet", tiny_resnet_config, rng).eval()
    vit_before = vit.state_dict()
    resnet_before = resnet.state_dict()
    segment = make_segment(length=1100)

    # Act: Explain with every head and class.
    cls_attention_map(vit, segment, layer="all", head=None)
    for head in range(tiny_vit_config.n_heads):
        cls_attention_map(vit, segment, head=head)
    for target in range(3):
        grad_cam(resnet, segment, target)

    # Assert: Every parameter and buffer is bit-identical.
    for before, network in ((vit_before, vit), (resnet_before, resnet)):
        after = network.state_dict()
        assert after.keys() == before.keys()
        for name, values in before.items():
            np.testing.assert_array_equal(after[name], values, err_msg=name)


def test_grad_cam_keeps_caller_gradients(tiny_resnet_config, rng, make_segment):
    """Test gradients already on the ResNet survive a Grad-CAM call."""
    # Arrange: Give every parameter a known gradient.
    model = build_network("resnet", tiny_resnet_config, rng).eval()
    for param in model.parameters():
        param.grad = np.full_like(param.data, 0.5)

    # Act: Explain class 1.
    grad_cam(model, make_segment(), target_class=1)

    # Assert: The gradients are the ones set before the call.
    for param in model.parameters():
        np.testing.assert_array_equal(param.grad, 0.5)


def test_grad_cam_rejects_bad_target(tiny_resnet_config, rng, make_segment):
    """Test target classes outside [0, 3) are rejected."""
    # Arrange: Model.
    model = build_network("resnet", tiny_resnet_config, rng)

    # Act and Assert: Class 3.
    with pytest.raises(EcgContractError, match="target_class"):
        grad_cam(model, make_segment(), target_class=3)


def test_grad_cam_agrees_with_occlusion(rng):
    """Test Grad-CAM peaks where occluding the input hurts the score most."""
    # Arrange: A toy conv net with positive weights and bump-shaped inputs.
    kernel = Tensor(rng.uniform(0.1, 1.0, (5, 1, 3)), requires_grad=True)
    dense = Tensor(
        np.column_stack([rng.uniform(0.1, 1.0, 3), rng.uniform(-1.0, 1.0, (3, 2))]),
        requires_grad=True,
    )

    def forward(batch):
        activations = relu(conv1d(Tensor(batch[:, :, None]), kernel))
        return matmul(mean(activations, axis=1), dense), activations

    def score(batch):
        return forward(batch)[0].data[:, 0]

    axis = np.arange(80)
    centers = rng.integers(10, 70, size=10)
    batch = np.stack([np.exp(-0.5 * ((axis - c) / 3.0) ** 2) for c in centers])

    # Act: Grad-CAM and the score drop of occluding every 5-sample window.
    cams = grad_cam_maps(forward, batch, np.zeros(10, dtype=np.int64))
    baseline = score(batch)
    drops = np.empty_like(cams)
    for position in range(cams.shape[1]):
        occluded = batch.copy()
        occluded[:, position : position + 5] = 0.0
        drops[:, position] = baseline - score(occluded)

    # Assert: Peaks agree within three positions for at least 8 of 10 inputs.
    distance = np.abs(cams.argmax(axis=1) - drops.argmax(axis=1))
    assert cams.shape == (10, 76)
    assert (distance <= 3).sum() >= 8


def test_explain_segments_vit_bundles(tiny_vit_config, rng, make_segment):
    """Test one bundle per segment and head, each scaled into [0, 1]."""
    # Arrange: Three segments of different length.
    model = build_network("vit", tiny_vit_config, rng)
    segments = [make_segment(length=n, label="SB") for n in (400, 900, 1500)]

    # Act: Explain with known predictions.
    bundles = explain_segments(model, segments, predicted=np.array([1, 1, 0]))

    # Assert: Heads, ranges and predictions.
    assert len(bundles) == 2 * 3
    assert {bundle.source.head for bundle in bundles} == {0, 1}
    for bundle in bundles:
        assert bundle.resampled_map.shape == (1500,)
        assert bundle.resampled_map.min() >= 0.0
        assert bundle.resampled_map.max() <= 1.0
        assert bundle.raw_map.shape == (50,)
    assert [bundle.is_correct for bundle in bundles[:3]] == [True, True, False]


def test_explain_segments_head_mean_and_gradcam(
    tiny_vit_config, tiny_resnet_config, rng, make_segment
):
    """Test head averaging gives one bundle; ResNets give Grad-CAM bundles."""
    # Arrange: Both architectures and two segments.
    vit = build_network("vit", tiny_vit_config, rng)
    resnet = build_network("resnet", tiny_resnet_config, rng)
    segments = [make_segment(length=500), make_segment(length=1200)]

    # Act: Explain both.
    averaged = explain_segments(
        vit, segments, ExplainConfig(layer="all", head_reduction="mean")
    )
    cams = explain_segments(resnet, segments, ExplainConfig(batch_size=1))

    # Assert: Sources and counts.
    assert [bundle.source.name for bundle in averaged] == ["attention_lall_hmean"] * 2
    assert [bundle.source.kind for bundle in cams] == ["gradcam", "gradcam"]
    np.testing.assert_allclose(
        cams[0].resampled_signal[[0, -1]], segments[0].samples[[0, -1]]
    )


def test_explain_segments_rejects_cnn_lstm(tiny_cnn_lstm_config, rng, make_segment):
    """Test the CNN-LSTM baseline has no importance map."""
    # Arrange: A CNN-LSTM.
    model = build_network("cnn_lstm", tiny_cnn_lstm_config, rng)

    # Act and Assert: Rejected.
    with pytest.raises(EcgContractError, match="no importance map"):
        explain_segments(model, [make_segment()])


def test_explain_config_validation():
    """Test unknown reductions and layer names are rejected."""
    # Act and Assert: Two invalid options.
    with pytest.raises(EcgContractError, match="head_reduction"):
        ExplainConfig(head_reduction="max")
    with pytest.raises(EcgContractError, match="layer"):
        ExplainConfig(layer="last")


def test_average_single_bundle_is_identity():
    """Test the mean of one map is the map itself with zero signal spread."""
    # Arrange: One correct SR bundle.
    bundle = _bundle(np.linspace(0, 1, 1500), signal=np.ones(1500))

    # Act: Average.
    averaged = average_maps([bundle], "SR")

    # Assert: Same map, zero std.
    np.testing.assert_array_equal(averaged.mean_map, bundle.resampled_map)
    np.testing.assert_array_equal(averaged.std_signal, 0.0)
    assert averaged.n_segments == 1


def test_average_of_zero_and_one_maps_is_half():
    """Test averaging an all-zero and an all-one map gives one half."""
    # Act: Average two bundles.
    averaged = average_maps([_bundle(np.zeros(1500)), _bundle(np.ones(1500))], "SR")

    # Assert: 0.5 everywhere.
    np.testing.assert_allclose(averaged.mean_map, 0.5)


def test_average_matches_two_pass_formula(rng):
    """Test means and standard deviations against an explicit two-pass sum."""
    # Arrange: Twelve random correct bundles plus distractors.
    maps = rng.random((12, 1500))
    signals = rng.standard_normal((12, 1500))
    bundles = [_bundle(m, signal=s) for m, s in zip(maps, signals, strict=True)]
    bundles.append(_bundle(np.ones(1500), predicted="SB"))
    bundles.append(_bundle(np.ones(1500), label="AFIB", predicted="AFIB"))

    # Act: Average the correct SR bundles.
    averaged = average_maps(bundles, "SR", "correct")

    # Assert: Two-pass oracle.
    expected_mean = sum(maps) / 12
    centered = sum((s - signals.mean(axis=0)) ** 2 for s in signals) / 12
    assert averaged.n_segments == 12
    np.testing.assert_allclose(averaged.mean_map, expected_mean, atol=1e-9)
    np.testing.assert_allclose(averaged.std_signal, np.sqrt(centered), atol=1e-9)


def test_average_ignores_bundle_order(rng):
    """Test shuffling the bundles does not change the averaged map."""
    # Arrange: Ten correct and three misclassified SR bundles.
    bundles = [
        _bundle(rng.random(1500), signal=rng.standard_normal(1500))
        for _ in range(10)
    ]
    bundles += [_bundle(rng.random(1500), predicted="AFIB") for _ in range(3)]
    shuffled = [bundles[i] for i in rng.permutation(len(bundles))]

    # Act: Average both orders.
    first = average_maps(bundles, "SR", "correct")
    second = average_maps(shuffled, "SR", "correct")

    # Assert: Same map and signal statistics.
    assert first.n_segments == second.n_segments == 10
    np.testing.assert_allclose(second.mean_map, first.mean_map, atol=1e-12)
    np.testing.assert_allclose(second.mean_signal, first.mean_signal, atol=1e-12)
    np.testing.assert_allclose(second.std_signal, first.std_signal, atol=1e-12)


def test_average_empty_selection_is_none():
    """Test a selection without members returns None."""
    # Arrange: Only correct bundles.
    bundles = [_bundle(np.zeros(1500))]

    # Act and Assert: No misclassified SR, no SB at all.
    assert average_maps(bundles, "SR", "misclassified") is None
    assert average_maps(bundles, "SB") is None


def test_average_rejects_mixed_sources():
    """Test maps of different sources are never averaged together."""
    # Arrange: An attention and a Grad-CAM bundle.
    first = _bundle(np.zeros(1500))
    second = replace(first, source=MapSource("gradcam"))

    # Act and Assert: Mixing is rejected.
    with pytest.raises(EcgContractError, match="mix sources"):
        average_maps([first, second], "SR")


def test_export_and_load_averaged_maps(tmp_path, rng):
    """Test averaged maps survive a CSV round trip."""
    # Arrange: Correct SR and misclassified SB bundles.
    bundles = [
        _bundle(rng.random(1500), signal=rng.standard_normal(1500)),
        _bundle(rng.random(1500), label="SB", predicted="SR"),
    ]
    maps = average_all(bundles, predicates=("correct", "misclassified"))

    # Act: Export and load.
    path = export_averaged_maps(maps, tmp_path / "heatmaps.csv")
    loaded = load_averaged_maps(path)

    # Assert: Same keys and values.
    assert [(m.label, m.predicate) for m in loaded] == [
        ("SB", "misclassified"),
        ("SR", "correct"),
    ]
    assert loaded[1].source == ATTENTION
    np.testing.assert_allclose(loaded[1].mean_map, maps[1].mean_map, rtol=1e-8)
    np.testing.assert_allclose(loaded[1].mean_signal, maps[1].mean_signal, rtol=1e-8)


def test_load_averaged_maps_missing_file(tmp_path):
    """Test a missing heatmap file is a data error."""
    # Act and Assert: No file.
    with pytest.raises(EcgDataError) as err:
        load_averaged_maps(tmp_path / "absent.csv")
    assert err.value.error_id == "heatmaps"
