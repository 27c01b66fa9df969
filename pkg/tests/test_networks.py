"""Unit tests for the classifier networks and checkpoints."""

import json
from dataclasses import replace

import numpy as np
import pytest
from scipy import special

from ecg_xai.exceptions import EcgContractError, EcgDataError
from ecg_xai.networks import (
    CnnLstmConfig,
    ResNetConfig,
    TrainedModel,
    ViTConfig,
    build_network,
    cnn_lstm_forward,
    load_checkpoint,
    padding_mask,
    resnet_forward,
    save_checkpoint,
    vit_forward,
)
from ecg_xai.tensor import Tape


def test_default_vit_sequence_has_51_tokens():
    """Test 1500 samples in 30-sample patches give 50 patches plus CLS."""
    # Act: Default config.
    config = ViTConfig()

    # Assert: Shape arithmetic.
    assert config.n_patches == 50
    assert config.sequence_length == 51


@pytest.mark.parametrize("patch_size", [10, 30, 50])
def test_sequence_length_follows_patch_size(patch_size, random_batch, rng):
    """Test the attention maps have 1500 / p + 1 tokens."""
    # Arrange: A tiny ViT with the given patch size.
    config = ViTConfig(
        patch_size=patch_size, embed_dim=8, n_layers=1, n_heads=2, mlp_units=8
    )
    model = build_network("vit", config, rng).eval()
    batch, lengths = random_batch(2)

    # Act: Forward with attention collection.
    logits, attention = vit_forward(model, batch, lengths, collect_attention=True)

    # Assert: One (B, heads, S, S) array per layer.
    tokens = 1500 // patch_size + 1
    assert logits.shape == (2, 3)
    assert attention[0].shape == (2, 2, tokens, tokens)


def test_vit_attention_rows_and_probabilities(tiny_vit_config, random_batch, rng):
    """Test attention rows and softmax outputs are distributions."""
    # Arrange: Two-layer variant of the tiny ViT.
    config = replace(tiny_vit_config, n_layers=2)
    model = build_network("vit", config, rng).eval()
    batch, lengths = random_batch(3)

    # Act: Forward pass.
    logits, attention = vit_forward(model, batch, lengths, collect_attention=True)

    # Assert: Row sums of every layer and class probabilities.
    assert len(attention) == 2
    for weights in attention:
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)
    probs = special.softmax(logits.data.astype(np.float64), axis=1)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_padding_mask_for_600_samples(tiny_vit_config):
    """Test patches 20..49 are masked for a 600-sample beat; CLS never is."""
    # Act: Mask for one segment of length 600.
    mask = padding_mask(np.array([600]), tiny_vit_config)[0]

    # Assert: CLS and patches 0..19 kept, patches 20..49 hidden.
    assert mask.shape == (51,)
    assert mask[0]
    assert np.all(mask[1:21])
    assert not np.any(mask[21:])


def test_padding_mask_keeps_straddling_patch(tiny_vit_config):
    """Test a patch that holds any real sample stays visible."""
    # Act: Real part ends inside patch 20.
    mask = padding_mask(np.array([601]), tiny_vit_config)[0]

    # Assert: Patch 20 (token 21) kept, patch 21 hidden.
    assert mask[21]
    assert not mask[22]


def test_masked_patches_get_no_attention(tiny_vit_config, rng, make_segment):
    """Test fully padded patches receive zero attention in every layer and head."""
    # Arrange: Masking ViT with two layers and a 600-sample segment.
    config = replace(tiny_vit_config, n_layers=2, mask_padding=True)
    model = build_network("vit", config, rng).eval()
    segment = make_segment(length=600)

    # Act: Collect attention.
    _, attention = vit_forward(
        model,
        segment.padded[None, :],
        np.array([600]),
        collect_attention=True,
    )

    # Assert: Key columns of patches 20..49 are exactly zero everywhere.
    for weights in attention:
        assert np.all(weights[..., 21:] == 0.0)


def test_mask_is_a_no_op_on_full_length_segments(tiny_vit_config, rng, make_segment):
    """Test masked and unmasked ViTs agree when no patch is padding."""
    # Arrange: Two ViTs with the same parameters, one masking.
    unmasked = build_network("vit", tiny_vit_config, rng).eval()
    masked = build_network(
        "vit", replace(tiny_vit_config, mask_padding=True), rng
    ).eval()
    masked.load_state_dict(unmasked.state_dict())
    segment = make_segment(length=1500)
    lengths = np.array([1500])

    # Act: Logits of both.
    plain, _ = vit_forward(unmasked, segment.padded[None, :], lengths)
    with_mask, _ = vit_forward(masked, segment.padded[None, :], lengths)

    # Assert: Identical logits.
    np.testing.assert_allclose(with_mask.data, plain.data, rtol=0, atol=1e-12)


def test_mask_padding_needs_lengths(tiny_vit_config, rng, random_batch):
    """Test a masking ViT refuses to run without segment lengths."""
    # Arrange: Masking config.
    config = replace(tiny_vit_config, mask_padding=True)
    model = build_network("vit", config, rng)
    batch, _ = random_batch(1)

    # Act and Assert: Lengths are required.
    with pytest.raises(EcgContractError, match="lengths"):
        vit_forward(model, batch)


def test_vit_rejects_wrong_width(tiny_vit_config, rng):
    """Test a batch that is not 1500 wide is a contract error."""
    # Arrange: Model.
    model = build_network("vit", tiny_vit_config, rng)

    # Act and Assert: Width 1000.
    with pytest.raises(EcgContractError, match="1500"):
        vit_forward(model, np.zeros((1, 1000)))


def test_cls_gradient_reaches_patch_embedding(tiny_vit_config, rng, random_batch):
    """Test the classification loss back-propagates into the patch embedding."""
    # Arrange: Model in training mode.
    model = build_network("vit", tiny_vit_config, rng)
    batch, lengths = random_batch(2)

    # Act: Differentiate the sum of class-0 logits.
    with Tape() as tape:
        logits, _ = vit_forward(model, batch, lengths)
        tape.backward(logits[:, 0].sum())

    # Assert: Non-zero gradients on the embedding and CLS token.
    assert np.any(model.patch_embedding.weight.grad != 0)
    assert np.any(model.cls_token.grad != 0)


def test_resnet_activation_tap_shape(tiny_resnet_config, rng, random_batch):
    """Test the tap matches config-derived channels and length."""
    # Arrange: Tiny ResNet in eval mode.
    model = build_network("resnet", tiny_resnet_config, rng).eval()
    batch, _ = random_batch(2)

    # Act: Forward with the tap.
    logits, activations = resnet_forward(model, batch, collect_activations=True)

    # Assert: (B, final_length, final_channels).
    assert logits.shape == (2, 3)
    assert activations.shape == (
        2,
        tiny_resnet_config.final_length,
        tiny_resnet_config.final_channels,
    )


def test_resnet50_tap_arithmetic():
    """Test the standard widths give 2048 channels over 47 positions."""
    # Act: Default ResNet50 config.
    config = ResNetConfig()

    # Assert: 64 * 8 * 4 channels; 1500 -> 750 -> 375 -> 188 -> 94 -> 47.
    assert config.final_channels == 2048
    assert config.final_length == 47


def test_resnet_duplicated_rows_give_identical_logits(
    tiny_resnet_config, rng, random_batch
):
    """Test eval mode treats each row independently."""
    # Arrange: A batch with its first row repeated.
    model = build_network("resnet", tiny_resnet_config, rng).eval()
    batch, _ = random_batch(2)
    doubled = np.concatenate([batch, batch[:1]])

    # Act: Forward both batches.
    logits = resnet_forward(model, batch)[0].data
    doubled_logits = resnet_forward(model, doubled)[0].data

    # Assert: Duplicated rows agree with each other and with the original.
    np.testing.assert_allclose(
        doubled_logits[0], doubled_logits[2], rtol=1e-4, atol=1e-6
    )
    np.testing.assert_allclose(doubled_logits[:2], logits, rtol=1e-4, atol=1e-6)


def test_cnn_lstm_steps_and_logits(tiny_cnn_lstm_config, rng, random_batch):
    """Test 1500 samples give 749 LSTM steps and (B, 3) logits."""
    # Arrange: Tiny CNN-LSTM.
    model = build_network("cnn_lstm", tiny_cnn_lstm_config, rng).eval()
    batch, _ = random_batch(2)

    # Act: Forward twice.
    first = cnn_lstm_forward(model, batch).data
    second = cnn_lstm_forward(model, batch).data

    # Assert: Step arithmetic, shape and determinism.
    assert CnnLstmConfig().steps == 749
    assert first.shape == (2, 3)
    np.testing.assert_array_equal(first, second)


def test_permuting_batch_permutes_logits(tiny_vit_config, rng, random_batch):
    """Test a ViT in eval mode is equivariant to batch order."""
    # Arrange: Model and a batch.
    model = build_network("vit", tiny_vit_config, rng).eval()
    batch, lengths = random_batch(4)
    order = np.array([2, 0, 3, 1])

    # Act: Forward in both orders.
    logits = vit_forward(model, batch, lengths)[0].data
    permuted = vit_forward(model, batch[order], lengths[order])[0].data

    # Assert: Rows follow the permutation.
    np.testing.assert_allclose(permuted, logits[order], rtol=1e-5, atol=1e-5)


def test_same_seed_same_initialization(tiny_vit_config):
    """Test networks built from equal seeds have equal parameters."""
    # Act: Build twice with seed 3.
    first = build_network("vit", tiny_vit_config, np.random.default_rng(3))
    second = build_network("vit", tiny_vit_config, np.random.default_rng(3))

    # Assert: Identical state.
    for name, value in first.state_dict().items():
        np.testing.assert_array_equal(value, second.state_dict()[name])


def test_build_network_validates_config(tiny_vit_config, rng):
    """Test unknown architectures and mismatched configs are rejected."""
    # Act and Assert: Unknown name and wrong config type.
    with pytest.raises(EcgContractError, match="Unknown architecture"):
        build_network("mlp", tiny_vit_config, rng)
    with pytest.raises(EcgContractError, match="ResNetConfig"):
        build_network("resnet", tiny_vit_config, rng)


def test_vit_config_validation():
    """Test indivisible patch sizes and head counts are rejected."""
    # Act and Assert: 1500 is not divisible by 7; 16 not by 3.
    with pytest.raises(EcgContractError, match="patch_size"):
        ViTConfig(patch_size=7)
    with pytest.raises(EcgContractError, match="n_heads"):
        ViTConfig(n_heads=3)


def test_checkpoint_round_trip(tmp_path, tiny_resnet_config, rng, random_batch):
    """Test a saved model reloads with identical predictions."""
    # Arrange: A model with split and cache references.
    network = build_network("resnet", tiny_resnet_config, rng).eval()
    model = TrainedModel(
        architecture="resnet",
        config=tiny_resnet_config,
        network=network,
        normalization="zscore",
        split={"test": ["P1"]},
        segment_cache="segments.npz",
        best_epoch=4,
    )
    batch, _ = random_batch(2)

    # Act: Save and load.
    save_checkpoint(model, tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt")

    # Assert: Metadata and logits survive.
    assert loaded.config == tiny_resnet_config
    assert loaded.normalization == "zscore"
    assert loaded.split == {"test": ["P1"]}
    assert loaded.best_epoch == 4
    assert loaded.config_hash == model.config_hash
    np.testing.assert_array_equal(
        resnet_forward(loaded.network, batch)[0].data,
        resnet_forward(network, batch)[0].data,
    )


def test_load_checkpoint_missing_directory(tmp_path):
    """Test loading from an empty directory is a data error."""
    # Act and Assert: No files.
    with pytest.raises(EcgDataError, match="No checkpoint") as err:
        load_checkpoint(tmp_path)
    assert err.value.error_id == "checkpoint"


def test_load_checkpoint_detects_tampered_config(tmp_path, tiny_vit_config, rng):
    """Test a manifest whose config no longer matches its hash is rejected."""
    # Arrange: Save, then edit the config in the manifest.
    network = build_network("vit", tiny_vit_config, rng)
    save_checkpoint(TrainedModel("vit", tiny_vit_config, network), tmp_path)
    manifest_path = tmp_path / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["config"]["mlp_dropout"] = 0.5
    manifest_path.write_text(json.dumps(manifest))

    # Act and Assert: Hash mismatch.
    with pytest.raises(EcgDataError, match="hash"):
        load_checkpoint(tmp_path)
