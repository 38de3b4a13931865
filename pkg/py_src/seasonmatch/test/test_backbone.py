"""
Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
# pylint: disable=missing-docstring
import numpy as np
import pytest
import torch

from seasonmatch.backbone import (
    build_model,
    desk_spec,
    embed,
    embed_batch,
    embedding_model,
    extract_batch,
    extract_features,
    identity_spec,
    load_weights,
    read_descriptors,
    read_weights,
    save_weights,
    unflatten,
    vgg16_spec,
    write_descriptors,
)

DESK = (32, 64, 3)


def _images(n, size=DESK, seed=0):
    return np.random.default_rng(seed).random((n,) + size, dtype=np.float32)


@pytest.fixture(scope="module")
def desk_model():
    return build_model("desk", DESK, tap="pool4", seed=7)


def _identity(size=(4, 6, 3), head_dim=8):
    return embedding_model(identity_spec(size), head_dim=head_dim, seed=3)


def _set_head(m, weight, bias):
    with torch.no_grad():
        m.head.weight.copy_(torch.as_tensor(weight, dtype=torch.float32))
        m.head.bias.copy_(torch.as_tensor(bias, dtype=torch.float32))


# ---------------------------------------------------------------- shapes


def test_vgg16_pool4_dimension():
    spec = vgg16_spec((224, 224, 3))
    assert spec.shapes()["pool4"] == (512, 14, 14)
    assert spec.tap_dim("pool4") == 100352
    assert spec.tap_dim("fc7") == 4096
    assert spec.taps()[0] == "input"
    assert spec.taps()[-1] == "fc7"


def test_desk_shapes_and_unknown_tap():
    spec = desk_spec(DESK)
    assert spec.shapes()["pool4"] == (64, 2, 4)
    assert spec.tap_dim("conv1") == 16 * 32 * 64
    with pytest.raises(KeyError):
        spec.tap_dim("pool9")
    with pytest.raises(ValueError):
        desk_spec((8, 8, 3))


def test_build_model_rejects_unknown_backbone():
    with pytest.raises(ValueError, match="unknown backbone"):
        build_model("resnet", DESK)


# ---------------------------------------------------------------- extraction


def test_identity_tap_is_flattened_image():
    m = _identity()
    image = _images(1, (4, 6, 3))[0]
    d = extract_features(m, image, "input")
    assert d.source == "input"
    assert d.dim == 72
    np.testing.assert_array_equal(d.values, image.transpose(2, 0, 1).reshape(-1))


def test_batch_matches_single(desk_model):
    images = _images(5, seed=1)
    batch = extract_batch(desk_model, images, "pool4", batch_size=2)
    assert batch.shape == (5, 512)
    assert batch.dtype == np.float32
    for i, image in enumerate(images):
        single = extract_features(desk_model, image, "pool4").values
        np.testing.assert_allclose(batch[i], single, rtol=0, atol=1e-6)


def test_tap_activations_are_post_relu(desk_model):
    values = extract_batch(desk_model, _images(3, seed=2), "conv2")
    assert values.min() >= 0.0


def test_deep_taps_keep_the_input_scale(desk_model):
    images = _images(8, seed=11)
    pool4 = extract_batch(desk_model, images, "pool4").astype(np.float64)
    assert 0.05 < float(np.mean(pool4**2)) < 50.0
    embedded = embed_batch(desk_model, images).astype(np.float64)
    assert float(np.sqrt(np.mean(embedded**2))) > 0.05


def test_unflatten_restores_activation_shape(desk_model):
    values = extract_features(desk_model, _images(1, seed=3)[0], "pool4").values
    tensor = unflatten(desk_model, values, "pool4")
    assert tensor.shape == (64, 2, 4)
    np.testing.assert_array_equal(tensor.reshape(-1), values)


def test_extraction_errors(desk_model):
    with pytest.raises(KeyError):
        extract_features(desk_model, _images(1)[0], "fc9")
    with pytest.raises(ValueError, match="does not match model input"):
        extract_batch(desk_model, _images(2, (16, 16, 3)))


# ---------------------------------------------------------------- head


def test_zero_head_gives_zero_embedding():
    m = _identity()
    _set_head(m, np.zeros((8, 72)), np.zeros(8))
    d = embed(m, _images(1, (4, 6, 3))[0])
    assert d.source == "head128"
    np.testing.assert_array_equal(d.values, np.zeros(8, dtype=np.float32))


def test_slice_head_copies_leading_features():
    m = _identity()
    _set_head(m, np.eye(8, 72), np.zeros(8))
    image = _images(1, (4, 6, 3), seed=4)[0]
    features = extract_features(m, image).values
    np.testing.assert_allclose(embed(m, image).values, features[:8], atol=1e-7)


def test_embedding_matches_matrix_vector_oracle(desk_model):
    images = _images(3, seed=5)
    features = extract_batch(desk_model, images).astype(np.float64)
    weight = desk_model.head.weight.detach().numpy().astype(np.float64)
    bias = desk_model.head.bias.detach().numpy().astype(np.float64)
    expected = features @ weight.T + bias
    got = embed_batch(desk_model, images)
    assert got.shape == (3, 128)
    np.testing.assert_allclose(got, expected, rtol=1e-5, atol=1e-5)


def test_head_is_affine_in_features():
    m = _identity()
    x1, x2 = _images(2, (4, 6, 3), seed=6)
    _set_head(m, m.head.weight.detach().numpy(), np.linspace(-1.0, 1.0, 8))
    bias = np.linspace(-1.0, 1.0, 8)
    lhs = embed(m, x1 + x2).values
    rhs = embed(m, x1).values + embed(m, x2).values - bias
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)
    lhs = embed(m, 2.5 * x1).values - bias
    np.testing.assert_allclose(lhs, 2.5 * (embed(m, x1).values - bias), atol=1e-5)


def test_head_initialisation_is_seeded_and_bounded():
    a = embedding_model(desk_spec(DESK), tap="pool4", seed=9)
    b = embedding_model(desk_spec(DESK), tap="pool4", seed=9)
    torch.testing.assert_close(a.head.weight, b.head.weight)
    assert float(a.head.weight.abs().max()) <= 1.0 / np.sqrt(512) + 1e-7
    assert float(a.head.bias.abs().max()) == 0.0


def test_uninitialised_head_refuses_to_embed():
    m = embedding_model(identity_spec((4, 6, 3)), init_head=False)
    with pytest.raises(RuntimeError):
        embed(m, _images(1, (4, 6, 3))[0])
    # the raw tap works without a head
    assert extract_features(m, _images(1, (4, 6, 3))[0]).dim == 72


def test_fine_tune_mask(desk_model):
    desk_model.set_fine_tune(False)
    mask = desk_model.trainable_mask()
    assert mask["head.weight"] and mask["head.bias"]
    assert not any(v for k, v in mask.items() if k.startswith("backbone."))
    desk_model.set_fine_tune(True)
    assert all(desk_model.trainable_mask().values())


def test_subtract_mean_shifts_input():
    m = embedding_model(identity_spec((4, 6, 3)), head_dim=8, subtract_mean=True)
    m.input_mean.copy_(torch.tensor([0.1, 0.2, 0.3]).view(3, 1, 1))
    image = _images(1, (4, 6, 3), seed=8)[0]
    shifted = image - np.array([0.1, 0.2, 0.3], dtype=np.float32)
    np.testing.assert_allclose(
        extract_features(m, image).values, shifted.transpose(2, 0, 1).reshape(-1), atol=1e-7
    )


# ---------------------------------------------------------------- weight files


def test_weights_round_trip(tmp_path, desk_model):
    path = save_weights(desk_model, tmp_path / "model.smw")
    other = build_model("desk", DESK, tap="pool4", seed=99)
    assert other.backbone_checksum() != desk_model.backbone_checksum()
    load_weights(other, path)
    assert other.backbone_checksum() == desk_model.backbone_checksum()
    images = _images(2, seed=10)
    np.testing.assert_array_equal(embed_batch(other, images), embed_batch(desk_model, images))


def test_weights_shape_mismatch_names_layer(tmp_path, desk_model):
    path = save_weights(desk_model, tmp_path / "model.smw")
    narrow = build_model("desk", DESK, tap="pool4", head_dim=16)
    with pytest.raises(ValueError, match="head.weight"):
        load_weights(narrow, path)


def test_weights_checksum_detects_damage(tmp_path, desk_model):
    path = save_weights(desk_model, tmp_path / "model.smw")
    data = path.read_bytes()

    (tmp_path / "short.smw").write_bytes(data[:-10])
    with pytest.raises(ValueError, match="checksum mismatch"):
        read_weights(tmp_path / "short.smw")

    flipped = bytearray(data)
    flipped[100] ^= 0xFF
    (tmp_path / "flip.smw").write_bytes(bytes(flipped))
    with pytest.raises(ValueError, match="checksum mismatch"):
        read_weights(tmp_path / "flip.smw")

    (tmp_path / "tiny.smw").write_bytes(b"SM")
    with pytest.raises(ValueError, match="checksum mismatch"):
        read_weights(tmp_path / "tiny.smw")

    with pytest.raises(FileNotFoundError):
        read_weights(tmp_path / "missing.smw")


def test_loading_a_head_marks_model_initialised(tmp_path):
    source = build_model("desk", DESK, seed=1)
    path = save_weights(source, tmp_path / "full.smw")
    records = read_weights(path)
    assert "head.weight" in records and "input_mean" in records

    target = embedding_model(desk_spec(DESK), tap="pool4", init_head=False)
    load_weights(target, path, strict=False)
    assert target.initialized


def test_descriptor_file_round_trip(tmp_path):
    values = np.random.default_rng(0).normal(size=(7, 12)).astype(np.float32)
    path = write_descriptors(tmp_path / "winter.smd", values)
    np.testing.assert_array_equal(read_descriptors(path), values)

    data = path.read_bytes()
    (tmp_path / "cut.smd").write_bytes(data[:-4])
    with pytest.raises(ValueError):
        read_descriptors(tmp_path / "cut.smd")
