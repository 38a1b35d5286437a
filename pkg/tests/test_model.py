import zipfile

import numpy as np
import pytest
import torch

from genretag.errors import ConfigMismatch, CorruptCheckpoint, InvalidConfig, ShapeMismatch
from genretag.losses import cross_entropy
from genretag.model import (
    HEAD_MODULES,
    ModelConfig,
    build_model,
    checkpoint_from_network,
    forward_batch,
    freeze_feature_layers,
    load_checkpoint,
    network_from_checkpoint,
    save_checkpoint,
    trainable_parameters,
)

SMALL = ModelConfig(
    n_mels=24,
    n_classes=10,
    embedding_dim=32,
    timbral_heights=(5, 12),
    timbral_width=3,
    temporal_widths=(4, 8),
    front_channels=4,
    backend_channels=8,
    backend_kernel=3,
    backend_layers=2,
)


def random_input(config=SMALL, batch=3, frames=40, seed=0):
    rng = np.random.default_rng(seed)
    return torch.tensor(rng.standard_normal((batch, config.n_mels, frames)), dtype=torch.float32)


def state_bytes(net):
    return {k: v.detach().numpy().tobytes() for k, v in net.state_dict().items()}


class TestConfig:
    def test_defaults_match_the_architecture_contract(self):
        cfg = ModelConfig()
        assert cfg.n_mels == 96 and cfg.n_classes == 10 and cfg.embedding_dim == 512
        assert cfg.timbral_heights == (38, 86) and cfg.timbral_width == 7
        assert cfg.temporal_widths == (32, 64, 128)
        cfg.validate()

    def test_timbral_height_above_bands_rejected(self):
        with pytest.raises(InvalidConfig):
            ModelConfig(timbral_heights=(38, 100)).validate()

    def test_other_invalid_values(self):
        with pytest.raises(InvalidConfig):
            ModelConfig(n_classes=1).validate()
        with pytest.raises(InvalidConfig):
            ModelConfig(front_channels=0).validate()
        with pytest.raises(InvalidConfig):
            ModelConfig(temporal_widths=()).validate()

    def test_build_validates(self):
        with pytest.raises(InvalidConfig):
            build_model(ModelConfig(timbral_heights=(200,)))


class TestForward:
    def test_default_config_shapes(self):
        net = build_model(ModelConfig(), seed=0)
        x = random_input(ModelConfig(), batch=1, frames=624)
        emb, probs = net(x)
        assert emb.shape == (1, 512) and probs.shape == (1, 10)
        assert torch.isfinite(emb).all()

    def test_probability_simplex(self):
        net = build_model(SMALL, seed=0)
        _, probs = net(random_input())
        assert torch.all(probs >= 0)
        assert torch.allclose(probs.sum(dim=1), torch.ones(3), atol=1e-5)

    def test_duplicated_rows_identical_outputs(self):
        net = build_model(SMALL, seed=0)
        x = random_input(batch=1)
        doubled = torch.cat([x, x], dim=0)
        emb, probs = net(doubled)
        assert torch.equal(emb[0], emb[1])
        assert torch.equal(probs[0], probs[1])

    def test_zero_batch_finite_on_simplex(self):
        net = build_model(SMALL, seed=0)
        emb, probs = net(torch.zeros((2, SMALL.n_mels, 30)))
        assert torch.isfinite(emb).all()
        assert torch.allclose(probs.sum(dim=1), torch.ones(2), atol=1e-5)

    def test_shape_mismatch(self):
        net = build_model(SMALL, seed=0)
        with pytest.raises(ShapeMismatch):
            net(torch.zeros((2, SMALL.n_mels + 1, 30)))
        with pytest.raises(ShapeMismatch):
            net(torch.zeros((SMALL.n_mels, 30)))

    def test_front_end_collapses_frequency(self):
        net = build_model(SMALL, seed=0)
        out = net.front_end(random_input(batch=2, frames=37))
        assert out.shape == (2, SMALL.front_channels * 4, 37)


class TestDeterminism:
    def test_equal_seed_bit_identical_params(self):
        a, b = build_model(SMALL, seed=5), build_model(SMALL, seed=5)
        assert state_bytes(a) == state_bytes(b)

    def test_different_seed_differs(self):
        a, b = build_model(SMALL, seed=5), build_model(SMALL, seed=6)
        assert state_bytes(a) != state_bytes(b)

    def test_rebuild_same_shapes_and_counts(self):
        a, b = build_model(SMALL, seed=1), build_model(SMALL, seed=2)
        sa, sb = a.state_dict(), b.state_dict()
        assert list(sa) == list(sb)
        assert [tuple(v.shape) for v in sa.values()] == [tuple(v.shape) for v in sb.values()]


class TestGradientFlow:
    def test_every_parameter_receives_gradient(self):
        net = build_model(SMALL, seed=3)
        got_grad = {name: False for name, _ in net.named_parameters()}
        for trial in range(3):
            net.zero_grad()
            x = random_input(batch=4, seed=trial)
            labels = torch.tensor([trial % 10, 1, 2, 3])
            _, probs = net(x)
            cross_entropy(probs, labels).backward()
            for name, p in net.named_parameters():
                if p.grad is not None and torch.any(p.grad != 0):
                    got_grad[name] = True
        missing = [name for name, ok in got_grad.items() if not ok]
        assert not missing, f"no gradient reached: {missing}"


class TestFreeze:
    def test_frozen_params_unchanged_after_steps(self):
        net = build_model(SMALL, seed=0)
        before = state_bytes(net)
        freeze_feature_layers(net)
        opt = torch.optim.Adam(trainable_parameters(net), lr=1e-2)
        for step in range(10):
            x = random_input(batch=4, seed=step)
            _, probs = net(x)
            loss = cross_entropy(probs, torch.tensor([0, 1, 2, 3]))
            opt.zero_grad()
            loss.backward()
            opt.step()
        after = state_bytes(net)
        for name in before:
            module = name.split(".", 1)[0]
            if module in HEAD_MODULES:
                assert before[name] != after[name], f"head param {name} never moved"
            else:
                assert before[name] == after[name], f"frozen param {name} changed"

    def test_freeze_idempotent(self):
        net = build_model(SMALL, seed=0)
        freeze_feature_layers(net)
        flags = {n: p.requires_grad for n, p in net.named_parameters()}
        freeze_feature_layers(net)
        assert flags == {n: p.requires_grad for n, p in net.named_parameters()}

    def test_only_head_trainable(self):
        net = freeze_feature_layers(build_model(SMALL, seed=0))
        trainable = {n for n, p in net.named_parameters() if p.requires_grad}
        assert trainable == {
            n for n, _ in net.named_parameters() if n.split(".", 1)[0] in HEAD_MODULES
        }


class TestCheckpoint:
    def test_roundtrip_forward_exact(self, tmp_path):
        net = build_model(SMALL, seed=9)
        path = save_checkpoint(net, tmp_path / "m.ckpt", meta={"regime": "e2e-real", "epoch": 3})
        loaded = load_checkpoint(path)
        assert loaded.config == SMALL
        assert loaded.meta["epoch"] == 3
        net2 = network_from_checkpoint(loaded)
        x = random_input(batch=2)
        emb1, probs1 = net(x)
        emb2, probs2 = net2(x)
        assert torch.equal(emb1, emb2) and torch.equal(probs1, probs2)

    def test_roundtrip_param_bits(self, tmp_path):
        net = build_model(SMALL, seed=4)
        path = save_checkpoint(net, tmp_path / "m.ckpt")
        loaded = load_checkpoint(path)
        for name, tensor in net.state_dict().items():
            assert np.array_equal(loaded.params[name], tensor.numpy())

    def test_truncated_file_corrupt(self, tmp_path):
        net = build_model(SMALL, seed=0)
        path = save_checkpoint(net, tmp_path / "m.ckpt")
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(path)

    def test_garbage_file_corrupt(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a zip at all")
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(path)

    def test_missing_file_corrupt(self, tmp_path):
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "none.ckpt")

    def test_missing_blob_corrupt(self, tmp_path):
        net = build_model(SMALL, seed=0)
        src = save_checkpoint(net, tmp_path / "m.ckpt")
        dst = tmp_path / "m2.ckpt"
        with zipfile.ZipFile(src) as zin, zipfile.ZipFile(dst, "w") as zout:
            for item in zin.namelist()[:-1]:
                zout.writestr(item, zin.read(item))
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(dst)

    def test_class_count_mismatch(self, tmp_path):
        five_way = ModelConfig(
            n_mels=24,
            n_classes=5,
            embedding_dim=32,
            timbral_heights=(5, 12),
            timbral_width=3,
            temporal_widths=(4, 8),
            front_channels=4,
            backend_channels=8,
            backend_kernel=3,
            backend_layers=2,
        )
        path = save_checkpoint(build_model(five_way, seed=0), tmp_path / "five.ckpt")
        with pytest.raises(ConfigMismatch):
            load_checkpoint(path, expect_config=SMALL)

    def test_forward_batch_helper(self):
        net = build_model(SMALL, seed=0)
        emb, probs = forward_batch(net, np.zeros((2, SMALL.n_mels, 30), dtype=np.float32))
        assert emb.shape == (2, 32) and probs.shape == (2, 10)

    def test_checkpoint_from_network_copies(self):
        net = build_model(SMALL, seed=0)
        ckpt = checkpoint_from_network(net)
        name = next(iter(ckpt.params))
        ckpt.params[name][...] = 123.0
        assert not np.allclose(net.state_dict()[name].numpy(), 123.0)
