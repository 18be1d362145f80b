import dataclasses

import numpy as np
import pytest
import torch

from nettower import (CHECKPOINT_VERSION, InputShapeError, ModelConfig, ReIDNet, SEResNet50Backbone,
                      load_checkpoint, model_from_checkpoint, save_checkpoint, to_input_tensor,
                      validate_model_config)


def test_toy_shape_contract_224():
    torch.manual_seed(0)
    model = ReIDNet(ModelConfig(backbone='toy', input_size=224, embed_dim=32, dve_dim=64), num_classes=5)
    model.eval()
    x = torch.randn(2, 3, 224, 224)
    out = model(x)
    assert out.dve.shape == (2, 64, 56, 56)
    assert out.embedding.shape == (2, 32)
    assert out.id_logits.shape == (2, 5)
    assert out.lr_logit.shape == (2, 1)
    s5 = model.backbone.from_stage3(model.stage3_features(x))
    assert s5.shape[2:] == (28, 28)


def test_seresnet_shape_contract_224():
    backbone = SEResNet50Backbone(pretrained=False)
    backbone.eval()
    with torch.no_grad():
        s3 = backbone.to_stage3(torch.randn(1, 3, 224, 224))
        s5 = backbone.from_stage3(s3)
    assert s3.shape == (1, 512, 56, 56)
    assert s5.shape == (1, 2048, 28, 28)


def test_dve_descriptors_unit_norm(tiny_config):
    model = ReIDNet(tiny_config, num_classes=3).eval()
    out = model(torch.randn(4, 3, 32, 32))
    norms = out.dve.norm(dim=1)
    assert torch.allclose(norms, torch.ones_like(norms), atol=1e-5)
    assert out.id_logits.shape == (4, 3)


def test_wrong_input_size_rejected(tiny_config):
    model = ReIDNet(tiny_config, num_classes=3)
    with pytest.raises(InputShapeError):
        model(torch.randn(1, 3, 40, 40))
    with pytest.raises(InputShapeError):
        model(torch.randn(1, 1, 32, 32))


def test_invalid_config():
    ok, message = validate_model_config(ModelConfig(input_size=100))
    assert not ok and '8' in message
    with pytest.raises(ValueError):
        ReIDNet(ModelConfig(backbone='vgg'), num_classes=3)
    with pytest.raises(ValueError):
        ReIDNet(ModelConfig(), num_classes=1)


def _step(model, x):
    optimizer = torch.optim.SGD([p for p in model.parameters() if p.requires_grad], lr=0.1)
    out = model(x)
    loss = out.id_logits.pow(2).sum() + out.lr_logit.pow(2).sum() + out.dve[:, 0].pow(2).sum()
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()


def test_frozen_backbone_unchanged(tiny_config):
    torch.manual_seed(0)
    model = ReIDNet(tiny_config, num_classes=3)
    model.train()
    model.freeze_backbone(True)
    before = {k: v.clone() for k, v in model.backbone.state_dict().items()}
    head_before = model.id_classifier.weight.clone()
    _step(model, torch.randn(4, 3, 32, 32))
    after = model.backbone.state_dict()
    for key, value in before.items():
        assert torch.equal(value, after[key]), key
    assert not torch.equal(head_before, model.id_classifier.weight)


def test_unfreeze_resumes_backbone_training(tiny_config):
    torch.manual_seed(0)
    model = ReIDNet(tiny_config, num_classes=3)
    model.train()
    model.freeze_backbone(True)
    _step(model, torch.randn(4, 3, 32, 32))
    model.freeze_backbone(False)
    assert model.backbone.training
    weight = model.backbone.stem[0].weight.clone()
    _step(model, torch.randn(4, 3, 32, 32))
    assert not torch.equal(weight, model.backbone.stem[0].weight)


def test_embed_eval_concatenates_flip(tiny_config):
    torch.manual_seed(0)
    model = ReIDNet(tiny_config, num_classes=3)
    x = torch.randn(2, 3, 32, 32)
    vectors = model.embed_eval(x)
    assert vectors.shape == (2, 2 * tiny_config.embed_dim)
    assert torch.equal(vectors, model.embed_eval(x))
    symmetric = x + torch.flip(x, dims=[3])
    v = model.embed_eval(symmetric)
    assert torch.allclose(v[:, :16], v[:, 16:], atol=1e-6)


def test_to_input_tensor_normalizes():
    config = ModelConfig(mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))
    image = np.zeros((4, 4, 3), dtype=np.uint8)
    image[..., 0] = 255
    tensor = to_input_tensor([image], config)
    assert tensor.shape == (1, 3, 4, 4)
    assert torch.all(tensor[0, 0] == 1.0)
    assert torch.all(tensor[0, 1] == -1.0)


def test_checkpoint_round_trip(tmp_path, tiny_config):
    torch.manual_seed(0)
    model = ReIDNet(tiny_config, num_classes=3).eval()
    path = str(tmp_path / 'ckpt' / 'model.pt')
    save_checkpoint(model, path, {'a': 0, 'b': 1, 'c': 2}, {'epoch': 4})
    restored, payload = model_from_checkpoint(path)
    assert payload['epoch'] == 4
    assert payload['entity_map'] == {'a': 0, 'b': 1, 'c': 2}
    assert restored.config == dataclasses.replace(tiny_config, pretrained=False)
    x = torch.randn(2, 3, 32, 32)
    assert torch.equal(model.embed_eval(x), restored.embed_eval(x))
    assert [p.name for p in (tmp_path / 'ckpt').iterdir()] == ['model.pt']


def test_checkpoint_newer_version_rejected(tmp_path, tiny_config):
    model = ReIDNet(tiny_config, num_classes=3)
    path = str(tmp_path / 'model.pt')
    save_checkpoint(model, path, {}, {'format_version': CHECKPOINT_VERSION + 1})
    with pytest.raises(ValueError):
        load_checkpoint(path)
