from dataclasses import replace

import numpy as np
import pytest
import torch

from checkpoint import load_checkpoint, read_manifest, save_checkpoint
from data import SceneGenConfig, build_protocol, generate_dataset, step_view
from errors import CheckpointMismatchError, ConfigError, FormatError, InputError, ProtocolError, StateError
from model import (DEEP, SHALLOW, ModelConfig, add_step, attention_ops, count_flops, count_trainable,
                   decoder_flops, head_param_count, init_model, parameter_checksum, prompt_param_count)
from training import MatchWeights, TrainHyper, train_task


def _images(n, size=(32, 32), seed=0):
    return np.random.default_rng(seed).random((n,) + size + (3,)).astype(np.float32)


class TestConfig:
    def test_default_prompt_rule(self):
        cfg = ModelConfig()
        assert cfg.num_prompts(1, 4) == 10
        assert cfg.num_prompts(2, 25) == 25

    def test_prompt_overrides(self):
        cfg = ModelConfig(base_prompts=7, step_prompts=3)
        assert cfg.num_prompts(1, 100) == 7
        assert cfg.num_prompts(4, 100) == 3

    @pytest.mark.parametrize('kwargs', [
        {'image_size': (30, 32)}, {'embed_dim': 10, 'num_heads': 4}, {'prompt_mode': 'medium'},
        {'masked_attention': True}, {'min_prompts': 0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            ModelConfig(**kwargs).validate()


class TestForward:
    def test_output_shapes(self, tiny_model, tiny_model_config):
        out = tiny_model.forward_step(_images(2), 1)
        n = tiny_model.num_prompts(1)
        assert out.class_logits.shape == (2, n, 4)
        assert out.mask_logits.shape == (2, n) + tiny_model_config.mask_resolution
        assert out.decoder_embeddings.shape == (2, n, tiny_model_config.embed_dim)
        assert out.aux == []

    def test_aux_outputs(self, tiny_model):
        out = tiny_model.forward_step(_images(1), 1, with_aux=True)
        assert len(out.aux) == tiny_model.cfg.num_layers - 1

    def test_tensor_and_array_inputs_agree(self, tiny_model):
        images = _images(2)
        a = tiny_model.forward_step(images, 1).class_logits
        b = tiny_model.forward_step(torch.from_numpy(images).permute(0, 3, 1, 2), 1).class_logits
        assert torch.equal(a, b)

    def test_wrong_image_size(self, tiny_model):
        with pytest.raises(InputError):
            tiny_model.forward_step(_images(1, size=(16, 16)), 1)

    def test_missing_step(self, tiny_model):
        with pytest.raises(StateError):
            tiny_model.forward_step(_images(1), 2)
        with pytest.raises(StateError):
            tiny_model.apply_heads(torch.zeros(1, 3, 8), [1, 2])

    def test_forward_all_matches_single_steps(self, tiny_model, tiny_protocol):
        add_step(tiny_model, tiny_protocol.classes(2), seed=1)
        images = _images(3)
        outs = tiny_model.forward_all(images)
        for k, out in enumerate(outs, 1):
            single = tiny_model.forward_step(images, k)
            assert torch.allclose(out.class_logits, single.class_logits, atol=1e-6)

    def test_zero_image_snapshot(self, tiny_model, golden):
        out = tiny_model.forward_step(np.zeros((32, 32, 3), dtype=np.float32), 1)
        assert torch.isfinite(out.class_logits).all()
        golden('zero_image_forward', {
            'class_logits_sum': round(float(out.class_logits.sum()), 3),
            'mask_logits_sum': round(float(out.mask_logits.sum()), 3),
        })

    def test_shallow_equals_deep_with_one_layer(self, tiny_model_config, tiny_catalog, tiny_protocol):
        one_layer = replace(tiny_model_config, num_layers=1)
        shallow = init_model(replace(one_layer, prompt_mode=SHALLOW), tiny_catalog, tiny_protocol, seed=0).double()
        deep = init_model(replace(one_layer, prompt_mode=DEEP), tiny_catalog, tiny_protocol, seed=5).double()
        assert len(deep.prompt_sets[0].blocks) == len(shallow.prompt_sets[0].blocks) == 1
        deep.load_state_dict(shallow.state_dict())
        images = _images(2).astype(np.float64)
        a, b = shallow.forward_step(images, 1), deep.forward_step(images, 1)
        assert torch.allclose(a.class_logits, b.class_logits, rtol=0, atol=1e-12)
        assert torch.allclose(a.mask_logits, b.mask_logits, rtol=0, atol=1e-12)


class TestSteps:
    def test_add_step_freezes_previous_groups(self, tiny_model, tiny_protocol):
        add_step(tiny_model, tiny_protocol.classes(2), seed=1)
        mask = tiny_model.frozen_mask
        assert mask['prompts.2'] is False and mask['head.2'] is False
        assert all(frozen for name, frozen in mask.items() if name not in ('prompts.2', 'head.2'))

    def test_new_step_follows_model_device(self, tiny_model, tiny_protocol):
        tiny_model.to(torch.device('meta'))
        add_step(tiny_model, tiny_protocol.classes(2), seed=1)
        assert {p.device.type for p in tiny_model.parameters()} == {'meta'}

    def test_add_step_without_freeze(self, tiny_model, tiny_protocol):
        add_step(tiny_model, tiny_protocol.classes(2), seed=1, freeze=False)
        assert not any(tiny_model.frozen_mask.values())

    def test_class_overlap_rejected(self, tiny_model, tiny_protocol):
        with pytest.raises(ProtocolError):
            add_step(tiny_model, tiny_protocol.classes(1)[:1], seed=1)

    def test_unknown_classes_rejected(self, tiny_model_config, tiny_catalog):
        bigger = build_protocol(tiny_catalog, 6, 1)
        with pytest.raises(ProtocolError):
            init_model(tiny_model_config, replace(tiny_catalog, classes=tiny_catalog.classes[:5]), bigger, 0)

    def test_same_seed_same_weights(self, tiny_model_config, tiny_catalog, tiny_protocol):
        a = init_model(tiny_model_config, tiny_catalog, tiny_protocol, seed=3)
        b = init_model(tiny_model_config, tiny_catalog, tiny_protocol, seed=3)
        assert parameter_checksum(a) == parameter_checksum(b)

    def test_freeze_invariance_after_training(self, tiny_model_config, tiny_catalog):
        scene = SceneGenConfig(image_size=(32, 32), num_thing_classes=4, num_stuff_classes=2, seed=1)
        dataset = generate_dataset(scene, 16)
        protocol = build_protocol(tiny_catalog, 2, 2)
        state = init_model(tiny_model_config, tiny_catalog, protocol, seed=0)
        hyper = TrainHyper(iters=2, batch_size=2)
        train_task(state, step_view(dataset, protocol, 1), 1, hyper, MatchWeights())
        images = _images(20, seed=5)
        with torch.no_grad():
            before = state.forward_step(images, 1)
        checksum = parameter_checksum(state, ['backbone', 'pixel_decoder', 'transformer_decoder',
                                              'prompts.1', 'head.1'])
        for t in (2, 3):
            add_step(state, protocol.classes(t), seed=t)
            train_task(state, step_view(dataset, protocol, t), t, TrainHyper(iters=3, batch_size=2),
                       MatchWeights())
        with torch.no_grad():
            after = state.forward_step(images, 1)
        assert float((before.class_logits - after.class_logits).abs().max()) <= 1e-6
        assert float((before.mask_logits - after.mask_logits).abs().max()) <= 1e-6
        assert parameter_checksum(state, ['backbone', 'pixel_decoder', 'transformer_decoder',
                                          'prompts.1', 'head.1']) == checksum


class TestAccounting:
    @pytest.mark.parametrize('overrides, num_classes', [
        ({}, 4),
        ({'prompt_mode': SHALLOW}, 4),
        ({'num_layers': 4, 'embed_dim': 16, 'num_heads': 4}, 3),
        ({'min_prompts': 1, 'mlp_depth': 3}, 7),
        ({'step_prompts': 9, 'mlp_hidden': 5}, 2),
    ])
    def test_trainable_matches_closed_form(self, overrides, num_classes, tiny_model_config):
        from data import ClassCatalog, ClassInfo
        cfg = replace(tiny_model_config, **overrides)
        n_classes = 3 + 2 * num_classes
        catalog = ClassCatalog(tuple(ClassInfo(i, str(i), True) for i in range(1, n_classes + 1)))
        protocol = build_protocol(catalog, 3, num_classes)
        state = init_model(cfg, catalog, protocol, seed=0)
        for t in (2, 3):
            add_step(state, protocol.classes(t), seed=t)
            n = cfg.num_prompts(t, num_classes)
            blocks = cfg.num_layers if cfg.prompt_mode == DEEP else 1
            expected = blocks * n * cfg.embed_dim + head_param_count(cfg, num_classes)
            assert prompt_param_count(cfg, n) == blocks * n * cfg.embed_dim
            assert count_trainable(state) == expected
            registry = state.groups()
            assert expected == sum(p.numel() for name in (f"prompts.{t}", f"head.{t}")
                                   for p in registry[name].parameters())

    def test_attention_counter_is_additive(self, tiny_model, tiny_protocol):
        for t in (2, 3):
            add_step(tiny_model, tiny_protocol.classes(t), seed=t)
        cfg = tiny_model.cfg
        sizes = [tiny_model.num_prompts(k) for k in (1, 2, 3)]
        tiny_model.counter.reset()
        with torch.no_grad():
            tiny_model.forward_all(_images(1))
        assert tiny_model.counter.self_attention == sum(attention_ops(cfg, n) for n in sizes)
        assert tiny_model.counter.self_attention < attention_ops(cfg, sum(sizes))
        s = cfg.memory_tokens
        assert tiny_model.counter.cross_attention == sum(cfg.num_layers * 2 * n * s * cfg.embed_dim for n in sizes)

    def test_flops_grow_by_one_decoder_per_step(self, tiny_model, tiny_protocol):
        add_step(tiny_model, tiny_protocol.classes(2), seed=1)
        delta = count_flops(tiny_model, 2) - count_flops(tiny_model, 1)
        assert delta == decoder_flops(tiny_model.cfg, tiny_model.num_prompts(2), 1)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny_model, tiny_protocol):
        add_step(tiny_model, tiny_protocol.classes(2), seed=1)
        save_checkpoint(tiny_model, tiny_protocol, str(tmp_path), 'hash1', extra={'note': 1})
        state, protocol, manifest = load_checkpoint(str(tmp_path), expected_hash='hash1')
        assert protocol == tiny_protocol
        assert manifest['extra'] == {'note': 1}
        assert state.frozen_mask == tiny_model.frozen_mask
        assert parameter_checksum(state) == parameter_checksum(tiny_model)
        images = _images(2)
        with torch.no_grad():
            assert torch.equal(state.forward_step(images, 2).mask_logits, tiny_model.forward_step(images, 2).mask_logits)

    def test_hash_mismatch(self, tmp_path, tiny_model, tiny_protocol):
        save_checkpoint(tiny_model, tiny_protocol, str(tmp_path), 'hash1')
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(str(tmp_path), expected_hash='hash2')

    def test_corrupted_blob(self, tmp_path, tiny_model, tiny_protocol):
        manifest = save_checkpoint(tiny_model, tiny_protocol, str(tmp_path), 'hash1')
        blob = tmp_path / manifest['tensors'][0]['file']
        data = bytearray(blob.read_bytes())
        data[0] ^= 0xFF
        blob.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            load_checkpoint(str(tmp_path))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError):
            read_manifest(str(tmp_path))
