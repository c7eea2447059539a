import numpy as np
import pytest
import torch

from partsmith.denoiser import build_toy_backend
from partsmith.errors import NonFiniteLossError, ValidationError
from partsmith.losses import attention_loss, normalize_attention
from partsmith.training import (
    TrainConfig,
    Trainer,
    build_training_set,
    load_bundle,
    load_checkpoint,
    module_weight_hash,
    save_checkpoint,
)


def test_config_defaults_match_reference_recipe():
    cfg = TrainConfig()
    assert cfg.batch_size == 2
    assert cfg.epochs == 100
    assert cfg.learning_rate == 1e-4
    assert cfg.weight_decay == 0.01
    assert cfg.lambda_attn == 0.01
    assert cfg.horizontal_flip is True
    assert cfg.image_size == 512


def test_config_from_toml(tmp_path):
    (tmp_path / "train.toml").write_text(
        "[train]\nbatch_size = 4\nlearning_rate = 0.005\nlambda_attn = 0.0\n"
    )
    cfg = TrainConfig.from_toml(tmp_path / "train.toml")
    assert cfg.batch_size == 4
    assert cfg.learning_rate == 0.005
    assert cfg.lambda_attn == 0.0


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValidationError):
        TrainConfig(lambda_attn=-1.0)
    with pytest.raises(ValidationError):
        TrainConfig(attn_loss="huber")


def build_setup(toy_task, lam=0.01, seed=0, steps=10, **kwargs):
    backend = build_toy_backend(image_size=32, embed_dim=32, seed=seed)
    samples = build_training_set(
        list(zip(toy_task.image_ids, toy_task.images)), toy_task.dictionary,
        toy_task.extractor, backend,
    )
    cfg = TrainConfig(max_steps=steps, seed=seed, learning_rate=5e-3,
                      image_size=32, lambda_attn=lam, checkpoint_every=0, **kwargs)
    trainer = Trainer(samples, toy_task.dictionary, backend, cfg)
    return trainer, backend, samples


def test_lambda_zero_total_equals_ldm(toy_task):
    trainer, _, _ = build_setup(toy_task, lam=0.0, steps=6)
    history = trainer.run()
    for r in history:
        assert r.l_total == r.l_ldm
        assert r.l_attn == 0.0


def test_training_descends(toy_task):
    trainer, _, _ = build_setup(toy_task, steps=150)
    history = trainer.run()
    first = np.mean([r.l_total for r in history[:20]])
    last = np.mean([r.l_total for r in history[-20:]])
    assert last < first


def test_base_weights_frozen(toy_task):
    trainer, backend, _ = build_setup(toy_task, steps=8)
    before = module_weight_hash(backend.module)
    trainer.run()
    assert module_weight_hash(backend.module) == before


def test_only_declared_learnables_change(toy_task):
    trainer, backend, _ = build_setup(toy_task, steps=3)
    learnable = {id(p) for p in trainer._params}
    snapshot = {
        name: p.detach().clone()
        for name, p in backend.module.named_parameters()
    }
    tok_before = trainer.token_dict.table.detach().clone()
    trainer.run()
    assert not torch.equal(tok_before, trainer.token_dict.table)
    for name, p in backend.module.named_parameters():
        if id(p) not in learnable:
            assert torch.equal(snapshot[name], p), name


def test_flip_consistency_invariant(toy_task):
    # attention_loss(flipped attention, flipped masks) == attention_loss of
    # the unflipped pair.
    trainer, backend, samples = build_setup(toy_task, steps=1)
    s = samples[0]
    prompt = trainer.token_dict, trainer.projector
    from partsmith.tokens import embed_code

    pe = embed_code(s.code, trainer.token_dict, trainer.projector,
                    template=trainer.template)
    z_t = backend.schedule.add_noise(
        s.latent, 300, torch.randn(s.latent.shape,
                                   generator=torch.Generator().manual_seed(0)))
    _, stack = backend.predict_noise(z_t, 300, pe)
    norm = normalize_attention(stack)
    a = attention_loss(norm, s.masks)
    b = attention_loss(norm.flip_horizontal(), s.masks.flip_horizontal())
    assert abs(a.item() - b.item()) < 1e-10


def test_nonfinite_loss_aborts_with_dump(toy_task, tmp_path):
    trainer, _, samples = build_setup(toy_task, steps=5)
    trainer.dump_dir = tmp_path
    samples[0].latent[0, 0, 0] = float("inf")
    with pytest.raises(NonFiniteLossError) as err:
        for _ in range(20):
            trainer.train_step(trainer._next_batch())
    dump = err.value.dump_path
    assert dump and (tmp_path in __import__("pathlib").Path(dump).parents
                     or str(tmp_path) in dump)
    assert (list(__import__("pathlib").Path(dump).glob("*.psfm")))
    samples[0].latent[0, 0, 0] = 0.0


def test_refuses_attention_loss_without_taps(toy_task):
    class NoTaps:
        latent_shape = (4, 16, 16)
        attention_grid = (16, 16)
        embed_dim = 32
        attention_layer_names = []

        def supports_attention(self):
            return False

    backend = build_toy_backend(image_size=32, embed_dim=32, seed=0)
    samples = build_training_set(
        list(zip(toy_task.image_ids, toy_task.images)), toy_task.dictionary,
        toy_task.extractor, backend,
    )
    cfg = TrainConfig(max_steps=2, lambda_attn=0.01, image_size=32)
    with pytest.raises(ValidationError):
        Trainer(samples, toy_task.dictionary, NoTaps(), cfg, attach_adapters=False)


def test_checkpoint_roundtrip_bitwise(toy_task, tmp_path):
    trainer, backend, samples = build_setup(toy_task, steps=7)
    trainer.run()
    save_checkpoint(trainer, tmp_path)
    backend2 = build_toy_backend(image_size=32, embed_dim=32, seed=0)
    samples2 = build_training_set(
        list(zip(toy_task.image_ids, toy_task.images)), toy_task.dictionary,
        toy_task.extractor, backend2,
    )
    restored = load_checkpoint(tmp_path, samples2, toy_task.dictionary, backend2)
    assert torch.equal(restored.token_dict.table, trainer.token_dict.table)
    assert torch.equal(restored.projector.w1, trainer.projector.w1)
    assert torch.equal(restored.generator.get_state(), trainer.generator.get_state())
    assert restored.step == trainer.step
    assert restored.perm == trainer.perm and restored.cursor == trainer.cursor
    from partsmith.denoiser.lora import LoraLinear

    lora1 = [s for s in trainer.backend.module.modules() if isinstance(s, LoraLinear)]
    lora2 = [s for s in backend2.module.modules() if isinstance(s, LoraLinear)]
    for a, b in zip(lora1, lora2):
        assert torch.equal(a.down, b.down) and torch.equal(a.up, b.up)


def test_resume_reproduces_uninterrupted_run(toy_task, tmp_path):
    torch.use_deterministic_algorithms(True)
    try:
        trainer_a, _, _ = build_setup(toy_task, steps=24, seed=5)
        trainer_a.run()

        trainer_b, _, _ = build_setup(toy_task, steps=12, seed=5)
        trainer_b.run()
        save_checkpoint(trainer_b, tmp_path)
        backend_c = build_toy_backend(image_size=32, embed_dim=32, seed=5)
        samples_c = build_training_set(
            list(zip(toy_task.image_ids, toy_task.images)), toy_task.dictionary,
            toy_task.extractor, backend_c,
        )
        trainer_c = load_checkpoint(tmp_path, samples_c, toy_task.dictionary,
                                    backend_c)
        trainer_c.cfg.max_steps = 24
        trainer_c.run()
        assert torch.equal(trainer_a.token_dict.table, trainer_c.token_dict.table)
        assert torch.equal(trainer_a.projector.w2, trainer_c.projector.w2)
        from partsmith.denoiser.lora import LoraLinear

        la = [s for s in trainer_a.backend.module.modules()
              if isinstance(s, LoraLinear)]
        lc = [s for s in trainer_c.backend.module.modules()
              if isinstance(s, LoraLinear)]
        for a, c in zip(la, lc):
            assert torch.equal(a.down, c.down) and torch.equal(a.up, c.up)
    finally:
        torch.use_deterministic_algorithms(False)


def test_gradient_accumulation_runs(toy_task):
    trainer, _, _ = build_setup(toy_task, steps=4, grad_accum=2, batch_size=4)
    history = trainer.run()
    assert len(history) == 4
    assert all(np.isfinite(r.l_total) for r in history)


def test_no_projector_mode(toy_task):
    trainer, _, _ = build_setup(toy_task, steps=3, use_projector=False)
    assert trainer.projector.identity
    trainer.run()
    pe = trainer.token_dict.table
    assert torch.isfinite(pe).all()


def test_mask_presence_consistency_enforced(toy_task):
    from partsmith.training import TrainingSample

    s0 = build_setup(toy_task, steps=1)[2][0]
    bad_code = s0.code
    bad_masks = s0.masks
    flipped = tuple(not p for p in bad_masks.present)
    with pytest.raises(ValidationError):
        TrainingSample("x", s0.latent, bad_code,
                       type(bad_masks)(bad_masks.grid_h, bad_masks.grid_w,
                                       bad_masks.masks,
                                       flipped))


def test_bundle_load_restores_trained_weights(toy_task, tmp_path):
    trainer, backend, samples = build_setup(toy_task, steps=10)
    trainer.run()
    save_checkpoint(trainer, tmp_path)
    bundle = load_bundle(tmp_path)
    assert torch.equal(bundle.token_dict.table, trainer.token_dict.table)
    assert bundle.cfg.max_steps == 10
    from partsmith.denoiser.lora import LoraLinear

    lb = [s for s in bundle.backend.module.modules() if isinstance(s, LoraLinear)]
    lt = [s for s in trainer.backend.module.modules() if isinstance(s, LoraLinear)]
    for a, b in zip(lt, lb):
        assert torch.equal(a.up, b.up)
