import numpy as np
import pytest
import torch

from glyphreid.errors import ConfigError, ContractError, VocabularyError
from glyphreid.model import (
    ModelConfig,
    RetrievalModel,
    load_checkpoint,
    save_checkpoint,
)

CFG = ModelConfig(
    image_layers=2, text_layers=1, cross_layers=1,
    hidden_dim=16, heads=2, proj_dim=8, vocab_size=20, max_len=8,
)


@pytest.fixture
def model():
    torch.manual_seed(7)
    m = RetrievalModel(CFG)
    m.eval()
    return m


def text_batch(n=2, full=False):
    g = torch.Generator().manual_seed(5)
    tokens = torch.randint(3, CFG.vocab_size, (n, CFG.max_len), generator=g)
    tokens[:, 0] = 0
    pad = torch.zeros(n, CFG.max_len, dtype=torch.bool)
    if not full:
        pad[:, 5:] = True
        tokens[pad] = 1
    return tokens, pad


class TestConfig:
    def test_hidden_dim_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig(hidden_dim=10, heads=4).validate()

    def test_proj_dim_bound(self):
        with pytest.raises(ConfigError):
            ModelConfig(hidden_dim=16, heads=2, proj_dim=32).validate()


class TestEncodeImage:
    def test_all_zero_image_finite(self, model):
        out = model.encode_image(torch.zeros(1, CFG.image_side, CFG.image_side))
        assert out.shape == (1, CFG.n_patches + 1, CFG.hidden_dim)
        assert torch.isfinite(out).all()

    def test_eval_determinism(self, model):
        pixels = torch.rand(2, CFG.image_side, CFG.image_side)
        with torch.no_grad():
            assert torch.equal(model.encode_image(pixels), model.encode_image(pixels))

    def test_shape_mismatch(self, model):
        with pytest.raises(ContractError):
            model.encode_image(torch.zeros(1, 7, 7))

    def test_patch_permutation_permutes_embeddings(self, model):
        # before positional injection, swapping two patches permutes the
        # patch-embedding multiset accordingly
        pixels = torch.rand(1, CFG.image_side, CFG.image_side)
        patches = model.image_encoder.patchify(pixels)
        emb = model.image_encoder.patch_embed(patches)
        perm = patches.clone()
        perm[0, [0, 1]] = patches[0, [1, 0]]
        emb_perm = model.image_encoder.patch_embed(perm)
        assert torch.allclose(emb[0, [1, 0]], emb_perm[0, [0, 1]])
        assert torch.allclose(emb[0, 2:], emb_perm[0, 2:])


class TestEncodeText:
    def test_pad_positions_inert(self, model):
        tokens, pad = text_batch()
        with torch.no_grad():
            base = model.encode_text(tokens, pad)
            altered = tokens.clone()
            altered[0, -1] = 9  # padded position, mask unchanged
            out = model.encode_text(altered, pad)
        assert torch.allclose(base[:, 0], out[:, 0], atol=1e-6)

    def test_out_of_vocab_rejected(self, model):
        tokens, pad = text_batch()
        tokens[0, 1] = CFG.vocab_size
        with pytest.raises(VocabularyError):
            model.encode_text(tokens, pad)

    def test_position_information_injected(self, model):
        # same token at two positions differs only via positional encoding;
        # zeroing the positional table removes the difference
        tok_a = torch.full((1, CFG.max_len), 1, dtype=torch.long)
        tok_a[0, 0] = 0
        tok_a[0, 1] = 5
        tok_b = tok_a.clone()
        tok_b[0, 1], tok_b[0, 2] = 1, 5
        pad = torch.zeros(1, CFG.max_len, dtype=torch.bool)
        pad[0, 3:] = True
        with torch.no_grad():
            a = model.encode_text(tok_a, pad)
            b = model.encode_text(tok_b, pad)
            assert not torch.allclose(a[:, 0], b[:, 0])
            model.text_encoder.pos_embed.zero_()
            a0 = model.encode_text(tok_a, pad)
            b0 = model.encode_text(tok_b, pad)
        # with positions ablated the two inputs are permutations of each
        # other, so the attention-pooled [CLS] output coincides
        assert torch.allclose(a0[:, 0], b0[:, 0], atol=1e-5)


class TestFuse:
    def test_output_length_is_text_side(self, model):
        tokens, pad = text_batch()
        pixels = torch.rand(2, CFG.image_side, CFG.image_side)
        with torch.no_grad():
            fused = model.fuse(model.encode_image(pixels), model.encode_text(tokens, pad), pad)
        assert fused.shape == (2, CFG.max_len, CFG.hidden_dim)
        assert fused.shape[1] != CFG.n_patches + 1

    def test_zero_image_finite(self, model):
        tokens, pad = text_batch()
        with torch.no_grad():
            vis = model.encode_image(torch.zeros(2, CFG.image_side, CFG.image_side))
            fused = model.fuse(vis, model.encode_text(tokens, pad), pad)
        assert torch.isfinite(fused).all()


class TestProject:
    def test_unit_norm(self, model):
        x = torch.randn(5, CFG.hidden_dim)
        out = model.project(x, "image")
        assert torch.allclose(out.norm(dim=-1), torch.ones(5), atol=1e-5)

    def test_scale_invariance_with_zero_bias(self, model):
        with torch.no_grad():
            model.text_proj.bias.zero_()
        x = torch.randn(3, CFG.hidden_dim)
        a = model.project(x, "text")
        b = model.project(3 * x, "text")
        assert torch.allclose(a, b, atol=1e-6)

    def test_identical_inputs_cosine_one(self, model):
        x = torch.randn(1, CFG.hidden_dim)
        a = model.project(x, "image")
        b = model.project(x.clone(), "image")
        assert float((a * b).sum()) == pytest.approx(1.0, abs=1e-6)

    def test_zero_norm_guard(self, model):
        with torch.no_grad():
            model.image_proj.weight.zero_()
            model.image_proj.bias.zero_()
        with pytest.raises(ContractError):
            model.project(torch.randn(1, CFG.hidden_dim), "image")

    def test_bad_side(self, model):
        with pytest.raises(ContractError):
            model.project(torch.randn(1, CFG.hidden_dim), "fused")


class TestHeads:
    def test_probability_simplices(self, model):
        f_cls = torch.randn(4, CFG.hidden_dim)
        f_tok = torch.randn(4, CFG.max_len, CFG.hidden_dim)
        for probs, classes in [
            (model.itm_probabilities(f_cls), 2),
            (model.prd_probabilities(f_cls), 2),
            (model.rtd_probabilities(f_tok), 2),
            (model.mlm_probabilities(f_tok), CFG.vocab_size),
        ]:
            assert probs.shape[-1] == classes
            assert (probs >= 0).all()
            assert torch.allclose(probs.sum(-1), torch.ones_like(probs.sum(-1)), atol=1e-6)


class TestForwardSanity:
    @pytest.mark.parametrize("fill", ["zeros", "ones", "random"])
    def test_nan_free(self, model, fill):
        if fill == "zeros":
            pixels = torch.zeros(2, CFG.image_side, CFG.image_side)
        elif fill == "ones":
            pixels = torch.ones(2, CFG.image_side, CFG.image_side)
        else:
            pixels = torch.rand(2, CFG.image_side, CFG.image_side)
        tokens, pad = text_batch()
        with torch.no_grad():
            vis = model.encode_image(pixels)
            txt = model.encode_text(tokens, pad)
            fused = model.fuse(vis, txt, pad)
            out = [
                vis, txt, fused,
                model.project(vis[:, 0], "image"),
                model.project(txt[:, 0], "text"),
                model.itm_probabilities(fused[:, 0]),
                model.mlm_probabilities(fused),
            ]
        for t in out:
            assert torch.isfinite(t).all()


def test_gradient_reaches_every_parameter(small_corpus):
    # no dead heads: the joint loss at init sends gradient everywhere
    from glyphreid.config import model_config_for_corpus
    from glyphreid.trainer import TrainConfig, Trainer

    torch.manual_seed(0)
    cfg = model_config_for_corpus(
        ModelConfig(image_layers=1, text_layers=1, cross_layers=1,
                    hidden_dim=16, heads=2, proj_dim=8),
        small_corpus,
    )
    model = RetrievalModel(cfg)
    trainer = Trainer(
        model, small_corpus,
        TrainConfig(batch_size=8, queue_size=16, p_w=0.5, seed=0),
    )
    # warm the queues so contrastive losses have negatives
    trainer.train_step(trainer.sample_batch())
    batch = trainer.sample_batch()
    report = trainer.train_step(batch)
    for name, p in model.named_parameters():
        assert p.grad is not None, name
        assert float(p.grad.abs().sum()) > 0, f"dead parameter: {name}"


def test_checkpoint_roundtrip(model, tmp_path):
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, model, step=17, extra={"note": "x"})
    loaded, mom, step, extra = load_checkpoint(path)
    assert step == 17 and extra == {"note": "x"} and mom is None
    pixels = torch.rand(1, CFG.image_side, CFG.image_side)
    loaded.eval()
    with torch.no_grad():
        assert torch.equal(model.encode_image(pixels), loaded.encode_image(pixels))


def test_checkpoint_with_momentum(model, tmp_path):
    from glyphreid.momentum import MomentumModel

    mom = MomentumModel(model, 0.99)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, model, mom.model, step=3)
    _, loaded_mom, _, _ = load_checkpoint(path)
    assert loaded_mom is not None
    for a, b in zip(mom.model.parameters(), loaded_mom.parameters()):
        assert torch.equal(a, b)
