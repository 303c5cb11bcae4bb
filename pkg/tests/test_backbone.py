import math

import numpy as np
import pytest
import torch

from maskedit.backbone import BackboneConfig, LoRALinear, ToyVLLM
from maskedit.data import get_tokenizer
from maskedit.errors import AlignmentError, DimensionMismatch


def mini_config(tok, **kw):
    defaults = dict(
        vocab_size=tok.vocab_size, d_model=16, n_layers=2, n_heads=2,
        n_image_tokens=4, patch_size=8, resolution=16, lora_rank=2,
        lora_alpha=4.0, max_seq_len=64,
    )
    defaults.update(kw)
    return BackboneConfig(**defaults)


@pytest.fixture(scope="module")
def tok():
    return get_tokenizer(4)


@pytest.fixture(scope="module")
def model(tok):
    return ToyVLLM(mini_config(tok), tok, seed=1)


def rand_inputs(res, seed=0, with_subject=True):
    rng = np.random.Generator(np.random.PCG64(seed))
    x1 = torch.tensor(rng.random((res, res, 3)), dtype=torch.float32)
    x2 = torch.tensor(rng.random((res, res, 3)), dtype=torch.float32) if with_subject else None
    m = torch.tensor(rng.integers(0, 2, (res, res)), dtype=torch.float32)
    return x1, x2, m


class TestEmbedInputs:
    def test_patch_count(self, model, tok):
        x1, x2, m = rand_inputs(16)
        tau = torch.tensor(tok.tokenize("add a red square at the masked spot").ids)
        seq = model.embed_inputs(x1, x2, m, tau)
        n_patches = (16 // 8) ** 2
        assert seq.shape == (3 * (n_patches + 1) + len(tau), 16)

    def test_subject_absent_shortens_by_patches_plus_tag(self, model, tok):
        x1, x2, m = rand_inputs(16)
        tau = torch.tensor(tok.tokenize("red square").ids)
        with_subj = model.embed_inputs(x1, x2, m, tau)
        without = model.embed_inputs(x1, None, m, tau)
        assert with_subj.shape[0] - without.shape[0] == (16 // 8) ** 2 + 1

    def test_mask_content_changes_every_mask_patch_embedding(self, model, tok):
        x1, _, _ = rand_inputs(16)
        tau = torch.tensor(tok.tokenize("red").ids)
        zeros = torch.zeros(16, 16)
        ones = torch.ones(16, 16)
        a = model.embed_inputs(x1, None, zeros, tau)
        b = model.embed_inputs(x1, None, ones, tau)
        n_patches = (16 // 8) ** 2
        mask_slice = slice(n_patches + 1 + 1, n_patches + 1 + 1 + n_patches)
        diff = (a[mask_slice] - b[mask_slice]).abs().amax(dim=1)
        assert (diff > 0).all()

    def test_dimension_mismatch(self, model, tok):
        x1 = torch.zeros(8, 8, 3)
        with pytest.raises(DimensionMismatch):
            model.embed_inputs(x1, None, torch.zeros(8, 8), torch.tensor([5]))


def loop_transformer_oracle(model, seq):
    """Re-run the full forward pass with explicit numpy loops."""
    cfg = model.cfg
    x = seq.detach().numpy().astype(np.float64)
    x = x + model.pos_emb.detach().numpy()[: x.shape[0]].astype(np.float64)

    def layer_norm(v, weight, bias):
        mu = v.mean()
        var = ((v - mu) ** 2).mean()
        return (v - mu) / np.sqrt(var + 1e-5) * weight + bias

    def linear(v, module):
        w = module.weight.detach().numpy().astype(np.float64)
        b = module.bias.detach().numpy().astype(np.float64) if module.bias is not None else 0.0
        return v @ w.T + b

    def lora_linear(v, module):
        out = linear(v, module.base)
        a = module.lora_a.detach().numpy().astype(np.float64)
        bb = module.lora_b.detach().numpy().astype(np.float64)
        return out + module.scaling * (v @ a.T) @ bb.T

    L, d = x.shape
    hd = d // cfg.n_heads
    for block in model.blocks:
        ln1 = np.stack([layer_norm(x[i], block.ln1.weight.detach().numpy(),
                                   block.ln1.bias.detach().numpy()) for i in range(L)])
        q = np.stack([lora_linear(ln1[i], block.attn.q) for i in range(L)])
        k = np.stack([lora_linear(ln1[i], block.attn.k) for i in range(L)])
        v = np.stack([lora_linear(ln1[i], block.attn.v) for i in range(L)])
        attn_out = np.zeros((L, d))
        for head in range(cfg.n_heads):
            sl = slice(head * hd, (head + 1) * hd)
            for i in range(L):
                scores = np.array(
                    [q[i, sl] @ k[j, sl] / math.sqrt(hd) for j in range(i + 1)]
                )
                w = np.exp(scores - scores.max())
                w = w / w.sum()
                attn_out[i, sl] = sum(w[j] * v[j, sl] for j in range(i + 1))
        proj = np.stack([lora_linear(attn_out[i], block.attn.o) for i in range(L)])
        x = x + proj
        ln2 = np.stack([layer_norm(x[i], block.ln2.weight.detach().numpy(),
                                   block.ln2.bias.detach().numpy()) for i in range(L)])
        h1 = np.stack([linear(ln2[i], block.mlp[0]) for i in range(L)])
        gelu = 0.5 * h1 * (1.0 + np.vectorize(math.erf)(h1 / math.sqrt(2.0)))
        h2 = np.stack([linear(gelu[i], block.mlp[2]) for i in range(L)])
        x = x + h2
    xf = np.stack([layer_norm(x[i], model.ln_f.weight.detach().numpy(),
                              model.ln_f.bias.detach().numpy()) for i in range(L)])
    return np.stack([linear(xf[i], model.lm_head) for i in range(L)])


class TestForward:
    def test_logits_shape(self, model, tok):
        seq = torch.randn(7, 16, generator=torch.Generator().manual_seed(0))
        logits, hidden = model(seq)
        assert logits.shape == (7, tok.vocab_size)
        assert hidden.shape == (7, 16)

    def test_causality_future_permutation(self, model):
        g = torch.Generator().manual_seed(3)
        seq = torch.randn(9, 16, generator=g)
        logits_a, _ = model(seq)
        permuted = seq.clone()
        permuted[[7, 8]] = permuted[[8, 7]]
        logits_b, _ = model(permuted)
        assert torch.allclose(logits_a[:7], logits_b[:7], atol=1e-6)

    def test_matches_loop_oracle(self, tok):
        cfg = mini_config(tok, n_layers=1, n_heads=1, d_model=8)
        model = ToyVLLM(cfg, tok, seed=5).double()
        seq = torch.randn(3, 8, dtype=torch.float64,
                          generator=torch.Generator().manual_seed(1))
        logits, _ = model(seq)
        oracle = loop_transformer_oracle(model, seq)
        assert np.abs(logits.detach().numpy() - oracle).max() < 1e-6

    def test_empty_sequence_rejected(self, model):
        with pytest.raises(DimensionMismatch):
            model(torch.zeros(0, 16))


class TestVLLMLoss:
    def test_uniform_logits(self, model):
        vocab = model.cfg.vocab_size
        logits = torch.zeros(10, vocab)
        resp = torch.tensor([3, 5, 7])
        loss = model.vllm_loss(logits, resp, response_start=4)
        assert abs(loss.item() - math.log(vocab)) < 1e-5

    def test_uniform_logits_vocab_128(self, model):
        # 128-way uniform slice: remaining entries masked to -inf
        logits = torch.zeros(10, model.cfg.vocab_size)
        width = min(128, model.cfg.vocab_size)
        logits[:, width:] = float("-inf")
        resp = torch.tensor([3, 5, 7])
        loss = model.vllm_loss(logits, resp, response_start=4)
        assert abs(loss.item() - math.log(width)) < 1e-5

    def test_confident_correct_goes_to_zero(self, model):
        logits = torch.zeros(6, model.cfg.vocab_size)
        resp = torch.tensor([2, 2])
        logits[2, 2] = 50.0
        logits[3, 2] = 50.0
        loss = model.vllm_loss(logits, resp, response_start=3)
        assert loss.item() < 1e-6

    def test_hand_computed_three_token_nll(self, model):
        V = model.cfg.vocab_size
        rng = np.random.Generator(np.random.PCG64(2))
        logits_np = rng.standard_normal((5, V))
        resp = [1, 4, 2]
        start = 2
        total = 0.0
        for j, tok_id in enumerate(resp):
            row = logits_np[start - 1 + j]
            log_z = math.log(np.exp(row - row.max()).sum()) + row.max()
            total += -(row[tok_id] - log_z)
        expected = total / 3
        loss = model.vllm_loss(torch.tensor(logits_np, dtype=torch.float64),
                               torch.tensor(resp), response_start=start)
        assert abs(loss.item() - expected) < 1e-9

    def test_span_overflow_raises(self, model):
        with pytest.raises(AlignmentError):
            model.vllm_loss(torch.zeros(4, model.cfg.vocab_size),
                            torch.tensor([1, 2, 3]), response_start=3)


class TestLoRA:
    def test_zero_init_identity(self):
        torch.manual_seed(0)
        layer = LoRALinear(8, 8, rank=2, alpha=4.0)
        x = torch.randn(5, 8)
        assert torch.equal(layer(x), layer.base(x))

    def test_base_gradient_frozen(self, model, tok):
        x1, x2, m = rand_inputs(16, seed=4)
        tau = torch.tensor(tok.tokenize("red square").ids)
        resp = torch.tensor(tok.response_sequence("The mask means 'red square'.").ids)
        seq, start = model.sequence_for_training(x1, x2, m, tau, resp)
        logits, _ = model(seq)
        loss = model.vllm_loss(logits, resp, start)
        loss.backward()
        base_w = model.blocks[0].attn.q.base.weight
        assert not base_w.requires_grad and base_w.grad is None
        lora_a = model.blocks[0].attn.q.lora_a
        assert lora_a.grad is not None
        model.zero_grad()

    def test_rank2_delta_matches_dense_oracle(self):
        torch.manual_seed(7)
        layer = LoRALinear(4, 4, rank=2, alpha=6.0, bias=False)
        with torch.no_grad():
            layer.lora_a.copy_(torch.randn(2, 4))
        x = torch.randn(3, 4, dtype=torch.float64)
        layer = layer.double()
        w_eff = (layer.base.weight + (6.0 / 2) * layer.lora_b @ layer.lora_a).detach().numpy()
        expected = x.numpy() @ w_eff.T
        assert np.abs(layer(x).detach().numpy() - expected).max() < 1e-7
        assert np.abs(layer.effective_weight().detach().numpy() - w_eff).max() == 0


class TestGenerate:
    def test_hidden_states_rows(self, model, tok):
        x1, x2, m = rand_inputs(16, seed=9)
        tau = torch.tensor(tok.tokenize("add a red square").ids)
        text_ids, H = model.generate_response(x1, x2, m, tau, max_len=6)
        assert H.shape == (model.cfg.n_image_tokens, model.cfg.d_model)
        assert torch.isfinite(H).all()

    def test_greedy_deterministic(self, model, tok):
        x1, x2, m = rand_inputs(16, seed=10)
        tau = torch.tensor(tok.tokenize("what does the mask indicate?").ids)
        a_ids, a_H = model.generate_response(x1, x2, m, tau, max_len=8)
        b_ids, b_H = model.generate_response(x1, x2, m, tau, max_len=8)
        assert a_ids == b_ids
        assert torch.equal(a_H, b_H)

    def test_seeded_init_reproducible(self, tok):
        x1, x2, m = rand_inputs(16, seed=11)
        tau = torch.tensor(tok.tokenize("red circle").ids)
        ids_a, _ = ToyVLLM(mini_config(tok), tok, seed=3).generate_response(x1, x2, m, tau)
        ids_b, _ = ToyVLLM(mini_config(tok), tok, seed=3).generate_response(x1, x2, m, tau)
        assert ids_a == ids_b

    def test_never_emits_image_tokens(self, model, tok):
        x1, x2, m = rand_inputs(16, seed=12)
        tau = torch.tensor(tok.tokenize("add a red square").ids)
        text_ids, _ = model.generate_response(x1, x2, m, tau, max_len=12)
        assert all(i < model.base_vocab for i in text_ids)


def test_gradcheck_lora_params_vs_finite_differences(tok):
    cfg = mini_config(tok, n_layers=1)
    model = ToyVLLM(cfg, tok, seed=2).double()
    # non-zero LoRA A so the loss actually depends on both factors
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "lora_a" in name:
                g = torch.Generator().manual_seed(hash(name) % (2**31))
                p.copy_(0.1 * torch.randn(p.shape, generator=g, dtype=torch.float64))
    x1, x2, m = rand_inputs(16, seed=20)
    tau = torch.tensor(tok.tokenize("replace the masked object with a red square").ids)
    resp = torch.tensor(tok.response_sequence("The mask means 'red square'.").ids)

    def loss_fn():
        seq, start = model.sequence_for_training(
            x1.double(), x2.double(), m.double(), tau, resp)
        logits, _ = model(seq)
        return model.vllm_loss(logits, resp, start)

    loss = loss_fn()
    params = [p for p in model.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params)
    rng = np.random.Generator(np.random.PCG64(0))
    eps = 1e-6
    checked = 0
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        for _ in range(3):
            idx = int(rng.integers(flat.numel()))
            orig = flat[idx].item()
            flat[idx] = orig + eps
            lp = loss_fn().item()
            flat[idx] = orig - eps
            lm = loss_fn().item()
            flat[idx] = orig
            fd = (lp - lm) / (2 * eps)
            an = g.view(-1)[idx].item()
            denom = max(abs(fd), abs(an), 1e-8)
            assert abs(fd - an) / denom < 1e-4, f"fd={fd} an={an}"
            checked += 1
    assert checked >= 10


def test_backbone_base_frozen_after_update(tok):
    cfg = mini_config(tok)
    model = ToyVLLM(cfg, tok, seed=8)
    frozen_before = {
        n: p.detach().clone() for n, p in model.named_parameters() if not p.requires_grad
    }
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=1e-2)
    x1, x2, m = rand_inputs(16, seed=30)
    tau = torch.tensor(tok.tokenize("add a red square").ids)
    resp = torch.tensor(tok.response_sequence("The mask means 'red square'.").ids)
    for _ in range(3):
        seq, start = model.sequence_for_training(x1, x2, m, tau, resp)
        logits, _ = model(seq)
        loss = model.vllm_loss(logits, resp, start)
        opt.zero_grad()
        loss.backward()
        opt.step()
    for n, p in model.named_parameters():
        if not p.requires_grad:
            assert torch.equal(p, frozen_before[n]), n
