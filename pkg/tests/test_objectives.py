"""
Unit tests for the training objectives and the Item-User Predictor.

Gradients are checked against finite differences in float64.
"""

import math

import pytest
import torch
from torch.autograd import gradcheck

from creative_dp_utils.config import LossWeights, PredictorDims, TransformerDims
from creative_dp_utils.creative import CreativeDecoder, CreativePrompt, creative_forward
from creative_dp_utils.datamodel import Ad, Vocabulary, tokenize
from creative_dp_utils.objectives import (
    ItemUserPredictor,
    align_loss,
    cls_loss,
    cls_loss_from_logits,
    generative_loss,
    masked_sequence_loss,
    predict_click,
    recon_loss,
    total_loss,
)

DIMS = TransformerDims(d_model=6, n_heads=2, n_layers=1, max_positions=40, ffn_multiplier=2)


@pytest.fixture
def vocab():
    return Vocabulary.build(["sturdy lamp ; warm light", "reads at night", "warm lamp for reading"])


@pytest.fixture
def decoder(vocab):
    torch.manual_seed(0)
    return CreativeDecoder(DIMS, len(vocab), user_dim=4).double().eval()


@pytest.fixture
def predictor():
    torch.manual_seed(0)
    return ItemUserPredictor(4, PredictorDims(n_layers=1, hidden_dim=5)).double().eval()


def parameter_gradient_matches(loss_fn, parameter, index=(0, 0), eps=1e-6, tol=1e-5):
    """Compare autograd against a central difference for one parameter entry."""
    parameter.grad = None
    loss_fn().backward()
    analytic = parameter.grad[index].item()
    with torch.no_grad():
        original = parameter[index].item()
        parameter[index] = original + eps
        plus = loss_fn().item()
        parameter[index] = original - eps
        minus = loss_fn().item()
        parameter[index] = original
    return abs(analytic - (plus - minus) / (2 * eps)) < tol


class TestAnalyticValues:
    def test_uniform_logits_give_log_vocab(self):
        logits = torch.zeros(3, 11, dtype=torch.float64)
        assert generative_loss(logits, [1, 5, 9]).item() == pytest.approx(math.log(11))

    def test_single_pair_alignment_is_zero(self):
        u = torch.randn(1, 4, dtype=torch.float64)
        assert align_loss(u, torch.randn(1, 4, dtype=torch.float64)).item() == pytest.approx(0.0)

    def test_identical_rows_give_log_batch(self):
        row = torch.randn(1, 4, dtype=torch.float64)
        batch = row.repeat(5, 1)
        assert align_loss(batch, batch).item() == pytest.approx(math.log(5))

    def test_zero_head_gives_log_two(self, predictor):
        predictor.zero_head()
        pairs = [(torch.randn(4, dtype=torch.float64), torch.randn(4, dtype=torch.float64)) for _ in range(3)]
        assert cls_loss(pairs, [1, 0, 1], predictor).item() == pytest.approx(math.log(2))
        assert predict_click(*pairs[0], predictor).item() == pytest.approx(0.5)

    def test_total_is_weighted_sum(self):
        gen, cls, align, recon = (torch.tensor(v, dtype=torch.float64) for v in (1.0, 2.0, 3.0, 4.0))
        weights = LossWeights(cls=0.5, align=0.0, recon=2.0)
        assert total_loss(gen, cls, align, recon, weights).item() == pytest.approx(1.0 + 1.0 + 8.0)
        assert total_loss(gen).item() == pytest.approx(1.0)

    def test_masked_loss_ignores_unlabelled_positions(self):
        logits = torch.randn(1, 4, 7, dtype=torch.float64)
        labels = torch.tensor([[-100, 3, -100, 5]])
        expected = generative_loss(logits[0, [1, 3]], [3, 5])
        assert masked_sequence_loss(logits, labels).item() == pytest.approx(expected.item())


class TestInvariances:
    def test_align_ignores_positive_row_scaling(self):
        torch.manual_seed(3)
        u, v = torch.randn(4, 5, dtype=torch.float64), torch.randn(4, 5, dtype=torch.float64)
        scales = torch.rand(4, 1, dtype=torch.float64) * 10 + 0.1
        base = align_loss(u, v, 0.07).item()
        assert align_loss(u * scales, v, 0.07).item() == pytest.approx(base, rel=1e-10)
        assert align_loss(u, v * scales, 0.07).item() == pytest.approx(base, rel=1e-10)

    def test_cls_symmetric_under_label_and_sign_flip(self):
        torch.manual_seed(4)
        logits = torch.randn(9, dtype=torch.float64) * 3
        labels = torch.randint(0, 2, (9,))
        assert cls_loss_from_logits(-logits, 1 - labels).item() == pytest.approx(
            cls_loss_from_logits(logits, labels).item(), rel=1e-12
        )


def gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2)))


def layer_norm_pair(a, b, eps=1.0):
    mean = (a + b) / 2
    scale = 1.0 / math.sqrt(((a - mean) ** 2 + (b - mean) ** 2) / 2 + eps)
    return (a - mean) * scale, (b - mean) * scale


class TestHandSetPredictor:
    """d_model = 2, one mixer layer with hidden width 1, weights set by hand."""

    def test_predict_click_matches_scalar_forward(self):
        predictor = ItemUserPredictor(2, PredictorDims(n_layers=1, hidden_dim=1)).double().eval()
        layer = predictor.layers[0]
        with torch.no_grad():
            for parameter in predictor.parameters():
                parameter.zero_()
            for norm in (layer.token_norm, layer.channel_norm, predictor.head_norm):
                norm.weight.fill_(1.0)
            layer.token_mlp[0].weight.copy_(torch.tensor([[1.0, -1.0]]))
            layer.token_mlp[2].weight.copy_(torch.tensor([[1.0], [0.0]]))
            predictor.head.weight.copy_(torch.tensor([[0.7, -0.4]]))
            predictor.head.bias.fill_(0.25)
        layer.token_norm.eps = 1.0
        predictor.head_norm.eps = 1.0

        user, item = (1.0, 3.0), (2.0, -1.0)
        # token mixing writes gelu(U_c - E_c) of the normalized rows into U only
        n_user, n_item = layer_norm_pair(*user), layer_norm_pair(*item)
        mixed_user = (user[0] + gelu(n_user[0] - n_item[0]), user[1] + gelu(n_user[1] - n_item[1]))
        h_user, h_item = layer_norm_pair(*mixed_user), layer_norm_pair(*item)
        logit = 0.7 * (h_user[0] + h_item[0]) / 2 - 0.4 * (h_user[1] + h_item[1]) / 2 + 0.25
        expected = 1.0 / (1.0 + math.exp(-logit))

        probability = predict_click(torch.tensor(user, dtype=torch.float64),
                                    torch.tensor(item, dtype=torch.float64), predictor)
        assert probability.item() == pytest.approx(expected, abs=1e-12)


class TestInputValidation:
    def test_generation_misaligned(self):
        with pytest.raises(ValueError):
            generative_loss(torch.zeros(3, 5), [1, 2])

    def test_align_rejects_zero_norm_and_bad_temperature(self):
        u = torch.zeros(2, 4)
        with pytest.raises(ValueError):
            align_loss(u, torch.ones(2, 4))
        with pytest.raises(ValueError):
            align_loss(torch.ones(2, 4), torch.ones(2, 4), temperature=0.0)

    def test_cls_rejects_empty_and_mismatched(self, predictor):
        with pytest.raises(ValueError):
            cls_loss([], [], predictor)
        u = torch.zeros(4, dtype=torch.float64)
        with pytest.raises(ValueError):
            cls_loss([(u, u)], [1, 0], predictor)

    def test_predictor_shape_mismatch(self, predictor):
        with pytest.raises(ValueError):
            predictor(torch.zeros(2, 4, dtype=torch.float64), torch.zeros(2, 3, dtype=torch.float64))

    def test_recon_rejects_empty_interest(self, decoder, vocab):
        with pytest.raises(ValueError):
            recon_loss(torch.zeros(4, dtype=torch.float64), [], decoder, vocab.bos_id)


class TestGradients:
    def test_generation_through_projection(self, decoder, vocab):
        ad = Ad(ad_id="a", original_title="sturdy lamp", selling_points=["warm light"])
        response = tokenize("warm lamp for reading", vocab, 16) + [vocab.eos_id]

        def gen_of_user(user):
            prompt = CreativePrompt.build(user, ad, None, vocab)
            return generative_loss(creative_forward(prompt, response, decoder), response)

        assert gradcheck(gen_of_user, (torch.randn(4, dtype=torch.float64, requires_grad=True),))

    def test_generation_parameter_gradient(self, decoder, vocab):
        ad = Ad(ad_id="a", original_title="sturdy lamp")
        response = tokenize("warm lamp", vocab, 16)
        user = torch.randn(4, dtype=torch.float64)

        def loss():
            return generative_loss(creative_forward(CreativePrompt.build(user, ad, None, vocab), response, decoder),
                                   response)

        assert parameter_gradient_matches(loss, decoder.projection.weight)
        assert parameter_gradient_matches(loss, decoder.lm.lm_head.weight, index=(8, 1))

    def test_cls(self, predictor):
        def loss(users, items):
            return cls_loss(list(zip(users, items)), [1, 0, 1], predictor)

        inputs = (torch.randn(3, 4, dtype=torch.float64, requires_grad=True),
                  torch.randn(3, 4, dtype=torch.float64, requires_grad=True))
        assert gradcheck(loss, inputs)

    def test_align(self):
        inputs = (torch.randn(4, 5, dtype=torch.float64, requires_grad=True),
                  torch.randn(4, 5, dtype=torch.float64, requires_grad=True))
        assert gradcheck(lambda u, v: align_loss(u, v, temperature=0.5), inputs)

    def test_recon(self, decoder, vocab):
        interest = tokenize("reads at night", vocab, 16)
        assert gradcheck(lambda u: recon_loss(u, interest, decoder, vocab.bos_id),
                         (torch.randn(4, dtype=torch.float64, requires_grad=True),))

    def test_total(self, decoder, vocab, predictor):
        ad = Ad(ad_id="a", original_title="sturdy lamp")
        response = tokenize("warm lamp", vocab, 16)
        interest = tokenize("reads at night", vocab, 16)
        item = torch.randn(4, dtype=torch.float64)
        feature = torch.randn(2, 4, dtype=torch.float64)
        weights = LossWeights(cls=0.5, align=0.3, recon=0.2, temperature=0.5)

        def loss(users):
            gen = generative_loss(
                creative_forward(CreativePrompt.build(users[0], ad, None, vocab), response, decoder), response
            )
            cls = cls_loss([(users[0], item)], [1], predictor)
            align = align_loss(users, feature, weights.temperature)
            recon = recon_loss(users[1], interest, decoder, vocab.bos_id)
            return total_loss(gen, cls, align, recon, weights)

        assert gradcheck(loss, (torch.randn(2, 4, dtype=torch.float64, requires_grad=True),))
