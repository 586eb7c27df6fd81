import math

import pytest
import torch

from iogvqa.errors import ParseError, ShapeError, ValidationError
from iogvqa.question_encoder import QuestionEncoder, load_word_vectors, masked_softmax


@pytest.fixture(scope='function')
def encoder():
    torch.manual_seed(0)
    return QuestionEncoder(10, 6, d_w=4, d_a=3, hidden=5, char_kernel=3).double()


def question(word_ids, chars=3):
    words = torch.tensor([word_ids])
    char_ids = (words.unsqueeze(-1) % 5 + 1).expand(-1, -1, chars).clone()
    char_ids[words == 0] = 0
    return words, char_ids, words == 0


def central_difference(f, x, eps=1e-6):
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = float(flat[i])
        flat[i] = old + eps
        plus = float(f(x))
        flat[i] = old - eps
        minus = float(f(x))
        flat[i] = old
        grad.view(-1)[i] = (plus - minus) / (2 * eps)
    return grad


#######################################
# CHARACTERS


def test_all_padding_token_is_zero(encoder):
    char_ids = torch.tensor([[[2, 3, 0], [0, 0, 0]]])
    out = encoder.embed_chars(char_ids)
    assert out.shape == (1, 2, 3)
    assert torch.equal(out[0, 1], torch.zeros(3, dtype=out.dtype))


def test_single_char_identity_kernel():
    enc = QuestionEncoder(4, 4, d_w=2, d_a=1, hidden=2, char_kernel=1).double()
    with torch.no_grad():
        enc.char_conv.weight.fill_(1)
        enc.char_conv.bias.zero_()
    out = enc.embed_chars(torch.tensor([[[2]]]))
    assert out.item() == pytest.approx(enc.char_embedding.weight[2, 0].item())


def test_unit_kernel_matches_hand_product():
    enc = QuestionEncoder(4, 5, d_w=2, d_a=2, hidden=2, char_kernel=1).double()
    kernel = torch.tensor([[1.0, 2.0], [-1.0, 0.5]], dtype=torch.float64)
    with torch.no_grad():
        enc.char_conv.weight.copy_(kernel.view(2, 2, 1, 1))
        enc.char_conv.bias.zero_()
    char_ids = torch.tensor([[[2, 3], [4, 0]]])
    emb = enc.char_embedding.weight
    expected_first = torch.maximum(kernel @ emb[2], kernel @ emb[3])
    expected_second = kernel @ emb[4]
    out = enc.embed_chars(char_ids)
    torch.testing.assert_close(out[0, 0], expected_first)
    torch.testing.assert_close(out[0, 1], expected_second)


def test_char_id_out_of_range(encoder):
    with pytest.raises(IndexError):
        encoder.embed_chars(torch.tensor([[[6]]]))
    with pytest.raises(IndexError):
        encoder.embed_words(torch.tensor([[10]]))


#######################################
# SELF-ATTENTION


def test_single_token_attention(encoder):
    words, chars, mask = question([3])
    _, weights = encoder.fuse(encoder.embed_words(words), encoder.embed_chars(chars), mask)
    assert weights.item() == 1


def test_identical_tokens_attention(encoder):
    words, chars, mask = question([3, 3])
    _, weights = encoder.fuse(encoder.embed_words(words), encoder.embed_chars(chars), mask)
    torch.testing.assert_close(weights[0], torch.full((2, 2), 0.5, dtype=torch.float64))


def test_attention_hand_softmax():
    enc = QuestionEncoder(4, 4, d_w=1, d_a=1, hidden=2).double()
    with torch.no_grad():
        enc.W_q.weight.copy_(torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
        enc.W_k.weight.copy_(torch.tensor([[2.0, 0.0], [0.0, 1.0]]))
        enc.W_v.weight.copy_(torch.eye(2))
    word = torch.tensor([[[1.0], [0.0], [-1.0]]], dtype=torch.float64)
    char = torch.tensor([[[0.5], [1.0], [0.0]]], dtype=torch.float64)
    mask = torch.zeros(1, 3, dtype=torch.bool)
    fused, weights = enc.fuse(word, char, mask)
    x = [[1.0, 0.5], [0.0, 1.0], [-1.0, 0.0]]
    q = [[a, b] for a, b in x]
    k = [[2 * a, b] for a, b in x]
    for i in range(3):
        scores = [(q[i][0] * k[j][0] + q[i][1] * k[j][1]) / math.sqrt(2) for j in range(3)]
        total = sum(math.exp(s) for s in scores)
        expected = [math.exp(s) / total for s in scores]
        assert weights[0, i].tolist() == pytest.approx(expected, abs=1e-12)
        value = [sum(expected[j] * x[j][c] for j in range(3)) for c in range(2)]
        assert fused[0, i].tolist() == pytest.approx(value, abs=1e-12)


def test_attention_rows(encoder):
    words, chars, mask = question([3, 4, 5, 0, 0])
    _, weights = encoder.fuse(encoder.embed_words(words), encoder.embed_chars(chars), mask)
    rows = weights[0, :3]
    torch.testing.assert_close(rows.sum(-1), torch.ones(3, dtype=torch.float64))
    assert (rows >= 0).all()
    assert (rows[:, 3:] == 0).all()
    assert (weights[0, 3:] == 0).all()


def test_masked_softmax():
    scores = torch.tensor([[1.0, 2.0, 3.0]])
    out = masked_softmax(scores, torch.tensor([[False, False, True]]))
    assert out[0, 2] == 0
    assert float(out.sum()) == pytest.approx(1)


def test_fuse_shape_mismatch(encoder):
    with pytest.raises(ShapeError):
        encoder.fuse(
            torch.zeros(1, 2, 4, dtype=torch.float64),
            torch.zeros(1, 3, 3, dtype=torch.float64),
            torch.zeros(1, 2, dtype=torch.bool),
        )


#######################################
# ENCODING


def test_padding_invariance(encoder):
    short = encoder(*question([3, 4, 5]))
    padded = encoder(*question([3, 4, 5, 0, 0, 0, 0, 0]))
    torch.testing.assert_close(short, padded, atol=1e-6, rtol=0)
    assert short.shape == (1, 5)


def test_batch_with_different_lengths(encoder):
    a = encoder(*question([3, 4]))
    words = torch.tensor([[3, 4, 0], [5, 6, 7]])
    chars = (words.unsqueeze(-1) % 5 + 1).expand(-1, -1, 3).clone()
    chars[words == 0] = 0
    both = encoder(words, chars, words == 0)
    torch.testing.assert_close(both[0], a[0], atol=1e-6, rtol=0)


def test_order_sensitive(encoder):
    a = encoder(*question([3, 4, 5]))
    b = encoder(*question([4, 3, 5]))
    assert not torch.allclose(a, b)


def test_empty_question(encoder):
    with pytest.raises(ValidationError):
        encoder(*question([0, 0]))


def test_gradient_wrt_word_embeddings(encoder):
    words, chars, mask = question([3, 4, 5])
    emb = encoder.embed_words(words).detach().clone().requires_grad_(True)
    direction = torch.linspace(-1, 1, encoder.hidden, dtype=torch.float64)

    def f(x):
        return (encoder.encode_embedded(x, chars, mask) * direction).sum()

    f(emb).backward()
    with torch.no_grad():
        numeric = central_difference(f, emb.detach().clone())
    error = (emb.grad - numeric).norm() / numeric.norm()
    assert error < 1e-4


def test_gradcheck(encoder):
    words, chars, mask = question([3, 4])
    emb = encoder.embed_words(words).detach().clone().requires_grad_(True)
    assert torch.autograd.gradcheck(
        lambda x: encoder.encode_embedded(x, chars, mask), (emb,), eps=1e-6, atol=1e-5
    )


def test_all_parameters_receive_gradient(encoder):
    words = torch.tensor([[3, 4, 5], [6, 7, 0]])
    chars = torch.tensor([[[2, 3, 4]] * 3, [[5, 1, 2], [3, 2, 0], [0, 0, 0]]])
    out = encoder(words, chars, words == 0)
    out.sum().backward()
    for name, p in encoder.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


#######################################
# WORD VECTORS


def test_load_word_vectors(tmp_path):
    path = tmp_path / 'vectors.txt'
    path.write_text("b 1 2 3\nunknown 0 0 0\n\na -1 -2 -3\n")
    matrix = load_word_vectors(path, ['<pad>', '<unk>', 'a', 'b'], 3, seed=1)
    assert matrix.shape == (4, 3)
    assert matrix[0].tolist() == [0, 0, 0]
    assert matrix[2].tolist() == [-1, -2, -3]
    assert matrix[3].tolist() == [1, 2, 3]
    again = load_word_vectors(path, ['<pad>', '<unk>', 'a', 'b'], 3, seed=1)
    assert torch.equal(matrix, again)


def test_load_word_vectors_bad_line(tmp_path):
    path = tmp_path / 'vectors.txt'
    path.write_text("a 1 2 3\nb 1 2\n")
    with pytest.raises(ParseError) as info:
        load_word_vectors(path, ['<pad>', 'a', 'b'], 3)
    assert ':2' in str(info.value)


def test_word_vectors_shape():
    with pytest.raises(ShapeError):
        QuestionEncoder(4, 4, d_w=3, d_a=2, hidden=2, word_vectors=torch.zeros(5, 3))
