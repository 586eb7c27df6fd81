import logging
import math
from collections.abc import Sequence
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from .data_synth import PAD_ID
from .errors import ParseError, ShapeError, ValidationError

__doc__ = """Question encoder

Character embeddings go through a 2-D convolution and a max-pool over the
characters of each token; the result is joined with the word embedding and
mixed by one masked self-attention layer. The fused tokens are
layer-normalized and read by a single-layer unidirectional LSTM whose final
hidden state is the question feature.
"""

log = logging.getLogger(__name__)


def _check_ids(name: str, ids: torch.Tensor, size: int) -> None:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= size):
        raise IndexError(f"{name}: id out of range [0, {size})")


def masked_softmax(scores: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis, with masked keys (True) receiving zero weight"""
    scores = scores.masked_fill(key_mask, torch.finfo(scores.dtype).min)
    return F.softmax(scores, dim=-1)


class QuestionEncoder(nn.Module):
    """Q^v = l(s(Q^w, c(Q^a)))"""

    def __init__(
        self,
        word_vocab_size: int,
        char_vocab_size: int,
        *,
        d_w: int = 300,
        d_a: int = 100,
        hidden: int = 1024,
        char_kernel: int = 3,
        word_vectors: Optional[torch.Tensor] = None,
    ) -> None:
        super().__init__()
        self.d_w = d_w
        self.d_a = d_a
        self.hidden = hidden
        self.word_embedding = nn.Embedding(word_vocab_size, d_w, padding_idx=PAD_ID)
        if word_vectors is not None:
            if tuple(word_vectors.shape) != (word_vocab_size, d_w):
                raise ShapeError(
                    f"expecting {(word_vocab_size, d_w)}, got {tuple(word_vectors.shape)}",
                    field='word_vectors',
                )
            with torch.no_grad():
                self.word_embedding.weight.copy_(word_vectors)
        self.char_embedding = nn.Embedding(char_vocab_size, d_a, padding_idx=PAD_ID)
        # channels are the embedding dimensions, the grid is (token, character)
        self.char_conv = nn.Conv2d(d_a, d_a, kernel_size=(1, char_kernel), padding='same')
        d_model = d_w + d_a
        self.d_model = d_model
        self.W_q = nn.Linear(d_model, d_model, bias=False)
        self.W_k = nn.Linear(d_model, d_model, bias=False)
        self.W_v = nn.Linear(d_model, d_model, bias=False)
        self.token_norm = nn.LayerNorm(d_model)
        self.lstm = nn.LSTM(d_model, hidden, num_layers=1, batch_first=True)

    def embed_words(self, word_ids: torch.Tensor) -> torch.Tensor:
        _check_ids('word_ids', word_ids, self.word_embedding.num_embeddings)
        return self.word_embedding(word_ids)

    def embed_chars(self, char_ids: torch.Tensor) -> torch.Tensor:
        """[batch, tokens, chars] -> [batch, tokens, d_a]

        Padding characters are excluded from the max-pool; a token made only
        of padding gets a zero vector.
        """
        _check_ids('char_ids', char_ids, self.char_embedding.num_embeddings)
        char_mask = char_ids == PAD_ID
        emb = self.char_embedding(char_ids)  # [b, t, c, d_a]
        features = self.char_conv(emb.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        features = features.masked_fill(char_mask.unsqueeze(-1), torch.finfo(features.dtype).min)
        pooled = features.amax(dim=2)
        empty = char_mask.all(dim=2, keepdim=True)
        return torch.where(empty, torch.zeros_like(pooled), pooled)

    def fuse(
        self, word_emb: torch.Tensor, char_feat: torch.Tensor, pad_mask: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Masked scaled dot-product self-attention over the joined token embeddings

        :return: fused tokens [batch, tokens, d_w + d_a] and attention weights
            [batch, tokens, tokens] (rows of padding queries are zero)
        """
        if word_emb.shape[:-1] != char_feat.shape[:-1] or word_emb.shape[:-1] != pad_mask.shape:
            raise ShapeError(
                f"token counts differ: words {tuple(word_emb.shape)},"
                f" chars {tuple(char_feat.shape)}, mask {tuple(pad_mask.shape)}"
            )
        x = torch.cat([word_emb, char_feat], dim=-1)
        if x.shape[-1] != self.d_model:
            raise ShapeError(f"expecting {self.d_model} features, got {x.shape[-1]}")
        q, k, v = self.W_q(x), self.W_k(x), self.W_v(x)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_model)
        weights = masked_softmax(scores, pad_mask.unsqueeze(-2))
        weights = weights.masked_fill(pad_mask.unsqueeze(-1), 0)
        return weights @ v, weights

    def encode_sequence(self, fused: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        lengths = (~pad_mask).sum(dim=-1)
        if bool((lengths == 0).any()):
            raise ValidationError("question without tokens", field='word_ids')
        packed = pack_padded_sequence(
            self.token_norm(fused), lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        _, (h_n, _) = self.lstm(packed)
        return h_n[-1]

    def encode_embedded(
        self, word_emb: torch.Tensor, char_ids: torch.Tensor, pad_mask: torch.Tensor
    ) -> torch.Tensor:
        fused, _ = self.fuse(word_emb, self.embed_chars(char_ids), pad_mask)
        return self.encode_sequence(fused, pad_mask)

    def forward(
        self, word_ids: torch.Tensor, char_ids: torch.Tensor, pad_mask: torch.Tensor
    ) -> torch.Tensor:
        """[batch, tokens] ids -> Q^v [batch, hidden]"""
        return self.encode_embedded(self.embed_words(word_ids), char_ids, pad_mask)


def load_word_vectors(
    path: Union[str, Path],
    word_vocab: Sequence[str],
    d_w: int,
    *,
    seed: int = 0,
) -> torch.Tensor:
    """Embedding matrix from a whitespace separated text file (token v1 ... v_dw)

    Tokens missing from the file keep a random N(0, 1) row, the padding row is zero.
    """
    rng = np.random.default_rng(seed)
    matrix = rng.standard_normal((len(word_vocab), d_w))
    index = {word: i for i, word in enumerate(word_vocab)}
    found = 0
    with open(path, encoding='utf-8') as f:
        for line_number, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != d_w + 1:
                raise ParseError(
                    f"expecting {d_w} values, got {len(parts) - 1}",
                    path=str(path),
                    line=line_number,
                )
            row = index.get(parts[0])
            if row is None:
                continue
            try:
                matrix[row] = np.asarray(parts[1:], dtype=np.float64)
            except ValueError as e:
                raise ParseError(str(e), path=str(path), line=line_number) from e
            found += 1
    matrix[PAD_ID] = 0
    log.info('Loaded %d/%d word vectors from %s', found, len(word_vocab), path)
    return torch.from_numpy(matrix).float()
