"""Compact shared encoder-decoder with tied embeddings."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .tokenizer import UPOS_TAGS


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    hidden: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn: int | None = None
    max_len: int = 128
    dropout: float = 0.1
    n_pos_tags: int = len(UPOS_TAGS)
    truncate: bool = True

    def __post_init__(self):
        if self.ffn is None:
            self.ffn = 4 * self.hidden
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")

    @classmethod
    def full_scale(cls, vocab_size: int = 32_000) -> "ModelConfig":
        return cls(vocab_size=vocab_size, hidden=768, heads=12, encoder_layers=6, decoder_layers=6, max_len=768)


class ScriptAlignModel(nn.Module):
    """Encoder with MLM and POS heads plus a translation decoder.

    One embedding matrix feeds the encoder, the decoder and both output
    projections.  ``fusion_param`` is the scalar gate used for early fusion.
    """

    def __init__(self, config: ModelConfig, pad_id: int = 0):
        super().__init__()
        self.config = config
        self.pad_id = pad_id
        h = config.hidden
        self.embed = nn.Embedding(config.vocab_size, h, padding_idx=pad_id)
        self.enc_pos = nn.Embedding(config.max_len, h)
        self.dec_pos = nn.Embedding(config.max_len, h)
        self.emb_norm = nn.LayerNorm(h)
        self.emb_drop = nn.Dropout(config.dropout)
        enc_layer = nn.TransformerEncoderLayer(h, config.heads, config.ffn, config.dropout,
                                               activation="gelu", batch_first=True)
        self.encoder = nn.TransformerEncoder(enc_layer, config.encoder_layers, enable_nested_tensor=False)
        dec_layer = nn.TransformerDecoderLayer(h, config.heads, config.ffn, config.dropout,
                                               activation="gelu", batch_first=True)
        self.decoder = nn.TransformerDecoder(dec_layer, config.decoder_layers)
        self.mlm_bias = nn.Parameter(torch.zeros(config.vocab_size))
        self.dec_bias = nn.Parameter(torch.zeros(config.vocab_size))
        self.pos_head = nn.Linear(h, config.n_pos_tags)
        self.fusion_param = nn.Parameter(torch.zeros(()))
        self._init_weights()

    def _init_weights(self):
        nn.init.normal_(self.embed.weight, std=0.02)
        nn.init.normal_(self.enc_pos.weight, std=0.02)
        nn.init.normal_(self.dec_pos.weight, std=0.02)
        with torch.no_grad():
            self.embed.weight[self.pad_id].zero_()

    # -- embeddings ------------------------------------------------------
    def token_embeddings(self, ids: torch.Tensor) -> torch.Tensor:
        return self.embed(ids)

    def _check_len(self, length: int):
        if length > self.config.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {self.config.max_len}")

    def encoder_inputs(self, token_embeds: torch.Tensor) -> torch.Tensor:
        length = token_embeds.shape[1]
        self._check_len(length)
        positions = torch.arange(length, device=token_embeds.device)
        return self.emb_drop(self.emb_norm(token_embeds + self.enc_pos(positions)))

    # -- forward passes --------------------------------------------------
    def encode(self, ids: torch.Tensor | None = None, pad_mask: torch.Tensor | None = None,
               token_embeds: torch.Tensor | None = None) -> torch.Tensor:
        """Hidden states ``[batch, positions, hidden]``.

        ``pad_mask`` is True at padding positions, which are never attended to.
        Pass ``token_embeds`` instead of ``ids`` to run on pre-mixed embeddings.
        """
        if token_embeds is None:
            if ids.dim() == 1:
                ids = ids.unsqueeze(0)
            if pad_mask is None:
                pad_mask = ids.eq(self.pad_id)
            token_embeds = self.token_embeddings(ids)
        if pad_mask is None:
            pad_mask = torch.zeros(token_embeds.shape[:2], dtype=torch.bool, device=token_embeds.device)
        x = self.encoder_inputs(token_embeds)
        return self.encoder(x, src_key_padding_mask=pad_mask)

    def mlm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return hidden @ self.embed.weight.t() + self.mlm_bias

    def decode(self, memory: torch.Tensor, memory_pad_mask: torch.Tensor | None,
               target_ids: torch.Tensor, target_pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Teacher-forced decoder logits ``[batch, target positions, vocab]``.

        Position ``t`` only sees target tokens ``<= t``.
        """
        if target_ids.dim() == 1:
            target_ids = target_ids.unsqueeze(0)
        b, t = target_ids.shape
        if t == 0:
            return memory.new_zeros((b, 0, self.config.vocab_size))
        self._check_len(t)
        if target_pad_mask is None:
            target_pad_mask = target_ids.eq(self.pad_id)
        positions = torch.arange(t, device=target_ids.device)
        x = self.emb_drop(self.emb_norm(self.embed(target_ids) + self.dec_pos(positions)))
        causal = torch.triu(torch.ones((t, t), dtype=torch.bool, device=x.device), diagonal=1)
        out = self.decoder(x, memory, tgt_mask=causal, tgt_key_padding_mask=target_pad_mask,
                           memory_key_padding_mask=memory_pad_mask)
        return out @ self.embed.weight.t() + self.dec_bias

    def pos_logits(self, hidden: torch.Tensor, word_spans) -> torch.Tensor:
        """One UPOS logit row per word, read at the word's first subword.

        ``hidden`` is ``[positions, hidden]`` for a single sequence.
        """
        if hidden.dim() == 3:
            if hidden.shape[0] != 1:
                raise ValueError("pos_logits takes one sequence at a time")
            hidden = hidden[0]
        starts = []
        for s, e in word_spans:
            if not 0 <= s < e <= hidden.shape[0]:
                raise IndexError(f"word span {(s, e)} outside a sequence of length {hidden.shape[0]}")
            starts.append(s)
        idx = torch.tensor(starts, dtype=torch.long, device=hidden.device)
        return self.pos_head(hidden.index_select(0, idx))

    def pos_logits_dense(self, hidden: torch.Tensor) -> torch.Tensor:
        """UPOS logits at every position (batched training path)."""
        return self.pos_head(hidden)

    @torch.no_grad()
    def greedy_translate(self, ids: torch.Tensor, start_id: int, end_id: int, max_new: int = 32):
        self.eval()
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        pad = ids.eq(self.pad_id)
        memory = self.encode(ids, pad)
        out = torch.full((ids.shape[0], 1), start_id, dtype=torch.long, device=ids.device)
        for _ in range(min(max_new, self.config.max_len - 1)):
            logits = self.decode(memory, pad, out)
            nxt = logits[:, -1].argmax(-1, keepdim=True)
            out = torch.cat([out, nxt], dim=1)
            if bool((nxt == end_id).all()):
                break
        return out


def fuse_embeddings(e_orig: torch.Tensor, e_norm: torch.Tensor, fusion_param: torch.Tensor,
                    pad_embedding: torch.Tensor | None = None) -> torch.Tensor:
    """``sigmoid(p) * e_orig + (1 - sigmoid(p)) * e_norm`` over a common frame.

    Inputs are ``[..., positions, hidden]``; the shorter one is padded along the
    position axis with ``pad_embedding`` (zeros if not given).
    """
    if e_orig.shape[-1] != e_norm.shape[-1]:
        raise ValueError(f"hidden size mismatch: {e_orig.shape[-1]} vs {e_norm.shape[-1]}")
    lo, ln = e_orig.shape[-2], e_norm.shape[-2]
    if lo != ln:
        target = max(lo, ln)
        e_orig = _pad_positions(e_orig, target, pad_embedding)
        e_norm = _pad_positions(e_norm, target, pad_embedding)
    alpha = torch.sigmoid(fusion_param)
    return alpha * e_orig + (1 - alpha) * e_norm


def _pad_positions(x: torch.Tensor, target: int, pad_embedding):
    missing = target - x.shape[-2]
    if missing <= 0:
        return x
    shape = list(x.shape)
    shape[-2] = missing
    if pad_embedding is None:
        fill = x.new_zeros(shape)
    else:
        fill = pad_embedding.to(x.dtype).expand(*shape)
    return torch.cat([x, fill], dim=-2)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def state_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: ScriptAlignModel, tokenizer_hash: str, extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": asdict(model.config),
        "pad_id": model.pad_id,
        "state_dict": model.state_dict(),
        "tokenizer_hash": tokenizer_hash,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, tokenizer_hash: str | None = None):
    """Load a checkpoint; refuses when the tokenizer hash does not match."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if tokenizer_hash is not None and payload["tokenizer_hash"] != tokenizer_hash:
        raise CheckpointError(
            f"checkpoint {path} was trained with tokenizer {payload['tokenizer_hash'][:12]}, "
            f"got {tokenizer_hash[:12]}"
        )
    model = ScriptAlignModel(ModelConfig(**payload["config"]), pad_id=payload["pad_id"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
