"""Masking, multitask loss weighting, view integration and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .model import ModelConfig, ScriptAlignModel, fuse_embeddings, save_checkpoint
from .normalize import RuleTable, default_table, normalize_sentence
from .tokenizer import IGNORE_INDEX, TASKS, TokenizerModel, build_task_input

log = logging.getLogger(__name__)

DEFAULT_WEIGHTS = {"mlm": 1.0, "tlm": 1.0, "trans": 1.0, "pos": 0.5}
REPRESENTATIONS = ("raw", "latin", "ipa")
INTEGRATIONS = ("none", "kl", "fusion")
KL_EPS = 1e-8
_TASK_STREAM = {"mlm": 11, "tlm": 13, "norm": 17, "order": 19}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

class MaskedBatch(NamedTuple):
    input_ids: np.ndarray
    labels: np.ndarray
    positions: np.ndarray


def mask_tokens(ids, rate: float, seed, tok: TokenizerModel, maskable=None) -> MaskedBatch:
    """BERT-style masking.

    Each maskable position is selected with probability ``rate``; a selected
    position becomes ``[MASK]`` 80% of the time, a random ordinary token 10%
    and stays unchanged 10%.  Specials, language tags and padding are never
    selected.  ``seed`` may be an int, a sequence of ints or a numpy Generator.
    """
    if not 0.0 < rate < 1.0:
        raise ValueError(f"mask rate must be in (0, 1), got {rate}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = np.asarray(getattr(ids, "ids", ids), dtype=np.int64)
    if maskable is None:
        maskable = ids >= tok.n_reserved
    selected = (rng.random(ids.shape) < rate) & maskable
    roll = rng.random(ids.shape)
    random_ids = rng.integers(tok.n_reserved, tok.vocab_size, size=ids.shape)
    out = ids.copy()
    out[selected & (roll < 0.8)] = tok.mask_id
    swap = selected & (roll >= 0.8) & (roll < 0.9)
    out[swap] = random_ids[swap]
    labels = np.full(ids.shape, IGNORE_INDEX, dtype=np.int64)
    labels[selected] = ids[selected]
    return MaskedBatch(out, labels, np.argwhere(selected))


# ---------------------------------------------------------------------------
# loss weighting
# ---------------------------------------------------------------------------

class MultitaskLossState(nn.Module):
    """Fixed prior weights, learnable log-variances and the KL weight.

    A task with weight 0 is ablated: it gets no log-variance parameter.
    """

    def __init__(self, weights: dict | None = None, lambda_kl: float = 0.5):
        super().__init__()
        weights = dict(DEFAULT_WEIGHTS if weights is None else weights)
        if any(w < 0 for w in weights.values()):
            raise ValueError("task weights must be non-negative")
        if lambda_kl < 0:
            raise ValueError("lambda_kl must be non-negative")
        self.weights = weights
        self.lambda_kl = float(lambda_kl)
        self.log_var = nn.ParameterDict({t: nn.Parameter(torch.zeros(())) for t, w in weights.items() if w > 0})

    @property
    def active_tasks(self) -> tuple:
        return tuple(t for t, w in self.weights.items() if w > 0)

    def sigma2(self, task: str) -> float:
        return float(torch.exp(self.log_var[task].detach()))

    def task_term(self, task: str, loss) -> torch.Tensor:
        s = self.log_var[task]
        loss = torch.as_tensor(loss, dtype=s.dtype)
        return self.weights[task] * (loss * torch.exp(-s) + s)

    def forward(self, task_losses: dict, tasks=None) -> torch.Tensor:
        return multitask_loss(task_losses, self, tasks)


def multitask_loss(task_losses: dict, state: MultitaskLossState, tasks=None) -> torch.Tensor:
    """``sum_i W_i * (L_i / sigma_i^2 + log sigma_i^2)`` over the active tasks.

    ``tasks`` restricts the sum (e.g. to the tasks present in a batch); by
    default every task with a positive weight must supply a loss.
    """
    tasks = state.active_tasks if tasks is None else tuple(tasks)
    total = None
    for t in tasks:
        if state.weights.get(t, 0) <= 0:
            continue
        if t not in task_losses:
            raise KeyError(f"no loss supplied for active task {t!r}")
        term = state.task_term(t, task_losses[t])
        total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=torch.float32)
    return total


def combine_kl(mlm_term, consistency, lambda_kl: float):
    """MLM term plus the weighted consistency penalty."""
    if lambda_kl < 0:
        raise ValueError("lambda_kl must be non-negative")
    return mlm_term + lambda_kl * consistency


# ---------------------------------------------------------------------------
# KL consistency
# ---------------------------------------------------------------------------

def floored_log_probs(logits: torch.Tensor, eps: float = KL_EPS):
    p = torch.softmax(logits, dim=-1).clamp_min(eps)
    p = p / p.sum(dim=-1, keepdim=True)
    return p, torch.log(p)


def directional_kl(teacher_logits: torch.Tensor, student_logits: torch.Tensor, eps: float = KL_EPS):
    """Per-position ``KL(teacher || student)``; the teacher side is detached."""
    p_t, logp_t = floored_log_probs(teacher_logits.detach(), eps)
    _, logp_s = floored_log_probs(student_logits, eps)
    return (p_t * (logp_t - logp_s)).sum(dim=-1)


def consistency_loss(logits_orig: torch.Tensor, logits_norm: torch.Tensor,
                     pad_orig: torch.Tensor | None = None, pad_norm: torch.Tensor | None = None,
                     eps: float = KL_EPS) -> torch.Tensor:
    """Symmetric KL between two views, position by position.

    Both views are cut to the shorter padded frame and positions that are
    padding in either view are left out.  In each direction the reference
    distribution is detached.  Returns the mean over included positions.
    """
    frame = min(logits_orig.shape[-2], logits_norm.shape[-2])
    lo = logits_orig[..., :frame, :]
    ln = logits_norm[..., :frame, :]
    keep = torch.ones(lo.shape[:-1], dtype=torch.bool, device=lo.device)
    if pad_orig is not None:
        keep &= ~pad_orig[..., :frame]
    if pad_norm is not None:
        keep &= ~pad_norm[..., :frame]
    n = int(keep.sum())
    if n == 0:
        warnings.warn("consistency_loss: no position is non-padding in both views", RuntimeWarning)
        return lo.sum() * 0.0
    forward = directional_kl(lo, ln, eps)
    backward = directional_kl(ln, lo, eps)
    return 0.5 * ((forward * keep).sum() / n + (backward * keep).sum() / n)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    tasks: tuple = ("mlm",)
    representation: str = "raw"
    integration: str = "none"
    consistency_lambda: float = 0.5
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 20
    grad_accum: int = 1
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    mask_rate: float = 0.15
    max_len: int = 128
    seed: int = 0
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    model: dict = field(default_factory=lambda: {"hidden": 64, "heads": 4, "encoder_layers": 2,
                                                 "decoder_layers": 2, "dropout": 0.1})

    def __post_init__(self):
        if isinstance(self.tasks, str):
            self.tasks = tuple(t.strip() for t in self.tasks.split(",") if t.strip())
        self.tasks = tuple(self.tasks)
        self.validate()

    def validate(self):
        unknown = [t for t in self.tasks if t not in TASKS]
        if unknown:
            raise ConfigError(f"unknown task(s): {', '.join(unknown)}")
        if "mlm" not in self.tasks:
            raise ConfigError("the MLM task is always active")
        if self.representation not in REPRESENTATIONS:
            raise ConfigError(f"unknown representation {self.representation!r}")
        if self.integration not in INTEGRATIONS:
            raise ConfigError(f"unknown integration {self.integration!r}")
        if self.representation == "raw" and self.integration != "none":
            raise ConfigError(f"{self.integration} needs a normalized representation (latin or ipa)")
        if self.representation != "raw" and self.integration == "none":
            raise ConfigError("normalized views are auxiliary: choose --integration kl or fusion")
        if self.consistency_lambda < 0:
            raise ConfigError("consistency_lambda must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.grad_accum < 1:
            raise ConfigError("epochs, batch_size and grad_accum must be positive")
        if not 0 < self.mask_rate < 1:
            raise ConfigError("mask_rate must be in (0, 1)")

    @property
    def task_weights(self) -> dict:
        return {t: (float(self.weights.get(t, DEFAULT_WEIGHTS[t])) if t in self.tasks else 0.0) for t in TASKS}

    @property
    def name(self) -> str:
        label = "+".join(t for t in TASKS if t in self.tasks)
        if self.representation != "raw":
            label += f"_{self.representation}-{self.integration}"
        return label

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown training option(s): {', '.join(sorted(extra))}")
        return cls(**d)

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        base = dict(epochs=10, batch_size=16, lr=5e-5, warmup_steps=500, grad_accum=2, max_len=768,
                    model={"hidden": 768, "heads": 12, "encoder_layers": 6, "decoder_layers": 6})
        base.update(overrides)
        return cls(**base)


def ablation_grid(train: TrainConfig | None = None) -> list:
    """Both ablation axes: task cells on raw text, and view cells under MLM only.

    The first task cell (MLM on raw text) is the shared baseline.
    """
    base = train or TrainConfig()
    cells = []
    for tasks in (("mlm",), ("mlm", "tlm"), ("mlm", "trans"), ("mlm", "tlm", "trans"),
                  ("mlm", "tlm", "trans", "pos")):
        cells.append(replace(base, tasks=tasks, representation="raw", integration="none"))
    for rep in ("latin", "ipa"):
        for integ in ("kl", "fusion"):
            cells.append(replace(base, tasks=("mlm",), representation=rep, integration=integ))
    return cells


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class _Example:
    lang: str
    mlm: list
    spans: list
    tlm: list | None = None
    trans_target: list | None = None
    pos_labels: list | None = None
    norm: list | None = None


@dataclass
class TrainResult:
    model: ScriptAlignModel
    loss_state: MultitaskLossState
    history: list
    config: TrainConfig

    @property
    def alpha(self) -> float:
        return float(torch.sigmoid(self.model.fusion_param.detach()))


def _pad(seqs: Sequence[list], value: int) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), value, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out


def _prepare(sentences, tok, cfg: TrainConfig, table) -> list:
    examples = []
    need_norm = cfg.representation != "raw"
    for s in sentences:
        mlm = build_task_input("mlm", s, tok, cfg.max_len).input
        ex = _Example(s.lang, mlm.ids, mlm.word_spans)
        if s.translation:
            if "tlm" in cfg.tasks:
                ex.tlm = build_task_input("tlm", s, tok, cfg.max_len).input.ids
            if "trans" in cfg.tasks:
                ex.trans_target = build_task_input("trans", s, tok, cfg.max_len).target.ids
        if "pos" in cfg.tasks and s.upos is not None:
            ex.pos_labels = build_task_input("pos", s, tok, cfg.max_len).pos_labels
        if need_norm:
            view = normalize_sentence(s, cfg.representation, table)
            ex.norm = build_task_input("mlm", view, tok, cfg.max_len).input.ids
        examples.append(ex)
    return examples


def _masked(ids: torch.Tensor, cfg, tok, rng) -> tuple:
    """Mask a padded batch, forcing at least one selection."""
    maskable = (ids >= tok.n_reserved).numpy()
    mb = mask_tokens(ids.numpy(), cfg.mask_rate, rng, tok, maskable)
    inp, labels = mb.input_ids, mb.labels
    if not (labels != IGNORE_INDEX).any() and maskable.any():
        cand = np.argwhere(maskable)
        r, c = cand[rng.integers(len(cand))]
        labels[r, c] = inp[r, c]
        inp[r, c] = tok.mask_id
    return torch.from_numpy(inp), torch.from_numpy(labels)


def _ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=IGNORE_INDEX)


def batch_losses(model, loss_state, batch, cfg: TrainConfig, tok, rngs: dict):
    """Raw task losses (and consistency) for one batch of prepared examples."""
    pad = tok.pad_id
    losses, extra = {}, {}
    mlm_ids = _pad([e.mlm for e in batch], pad)
    pad_o = mlm_ids.eq(pad)
    inp_o, lab_o = _masked(mlm_ids, cfg, tok, rngs["mlm"])

    if cfg.integration == "fusion":
        norm_ids = _pad([e.norm for e in batch], pad)
        frame = max(norm_ids.shape[1], mlm_ids.shape[1])
        # the same positions are masked in the normalized view
        inp_n = norm_ids.clone()
        hit = (lab_o != IGNORE_INDEX)[:, : norm_ids.shape[1]] & (norm_ids[:, : lab_o.shape[1]] >= tok.n_reserved)
        inp_n[:, : hit.shape[1]][hit] = tok.mask_id
        e = fuse_embeddings(model.token_embeddings(inp_o), model.token_embeddings(inp_n),
                            model.fusion_param, model.embed.weight[pad])
        pad_f = torch.ones((len(batch), frame), dtype=torch.bool)
        pad_f[:, : pad_o.shape[1]] &= pad_o
        pad_f[:, : norm_ids.shape[1]] &= norm_ids.eq(pad)
        labels = torch.full((len(batch), frame), IGNORE_INDEX, dtype=torch.long)
        labels[:, : lab_o.shape[1]] = lab_o
        hidden = model.encode(token_embeds=e, pad_mask=pad_f)
        losses["mlm"] = _ce(model.mlm_logits(hidden), labels)
    else:
        logits_o = model.mlm_logits(model.encode(inp_o, pad_o))
        loss_o = _ce(logits_o, lab_o)
        if cfg.integration == "kl":
            norm_ids = _pad([e.norm for e in batch], pad)
            pad_n = norm_ids.eq(pad)
            inp_n, lab_n = _masked(norm_ids, cfg, tok, rngs["norm"])
            logits_n = model.mlm_logits(model.encode(inp_n, pad_n))
            losses["mlm"] = 0.5 * (loss_o + _ce(logits_n, lab_n))
            extra["consistency"] = consistency_loss(logits_o, logits_n, pad_o, pad_n)
        else:
            losses["mlm"] = loss_o

    if "tlm" in cfg.tasks:
        rows = [e.tlm for e in batch if e.tlm is not None]
        if rows:
            ids = _pad(rows, pad)
            inp, lab = _masked(ids, cfg, tok, rngs["tlm"])
            losses["tlm"] = _ce(model.mlm_logits(model.encode(inp, ids.eq(pad))), lab)

    if "trans" in cfg.tasks:
        sel = [e for e in batch if e.trans_target is not None]
        if sel:
            src = _pad([e.mlm for e in sel], pad)
            trg = _pad([e.trans_target for e in sel], pad)
            src_pad = src.eq(pad)
            memory = model.encode(src, src_pad)
            dec_in, dec_lab = trg[:, :-1], trg[:, 1:].clone()
            dec_lab[dec_lab.eq(pad)] = IGNORE_INDEX
            logits = model.decode(memory, src_pad, dec_in, dec_in.eq(pad))
            losses["trans"] = _ce(logits, dec_lab)

    if "pos" in cfg.tasks:
        sel = [e for e in batch if e.pos_labels is not None]
        if sel:
            src = _pad([e.mlm for e in sel], pad)
            lab = _pad([e.pos_labels for e in sel], IGNORE_INDEX)
            hidden = model.encode(src, src.eq(pad))
            losses["pos"] = _ce(model.pos_logits_dense(hidden), lab)

    total = multitask_loss(losses, loss_state, tasks=[t for t in loss_state.active_tasks if t in losses])
    if "consistency" in extra:
        total = combine_kl(total, extra["consistency"], loss_state.lambda_kl)
    return total, losses, extra


def _schedule(warmup: int, total: int):
    def fn(step):
        if warmup > 0 and step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, total - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))
    return fn


def build_model(cfg: TrainConfig, tok: TokenizerModel) -> ScriptAlignModel:
    """Fresh model for ``cfg``; seeds torch so it equals the one ``train`` starts from."""
    torch.manual_seed(cfg.seed)
    mcfg = ModelConfig(vocab_size=tok.vocab_size, max_len=cfg.max_len, **cfg.model)
    return ScriptAlignModel(mcfg, pad_id=tok.pad_id)


@torch.no_grad()
def masked_lm_loss(model: ScriptAlignModel, sentences, tok: TokenizerModel, cfg: TrainConfig,
                   seed: int = 0) -> float:
    """Mean masked-token cross-entropy with fixed masks, dropout off."""
    was_training = model.training
    model.eval()
    examples = _prepare(sentences, tok, replace(cfg, tasks=("mlm",), representation="raw", integration="none"),
                        None)
    total, count = 0.0, 0
    for b in range(0, len(examples), cfg.batch_size):
        ids = _pad([e.mlm for e in examples[b:b + cfg.batch_size]], tok.pad_id)
        inp, lab = _masked(ids, cfg, tok, np.random.default_rng([seed, b]))
        logits = model.mlm_logits(model.encode(inp, ids.eq(tok.pad_id)))
        n = int((lab != IGNORE_INDEX).sum())
        total += float(_ce(logits, lab)) * n
        count += n
    model.train(was_training)
    return total / count


def train(cfg: TrainConfig, sentences, tok: TokenizerModel, *, table: RuleTable | None = None,
          log_path=None, checkpoint_path=None) -> TrainResult:
    """Train one grid cell; deterministic for a fixed ``cfg.seed`` and data order."""
    cfg.validate()
    if not sentences:
        raise ValueError("no training sentences")
    torch.manual_seed(cfg.seed)
    if cfg.representation != "raw" and table is None:
        table = default_table(cfg.representation)
    examples = _prepare(sentences, tok, cfg, table)

    model = build_model(cfg, tok)
    loss_state = MultitaskLossState(cfg.task_weights, cfg.consistency_lambda)

    no_decay = [model.fusion_param, *loss_state.parameters()]
    no_decay_ids = {id(p) for p in no_decay}
    decay = [p for p in model.parameters() if id(p) not in no_decay_ids]
    opt = torch.optim.AdamW([
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ], lr=cfg.lr)
    n_batches = math.ceil(len(examples) / cfg.batch_size)
    total_steps = math.ceil(n_batches / cfg.grad_accum) * cfg.epochs
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _schedule(cfg.warmup_steps, total_steps))

    history = []
    for epoch in range(cfg.epochs):
        model.train()
        order = np.random.default_rng([cfg.seed, epoch, _TASK_STREAM["order"]]).permutation(len(examples))
        sums, counts = {}, {}
        opt.zero_grad()
        for b in range(n_batches):
            batch = [examples[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            rngs = {k: np.random.default_rng([cfg.seed, epoch, b, v]) for k, v in _TASK_STREAM.items()}
            total, losses, extra = batch_losses(model, loss_state, batch, cfg, tok, rngs)
            (total / cfg.grad_accum).backward()
            if (b + 1) % cfg.grad_accum == 0 or b + 1 == n_batches:
                if cfg.clip_norm:
                    torch.nn.utils.clip_grad_norm_(list(model.parameters()) + list(loss_state.parameters()),
                                                   cfg.clip_norm)
                opt.step()
                sched.step()
                opt.zero_grad()
            for k, v in {**losses, **extra, "total": total}.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
                counts[k] = counts.get(k, 0) + 1
        row = {"epoch": epoch + 1}
        row.update({k: sums[k] / counts[k] for k in sums})
        row["alpha"] = float(torch.sigmoid(model.fusion_param.detach()))
        for t in loss_state.active_tasks:
            row[f"log_var_{t}"] = float(loss_state.log_var[t].detach())
        history.append(row)
        log.info("epoch %d %s", epoch + 1, {k: round(v, 4) for k, v in row.items() if k != "epoch"})

    model.eval()
    result = TrainResult(model, loss_state, history, cfg)
    if log_path is not None:
        write_loss_log(history, log_path)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, tok.hash,
                        extra={"train_config": cfg.to_dict(),
                               "log_var": {t: float(v.detach()) for t, v in loss_state.log_var.items()}})
    return result


def write_loss_log(history: list, path):
    """Flat ``epoch, key, value`` table, one row per logged quantity."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["epoch", "key", "value"])
        for row in history:
            for k, v in row.items():
                if k != "epoch":
                    w.writerow([row["epoch"], k, f"{v:.6f}"])
