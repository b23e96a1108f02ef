"""Training loops that build the frozen stand-ins the pipeline needs.

Both trainers share the same bookkeeping: summed cross entropy per
micro-batch, gradient accumulation over ``grad_accum_steps`` micro
batches, normalization by the update's total token count, global-norm
clipping, AdamW with a cosine schedule.  Every source of randomness is
a child of ``TrainConfig.seed``, so re-running reproduces checkpoints
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import CausalLM, CausalLMConfig, Seq2SeqConfig, Translator
from .optim import AdamW, clip_grad_norm, cosine_lr
from .tensor import NumericalError, Tape
from .world import BilingualPair


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 3
    batch_size: int = 32
    grad_clip_norm: float = 1.0
    grad_accum_steps: int = 1
    warmup_steps: int = 0
    seed: int = 0
    eval_fraction: float = 0.02

    def __post_init__(self):
        if min(self.learning_rate, self.epochs, self.batch_size,
               self.grad_clip_norm, self.grad_accum_steps) <= 0:
            raise ValueError(f"TrainConfig fields must be positive: {self}")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ValueError(f"eval_fraction must be in [0, 1): {self}")


def split_train_eval(items: list, fraction: float, seed: int) -> tuple[list, list]:
    """Deterministic shuffle-split; eval gets ceil(fraction * n) items."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5317]))
    order = rng.permutation(len(items))
    n_eval = int(np.ceil(fraction * len(items))) if fraction > 0 else 0
    eval_idx = set(order[:n_eval].tolist())
    train = [items[i] for i in range(len(items)) if i not in eval_idx]
    heldout = [items[i] for i in sorted(eval_idx)]
    return train, heldout


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C, epoch]))
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


class _Trainer:
    """Accumulate-normalize-clip-step driver shared by all training ops."""

    def __init__(self, store, train_cfg: TrainConfig, total_updates: int):
        self.cfg = train_cfg
        self.opt = AdamW(store, lr=train_cfg.learning_rate,
                         weight_decay=train_cfg.weight_decay)
        self.total_updates = max(1, total_updates)
        self.update_index = 0
        self.metrics: list[dict] = []

    @property
    def lr_now(self) -> float:
        return cosine_lr(self.update_index, self.total_updates,
                         self.cfg.learning_rate, self.cfg.warmup_steps)

    def apply_update(self, loss_sum: float, token_count: int) -> dict:
        if not np.isfinite(loss_sum):
            raise NumericalError(
                f"training diverged: loss is not finite at update "
                f"{self.update_index} (loss_sum={loss_sum})"
            )
        for p in self.opt.params:
            if p.grad is not None:
                p.grad = p.grad / token_count
        grad_norm = clip_grad_norm(self.opt.params, self.cfg.grad_clip_norm)
        lr = self.lr_now
        self.opt.step(lr)
        self.opt.zero_grad()
        record = {
            "step": self.update_index,
            "split": "train",
            "loss": loss_sum / token_count,
            "lr": lr,
            "grad_norm": grad_norm,
        }
        self.metrics.append(record)
        self.update_index += 1
        return record


def train_translator(direction: str, model_cfg: Seq2SeqConfig,
                     corpus: list[BilingualPair], train_cfg: TrainConfig
                     ) -> tuple[Translator, dict, list[dict]]:
    """Teacher-forced training with loss at every target position.

    ``direction`` is "lr2hr" or "hr2lr".  Returns the trained model,
    a metadata dict (held-out greedy exact-match rate included), and
    the per-step metrics records.
    """
    if direction not in ("lr2hr", "hr2lr"):
        raise ValueError(f"unknown direction {direction!r}")
    if not corpus:
        raise ValueError("corpus must be nonempty")
    if direction == "lr2hr":
        examples = [(p.lr_tokens, p.hr_tokens) for p in corpus]
    else:
        examples = [(p.hr_tokens, p.lr_tokens) for p in corpus]
    train, heldout = split_train_eval(examples, train_cfg.eval_fraction,
                                      train_cfg.seed)
    model = Translator.init(model_cfg, train_cfg.seed)
    updates_per_epoch = -(-len(train) // (train_cfg.batch_size
                                          * train_cfg.grad_accum_steps))
    trainer = _Trainer(model.store, train_cfg,
                       updates_per_epoch * train_cfg.epochs)

    for epoch in range(train_cfg.epochs):
        batches = _epoch_batches(len(train), train_cfg.batch_size,
                                 train_cfg.seed, epoch)
        pending_loss, pending_tokens, micro = 0.0, 0, 0
        for batch_idx in batches:
            srcs = [train[i][0] for i in batch_idx]
            tgts = [train[i][1] for i in batch_idx]
            with Tape() as tape:
                logits, labels, mask = model.teacher_logits(srcs, tgts)
                loss_sum, n_tok = T.cross_entropy_sum(logits, labels, mask)
            tape.backward(loss_sum)
            pending_loss += loss_sum.item()
            pending_tokens += n_tok
            micro += 1
            if micro == train_cfg.grad_accum_steps:
                trainer.apply_update(pending_loss, pending_tokens)
                pending_loss, pending_tokens, micro = 0.0, 0, 0
        if micro:
            trainer.apply_update(pending_loss, pending_tokens)

    exact = translator_exact_match(model, heldout) if heldout else float("nan")
    if heldout:
        trainer.metrics.append({
            "step": trainer.update_index, "split": "eval",
            "exact_match": exact, "n": len(heldout),
        })
    meta = {
        "kind": f"translator-{direction}",
        "seed": train_cfg.seed,
        "step": trainer.update_index,
        "heldout_exact_match": exact,
    }
    return model, meta, trainer.metrics


def translator_exact_match(model: Translator, examples: list,
                           batch_size: int = 128) -> float:
    """Greedy-decode exact-sentence accuracy over (src, tgt) examples."""
    hits = 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        outs = model.greedy_translate([src for src, _ in chunk])
        hits += sum(tuple(o) == tuple(t) for o, (_, t) in zip(outs, chunk))
    return hits / len(examples)


def train_llm(model_cfg: CausalLMConfig, sequences: list,
              train_cfg: TrainConfig, init_model: CausalLM | None = None
              ) -> tuple[CausalLM, dict, list[dict]]:
    """Next-token training over every position of each sequence.

    ``sequences`` are content id lists in the model's own token space.
    Pass ``init_model`` to continue training existing weights (the
    fine-tuning baseline); otherwise weights start fresh from the seed.
    """
    if not sequences:
        raise ValueError("corpus must be nonempty")
    train, heldout = split_train_eval(sequences, train_cfg.eval_fraction,
                                      train_cfg.seed)
    model = init_model if init_model is not None else CausalLM.init(
        model_cfg, train_cfg.seed)
    updates_per_epoch = -(-len(train) // (train_cfg.batch_size
                                          * train_cfg.grad_accum_steps))
    trainer = _Trainer(model.store, train_cfg,
                       updates_per_epoch * train_cfg.epochs)

    for epoch in range(train_cfg.epochs):
        pending_loss, pending_tokens, micro = 0.0, 0, 0
        for batch_idx in _epoch_batches(len(train), train_cfg.batch_size,
                                        train_cfg.seed, epoch):
            batch = [train[i] for i in batch_idx]
            with Tape() as tape:
                logits, labels, mask = model.logits_for(batch)
                loss_sum, n_tok = T.cross_entropy_sum(logits, labels, mask)
            tape.backward(loss_sum)
            pending_loss += loss_sum.item()
            pending_tokens += n_tok
            micro += 1
            if micro == train_cfg.grad_accum_steps:
                trainer.apply_update(pending_loss, pending_tokens)
                pending_loss, pending_tokens, micro = 0.0, 0, 0
        if micro:
            trainer.apply_update(pending_loss, pending_tokens)

    ppl = llm_perplexity(model, heldout) if heldout else float("nan")
    if heldout:
        trainer.metrics.append({
            "step": trainer.update_index, "split": "eval",
            "perplexity": ppl, "n": len(heldout),
        })
    meta = {
        "kind": "causal-lm",
        "seed": train_cfg.seed,
        "step": trainer.update_index,
        "heldout_perplexity": ppl,
    }
    return model, meta, trainer.metrics


def llm_perplexity(model: CausalLM, sequences: list,
                   batch_size: int = 128) -> float:
    """exp(mean token cross entropy); a uniform model scores vocab_size."""
    total, count = 0.0, 0
    for start in range(0, len(sequences), batch_size):
        batch = sequences[start : start + batch_size]
        logits, labels, mask = model.logits_for(batch)
        loss_sum, n = T.cross_entropy_sum(logits, labels, mask)
        total += loss_sum.item()
        count += n
    return float(np.exp(total / count))
