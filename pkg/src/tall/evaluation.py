"""The six evaluation approaches over one shared missing-word task.

Every approach consumes the identical evaluation dataset and identical
per-example sampler streams (derived from the sampler seed and example
index), so accuracy differences come from the approaches themselves.
Predictions are scored in LR token space; approaches whose raw output
lives in the LM space map it back first, and anything unmappable scores
as incorrect with a sentinel prediction of -1.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import CausalLM, Translator, pad_batch
from .nn import ParamStore
from .optim import AdamW, clip_grad_norm, cosine_lr
from .pipeline import SamplerConfig, TallModel, example_rng, sample_token
from .pretrain import TrainConfig, _epoch_batches
from .tensor import Tape, Tensor
from .world import BOS, ToyGrammar, World, corpus_hash, generate_corpus

APPROACHES = ("direct", "finetuned", "from_scratch", "naive", "soft_prompt",
              "tall")


@dataclass(frozen=True)
class EvalRecord:
    example_id: int
    gold: int
    predicted: int
    correct: bool
    approach: str


@dataclass
class EvalExample:
    """One missing-word item: the LR sentence with its last token held out."""

    lr_tokens: tuple

    @property
    def prefix(self) -> list:
        return list(self.lr_tokens[:-1])

    @property
    def gold(self) -> int:
        return int(self.lr_tokens[-1])


def make_eval_dataset(world: World, grammar: ToyGrammar, seed: int,
                      n: int) -> tuple[list[EvalExample], str]:
    pairs = generate_corpus(seed, n, grammar, world)
    examples = [EvalExample(p.lr_tokens) for p in pairs]
    return examples, corpus_hash([e.lr_tokens for e in examples])


def accuracy(records: list[EvalRecord]) -> float:
    if not records:
        raise ValueError("accuracy needs at least one record")
    return sum(r.correct for r in records) / len(records)


def _records(approach: str, examples: list[EvalExample],
             predictions: list[int]) -> list[EvalRecord]:
    return [
        EvalRecord(i, ex.gold, int(pred), int(pred) == ex.gold, approach)
        for i, (ex, pred) in enumerate(zip(examples, predictions))
    ]


# ---------------------------------------------------------------------------
# direct family: feed LR ids (remapped) straight into a causal LM


def _direct_predictions(llm: CausalLM, world: World,
                        examples: list[EvalExample], sampler: SamplerConfig,
                        batch_size: int = 128) -> list[int]:
    preds = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        prefixes = [world.lr_to_lm(np.array(ex.prefix)).tolist() for ex in chunk]
        logits = llm.next_token_logits(prefixes)
        for j, ex in enumerate(chunk):
            rng = example_rng(sampler.seed, start + j)
            lm_id = sample_token(logits[j], sampler, rng)
            lr_id = world.lm_to_lr(lm_id)
            preds.append(lr_id if lr_id is not None and lr_id >= N_SPECIALS
                         else -1)
    return preds


def eval_direct(llm: CausalLM, world: World, examples: list[EvalExample],
                sampler: SamplerConfig, approach: str = "direct"
                ) -> list[EvalRecord]:
    if not examples:
        raise ValueError("evaluation dataset is empty")
    return _records(approach, examples,
                    _direct_predictions(llm, world, examples, sampler))


# ---------------------------------------------------------------------------
# naive: round-trip translation with one LM continuation token in between


def eval_naive(lr2hr: Translator, llm: CausalLM, hr2lr: Translator,
               world: World, examples: list[EvalExample],
               sampler: SamplerConfig, batch_size: int = 128,
               log: list | None = None) -> list[EvalRecord]:
    if not examples:
        raise ValueError("evaluation dataset is empty")
    preds = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        hr_seqs = lr2hr.greedy_translate([ex.prefix for ex in chunk])
        lm_prefixes = [
            world.hr_to_lm(np.array(h, dtype=np.int64)).tolist() for h in hr_seqs
        ]
        logits = llm.next_token_logits(lm_prefixes)
        completed = []
        for j, h in enumerate(hr_seqs):
            rng = example_rng(sampler.seed, start + j)
            lm_id = sample_token(logits[j], sampler, rng)
            hr_id = world.lm_to_hr(lm_id)
            completed.append(list(h) + [hr_id] if hr_id is not None else None)
        back_in = [c for c in completed if c is not None]
        back_out = iter(hr2lr.greedy_translate(back_in))
        for j, c in enumerate(completed):
            if c is None:
                preds.append(-1)
                if log is not None:
                    log.append(f"example {start + j}: LM emitted a non-HR token")
                continue
            lr_seq = next(back_out)
            if not lr_seq:
                preds.append(-1)
                if log is not None:
                    log.append(f"example {start + j}: empty back-translation")
            else:
                preds.append(int(lr_seq[-1]))
    return _records("naive", examples, preds)


# ---------------------------------------------------------------------------
# soft prompt: trainable vectors prepended to frozen LM embeddings


@dataclass
class SoftPromptParams:
    store: ParamStore
    n_prompt: int

    @property
    def embeddings(self) -> Tensor:
        return self.store["prompt"]


def _soft_prompt_logits(llm: CausalLM, prompt: Tensor, lm_prefixes: list
                        ) -> tuple[Tensor, np.ndarray]:
    """Final-position logits with the prompt block prepended to each row."""
    ids, lengths = pad_batch([[BOS] + list(p) for p in lm_prefixes])
    b = len(lm_prefixes)
    n_prompt = prompt.shape[0]
    tok = T.embedding(llm.store["tok_embed"], ids)
    block = T.broadcast_to(T.reshape(prompt, (1,) + prompt.shape),
                           (b,) + prompt.shape)
    x = T.concat([block, tok], axis=1)
    full_lengths = lengths + n_prompt
    hidden = llm.hidden_from_embeddings(x, full_lengths)
    from .models import tied_logits

    return tied_logits(hidden, llm.store["tok_embed"]), full_lengths


def train_soft_prompt(llm: CausalLM, world: World, corpus_lr: list,
                      train_cfg: TrainConfig, n_prompt: int = 30
                      ) -> tuple[SoftPromptParams, list[dict]]:
    """Train only the prompt block on the shared final-token task.

    ``corpus_lr`` holds full LR sentences (content ids).  The LM itself
    must already be frozen; its bytes are untouched.
    """
    for name in llm.store.names():
        if not llm.store.is_frozen(name):
            llm.store.freeze(name)
    store = ParamStore()
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 0x50F7]))
    store.add("prompt", rng.normal(0.0, 0.1,
                                   size=(n_prompt, llm.cfg.d_model)))
    params = SoftPromptParams(store, n_prompt)
    opt = AdamW(store, lr=train_cfg.learning_rate,
                weight_decay=train_cfg.weight_decay)
    updates_per_epoch = -(-len(corpus_lr) // train_cfg.batch_size)
    total = max(1, updates_per_epoch * train_cfg.epochs)
    metrics, update = [], 0
    for epoch in range(train_cfg.epochs):
        for batch_idx in _epoch_batches(len(corpus_lr), train_cfg.batch_size,
                                        train_cfg.seed, epoch):
            batch = [corpus_lr[i] for i in batch_idx]
            lm_prefix = [world.lr_to_lm(np.array(s[:-1])).tolist() for s in batch]
            targets = np.array(
                [world.lr_to_lm(np.array([s[-1]]))[0] for s in batch])
            with Tape() as tape:
                logits, lengths = _soft_prompt_logits(
                    llm, params.embeddings, lm_prefix)
                loss = T.cross_entropy_last_token(logits, targets, lengths)
            tape.backward(loss)
            grad_norm = clip_grad_norm(opt.params, train_cfg.grad_clip_norm)
            lr = cosine_lr(update, total, train_cfg.learning_rate,
                           train_cfg.warmup_steps)
            opt.step(lr)
            opt.zero_grad()
            metrics.append({"step": update, "split": "train",
                            "loss": loss.item(), "lr": lr,
                            "grad_norm": grad_norm})
            update += 1
    return params, metrics


def eval_soft_prompt(llm: CausalLM, params: SoftPromptParams, world: World,
                     examples: list[EvalExample], sampler: SamplerConfig,
                     batch_size: int = 128) -> list[EvalRecord]:
    preds = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        lm_prefix = [world.lr_to_lm(np.array(ex.prefix)).tolist()
                     for ex in chunk]
        logits, lengths = _soft_prompt_logits(llm, params.embeddings,
                                              lm_prefix)
        rows = logits.data[np.arange(len(chunk)), lengths - 1]
        for j, ex in enumerate(chunk):
            rng = example_rng(sampler.seed, start + j)
            lm_id = sample_token(rows[j], sampler, rng)
            lr_id = world.lm_to_lr(lm_id)
            preds.append(lr_id if lr_id is not None else -1)
    return _records("soft_prompt", examples, preds)


# ---------------------------------------------------------------------------
# fine-tuned and from-scratch: full-model training on the LR corpus


def clone_llm(llm: CausalLM) -> CausalLM:
    store = ParamStore()
    for name, t in llm.store.items():
        store.add(name, t.data.copy(), trainable=True)
    return CausalLM(llm.cfg, store)


def finetune_llm(llm: CausalLM, world: World, corpus_lr: list,
                 train_cfg: TrainConfig) -> tuple[CausalLM, dict, list[dict]]:
    """Continue next-token training of every LM weight on LR data."""
    from .pretrain import train_llm

    tuned = clone_llm(llm)
    if train_cfg.epochs == 0:
        return tuned, {"kind": "finetuned", "step": 0}, []
    sequences = [world.lr_to_lm(np.array(s)).tolist() for s in corpus_lr]
    model, meta, metrics = train_llm(llm.cfg, sequences, train_cfg,
                                     init_model=tuned)
    meta["kind"] = "finetuned"
    return model, meta, metrics


def from_scratch_llm(world: World, corpus_lr: list, llm_cfg,
                     train_cfg: TrainConfig) -> tuple[CausalLM, dict, list[dict]]:
    from .pretrain import train_llm

    sequences = [world.lr_to_lm(np.array(s)).tolist() for s in corpus_lr]
    model, meta, metrics = train_llm(llm_cfg, sequences, train_cfg)
    meta["kind"] = "from_scratch"
    return model, meta, metrics


# ---------------------------------------------------------------------------
# the assembled pipeline


def eval_tall(model: TallModel, examples: list[EvalExample],
              sampler: SamplerConfig, batch_size: int = 128
              ) -> list[EvalRecord]:
    if not examples:
        raise ValueError("evaluation dataset is empty")
    preds = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        rngs = [example_rng(sampler.seed, start + j)
                for j in range(len(chunk))]
        preds.extend(model.predict_final_tokens(
            [ex.prefix for ex in chunk], sampler, rngs=rngs))
    return _records("tall", examples, preds)
