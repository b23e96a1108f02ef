"""End-to-end orchestration: pretraining, assembly, and the benchmark.

Everything here is a deterministic function of a RunConfig and a seed.
Checkpoints stamp the resolved config, its hash, and a narrower
architecture-compatibility hash that loading verifies.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    RunConfig,
    build_eval_grammar,
    build_grammar,
    build_world,
    compat_hash,
    config_hash,
    llm_config,
    tall_config,
    translator_config,
)
from .models import CausalLM, Translator
from .nn import ParamStore
from .pipeline import TallModel, evaluate_tall, train_tall
from .pretrain import train_llm, train_translator
from .world import World, generate_corpus


def stamp_meta(cfg: RunConfig, meta: dict) -> dict:
    meta = dict(meta)
    meta["config"] = json.loads(json.dumps(_cfg_dict(cfg)))
    meta["config_hash"] = config_hash(cfg)
    meta["compat_hash"] = compat_hash(cfg)
    return meta


def _cfg_dict(cfg: RunConfig) -> dict:
    from .config import resolved_dict

    return resolved_dict(cfg)


def train_corpus(cfg: RunConfig):
    return generate_corpus(cfg.world.seed, cfg.world.train_pairs,
                           build_grammar(cfg), build_world(cfg))


def eval_dataset(cfg: RunConfig, eval_seed: int | None = None):
    seed = cfg.world.eval_seed if eval_seed is None else eval_seed
    return ev.make_eval_dataset(build_world(cfg), build_eval_grammar(cfg),
                                seed, cfg.world.eval_size)


def pretrain_translator(cfg: RunConfig, direction: str, seed: int,
                        corpus=None) -> tuple[Translator, dict, list[dict]]:
    corpus = train_corpus(cfg) if corpus is None else corpus
    model_cfg = translator_config(cfg, direction)
    model, meta, metrics = train_translator(
        direction, model_cfg, corpus,
        cfg.train.translator.to_train_config(seed))
    return model, stamp_meta(cfg, meta), metrics


def pretrain_llm(cfg: RunConfig, seed: int, corpus=None
                 ) -> tuple[CausalLM, dict, list[dict]]:
    corpus = train_corpus(cfg) if corpus is None else corpus
    world = build_world(cfg)
    sequences = [world.hr_to_lm(np.array(p.hr_tokens)).tolist()
                 for p in corpus]
    model, meta, metrics = train_llm(llm_config(cfg), sequences,
                                     cfg.train.llm.to_train_config(seed))
    return model, stamp_meta(cfg, meta), metrics


def save_model(model, meta: dict, path) -> None:
    save_checkpoint(model.store, meta, path)


def load_translator(cfg: RunConfig, direction: str, path) -> tuple[Translator, dict]:
    store, meta = load_checkpoint(path,
                                  expect_meta={"compat_hash": compat_hash(cfg)})
    return Translator(translator_config(cfg, direction), store), meta


def load_llm(cfg: RunConfig, path) -> tuple[CausalLM, dict]:
    store, meta = load_checkpoint(path,
                                  expect_meta={"compat_hash": compat_hash(cfg)})
    return CausalLM(llm_config(cfg), store), meta


def assemble_tall(cfg: RunConfig, lr2hr: Translator, hr2lr: Translator,
                  llm: CausalLM, seed: int) -> TallModel:
    return TallModel.assemble(tall_config(cfg), build_world(cfg), lr2hr,
                              hr2lr, llm, seed)


def tall_trainable_store(model: TallModel) -> ParamStore:
    out = ParamStore()
    for name, t in model.store.trainable_items():
        out.add(name, t.data.copy())
    return out


def load_tall_trainables(model: TallModel, path, cfg: RunConfig) -> dict:
    store, meta = load_checkpoint(path,
                                  expect_meta={"compat_hash": compat_hash(cfg)})
    for name, t in store.items():
        if name not in model.store or model.store.is_frozen(name):
            raise ValueError(
                f"checkpoint entry {name!r} is not a trainable pipeline part")
        model.store[name].data[:] = t.data
    return meta


def write_metrics(metrics: list[dict], path) -> None:
    with open(path, "w") as fh:
        for record in metrics:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# benchmark


def run_approaches(cfg: RunConfig, approaches, lr2hr: Translator,
                   hr2lr: Translator, llm: CausalLM,
                   tall_model: TallModel | None, examples, dataset_hash: str,
                   corpus=None, sampler_seed: int | None = None
                   ) -> tuple[list[dict], dict]:
    """Evaluate the requested approaches on one shared dataset.

    The fine-tuned, from-scratch, and soft-prompt baselines train here,
    on the shared training corpus, because they are per-approach
    trainings rather than reusable backbones.
    """
    world = build_world(cfg)
    sampler = cfg.sampler.to_sampler(sampler_seed)
    rows = []
    all_records = {}
    corpus_lr = None

    def need_corpus_lr():
        nonlocal corpus_lr
        if corpus_lr is None:
            pairs = train_corpus(cfg) if corpus is None else corpus
            corpus_lr = [list(p.lr_tokens) for p in pairs]
        return corpus_lr

    for approach in approaches:
        if approach == "direct":
            records = ev.eval_direct(llm, world, examples, sampler)
        elif approach == "naive":
            records = ev.eval_naive(lr2hr, llm, hr2lr, world, examples,
                                    sampler)
        elif approach == "soft_prompt":
            sp_cfg = cfg.train.soft_prompt
            params, _ = ev.train_soft_prompt(
                llm, world, need_corpus_lr(),
                sp_cfg.to_train_config(sampler.seed),
                n_prompt=sp_cfg.n_prompt)
            records = ev.eval_soft_prompt(llm, params, world, examples,
                                          sampler)
        elif approach == "finetuned":
            tuned, _, _ = ev.finetune_llm(
                llm, world, need_corpus_lr(),
                cfg.train.finetune.to_train_config(sampler.seed))
            records = ev.eval_direct(tuned, world, examples, sampler,
                                     approach="finetuned")
        elif approach == "from_scratch":
            scratch, _, _ = ev.from_scratch_llm(
                world, need_corpus_lr(), llm_config(cfg),
                cfg.train.from_scratch.to_train_config(sampler.seed))
            records = ev.eval_direct(scratch, world, examples, sampler,
                                     approach="from_scratch")
        elif approach == "tall":
            if tall_model is None:
                raise ValueError("tall approach requires a trained pipeline")
            records = ev.eval_tall(tall_model, examples, sampler)
        else:
            raise ValueError(f"unknown approach {approach!r}")
        all_records[approach] = records
        rows.append({
            "dataset": f"toy-shifted-{cfg.world.eval_seed}",
            "approach": approach,
            "model": "toy-lm",
            "accuracy_percent": round(100.0 * ev.accuracy(records), 2),
        })
    header = {
        "config_hash": config_hash(cfg),
        "dataset_hash": dataset_hash,
        "sampler_seed": sampler.seed,
        "n_examples": len(examples),
    }
    return rows, {"header": header, "records": all_records}


def run_benchmark_seed(seed: int, approaches=None, cfg: RunConfig | None = None
                       ) -> dict:
    """Train everything for one benchmark seed and evaluate.

    Returns per-approach accuracy rows plus the artifacts needed by
    callers that inspect freezing or reuse the trained pipeline.
    """
    from .config import benchmark_config

    cfg = benchmark_config(seed) if cfg is None else cfg
    approaches = list(approaches or ("direct", "naive", "soft_prompt", "tall"))
    corpus = train_corpus(cfg)
    lr2hr, meta_l, _ = pretrain_translator(cfg, "lr2hr", seed, corpus)
    hr2lr, meta_h, _ = pretrain_translator(cfg, "hr2lr", seed, corpus)
    llm, meta_m, _ = pretrain_llm(cfg, seed, corpus)
    tall_model = None
    tall_meta = None
    if "tall" in approaches:
        tall_model = assemble_tall(cfg, lr2hr, hr2lr, llm, seed)
        tall_meta, _ = train_tall(tall_model, corpus,
                                  cfg.train.tall.to_train_config(seed))
    examples, dataset_hash = eval_dataset(cfg)
    rows, details = run_approaches(cfg, approaches, lr2hr, hr2lr, llm,
                                   tall_model, examples, dataset_hash,
                                   corpus=corpus, sampler_seed=seed)
    return {
        "seed": seed,
        "rows": rows,
        "header": details["header"],
        "models": {"lr2hr": lr2hr, "hr2lr": hr2lr, "llm": llm,
                   "tall": tall_model},
        "meta": {"lr2hr": meta_l, "hr2lr": meta_h, "llm": meta_m,
                 "tall": tall_meta},
        "config": cfg,
    }


def format_results_table(rows: list[dict], header: dict) -> str:
    lines = [
        f"# config_hash={header['config_hash']} "
        f"dataset_hash={header['dataset_hash']} "
        f"sampler_seed={header['sampler_seed']} n={header['n_examples']}",
        f"{'Dataset':<22} {'Approach':<14} {'Model':<10} {'Accuracy (%)':>12}",
    ]
    for row in rows:
        lines.append(
            f"{row['dataset']:<22} {row['approach']:<14} {row['model']:<10} "
            f"{row['accuracy_percent']:>12.2f}")
    return "\n".join(lines)
