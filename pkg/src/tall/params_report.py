"""Parameter accounting: per-module counts, totals, and percentages.

The two published presets ("bloomz", "qwen") reproduce the reference
parameter tables exactly.  Adapter counts are derived from their stated
MLP shapes via the closed form; the large frozen components and the two
bridge modules are recorded constants (their internal layer geometry is
not derivable from the published shapes alone).  The tied LM head is
listed but excluded from the grand total, which is how the published
totals add up.

The "toy" preset is computed from this package's own module shapes and
is cross-checked against live parameter-store enumeration in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

from .models import CausalLMConfig, Seq2SeqConfig
from .nn import AdapterSpec, adapter_param_count


@dataclass(frozen=True)
class ModuleRow:
    name: str
    total: int
    trainable: int
    note: str = ""
    tied: bool = False  # listed, but not added to the grand total


@dataclass(frozen=True)
class ParamReport:
    preset: str
    rows: tuple
    total: int
    trainable: int
    llm_only: int

    @property
    def trainable_pct(self) -> str:
        return percent(self.trainable, self.total, 2)

    @property
    def llm_only_pct(self) -> str:
        return percent(self.llm_only, self.total, 1)


def percent(part: int, whole: int, decimals: int) -> str:
    """Round-half-up percentage string at the requested precision."""
    q = Decimal(1).scaleb(-decimals)
    value = (Decimal(part) / Decimal(whole) * 100).quantize(q, ROUND_HALF_UP)
    return f"{value}%"


def _finish(preset: str, rows: list[ModuleRow],
            llm_rows: tuple[str, str]) -> ParamReport:
    total = sum(r.total for r in rows if not r.tied)
    trainable = sum(r.trainable for r in rows if not r.tied)
    by_name = {r.name: r for r in rows}
    llm_only = sum(by_name[n].total for n in llm_rows)
    return ParamReport(preset, tuple(rows), total, trainable, llm_only)


def _bloomz_rows() -> list[ModuleRow]:
    a1 = AdapterSpec(1024, 2048, 1024)
    a2 = AdapterSpec(1024, 1024, 512)
    return [
        ModuleRow("HE-EN Encoder", 138_341_376, 0, "Frozen encoder"),
        ModuleRow("LLM Embeddings", 256_901_120, 0, "Frozen embedding layer"),
        ModuleRow("Autoencoder 1", adapter_param_count(a1),
                  adapter_param_count(a1),
                  "Two-layer MLP (1024 -> 2048, 2048 -> 1024)"),
        ModuleRow("Custom Decoder 1", 101_828_608, 101_828_608,
                  "Trainable decoder module"),
        ModuleRow("Main LLM", 302_313_472, 0, "Frozen main LLM"),
        ModuleRow("Autoencoder 2", adapter_param_count(a2),
                  adapter_param_count(a2),
                  "Two-layer MLP (1024 -> 1024, 1024 -> 512)"),
        ModuleRow("Custom Encoder 2", 19_176_448, 19_176_448,
                  "Trainable encoder module"),
        ModuleRow("EN-HE Decoder", 59_195_904, 0, "Frozen decoder module"),
        ModuleRow("LM Head", 33_709_568, 0, "Final linear mapping (tied)",
                  tied=True),
    ]


def _qwen_rows() -> list[ModuleRow]:
    a1 = AdapterSpec(1024, 1792, 896)
    a2 = AdapterSpec(896, 1024, 512)
    return [
        ModuleRow("HE-EN Encoder", 138_341_376, 0, "Frozen encoder"),
        ModuleRow("LLM Embeddings", 136_134_656, 0, "Frozen embedding layer"),
        ModuleRow("Autoencoder 1", adapter_param_count(a1),
                  adapter_param_count(a1),
                  "Two-layer MLP (1024 -> 1792, 1792 -> 896)"),
        ModuleRow("Custom Decoder 1", 83_598_080, 83_598_080,
                  "Trainable decoder module"),
        ModuleRow("Main LLM", 357_898_112, 0, "Frozen main LLM"),
        ModuleRow("Autoencoder 2", adapter_param_count(a2),
                  adapter_param_count(a2),
                  "Two-layer MLP (896 -> 1024, 1024 -> 512)"),
        ModuleRow("Custom Encoder 2", 19_176_448, 19_176_448,
                  "Trainable encoder module"),
        ModuleRow("EN-HE Decoder", 59_195_904, 0, "Frozen decoder module"),
        ModuleRow("LM Head", 33_709_568, 0, "Final linear mapping (tied)",
                  tied=True),
    ]


# -- closed-form counts for the toy module shapes ---------------------------


def _linear_count(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def _attention_count(d: int, d_kv: int) -> int:
    return (_linear_count(d, d) + _linear_count(d_kv, d)
            + _linear_count(d_kv, d) + _linear_count(d, d))


def _layer_count(d: int, d_ff: int, cross_kv: int | None = None) -> int:
    n = 2 * d + _attention_count(d, d)                  # ln_self + self_attn
    if cross_kv is not None:
        n += 2 * d + _attention_count(d, cross_kv)      # ln_cross + cross_attn
    n += 2 * d + _linear_count(d, d_ff) + _linear_count(d_ff, d)
    return n


def _encoder_count(cfg: Seq2SeqConfig) -> int:
    return (cfg.vocab_src * cfg.d_model + cfg.max_len * cfg.d_model
            + cfg.enc_layers * _layer_count(cfg.d_model, cfg.d_ff)
            + 2 * cfg.d_model)


def _decoder_count(cfg: Seq2SeqConfig) -> int:
    """Decoder stack including the (tied) target embedding table."""
    return (cfg.vocab_tgt * cfg.d_model + cfg.max_len * cfg.d_model
            + cfg.dec_layers * _layer_count(cfg.d_model, cfg.d_ff,
                                            cross_kv=cfg.d_model)
            + 2 * cfg.d_model)


def _llm_embed_count(cfg: CausalLMConfig) -> int:
    return cfg.vocab_size * cfg.d_model


def _llm_main_count(cfg: CausalLMConfig) -> int:
    return (cfg.max_len * cfg.d_model
            + cfg.n_layers * _layer_count(cfg.d_model, cfg.d_ff)
            + 2 * cfg.d_model)


def _bridge_count(d: int, n_layers: int, d_ff: int, max_len: int,
                  cross: bool) -> int:
    return (max_len * d
            + n_layers * _layer_count(d, d_ff, cross_kv=d if cross else None)
            + 2 * d)


def toy_rows(tall_cfg) -> list[ModuleRow]:
    """Module rows for an assembled toy pipeline, from shape arithmetic."""
    enc, lm, dec = tall_cfg.encoder_cfg, tall_cfg.llm_cfg, tall_cfg.decoder_cfg
    a1 = adapter_param_count(tall_cfg.adapter1)
    a2 = adapter_param_count(tall_cfg.adapter2)
    b1 = _bridge_count(lm.d_model, tall_cfg.bridge1.n_layers,
                       tall_cfg.bridge1.d_ff, lm.max_len, cross=True)
    b2 = _bridge_count(dec.d_model, tall_cfg.bridge2.n_layers,
                       tall_cfg.bridge2.d_ff, lm.max_len, cross=False)
    return [
        ModuleRow("LR-HR Encoder", _encoder_count(enc), 0, "Frozen encoder"),
        ModuleRow("LM Embeddings", _llm_embed_count(lm), 0,
                  "Frozen embedding layer"),
        ModuleRow("Adapter 1", a1, a1,
                  f"Two-layer MLP ({tall_cfg.adapter1.d_in} -> "
                  f"{tall_cfg.adapter1.d_hidden}, {tall_cfg.adapter1.d_hidden} "
                  f"-> {tall_cfg.adapter1.d_out})"),
        ModuleRow("Bridge Decoder 1", b1, b1, "Trainable decoder module"),
        ModuleRow("Main LM", _llm_main_count(lm), 0, "Frozen main LM"),
        ModuleRow("Adapter 2", a2, a2,
                  f"Two-layer MLP ({tall_cfg.adapter2.d_in} -> "
                  f"{tall_cfg.adapter2.d_hidden}, {tall_cfg.adapter2.d_hidden} "
                  f"-> {tall_cfg.adapter2.d_out})"),
        ModuleRow("Bridge Encoder 2", b2, b2, "Trainable encoder module"),
        ModuleRow("HR-LR Decoder", _decoder_count(dec), 0,
                  "Frozen decoder module"),
        ModuleRow("LM Head", dec.vocab_tgt * dec.d_model, 0,
                  "Final linear mapping (tied)", tied=True),
    ]


_LLM_ONLY_ROWS = {
    "bloomz": ("LLM Embeddings", "Main LLM"),
    "qwen": ("LLM Embeddings", "Main LLM"),
    "toy": ("LM Embeddings", "Main LM"),
}


def param_report(preset: str, tall_cfg=None) -> ParamReport:
    if preset == "bloomz":
        rows = _bloomz_rows()
    elif preset == "qwen":
        rows = _qwen_rows()
    elif preset == "toy":
        if tall_cfg is None:
            raise ValueError("toy preset needs the pipeline config")
        rows = toy_rows(tall_cfg)
    else:
        raise ValueError(f"unknown preset {preset!r}")
    return _finish(preset, rows, _LLM_ONLY_ROWS[preset])


EXPECTED = {
    "bloomz": {
        "total": 883_537_920,
        "trainable": 126_786_048,
        "trainable_pct": "14.35%",
        "llm_only": 559_214_592,
        "llm_only_pct": "63.3%",
        "rows": {
            "HE-EN Encoder": (138_341_376, 0),
            "LLM Embeddings": (256_901_120, 0),
            "Autoencoder 1": (4_203_520, 4_203_520),
            "Custom Decoder 1": (101_828_608, 101_828_608),
            "Main LLM": (302_313_472, 0),
            "Autoencoder 2": (1_577_472, 1_577_472),
            "Custom Encoder 2": (19_176_448, 19_176_448),
            "EN-HE Decoder": (59_195_904, 0),
            "LM Head": (33_709_568, 0),
        },
    },
    "qwen": {
        "total": 799_239_680,
        "trainable": 107_669_632,
        "trainable_pct": "13.47%",
        "llm_only": 494_032_768,
        "llm_only_pct": "61.8%",
        "rows": {
            "HE-EN Encoder": (138_341_376, 0),
            "LLM Embeddings": (136_134_656, 0),
            "Autoencoder 1": (3_448_704, 3_448_704),
            "Custom Decoder 1": (83_598_080, 83_598_080),
            "Main LLM": (357_898_112, 0),
            "Autoencoder 2": (1_446_400, 1_446_400),
            "Custom Encoder 2": (19_176_448, 19_176_448),
            "EN-HE Decoder": (59_195_904, 0),
            "LM Head": (33_709_568, 0),
        },
    },
}


def check_report(report: ParamReport) -> list[str]:
    """Deviations of a preset report from the recorded expected values."""
    expected = EXPECTED.get(report.preset)
    if expected is None:
        raise ValueError(f"no recorded expectations for preset {report.preset!r}")
    problems = []
    got_rows = {r.name: (r.total, r.trainable) for r in report.rows}
    for name, want in expected["rows"].items():
        if got_rows.get(name) != want:
            problems.append(f"row {name}: got {got_rows.get(name)}, want {want}")
    for attr in ("total", "trainable", "llm_only"):
        if getattr(report, attr) != expected[attr]:
            problems.append(
                f"{attr}: got {getattr(report, attr)}, want {expected[attr]}")
    for attr in ("trainable_pct", "llm_only_pct"):
        if getattr(report, attr) != expected[attr]:
            problems.append(
                f"{attr}: got {getattr(report, attr)}, want {expected[attr]}")
    return problems


def format_report(report: ParamReport) -> str:
    """Three-part text layout: overall statistics, then the module table."""
    lines = [
        f"Overall Model Statistics ({report.preset})",
        f"  Total Parameters      {report.total:>15,}",
        f"  LLM Only Parameters   {report.llm_only:>15,} ({report.llm_only_pct})",
        f"  Trainable Parameters  {report.trainable:>15,} ({report.trainable_pct})",
        "",
        f"Module-wise Breakdown ({report.preset})",
        f"  {'Module':<18} {'Total Params':>14} {'Trainable':>14}  Notes",
    ]
    for r in report.rows:
        lines.append(
            f"  {r.name:<18} {r.total:>14,} {r.trainable:>14,}  {r.note}")
    return "\n".join(lines)
