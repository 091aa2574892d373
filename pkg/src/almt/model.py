"""The language-guided multimodal transformer: embedding, hyper-modality stack, fusion, head."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .layers import (
    INIT_STD,
    AttentionConfig,
    EncoderLayer,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    normal_parameter,
    scaled_attention,
)
from .tensor import ContractError, Tensor

MODALITIES = ("language", "visual", "audio")
FUSION_MODES = ("cross_transformer", "concatenation", "addition")
LANGUAGE_SCALES = (1, 2, 3)


class ConfigError(ValueError):
    """Model configuration is invalid or does not match the data."""


class AblationError(ConfigError):
    """Ablation flags contradict each other."""


@dataclass(frozen=True)
class AblationFlags:
    drop_audio: bool = False
    drop_video: bool = False
    disable_ahl: bool = False
    fusion_mode: str = "cross_transformer"
    qkv_swap: bool = False
    guidance_scales: tuple[int, ...] = LANGUAGE_SCALES

    def __post_init__(self):
        object.__setattr__(self, "guidance_scales", tuple(sorted(set(self.guidance_scales))))

    def conflicts(self) -> list[str]:
        problems = []
        if self.fusion_mode not in FUSION_MODES:
            problems.append(f"fusion_mode {self.fusion_mode!r} not one of {FUSION_MODES}")
        bad = [s for s in self.guidance_scales if s not in LANGUAGE_SCALES]
        if bad:
            problems.append(f"guidance_scales {bad} outside {LANGUAGE_SCALES}")
        if not self.guidance_scales and not self.disable_ahl:
            problems.append("guidance_scales is empty but disable_ahl is false")
        if self.qkv_swap and self.fusion_mode != "cross_transformer":
            problems.append(f"qkv_swap requires fusion_mode 'cross_transformer', got {self.fusion_mode!r}")
        return problems

    def validate(self) -> "AblationFlags":
        problems = self.conflicts()
        if problems:
            raise AblationError("inconsistent ablation flags: " + "; ".join(problems))
        return self


def _default_dims():
    return {"language": 768, "visual": 20, "audio": 5}


def _default_lens():
    return {"language": 50, "visual": 50, "audio": 50}


@dataclass(frozen=True)
class ModelConfig:
    token_len: int = 8
    model_dim: int = 128
    heads: int = 8
    d_k: int = 16
    embed_depth: int = 1
    ahl_depth: int = 3
    fusion_depth: int = 2
    input_dims: Mapping[str, int] = field(default_factory=_default_dims)
    input_lens: Mapping[str, int] = field(default_factory=_default_lens)
    ffn_ratio: int = 4
    dropout: float = 0.0
    positional: bool = True
    init_std: float = INIT_STD
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def validate(self) -> "ModelConfig":
        if self.heads * self.d_k != self.model_dim:
            raise ConfigError(f"heads*d_k = {self.heads * self.d_k} != model_dim {self.model_dim}")
        for name in ("token_len", "model_dim", "heads", "d_k", "embed_depth", "ahl_depth",
                     "fusion_depth", "ffn_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for table in ("input_dims", "input_lens"):
            values = getattr(self, table)
            if set(values) != set(MODALITIES):
                raise ConfigError(f"{table} must name exactly {MODALITIES}")
            for m, v in values.items():
                if v is None or int(v) < 1:
                    raise ConfigError(f"{table}.{m} must be a positive integer, got {v}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        self.ablation.validate()
        return self

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.heads, self.d_k, self.model_dim)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["input_dims"] = {m: int(self.input_dims[m]) for m in MODALITIES}
        out["input_lens"] = {m: int(self.input_lens[m]) for m in MODALITIES}
        out["ablation"]["guidance_scales"] = list(self.ablation.guidance_scales)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        ablation = dict(data.pop("ablation", {}) or {})
        known_flags = {f.name for f in dataclasses.fields(AblationFlags)}
        unknown = set(ablation) - known_flags
        if unknown:
            raise ConfigError(f"unknown ablation keys: {sorted(unknown)}")
        if "guidance_scales" in ablation:
            ablation["guidance_scales"] = tuple(ablation["guidance_scales"])
        return cls(**data, ablation=AblationFlags(**ablation))


def apply_ablation(config: ModelConfig, flags: AblationFlags) -> ModelConfig:
    """Return ``config`` with ``flags`` installed, after checking them."""
    flags.validate()
    return dataclasses.replace(config, ablation=flags)


def language_scale_for_layer(j: int) -> int:
    """Language scale guiding hyper-modality layer ``j`` (1-based): low to high, capped at 3."""
    return min(j, LANGUAGE_SCALES[-1])


@dataclass
class AttentionTrace:
    """Attention maps from one forward pass. Arrays keep the batch axis first.

    ``alpha``/``beta`` are head-averaged ``[B, T, T]``; the ``*_heads`` lists
    hold ``[B, heads, T, T]``. ``ahl_layers`` gives the 1-based index of the
    layer each pair came from.
    """

    ahl_layers: list[int] = field(default_factory=list)
    alpha: list[np.ndarray] = field(default_factory=list)
    beta: list[np.ndarray] = field(default_factory=list)
    alpha_heads: list[np.ndarray] = field(default_factory=list)
    beta_heads: list[np.ndarray] = field(default_factory=list)
    fusion_heads: list[np.ndarray] = field(default_factory=list)

    @property
    def fusion(self) -> list[np.ndarray]:
        return [w.mean(axis=1) for w in self.fusion_heads]

    def all_head_maps(self) -> list[np.ndarray]:
        return self.alpha_heads + self.beta_heads + self.fusion_heads


def _per_head(weights: Tensor, heads: int) -> np.ndarray:
    bh, tq, tk = weights.shape
    return weights.data.reshape(bh // heads, heads, tq, tk).copy()


class ModalityEmbedding(Module):
    """Compress ``[T_m, d_m]`` features into ``T`` rows of width ``d``.

    Learned token rows (stored at input width ``d_m``) are stacked before the
    features, the joint sequence is projected to ``d``, positions are added,
    the encoder runs and the token rows are returned.
    """

    def __init__(self, cfg: ModelConfig, d_in: int, length: int, rng: np.random.Generator):
        std = cfg.init_std
        self.token_len = cfg.token_len
        self.d_in = d_in
        self.length = length
        self.token = normal_parameter(rng, (cfg.token_len, d_in), std)
        self.proj = Linear(d_in, cfg.model_dim, rng, std=std)
        self.pos = (
            normal_parameter(rng, (cfg.token_len + length, cfg.model_dim), std)
            if cfg.positional else None
        )
        self.layers = [
            EncoderLayer(cfg.attention, rng, cfg.ffn_ratio, cfg.dropout, std)
            for _ in range(cfg.embed_depth)
        ]

    def __call__(self, u: Tensor) -> Tensor:
        if u.shape[-2:] != (self.length, self.d_in):
            raise ConfigError(
                f"input of shape {u.shape[-2:]} does not match configured ({self.length}, {self.d_in})"
            )
        token = self.token if u.ndim == 2 else T.expand_batch(self.token, u.shape[0])
        x = self.proj(T.concat_rows([token, u]))
        if self.pos is not None:
            x = T.add(x, self.pos)
        for layer in self.layers:
            x = layer(x)
        return T.slice_rows(x, 0, self.token_len)


class AHLLayer(Module):
    """Language-queried attention over audio and visual features added to the hyper stream.

    Projections are bias-free; head outputs are concatenated column-wise and
    added directly, without an output projection.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, width, std = cfg.model_dim, cfg.heads * cfg.d_k, cfg.init_std
        self.heads = cfg.heads
        self.q_language = Linear(d, width, rng, bias=False, std=std)
        self.k_audio = Linear(d, width, rng, bias=False, std=std)
        self.k_visual = Linear(d, width, rng, bias=False, std=std)
        self.v_audio = Linear(d, width, rng, bias=False, std=std)
        self.v_visual = Linear(d, width, rng, bias=False, std=std)

    def __call__(self, h_prev: Tensor, h_lang: Tensor, h_audio: Tensor, h_visual: Tensor):
        q = self.q_language(h_lang)
        from_audio, alpha = scaled_attention(q, self.k_audio(h_audio), self.v_audio(h_audio), self.heads)
        from_visual, beta = scaled_attention(q, self.k_visual(h_visual), self.v_visual(h_visual), self.heads)
        return T.add(T.add(h_prev, from_audio), from_visual), alpha, beta


class AuxMLPLayer(Module):
    """Unguided stand-in for an AHL layer: a row-wise MLP on ``[audio | visual]``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, std = cfg.model_dim, cfg.init_std
        self.fc1 = Linear(2 * d, d, rng, std=std)
        self.fc2 = Linear(d, d, rng, std=std)

    def __call__(self, h_prev: Tensor, h_audio: Tensor, h_visual: Tensor) -> Tensor:
        hidden = T.gelu(self.fc1(T.concat_cols([h_audio, h_visual])))
        return T.add(h_prev, self.fc2(hidden))


class ALMTModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        cfg, flags, std = config, config.ablation, config.init_std

        self.embed = {
            m: ModalityEmbedding(cfg, int(cfg.input_dims[m]), int(cfg.input_lens[m]), rng)
            for m in MODALITIES
        }
        self.language_scales = [
            EncoderLayer(cfg.attention, rng, cfg.ffn_ratio, cfg.dropout, std) for _ in range(2)
        ]
        if flags.disable_ahl:
            self.concat_proj = Linear(2 * cfg.model_dim, cfg.model_dim, rng, std=std)
        else:
            self.hyper_init = normal_parameter(rng, (cfg.token_len, cfg.model_dim), std)
            self.hyper_layers = [
                AHLLayer(cfg, rng) if self.is_guided(j) else AuxMLPLayer(cfg, rng)
                for j in range(1, cfg.ahl_depth + 1)
            ]
        if flags.fusion_mode == "cross_transformer":
            self.fusion_token = normal_parameter(rng, (1, cfg.model_dim), std)
            self.fusion_layers = [
                EncoderLayer(cfg.attention, rng, cfg.ffn_ratio, cfg.dropout, std)
                for _ in range(cfg.fusion_depth)
            ]
        elif flags.fusion_mode == "concatenation":
            self.fusion_proj = Linear(2 * cfg.model_dim, cfg.model_dim, rng, std=std)
        self.head_norm = LayerNorm(cfg.model_dim)
        self.head = Linear(cfg.model_dim, 1, rng, std=std)

    def is_guided(self, j: int) -> bool:
        return language_scale_for_layer(j) in self.config.ablation.guidance_scales

    # -- pipeline stages -------------------------------------------------

    def embed_modality(self, modality: str, u) -> Tensor:
        return self.embed[modality](T.as_tensor(u))

    def build_language_scales(self, h1_lang: Tensor) -> tuple[Tensor, Tensor]:
        h2 = self.language_scales[0](h1_lang)
        h3 = self.language_scales[1](h2)
        return h2, h3

    def hyper_stack_forward(self, scales, h_audio, h_visual, trace: AttentionTrace | None = None):
        """Run every hyper-modality layer; ``scales`` is ``(H1_l, H2_l, H3_l)``."""
        trace = trace if trace is not None else AttentionTrace()
        hyper = self.hyper_init
        if h_audio.ndim == 3:
            hyper = T.expand_batch(hyper, h_audio.shape[0])
        heads = self.config.heads
        for j, layer in enumerate(self.hyper_layers, start=1):
            if isinstance(layer, AHLLayer):
                lang = scales[language_scale_for_layer(j) - 1]
                hyper, alpha, beta = layer(hyper, lang, h_audio, h_visual)
                a, b = _per_head(alpha, heads), _per_head(beta, heads)
                trace.ahl_layers.append(j)
                trace.alpha_heads.append(a)
                trace.beta_heads.append(b)
                trace.alpha.append(a.mean(axis=1))
                trace.beta.append(b.mean(axis=1))
            else:
                hyper = layer(hyper, h_audio, h_visual)
        return hyper, trace

    def fuse_forward(self, h3_lang: Tensor, hyper: Tensor, trace: AttentionTrace | None = None) -> Tensor:
        mode = self.config.ablation.fusion_mode
        if mode == "addition":
            return T.mean_rows(T.add(h3_lang, hyper))
        if mode == "concatenation":
            joined = T.concat_cols([T.mean_rows(h3_lang), T.mean_rows(hyper)])
            return self.fusion_proj(joined)
        token = self.fusion_token
        if h3_lang.ndim == 3:
            token = T.expand_batch(token, h3_lang.shape[0])
        lang_seq = T.concat_rows([token, h3_lang])
        hyper_seq = T.concat_rows([token, hyper])
        query, kv = (hyper_seq, lang_seq) if self.config.ablation.qkv_swap else (lang_seq, hyper_seq)
        for layer in self.fusion_layers:
            query, weights = layer.cross(query, kv)
            if trace is not None:
                trace.fusion_heads.append(_per_head(weights, self.config.heads))
        return T.slice_rows(query, 0, 1)

    def predict_head(self, h: Tensor) -> Tensor:
        out = self.head(self.head_norm(h))
        return T.reshape(out, out.shape[:-2]) if out.ndim == 3 else T.reshape(out, ())

    # -- full pass -------------------------------------------------------

    def forward(self, inputs: Mapping[str, np.ndarray], embedded_noise: Mapping[str, np.ndarray] | None = None):
        """Predict for a batch ``{modality: [B, T_m, d_m]}``; returns ``(y_hat [B], trace)``.

        ``embedded_noise`` adds fixed ``[B, T, d]`` arrays to the embedded
        features of the named modalities (attention robustness probes).
        """
        cfg, flags = self.config, self.config.ablation
        batch = np.shape(inputs["language"])[0]
        dropped = {"audio": flags.drop_audio, "visual": flags.drop_video, "language": False}
        h1 = {}
        for m in MODALITIES:
            if dropped[m]:
                h1[m] = Tensor(np.zeros((batch, cfg.token_len, cfg.model_dim)))
            else:
                h1[m] = self.embed_modality(m, inputs[m])
            if embedded_noise and m in embedded_noise:
                h1[m] = T.add(h1[m], Tensor(embedded_noise[m]))
        h2_lang, h3_lang = self.build_language_scales(h1["language"])
        trace = AttentionTrace()
        if flags.disable_ahl:
            hyper = self.concat_proj(T.concat_cols([h1["audio"], h1["visual"]]))
        else:
            hyper, _ = self.hyper_stack_forward(
                (h1["language"], h2_lang, h3_lang), h1["audio"], h1["visual"], trace
            )
        fused = self.fuse_forward(h3_lang, hyper, trace)
        return self.predict_head(fused), trace

    __call__ = forward


def model_forward(model: ALMTModel, sample) -> tuple[float, AttentionTrace]:
    """Single-sample prediction (no gradient recording)."""
    inputs = {m: np.asarray(getattr(sample, m))[None] for m in MODALITIES}
    with T.no_grad():
        y, trace = model.forward(inputs)
    return float(y.data[0]), trace


def compute_loss(preds: Tensor, labels) -> Tensor:
    """Mean squared error over the batch."""
    labels = np.asarray(labels, dtype=preds.dtype).reshape(-1)
    if preds.size == 0 or labels.size == 0:
        raise ContractError("compute_loss: empty batch")
    if preds.shape != labels.shape:
        raise ContractError(f"compute_loss: {preds.shape[0] if preds.ndim else 1} predictions vs {labels.size} labels")
    diff = T.sub(preds, Tensor(labels))
    return T.mean_all(T.mul(diff, diff))


def count_parameters(model: Module) -> int:
    return model.num_parameters()


def parameter_breakdown(model: Module) -> dict[str, int]:
    """Trainable scalar count grouped by top-level attribute."""
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        out[top] = out.get(top, 0) + p.size
    return out


def zero_value_projections(layer: AHLLayer) -> None:
    layer.v_audio.weight.data[...] = 0.0
    layer.v_visual.weight.data[...] = 0.0


__all__ = [
    "MODALITIES", "FUSION_MODES", "AblationFlags", "ModelConfig", "ALMTModel", "AHLLayer",
    "AuxMLPLayer", "ModalityEmbedding", "AttentionTrace", "ConfigError", "AblationError",
    "apply_ablation", "compute_loss", "count_parameters", "parameter_breakdown", "model_forward",
    "language_scale_for_layer", "zero_value_projections", "Parameter",
]
