"""
Llama-architecture causal decoder in numpy, with exact reverse-mode gradients.

Per layer (pre-norm, no biases)::

    h = h + Wo · attention(rope(Wq·rms(h)), rope(Wk·rms(h)), Wv·rms(h))
    h = h + W_down · (silu(W_gate·rms(h)) * W_up·rms(h))

followed by a final RMSNorm and the output head. Attention is causal and
grouped-query: each key/value head serves ``n_heads / n_kv_heads``
consecutive query heads. RoPE rotates interleaved dimension pairs
``(2i, 2i+1)`` of every head by ``position * base^(-2i/head_dim)``.

Tensors are stored as ``[in x out]`` matrices, so a projection is
``x @ W``. Parameters are float32; float64 parameters go through the very
same code (gradient checks use them).
"""

# Standard Library
import math
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import fields
from typing import Any
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Sequence

# 3rd party
import numpy as np

# My stuff
from utils import rng_for

RMS_EPS = 1e-5
INIT_STD = 0.02
#: truncation of the initializer, in standard deviations
INIT_TRUNCATION = 3.0

ModelParams = Dict[str, np.ndarray]
Gradients = Dict[str, np.ndarray]


class ModelConfigError(ValueError):
    """
    Inconsistent architecture hyperparameters.
    """


class ModelInputError(ValueError):
    """
    Token ids or sequence length incompatible with the model.
    """


@dataclass(frozen=True)
class ModelConfig:  # pylint: disable=too-many-instance-attributes
    """
    Architecture hyperparameters.

    The defaults are the full-size 345M configuration: vocab_size 16000,
    n_layers 32, n_heads 15, n_kv_heads 5, d_model 960, d_ff 2560.
    """

    vocab_size: int = 16000
    n_layers: int = 32
    n_heads: int = 15
    n_kv_heads: int = 5
    d_model: int = 960
    d_ff: int = 2560
    max_seq_len: int = 128
    rope_base: float = 10000.0
    tie_embeddings: bool = False
    attention_dropout: float = 0.0

    def __post_init__(self):
        for name in ("vocab_size", "n_heads", "n_kv_heads", "d_model", "d_ff", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ModelConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_layers < 0:
            raise ModelConfigError(f"n_layers must be non negative, got {self.n_layers}")
        if self.d_model % self.n_heads:
            raise ModelConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_heads % self.n_kv_heads:
            raise ModelConfigError(f"n_heads={self.n_heads} is not divisible by n_kv_heads={self.n_kv_heads}")
        if self.head_dim % 2:
            raise ModelConfigError(f"head dimension {self.head_dim} must be even for RoPE")
        if self.rope_base <= 0:
            raise ModelConfigError(f"rope_base must be positive, got {self.rope_base}")
        if not 0.0 <= self.attention_dropout < 1.0:
            raise ModelConfigError(f"attention_dropout must lie in [0, 1), got {self.attention_dropout}")

    @property
    def head_dim(self) -> int:
        """Dimension of one attention head."""
        return self.d_model // self.n_heads

    @property
    def kv_dim(self) -> int:
        """Width of the key/value projections."""
        return self.n_kv_heads * self.head_dim

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        """
        Build from the ``model`` section of a config file.
        """
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ModelConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        """Complete snapshot."""
        return asdict(self)


def param_shapes(config: ModelConfig) -> Dict[str, tuple]:
    """
    Name -> shape of every parameter tensor, in a fixed order.
    """
    d, kv = config.d_model, config.kv_dim
    shapes: Dict[str, tuple] = {"tok_embeddings": (config.vocab_size, d)}
    for i in range(config.n_layers):
        prefix = f"layers.{i}."
        shapes[prefix + "attention_norm"] = (d,)
        shapes[prefix + "attention.wq"] = (d, d)
        shapes[prefix + "attention.wk"] = (d, kv)
        shapes[prefix + "attention.wv"] = (d, kv)
        shapes[prefix + "attention.wo"] = (d, d)
        shapes[prefix + "ffn_norm"] = (d,)
        shapes[prefix + "feed_forward.w_gate"] = (d, config.d_ff)
        shapes[prefix + "feed_forward.w_up"] = (d, config.d_ff)
        shapes[prefix + "feed_forward.w_down"] = (config.d_ff, d)
    shapes["norm"] = (d,)
    if not config.tie_embeddings:
        shapes["output"] = (d, config.vocab_size)
    return shapes


def param_count(config: ModelConfig) -> int:
    """
    Exact number of scalar parameters.

    >>> param_count(ModelConfig(vocab_size=10, n_layers=0, n_heads=1, n_kv_heads=1,
    ...                         d_model=4, d_ff=8, tie_embeddings=True))
    44
    """
    return sum(math.prod(shape) for shape in param_shapes(config).values())


def is_norm_gain(name: str) -> bool:
    """RMSNorm gains: initialized to one, never weight-decayed."""
    return name.endswith("norm")


def _truncated_normal(rng: np.random.Generator, shape: tuple, std: float) -> np.ndarray:
    """
    Normal samples redrawn outside ``±INIT_TRUNCATION``, rescaled so that the
    truncated distribution has standard deviation ``std``.
    """
    bound = INIT_TRUNCATION
    values = rng.standard_normal(shape)
    outside = np.abs(values) > bound
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > bound
    mass = math.erf(bound / math.sqrt(2.0))
    density = math.exp(-0.5 * bound * bound) / math.sqrt(2.0 * math.pi)
    truncated_std = math.sqrt(1.0 - 2.0 * bound * density / mass)
    return values * (std / truncated_std)


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """
    Fresh parameters: truncated normal weights (std 0.02), norm gains at 1.

    Every tensor draws from its own sub-stream of ``seed``, so the values of a
    tensor do not depend on the other tensors of the model.
    """
    params: ModelParams = {}
    for name, shape in param_shapes(config).items():
        if is_norm_gain(name):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = _truncated_normal(rng_for(seed, f"init/{name}"), shape, INIT_STD).astype(dtype)
    return params


def check_params(params: ModelParams, config: ModelConfig) -> None:
    """
    Raise ModelConfigError unless ``params`` holds every tensor of ``config``
    with the right shape and finite values.
    """
    for name, shape in param_shapes(config).items():
        if name not in params:
            raise ModelConfigError(f"missing parameter tensor {name}")
        if params[name].shape != shape:
            raise ModelConfigError(f"{name}: shape {params[name].shape}, expected {shape}")
        if not np.all(np.isfinite(params[name])):
            raise ModelConfigError(f"{name}: non-finite values")


def rope_apply(q_or_k: np.ndarray, positions: Sequence[int], base: float = 10000.0) -> np.ndarray:
    """
    Rotary position embedding.

    :param q_or_k: array ``[..., seq, heads, head_dim]``.
    :param positions: one integer position per sequence element.
    :param base: frequency base.
    :return: rotated array, same shape and dtype.
    """
    head_dim = q_or_k.shape[-1]
    if head_dim % 2:
        raise ModelInputError(f"RoPE needs an even head dimension, got {head_dim}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (q_or_k.shape[-3],):
        raise ModelInputError(f"{pos.shape[0]} positions for a sequence of {q_or_k.shape[-3]}")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = pos[:, None] * inv_freq[None, :]  # [seq, head_dim / 2]
    cos = np.cos(angles)[:, None, :].astype(q_or_k.dtype)
    sin = np.sin(angles)[:, None, :].astype(q_or_k.dtype)
    even = q_or_k[..., 0::2]
    odd = q_or_k[..., 1::2]
    out = np.empty_like(q_or_k)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _rms_norm(x: np.ndarray, gain: np.ndarray):
    inv_rms = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    normed = x * inv_rms
    return normed * gain, (normed, inv_rms)


def _rms_norm_backward(grad_out: np.ndarray, gain: np.ndarray, cache):
    normed, inv_rms = cache
    grad_gain = np.sum(grad_out * normed, axis=tuple(range(grad_out.ndim - 1)))
    grad_normed = grad_out * gain
    grad_x = inv_rms * (grad_normed - normed * np.mean(grad_normed * normed, axis=-1, keepdims=True))
    return grad_x, grad_gain


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _matmul_weight_grad(inputs: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of ``inputs @ W`` with respect to ``W``, batch dims summed."""
    return inputs.reshape(-1, inputs.shape[-1]).T @ grad_out.reshape(-1, grad_out.shape[-1])


class LayerCache(NamedTuple):
    """Activations of one layer kept for the backward pass."""

    attn_norm: tuple
    attn_in: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    dropped: Optional[np.ndarray]
    attn_out: np.ndarray
    ffn_norm: tuple
    ffn_in: np.ndarray
    gate: np.ndarray
    up: np.ndarray
    hidden: np.ndarray


class ForwardCache(NamedTuple):
    """Everything ``backward_from_cache`` needs."""

    config: ModelConfig
    params: ModelParams
    token_ids: np.ndarray
    layers: List[LayerCache]
    final_norm: tuple
    final_hidden: np.ndarray


def _check_tokens(config: ModelConfig, token_ids) -> np.ndarray:
    tokens = np.asarray(token_ids)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or not np.issubdtype(tokens.dtype, np.integer):
        raise ModelInputError(f"token ids must be an integer [batch x seq] array, got {tokens.dtype} {tokens.shape}")
    if tokens.shape[1] == 0:
        raise ModelInputError("empty sequence")
    if tokens.shape[1] > config.max_seq_len:
        raise ModelInputError(f"sequence length {tokens.shape[1]} exceeds max_seq_len={config.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ModelInputError(f"token id out of range [0, {config.vocab_size})")
    return tokens


def _attention(x: np.ndarray, params: ModelParams, prefix: str, config: ModelConfig, rng):
    batch, seq, _ = x.shape
    n_heads, n_kv, head_dim = config.n_heads, config.n_kv_heads, config.head_dim
    positions = np.arange(seq)
    q = rope_apply((x @ params[prefix + "wq"]).reshape(batch, seq, n_heads, head_dim), positions, config.rope_base)
    k = rope_apply((x @ params[prefix + "wk"]).reshape(batch, seq, n_kv, head_dim), positions, config.rope_base)
    v = (x @ params[prefix + "wv"]).reshape(batch, seq, n_kv, head_dim)
    group = n_heads // n_kv
    # [batch, heads, seq, head_dim]; query head h reads kv head h // group
    qh = q.transpose(0, 2, 1, 3)
    kh = np.repeat(k.transpose(0, 2, 1, 3), group, axis=1)
    vh = np.repeat(v.transpose(0, 2, 1, 3), group, axis=1)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) / np.sqrt(head_dim).astype(x.dtype)
    causal = np.tril(np.ones((seq, seq), dtype=bool))
    scores = np.where(causal, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    dropped = None
    mixed = probs
    if rng is not None and config.attention_dropout > 0.0:
        keep = 1.0 - config.attention_dropout
        dropped = (rng.random(probs.shape) < keep).astype(x.dtype) / keep
        mixed = probs * dropped
    out = (mixed @ vh).transpose(0, 2, 1, 3).reshape(batch, seq, n_heads * head_dim)
    return out @ params[prefix + "wo"], (q, k, v, probs, dropped, out)


def _attention_backward(grad_y, x, params, prefix, config, saved, grads):
    q, k, v, probs, dropped, out = saved
    batch, seq, _ = x.shape
    n_heads, n_kv, head_dim = config.n_heads, config.n_kv_heads, config.head_dim
    group = n_heads // n_kv
    positions = np.arange(seq)
    grads[prefix + "wo"] += _matmul_weight_grad(out, grad_y)
    grad_out = (grad_y @ params[prefix + "wo"].T).reshape(batch, seq, n_heads, head_dim).transpose(0, 2, 1, 3)
    qh = q.transpose(0, 2, 1, 3)
    kh = np.repeat(k.transpose(0, 2, 1, 3), group, axis=1)
    vh = np.repeat(v.transpose(0, 2, 1, 3), group, axis=1)
    mixed = probs if dropped is None else probs * dropped
    grad_vh = mixed.transpose(0, 1, 3, 2) @ grad_out
    grad_mixed = grad_out @ vh.transpose(0, 1, 3, 2)
    grad_probs = grad_mixed if dropped is None else grad_mixed * dropped
    grad_scores = probs * (grad_probs - np.sum(grad_probs * probs, axis=-1, keepdims=True))
    grad_scores /= np.sqrt(head_dim).astype(x.dtype)
    grad_qh = grad_scores @ kh
    grad_kh = grad_scores.transpose(0, 1, 3, 2) @ qh
    # fold the repeated heads back onto their kv head
    grad_k = grad_kh.reshape(batch, n_kv, group, seq, head_dim).sum(axis=2).transpose(0, 2, 1, 3)
    grad_v = grad_vh.reshape(batch, n_kv, group, seq, head_dim).sum(axis=2).transpose(0, 2, 1, 3)
    grad_q = grad_qh.transpose(0, 2, 1, 3)
    # a rotation's transpose is the rotation by the opposite angle
    grad_q = rope_apply(grad_q, -positions, config.rope_base).reshape(batch, seq, -1)
    grad_k = rope_apply(grad_k, -positions, config.rope_base).reshape(batch, seq, -1)
    grad_v = grad_v.reshape(batch, seq, -1)
    grads[prefix + "wq"] += _matmul_weight_grad(x, grad_q)
    grads[prefix + "wk"] += _matmul_weight_grad(x, grad_k)
    grads[prefix + "wv"] += _matmul_weight_grad(x, grad_v)
    return (
        grad_q @ params[prefix + "wq"].T
        + grad_k @ params[prefix + "wk"].T
        + grad_v @ params[prefix + "wv"].T
    )


def forward_with_cache(
    params: ModelParams,
    config: ModelConfig,
    token_ids,
    rng: Optional[np.random.Generator] = None,
    need_logits: bool = True,
):
    """
    Forward pass keeping the activations for ``backward_from_cache``.

    :param rng: attention-dropout randomness; ``None`` evaluates without dropout.
    :param need_logits: skip the output head (classifier fine-tuning only
        needs the final hidden states).
    :return: ``(logits or None, ForwardCache)``.
    """
    tokens = _check_tokens(config, token_ids)
    h = params["tok_embeddings"][tokens]
    layers: List[LayerCache] = []
    for i in range(config.n_layers):
        prefix = f"layers.{i}."
        attn_in, attn_norm = _rms_norm(h, params[prefix + "attention_norm"])
        attn, (q, k, v, probs, dropped, attn_out) = _attention(attn_in, params, prefix + "attention.", config, rng)
        h = h + attn
        ffn_in, ffn_norm = _rms_norm(h, params[prefix + "ffn_norm"])
        gate = ffn_in @ params[prefix + "feed_forward.w_gate"]
        up = ffn_in @ params[prefix + "feed_forward.w_up"]
        hidden = gate * _sigmoid(gate) * up
        h = h + hidden @ params[prefix + "feed_forward.w_down"]
        layers.append(LayerCache(attn_norm, attn_in, q, k, v, probs, dropped, attn_out, ffn_norm, ffn_in, gate, up, hidden))
    final_hidden, final_norm = _rms_norm(h, params["norm"])
    logits = None
    if need_logits:
        logits = final_hidden @ output_matrix(params, config)
    return logits, ForwardCache(config, params, tokens, layers, final_norm, final_hidden)


def output_matrix(params: ModelParams, config: ModelConfig) -> np.ndarray:
    """``[d_model x vocab]`` head, the transposed embedding when tied."""
    return params["tok_embeddings"].T if config.tie_embeddings else params["output"]


def forward(params: ModelParams, config: ModelConfig, token_ids, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Logits ``[batch x seq x vocab]`` for a batch of token ids.

    A 1-D sequence is treated as a batch of one.
    """
    logits, _ = forward_with_cache(params, config, token_ids, rng)
    return logits


def backward_from_cache(
    cache: ForwardCache,
    grad_logits: Optional[np.ndarray] = None,
    grad_hidden: Optional[np.ndarray] = None,
) -> Gradients:
    """
    Reverse pass.

    :param grad_logits: gradient of the scalar loss with respect to the logits.
    :param grad_hidden: gradient with respect to the final (normalized) hidden
        states, for losses computed on top of them.
    :return: one gradient tensor per parameter, same names and shapes.
    """
    config, params = cache.config, cache.params
    shapes = param_shapes(config)
    grads: Gradients = {name: np.zeros_like(value) for name, value in params.items() if name in shapes}
    grad_final = np.zeros_like(cache.final_hidden)
    if grad_logits is not None:
        if not np.all(np.isfinite(grad_logits)):
            raise ModelInputError("non-finite upstream gradient")
        if config.tie_embeddings:
            grads["tok_embeddings"] += _matmul_weight_grad(grad_logits, cache.final_hidden)
        else:
            grads["output"] += _matmul_weight_grad(cache.final_hidden, grad_logits)
        grad_final = grad_final + grad_logits @ output_matrix(params, config).T
    if grad_hidden is not None:
        if not np.all(np.isfinite(grad_hidden)):
            raise ModelInputError("non-finite upstream gradient")
        grad_final = grad_final + grad_hidden

    grad_h, grads["norm"] = _rms_norm_backward(grad_final, params["norm"], cache.final_norm)
    for i in reversed(range(config.n_layers)):
        prefix = f"layers.{i}."
        layer = cache.layers[i]
        # feed forward
        grads[prefix + "feed_forward.w_down"] += _matmul_weight_grad(layer.hidden, grad_h)
        grad_hidden_ff = grad_h @ params[prefix + "feed_forward.w_down"].T
        sig = _sigmoid(layer.gate)
        grad_up = grad_hidden_ff * layer.gate * sig
        grad_gate = grad_hidden_ff * layer.up * sig * (1.0 + layer.gate * (1.0 - sig))
        grads[prefix + "feed_forward.w_gate"] += _matmul_weight_grad(layer.ffn_in, grad_gate)
        grads[prefix + "feed_forward.w_up"] += _matmul_weight_grad(layer.ffn_in, grad_up)
        grad_ffn_in = grad_gate @ params[prefix + "feed_forward.w_gate"].T + grad_up @ params[prefix + "feed_forward.w_up"].T
        grad_x, grads[prefix + "ffn_norm"] = _rms_norm_backward(grad_ffn_in, params[prefix + "ffn_norm"], layer.ffn_norm)
        grad_h = grad_h + grad_x
        # attention
        saved = (layer.q, layer.k, layer.v, layer.probs, layer.dropped, layer.attn_out)
        grad_attn_in = _attention_backward(grad_h, layer.attn_in, params, prefix + "attention.", config, saved, grads)
        grad_x, grads[prefix + "attention_norm"] = _rms_norm_backward(
            grad_attn_in, params[prefix + "attention_norm"], layer.attn_norm
        )
        grad_h = grad_h + grad_x
    np.add.at(grads["tok_embeddings"], cache.token_ids, grad_h)
    return grads


def backward(params: ModelParams, config: ModelConfig, token_ids, grad_logits: np.ndarray) -> Gradients:
    """
    Gradients of a scalar loss with respect to every parameter, given the
    loss gradient with respect to the logits of ``forward(params, config, token_ids)``.
    """
    grad_logits = np.asarray(grad_logits)
    if not np.all(np.isfinite(grad_logits)):
        raise ModelInputError("non-finite upstream gradient")
    logits, cache = forward_with_cache(params, config, token_ids)
    if grad_logits.shape != logits.shape:
        raise ModelInputError(f"upstream gradient shape {grad_logits.shape}, logits shape {logits.shape}")
    return backward_from_cache(cache, grad_logits=grad_logits)
