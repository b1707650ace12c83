"""
Decoder-only transformer with an explicit KV cache.

Blocks are pre-norm with RMS normalization, causal multi-head attention with
rotary encoding applied to queries and keys before caching, and a SiLU MLP.
`o_t` is the final residual state; logits are `head(rms_norm(o_t))`.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np

from ..data.vocab import EOS
from ..numerics import ops
from ..numerics.tensor import Tensor, no_grad
from ..schemas.config import BackboneConfig
from .cache import CacheState

logger = logging.getLogger(__name__)


@dataclass
class LayerParams:
    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    mlp_norm: Tensor
    w_up: Tensor
    w_down: Tensor


@dataclass
class BackboneParams:
    embed: Tensor
    layers: list[LayerParams]
    final_norm: Tensor
    head: Tensor
    frozen: bool = False

    @classmethod
    def init(cls, config: BackboneConfig, seed: int = 0) -> "BackboneParams":
        rng = np.random.default_rng(seed)
        d, f = config.d_model, config.d_ff

        def dense(rows: int, cols: int) -> Tensor:
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(rows), (rows, cols)), requires_grad=True)

        def ones(size: int) -> Tensor:
            return Tensor(np.ones(size), requires_grad=True)

        layers = [
            LayerParams(
                attn_norm=ones(d),
                wq=dense(d, d),
                wk=dense(d, d),
                wv=dense(d, d),
                wo=dense(d, d),
                mlp_norm=ones(d),
                w_up=dense(d, f),
                w_down=dense(f, d),
            )
            for _ in range(config.n_layers)
        ]
        params = cls(
            embed=Tensor(rng.normal(0.0, 1.0, (config.vocab_size, d)), requires_grad=True),
            layers=layers,
            final_norm=ones(d),
            head=dense(d, config.vocab_size),
        )
        params.name_tensors()
        return params

    def named(self) -> dict[str, Tensor]:
        named = {"embed": self.embed}
        for i, layer in enumerate(self.layers):
            for field_name, tensor in vars(layer).items():
                named[f"layers.{i}.{field_name}"] = tensor
        named["final_norm"] = self.final_norm
        named["head"] = self.head
        return named

    def name_tensors(self) -> None:
        for name, tensor in self.named().items():
            tensor.name = name

    def parameters(self) -> list[Tensor]:
        return list(self.named().values())

    def count(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def freeze(self) -> None:
        self.frozen = True
        for tensor in self.parameters():
            tensor.requires_grad = False
            tensor.grad = None

    def unfreeze(self) -> None:
        self.frozen = False
        for tensor in self.parameters():
            tensor.requires_grad = True


class GenerationHook(Protocol):
    def on_prompt(self, cache: CacheState) -> None: ...

    def after_token(self, cache: CacheState, token: int) -> None: ...


class Backbone:
    """
    Frozen-or-trainable decoder with prefill / decode / greedy generation.

    Attributes:
        config (BackboneConfig): Architecture.
        params (BackboneParams): Weights.
        head_calls (int): Number of LM-head applications since construction.
    """

    def __init__(self, config: BackboneConfig, params: Optional[BackboneParams] = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else BackboneParams.init(config, seed)
        self.head_calls = 0

    @property
    def dtype(self) -> np.dtype:
        return self.params.embed.dtype

    def freeze(self) -> None:
        self.params.freeze()

    def unfreeze(self) -> None:
        self.params.unfreeze()

    def new_cache(self) -> CacheState:
        c = self.config
        return CacheState.empty(c.n_layers, c.n_heads, c.d_k, self.dtype)

    def rotary_tables(self, start: int, count: int) -> tuple[np.ndarray, np.ndarray]:
        d_k = self.config.d_k
        inv_freq = self.config.rotary_base ** (-np.arange(0, d_k, 2, dtype=np.float64) / d_k)
        angles = np.arange(start, start + count, dtype=np.float64)[:, None] * inv_freq[None, :]
        angles = np.concatenate((angles, angles), axis=-1)[:, None, :]
        return np.cos(angles).astype(self.dtype), np.sin(angles).astype(self.dtype)

    def embed(self, tokens: Sequence[int]) -> Tensor:
        return ops.embedding(self.params.embed, tokens)

    def forward_embeddings(
        self, cache: CacheState, x: Tensor, token_ids: Optional[Sequence[int]] = None
    ) -> Tensor:
        """
        Run [T, d_model] input embeddings on top of `cache`, appending T rows per layer.

        Args:
            cache (CacheState): Cache to extend; mutated in place.
            x (Tensor): Input embeddings.
            token_ids (Sequence[int] | None, optional): Ids behind `x`; None for
                latent inputs.

        Returns:
            Tensor: Final residual states [T, d_model]; the last row becomes o_t.

        Raises:
            ValueError: If the cache would exceed max positions.
        """
        c = self.config
        t0, count = cache.length, x.shape[0]
        if count < 1:
            raise ValueError("forward needs at least one position")
        if t0 + count > c.max_positions:
            raise ValueError(
                f"sequence length {t0 + count} exceeds max positions {c.max_positions}"
            )
        cos, sin = self.rotary_tables(t0, count)
        positions = np.arange(t0, t0 + count)
        mask = np.arange(t0 + count)[None, :] <= positions[:, None]
        inv_sqrt = 1.0 / math.sqrt(c.d_k)

        h = x
        for i, layer in enumerate(self.params.layers):
            a = ops.rms_norm(h, layer.attn_norm)
            q = ops.rope(ops.reshape(a @ layer.wq, (count, c.n_heads, c.d_k)), cos, sin)
            k = ops.rope(ops.reshape(a @ layer.wk, (count, c.n_heads, c.d_k)), cos, sin)
            v = ops.reshape(a @ layer.wv, (count, c.n_heads, c.d_k))
            cache.append(i, k, v)

            qh = ops.transpose(q, (1, 0, 2))
            kh = ops.transpose(cache.keys[i], (1, 2, 0))
            vh = ops.transpose(cache.values[i], (1, 0, 2))
            probs = ops.softmax(ops.scale(qh @ kh, inv_sqrt), mask)
            cache.record_attention(i, t0, probs.data)
            context = ops.reshape(ops.transpose(probs @ vh, (1, 0, 2)), (count, c.d_model))
            h = h + context @ layer.wo

            m = ops.rms_norm(h, layer.mlp_norm)
            h = h + ops.silu(m @ layer.w_up) @ layer.w_down

        cache.tokens.extend([int(t) for t in token_ids] if token_ids is not None else [-1] * count)
        cache.last_hidden = ops.reshape(ops.slice_axis(h, count - 1, count), (c.d_model,))
        return h

    def head(self, hidden: Tensor) -> Tensor:
        self.head_calls += 1
        return ops.rms_norm(hidden, self.params.final_norm) @ self.params.head

    def forward(self, cache: CacheState, tokens: Sequence[int]) -> Tensor:
        """Teacher-forced logits [T, V] for `tokens` appended to `cache`."""
        return self.head(self.forward_embeddings(cache, self.embed(tokens), tokens))

    def prefill(self, tokens: Sequence[int]) -> tuple[CacheState, Tensor]:
        """
        Process a prompt from an empty cache.

        Returns:
            tuple[CacheState, Tensor]: The cache and the last position's logits [V].

        Raises:
            ValueError: If `tokens` is empty or longer than max positions.
        """
        if len(tokens) == 0:
            raise ValueError("prefill needs at least one token")
        cache = self.new_cache()
        logits = self.forward(cache, tokens)
        return cache, _last_row(logits)

    def decode_step(self, cache: CacheState, token: int) -> tuple[CacheState, Tensor]:
        logits = self.forward(cache, [token])
        return cache, _last_row(logits)

    def greedy_generate(
        self,
        prompt: Sequence[int],
        max_new: int,
        hooks: Iterable[GenerationHook] = (),
        eos_id: int = EOS,
    ) -> list[int]:
        """
        Argmax decoding with post-token hooks.

        Hooks run once after the prompt and after each emitted token has been
        decoded into the cache; decoding resumes from whatever cache they leave.
        Ties in argmax go to the lowest token id.

        Args:
            prompt (Sequence[int]): Non-empty prompt ids.
            max_new (int): Maximum number of generated tokens.
            hooks (Iterable[GenerationHook], optional): Trigger hooks.
            eos_id (int, optional): Stop token.

        Returns:
            list[int]: Prompt followed by the generated ids.
        """
        hooks = list(hooks)
        tokens = list(prompt)
        with no_grad():
            cache, logits = self.prefill(tokens)
            for hook in hooks:
                hook.on_prompt(cache)
            for _ in range(max_new):
                token = int(np.argmax(logits.data))
                tokens.append(token)
                if token == eos_id or cache.length >= self.config.max_positions:
                    break
                cache, logits = self.decode_step(cache, token)
                for hook in hooks:
                    hook.after_token(cache, token)
        return tokens


def _last_row(logits: Tensor) -> Tensor:
    rows = logits.shape[0]
    return ops.reshape(ops.slice_axis(logits, rows - 1, rows), (logits.shape[1],))
