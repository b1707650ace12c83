"""
Cache Processor: one small non-causal transformer block per backbone layer that
rewrites selected KV rows in place through a gated residual update

    x = [k_sel | v_sel]            (all heads concatenated)
    u = x W_in
    delta = block(u) W_out
    k_sel += sigmoid(g) delta_k,   v_sel += sigmoid(g) delta_v
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..data.traces import segment_steps
from ..data.vocab import NEWLINE
from ..enums import TriggerMode
from ..numerics import ops
from ..numerics.tensor import ShapeError, Tensor
from ..schemas.config import BackboneConfig, ProcessorConfig
from .cache import CacheState
from .selection import SelectionSet, build_selection

logger = logging.getLogger(__name__)


@dataclass
class ProcessorLayerParams:
    w_in: Tensor
    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    mlp_norm: Tensor
    w_up: Tensor
    w_down: Tensor
    w_out: Tensor
    gate: Tensor


@dataclass
class ProcessorParams:
    layers: list[ProcessorLayerParams]

    @classmethod
    def init(
        cls, config: ProcessorConfig, backbone: BackboneConfig, seed: int = 0
    ) -> "ProcessorParams":
        """
        Fresh parameters: random block weights, zero W_out and gates at g0,
        so the first invocations change nothing.
        """
        rng = np.random.default_rng(seed)
        width = 2 * backbone.n_heads * backbone.d_k
        d, f = config.d_p, config.d_p_ff

        def dense(rows: int, cols: int) -> Tensor:
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(rows), (rows, cols)), requires_grad=True)

        layers = [
            ProcessorLayerParams(
                w_in=dense(width, d),
                attn_norm=Tensor(np.ones(d), requires_grad=True),
                wq=dense(d, d),
                wk=dense(d, d),
                wv=dense(d, d),
                wo=dense(d, d),
                mlp_norm=Tensor(np.ones(d), requires_grad=True),
                w_up=dense(d, f),
                w_down=dense(f, d),
                w_out=Tensor(np.zeros((d, width)), requires_grad=True),
                gate=Tensor(np.full(1, config.g0), requires_grad=True),
            )
            for _ in range(backbone.n_layers)
        ]
        params = cls(layers)
        for name, tensor in params.named().items():
            tensor.name = name
        return params

    def named(self) -> dict[str, Tensor]:
        return {
            f"layers.{i}.{field_name}": tensor
            for i, layer in enumerate(self.layers)
            for field_name, tensor in vars(layer).items()
        }

    def parameters(self) -> list[Tensor]:
        return list(self.named().values())

    def gates(self) -> list[Tensor]:
        return [layer.gate for layer in self.layers]

    def gate_values(self) -> list[float]:
        return [float(0.5 * (1.0 + np.tanh(0.5 * g.item()))) for g in self.gates()]

    def count(self) -> int:
        return sum(t.data.size for t in self.parameters())


def form_kv_tokens(cache: CacheState, selection: SelectionSet, layer: int) -> Tensor:
    """
    Stack the selected rows of one layer as KV tokens.

    Returns:
        Tensor: [rows, 2 * H * d_k], rows in ascending cache position, each row
            the concatenated all-head key followed by the all-head value.

    Raises:
        IndexError: If a selected position is outside the cache.
    """
    indices = selection.layers[layer].merged
    if indices.size and (indices.min() < 0 or indices.max() >= cache.length):
        raise IndexError(f"selected position outside cache of length {cache.length}")
    keys = ops.take(cache.keys[layer], indices)
    values = ops.take(cache.values[layer], indices)
    rows, heads, d_k = keys.shape
    return ops.concat(
        [ops.reshape(keys, (rows, heads * d_k)), ops.reshape(values, (rows, heads * d_k))], axis=1
    )


def block_forward(params: ProcessorLayerParams, u: Tensor, heads: int) -> Tensor:
    """
    Pre-norm transformer block without causal mask or positional encoding.

    Args:
        params (ProcessorLayerParams): Block weights.
        u (Tensor): [rows, d_p] inputs.
        heads (int): Attention heads.

    Returns:
        Tensor: [rows, d_p] final hidden states.
    """
    rows, d_p = u.shape
    d_h = d_p // heads

    def split(t: Tensor) -> Tensor:
        return ops.transpose(ops.reshape(t, (rows, heads, d_h)), (1, 0, 2))

    a = ops.rms_norm(u, params.attn_norm)
    q, k, v = split(a @ params.wq), split(a @ params.wk), split(a @ params.wv)
    probs = ops.softmax(ops.scale(q @ ops.transpose(k, (0, 2, 1)), 1.0 / math.sqrt(d_h)))
    context = ops.reshape(ops.transpose(probs @ v, (1, 0, 2)), (rows, d_p))
    h = u + context @ params.wo
    m = ops.rms_norm(h, params.mlp_norm)
    return h + ops.silu(m @ params.w_up) @ params.w_down


def apply_rewrite(
    cache: CacheState,
    selection: SelectionSet,
    deltas: Sequence[tuple[Tensor, Tensor]],
    gates: Sequence[Tensor],
) -> None:
    """
    Add sigmoid(g) * delta to the selected key and value rows of every layer.

    Rows outside the selection and the cache length are untouched.

    Args:
        cache (CacheState): Cache to rewrite in place.
        selection (SelectionSet): Per-layer rows; deltas follow `merged` order.
        deltas (Sequence[tuple[Tensor, Tensor]]): Per layer (delta_k, delta_v),
            each [rows, H, d_k].
        gates (Sequence[Tensor]): Per layer scalar gate logits.

    Raises:
        ShapeError: If a delta is not row-aligned with its selection.
    """
    if not len(deltas) == len(gates) == cache.n_layers:
        raise ShapeError(
            f"rewrite needs one delta and gate per layer: {len(deltas)} deltas, "
            f"{len(gates)} gates, {cache.n_layers} layers"
        )
    for layer, ((delta_k, delta_v), gate) in enumerate(zip(deltas, gates)):
        indices = selection.layers[layer].merged
        expected = (indices.size, *cache.keys[layer].shape[1:])
        if delta_k.shape != expected or delta_v.shape != expected:
            raise ShapeError(
                f"layer {layer}: deltas {delta_k.shape} / {delta_v.shape} not aligned with "
                f"selection rows {expected}"
            )
        strength = ops.sigmoid(gate)
        cache.keys[layer] = ops.index_add(cache.keys[layer], indices, ops.scale(delta_k, strength))
        cache.values[layer] = ops.index_add(
            cache.values[layer], indices, ops.scale(delta_v, strength)
        )


@dataclass
class LayerSnapshot:
    layer: int
    indices: np.ndarray
    recalled: np.ndarray
    pre_keys: np.ndarray
    pre_values: np.ndarray
    post_keys: np.ndarray
    post_values: np.ndarray


@dataclass
class InvocationRecord:
    index: int
    step_span: tuple[int, int]
    selection: Optional[SelectionSet]
    gate_values: list[float]
    snapshots: Optional[list[LayerSnapshot]] = None


class CacheProcessor:
    """
    Runs selection, the per-layer blocks and the gated rewrite.

    Attributes:
        k (int): Reconsolidation budget used by the next invocation.
        instrument (bool): Capture pre/post snapshots of touched rows.
        invocations (int): Invocations since construction.
    """

    def __init__(
        self,
        config: ProcessorConfig,
        backbone: BackboneConfig,
        params: Optional[ProcessorParams] = None,
        seed: int = 0,
        instrument: bool = False,
    ):
        self.config = config
        self.backbone = backbone
        self.params = params if params is not None else ProcessorParams.init(config, backbone, seed)
        self.k = config.k
        self.instrument = instrument
        self.invocations = 0

    def deltas(self, cache: CacheState, selection: SelectionSet) -> list[tuple[Tensor, Tensor]]:
        heads, d_k = self.backbone.n_heads, self.backbone.d_k
        out = []
        for layer, params in enumerate(self.params.layers):
            x = form_kv_tokens(cache, selection, layer)
            hidden = block_forward(params, x @ params.w_in, self.config.heads)
            delta = hidden @ params.w_out
            rows, width = delta.shape
            half = width // 2
            out.append(
                (
                    ops.reshape(ops.slice_axis(delta, 0, half, axis=1), (rows, heads, d_k)),
                    ops.reshape(ops.slice_axis(delta, half, width, axis=1), (rows, heads, d_k)),
                )
            )
        return out

    def invoke(
        self, cache: CacheState, step_span: tuple[int, int], release_rows: bool = True
    ) -> InvocationRecord:
        """
        Rewrite the cache for a just-completed step.

        Args:
            cache (CacheState): Session cache; rewritten in place.
            step_span (tuple[int, int]): The completed step (the prompt at the
                first invocation).
            release_rows (bool, optional): Start a new step at the current
                length, dropping buffered attention rows.

        Returns:
            InvocationRecord: Selections, gate strengths and, when instrumented,
                snapshots of the touched rows.
        """
        selection = build_selection(cache, step_span, self.k)
        pre = None
        if self.instrument:
            pre = [cache.rows_snapshot(i, s.merged) for i, s in enumerate(selection.layers)]
        apply_rewrite(cache, selection, self.deltas(cache, selection), self.params.gates())
        snapshots = None
        if pre is not None:
            snapshots = []
            for i, s in enumerate(selection.layers):
                post_k, post_v = cache.rows_snapshot(i, s.merged)
                snapshots.append(
                    LayerSnapshot(i, s.merged, s.is_recalled(), pre[i][0], pre[i][1], post_k, post_v)
                )
        record = InvocationRecord(
            index=self.invocations,
            step_span=selection.step_span,
            selection=selection,
            gate_values=self.params.gate_values(),
            snapshots=snapshots,
        )
        self.invocations += 1
        if release_rows:
            cache.start_step()
        logger.debug("Invocation %d rewrote span %s", record.index, record.step_span)
        return record


@dataclass
class ProcessorHook:
    """
    Generation hook firing the processor once at prompt end and then per trigger.

    With `prompt_newlines_trigger` the prompt's internal NEWLINE-terminated
    segments are each rewritten in turn, using attention rows of the prefill.
    """

    processor: CacheProcessor
    trigger: TriggerMode = TriggerMode.NEWLINE
    R: Optional[int] = None
    prompt_newlines_trigger: bool = False
    records: list[InvocationRecord] = field(default_factory=list)

    def on_prompt(self, cache: CacheState) -> None:
        if self.trigger == TriggerMode.NONE:
            cache.start_step()
            return
        spans = [(0, cache.length)]
        if self.prompt_newlines_trigger:
            spans = segment_steps(cache.tokens, 0) or spans
        for i, span in enumerate(spans):
            self.records.append(
                self.processor.invoke(cache, span, release_rows=i == len(spans) - 1)
            )

    def after_token(self, cache: CacheState, token: int) -> None:
        if self.trigger == TriggerMode.NEWLINE and token == NEWLINE:
            self.records.append(self.processor.invoke(cache, (cache.boundary, cache.length)))
        elif self.trigger == TriggerMode.EVERY_R and cache.length - cache.boundary >= self.R:
            self.records.append(self.processor.invoke(cache, (cache.boundary, cache.length)))

    @property
    def invocations(self) -> int:
        return len(self.records)


def parameter_report(processor: CacheProcessor, backbone_params: int) -> dict:
    count = processor.params.count()
    return {
        "processor_params": count,
        "backbone_params": backbone_params,
        "ratio": count / backbone_params if backbone_params else float("nan"),
    }
