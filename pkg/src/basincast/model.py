"""Dual-relation graph attention recurrence over basin windows.

The forward pass encodes each node's input window with causal windowed
self-attention, then walks the encoded steps with a GRU whose gates are
graph-attention convolutions: one branch routes over flow edges for all
nodes, a second routes over catchment edges between gauged nodes, and a
learned per-head sigmoid gate fuses the two at gauge rows. A small
convolutional head combines the final hidden state with forecast rain to
emit one discharge value per gauge per lead step.

All tensors carry a leading batch axis; a single window is a batch of 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import NUM_CHANNELS
from .errors import InvalidInputError, ShapeError
from .graph import BasinGraph

PAPER_DEFAULTS = {"t_in": 72, "t_out": 72, "hidden": 32, "num_heads": 2,
                  "dropout": 0.1, "attn_window": 24}


@dataclass
class ModelConfig:
    t_in: int = 72
    t_out: int = 72
    d_model: int = 32
    num_heads: int = 2
    hidden: int = 32
    attn_window: int = 24
    dropout: float = 0.1
    relations: tuple = ("flow", "catchment")

    def __post_init__(self):
        if self.d_model % self.num_heads or self.hidden % self.num_heads:
            raise InvalidInputError(
                "d_model and hidden must be divisible by num_heads")
        if self.d_model % 2:
            raise InvalidInputError("d_model must be even")
        if self.attn_window < 1:
            raise InvalidInputError("attn_window must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidInputError("dropout must lie in [0, 1)")
        if self.t_in < 1 or self.t_out < 1:
            raise InvalidInputError("window lengths must be positive")
        unknown = set(self.relations) - {"flow", "catchment"}
        if unknown:
            raise InvalidInputError(f"unknown relations: {sorted(unknown)}")

    def to_json_dict(self) -> dict:
        return {"t_in": self.t_in, "t_out": self.t_out, "d_model": self.d_model,
                "num_heads": self.num_heads, "hidden": self.hidden,
                "attn_window": self.attn_window, "dropout": self.dropout,
                "relations": list(self.relations)}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ModelConfig":
        try:
            return cls(t_in=int(doc["t_in"]), t_out=int(doc["t_out"]),
                       d_model=int(doc["d_model"]),
                       num_heads=int(doc["num_heads"]), hidden=int(doc["hidden"]),
                       attn_window=int(doc["attn_window"]),
                       dropout=float(doc["dropout"]),
                       relations=tuple(doc["relations"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed model config: {exc}")


@dataclass
class AttentionRecord:
    """Attention captured on one forward pass.

    temporal: [batch, nodes, heads, T_in, T_in] encoder attention.
    catchment: [batch, heads, targets, targets] candidate-gate attention
    averaged over the recurrence steps; rows remain stochastic.
    """

    temporal: np.ndarray
    catchment: np.ndarray


def positional_encoding(t_steps: int, d: int) -> np.ndarray:
    """Sine-cosine position rows: even columns sin, odd columns cos."""
    if d % 2:
        raise InvalidInputError(f"encoding width must be even, got {d}")
    pos = np.arange(t_steps)[:, None]
    rates = 1.0 / np.power(10000.0, 2 * np.arange(d // 2) / d)
    table = np.zeros((t_steps, d))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates)
    return table


def causal_window_mask(t_steps: int, window: int) -> np.ndarray:
    """Additive mask: query t may see keys in [max(0, t-window+1), t]."""
    t = np.arange(t_steps)
    keep = (t[None, :] <= t[:, None]) & (t[None, :] >= t[:, None] - window + 1)
    return np.where(keep, 0.0, -np.inf)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _uniform_init(rng, shape, fan_in=None):
    """uniform(+-sqrt(1/fan_in)): rows feed x@W, so fan_in defaults to
    shape[0] for matrices and the receptive field for conv kernels."""
    if fan_in is None:
        fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
    bound = np.sqrt(1.0 / fan_in)
    return ad.parameter(rng.uniform(-bound, bound, size=shape))


def init_state(config: ModelConfig, rng: np.random.Generator) -> dict:
    """Fresh parameter dictionary; names are stable and sorted for I/O."""
    d, h, heads = config.d_model, config.hidden, config.num_heads
    dh = h // heads
    p = {
        "enc.w_in": _uniform_init(rng, (NUM_CHANNELS, d)),
        "enc.wq": _uniform_init(rng, (d, d)),
        "enc.wk": _uniform_init(rng, (d, d)),
        "enc.wv": _uniform_init(rng, (d, d)),
        "enc.wo": _uniform_init(rng, (d, d)),
        "enc.ln1_g": ad.parameter(np.ones(d)),
        "enc.ln1_b": ad.parameter(np.zeros(d)),
        "enc.ln2_g": ad.parameter(np.ones(d)),
        "enc.ln2_b": ad.parameter(np.zeros(d)),
        "enc.ff_w1": _uniform_init(rng, (d, 2 * d)),
        "enc.ff_b1": ad.parameter(np.zeros(2 * d)),
        "enc.ff_w2": _uniform_init(rng, (2 * d, d)),
        "enc.ff_b2": ad.parameter(np.zeros(d)),
        "fuse.alpha_raw": ad.parameter(np.zeros(heads)),
        "head.w_rain": _uniform_init(rng, (h, 1, 3)),
        "head.w_mix1": _uniform_init(rng, (h, 2 * h, 1)),
        "head.b_mix1": ad.parameter(np.zeros(h)),
        "head.w_mix2": _uniform_init(rng, (1, h, 1)),
        "head.b_mix2": ad.parameter(np.zeros(1)),
    }
    for branch in ("flow", "catch"):
        for gate, d_in in (("z", d), ("r", d), ("h", d + h)):
            stem = f"gat.{branch}.{gate}"
            p[f"{stem}.w"] = _uniform_init(rng, (d_in, h))
            p[f"{stem}.a_src"] = _uniform_init(rng, (heads, dh), fan_in=dh)
            p[f"{stem}.a_dst"] = _uniform_init(rng, (heads, dh), fan_in=dh)
            p[f"{stem}.mix"] = _uniform_init(rng, (h, h))
    return p


def state_finite(state: dict) -> bool:
    return all(np.isfinite(t.values).all() for t in state.values())


@dataclass
class GraphTensors:
    """Dense attention masks derived once per graph."""

    flow_mask: np.ndarray
    catch_mask: np.ndarray
    targets: np.ndarray

    @classmethod
    def from_graph(cls, graph: BasinGraph) -> "GraphTensors":
        n = graph.num_nodes
        flow = np.full((n, n), -np.inf)
        np.fill_diagonal(flow, 0.0)
        for u, v in graph.flow_edges:
            flow[v, u] = 0.0
        m = len(graph.targets)
        pos = {node: i for i, node in enumerate(graph.targets)}
        catch = np.full((m, m), -np.inf)
        np.fill_diagonal(catch, 0.0)
        for u, v in graph.catchment_edges:
            catch[pos[v], pos[u]] = 0.0
        return cls(flow, catch, np.asarray(graph.targets, dtype=np.intp))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _split_heads(x: ad.Tensor, heads: int) -> ad.Tensor:
    """[..., N, H*dh] -> [..., H, N, dh]"""
    *lead, n, hd = x.shape
    x = ad.reshape(x, (*lead, n, heads, hd // heads))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return ad.transpose(x, axes)


def _merge_heads(x: ad.Tensor) -> ad.Tensor:
    """[..., H, N, dh] -> [..., N, H*dh]"""
    *lead, h, n, dh = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return ad.reshape(ad.transpose(x, axes), (*lead, n, h * dh))


def temporal_encode(x, state: dict, config: ModelConfig,
                    training: bool = False, rng=None,
                    capture: list | None = None) -> ad.Tensor:
    """Causal windowed self-attention along each node's own window.

    x: [batch, nodes, T_in, channels] -> [batch, nodes, T_in, d_model].
    Queries attend keys no older than attn_window steps and never the
    future; one pre-norm attention block then one pre-norm feed-forward.
    """
    x = ad.as_tensor(x)
    if x.ndim != 4 or x.shape[2] != config.t_in or x.shape[3] != NUM_CHANNELS:
        raise ShapeError("temporal_encode", x.shape,
                         ("batch", "nodes", config.t_in, NUM_CHANNELS))
    heads = config.num_heads
    dh = config.d_model // heads
    e = ad.add(ad.matmul(x, state["enc.w_in"]),
               positional_encoding(config.t_in, config.d_model))

    normed = ad.add(ad.mul(ad.layer_norm(e), state["enc.ln1_g"]),
                    state["enc.ln1_b"])
    q = _split_heads(ad.matmul(normed, state["enc.wq"]), heads)
    k = _split_heads(ad.matmul(normed, state["enc.wk"]), heads)
    v = _split_heads(ad.matmul(normed, state["enc.wv"]), heads)
    logits = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 2, 4, 3))),
                    1.0 / np.sqrt(dh))
    att = ad.softmax_with_mask(
        logits, causal_window_mask(config.t_in, config.attn_window))
    if capture is not None:
        capture.append(att.values.copy())
    mixed = ad.matmul(_merge_heads(ad.matmul(att, v)), state["enc.wo"])
    e = ad.add(e, ad.dropout(mixed, config.dropout, rng, training))

    normed = ad.add(ad.mul(ad.layer_norm(e), state["enc.ln2_g"]),
                    state["enc.ln2_b"])
    ff = ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(normed, state["enc.ff_w1"]),
                                         state["enc.ff_b1"])),
                          state["enc.ff_w2"]),
                state["enc.ff_b2"])
    return ad.add(e, ad.dropout(ff, config.dropout, rng, training))


def gat_forward(x, mask: np.ndarray, w, a_src, a_dst, heads: int,
                mix=None, capture: list | None = None) -> ad.Tensor:
    """Masked multi-head graph attention over a dense neighborhood mask.

    x: [batch, N, d_in]; mask[v, u] is 0 when u feeds v (self included),
    -inf otherwise. Per head, edge u->v scores
    leaky_relu(a_src . Wx_u + a_dst . Wx_v); attention normalizes over
    each destination's in-neighborhood; heads concatenate, then an
    optional linear mix restores the working width.
    """
    x = ad.as_tensor(x)
    proj = _split_heads(ad.matmul(x, w), heads)          # [B, H, N, dh]
    s_src = ad.sum_(ad.mul(proj, a_src[:, None, :]), axis=-1)  # [B, H, N]
    s_dst = ad.sum_(ad.mul(proj, a_dst[:, None, :]), axis=-1)
    b, h, n = s_src.shape
    logits = ad.leaky_relu(ad.add(ad.reshape(s_dst, (b, h, n, 1)),
                                  ad.reshape(s_src, (b, h, 1, n))), 0.2)
    att = ad.softmax_with_mask(logits, mask)             # rows over sources
    if capture is not None:
        capture.append(att.values.copy())
    out = _merge_heads(ad.matmul(att, proj))             # [B, N, H*dh]
    return out if mix is None else ad.matmul(out, mix)


def _gate(state: dict, branch: str, gate: str, x, mask, heads,
          capture=None) -> ad.Tensor:
    stem = f"gat.{branch}.{gate}"
    return gat_forward(x, mask, state[f"{stem}.w"], state[f"{stem}.a_src"],
                       state[f"{stem}.a_dst"], heads, state[f"{stem}.mix"],
                       capture)


def gru_gat_step(state: dict, branch: str, e_t, h_prev, mask: np.ndarray,
                 heads: int, capture: list | None = None) -> ad.Tensor:
    """One recurrence step where every gate is a graph attention pass.

    update z and reset r read the encoded inputs alone; the candidate
    reads [e_t || r * h_prev]; the new state is the z-blend of h_prev
    and the candidate.
    """
    z = ad.sigmoid(_gate(state, branch, "z", e_t, mask, heads))
    r = ad.sigmoid(_gate(state, branch, "r", e_t, mask, heads))
    cat = ad.concat([e_t, ad.mul(r, h_prev)], axis=-1)
    cand = ad.tanh(_gate(state, branch, "h", cat, mask, heads, capture))
    one_minus_z = ad.add(1.0, ad.mul(z, -1.0))
    return ad.add(ad.mul(one_minus_z, h_prev), ad.mul(z, cand))


def fuse_branches(h_flow, h_catch, alpha_raw, targets: np.ndarray,
                  heads: int) -> ad.Tensor:
    """Blend branch states at target rows; other rows pass through.

    alpha = sigmoid(alpha_raw) gives one weight per head, repeated
    across that head's slice of the hidden width.
    """
    h_flow = ad.as_tensor(h_flow)
    hidden = h_flow.shape[-1]
    alpha = ad.sigmoid(alpha_raw)
    per_head = ad.reshape(alpha, (heads, 1))
    spread = ad.reshape(ad.broadcast_to(per_head, (heads, hidden // heads)),
                        (hidden,))
    flow_rows = ad.take(h_flow, targets, axis=1)
    fused = ad.add(ad.mul(spread, flow_rows),
                   ad.mul(ad.add(1.0, ad.mul(spread, -1.0)), h_catch))
    return ad.set_rows(h_flow, fused, targets, axis=1)


def predict(h_final, forecast_rain, targets: np.ndarray, state: dict,
            noise_std: float = 0.0, rng=None) -> ad.Tensor:
    """Map the final hidden state plus forecast rain to discharge.

    forecast rain (optionally perturbed by Gaussian noise) passes a
    width-3 convolution over the lead axis, concatenates with the hidden
    state broadcast over leads, and two width-1 convolutions reduce to
    one value per target per lead.
    """
    h_final = ad.as_tensor(h_final)
    rain = ad.as_tensor(forecast_rain)
    if rain.ndim != 3 or h_final.ndim != 3:
        raise ShapeError("predict", h_final.shape, rain.shape)
    if noise_std:
        if rng is None:
            raise InvalidInputError("forecast noise needs a random generator")
        rain = ad.add(rain, rng.normal(0.0, noise_std, size=rain.shape))
    b = rain.shape[0]
    m = len(targets)
    t_out = rain.shape[2]
    hidden = h_final.shape[-1]

    rain_rows = ad.reshape(ad.take(rain, targets, axis=1), (b, m, 1, t_out))
    rain_feat = ad.conv1d(rain_rows, state["head.w_rain"], padding=1)
    h_rows = ad.reshape(ad.take(h_final, targets, axis=1), (b, m, hidden, 1))
    h_feat = ad.broadcast_to(h_rows, (b, m, hidden, t_out))
    stack = ad.concat([rain_feat, h_feat], axis=2)
    mid = ad.relu(ad.add(ad.conv1d(stack, state["head.w_mix1"]),
                         ad.reshape(state["head.b_mix1"], (hidden, 1))))
    out = ad.add(ad.conv1d(mid, state["head.w_mix2"]),
                 ad.reshape(state["head.b_mix2"], (1, 1)))
    return ad.reshape(out, (b, m, t_out))


def forward_batch(inputs, forecast_rain, gt: GraphTensors, state: dict,
                  config: ModelConfig, capture_attention: bool = False,
                  training: bool = False, rng=None, noise_std: float = 0.0
                  ) -> tuple[ad.Tensor, AttentionRecord | None]:
    """Full forward over a batch of windows.

    inputs: [batch, nodes, T_in, channels]; forecast_rain:
    [batch, nodes, T_out]. Returns predictions [batch, targets, T_out].
    """
    inputs = ad.as_tensor(inputs)
    forecast_rain = ad.as_tensor(forecast_rain)
    n = gt.flow_mask.shape[0]
    if inputs.shape[1] != n or forecast_rain.shape[1] != n:
        raise ShapeError("forward_batch", inputs.shape, (n,))
    if training and config.dropout > 0 and rng is None:
        raise InvalidInputError("training with dropout needs a random generator")

    tcap = [] if capture_attention else None
    ccap = [] if capture_attention else None
    e_seq = temporal_encode(inputs, state, config, training, rng, tcap)

    batch = inputs.shape[0]
    heads = config.num_heads
    use_catch = "catchment" in config.relations
    h = ad.tensor(np.zeros((batch, n, config.hidden)))
    for t in range(config.t_in):
        e_t = e_seq[:, :, t, :]
        h_flow = gru_gat_step(state, "flow", e_t, h, gt.flow_mask, heads)
        if use_catch:
            e_rho = ad.take(e_t, gt.targets, axis=1)
            h_rho = ad.take(h, gt.targets, axis=1)
            h_catch = gru_gat_step(state, "catch", e_rho, h_rho,
                                   gt.catch_mask, heads, ccap)
            h = fuse_branches(h_flow, h_catch, state["fuse.alpha_raw"],
                              gt.targets, heads)
        else:
            h = h_flow
    y = predict(h, forecast_rain, gt.targets, state, noise_std, rng)

    record = None
    if capture_attention:
        catchment = (np.mean(ccap, axis=0) if ccap
                     else np.zeros((batch, heads, len(gt.targets),
                                    len(gt.targets))))
        record = AttentionRecord(temporal=tcap[0], catchment=catchment)
    return y, record


def model_forward(sample, graph, state: dict, config: ModelConfig,
                  capture_attention: bool = False, training: bool = False,
                  rng=None, noise_std: float = 0.0):
    """Single-window convenience wrapper around `forward_batch`.

    `graph` may be a BasinGraph or prebuilt GraphTensors. Returns
    (predictions [targets, T_out], attention record or None).
    """
    gt = graph if isinstance(graph, GraphTensors) else GraphTensors.from_graph(graph)
    y, record = forward_batch(sample.inputs[None], sample.forecast_rain[None],
                              gt, state, config, capture_attention,
                              training, rng, noise_std)
    return ad.reshape(y, y.shape[1:]), record
