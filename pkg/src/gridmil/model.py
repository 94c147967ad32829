"""The dual-stream model: shared multi-head GAT encoder, mirrored GAT decoder,
and a global-node classifier, plus the attention-pooling MIL baseline.

Head width is hidden_dim / num_heads so concatenating heads returns hidden_dim
and the per-layer residual is well-typed. The decoder's final layer keeps the
residual but skips layer norm, and an output projection maps back to the raw
feature space for reconstruction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import PatchGraph
from .seeding import substream
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    feature_dim: int
    hidden_dim: int = 256
    num_heads: int = 4
    num_layers: int = 2
    num_classes: int = 2
    classifier_hidden: int | None = None

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return self.classifier_hidden if self.classifier_hidden is not None else self.hidden_dim


@dataclass
class ModelState:
    dims: ModelDims
    params: dict[str, Tensor]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def clone_arrays(self) -> dict[str, np.ndarray]:
        return {k: np.array(v.data, copy=True) for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            v.data = np.array(arrays[k], copy=True)


@dataclass
class EncodedGraph:
    node_states: Tensor  # (N+1, hidden_dim)
    attention: list  # per layer: per head: (E_with_loops,) numpy coefficients
    edge_src: np.ndarray  # edges including self-loops, sorted by destination
    edge_dst: np.ndarray
    num_patches: int
    global_index: int


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _layer_param_names(prefix: str, dims: ModelDims, with_norm: bool) -> list[str]:
    names = []
    for m in range(dims.num_heads):
        names.append(f"{prefix}.head{m}.W")
        names.append(f"{prefix}.head{m}.a")
    if with_norm:
        names.append(f"{prefix}.ln_gain")
        names.append(f"{prefix}.ln_bias")
    return names


def init_params(dims: ModelDims, seed: int) -> ModelState:
    """Deterministic initialization: Xavier-uniform linear/attention weights,
    small-normal mask token and global embedding, identity layer norms."""
    rng = substream(seed, "init")
    d_in, d, dh = dims.feature_dim, dims.hidden_dim, dims.head_dim
    params: dict[str, Tensor] = {}

    def add(name, arr):
        params[name] = Tensor(arr, requires_grad=True)

    add("input_proj.W", _xavier(rng, d_in, d, (d_in, d)))
    add("input_proj.b", np.zeros(d))
    add("mask_token", rng.normal(0.0, 0.02, size=d_in))
    add("global_embedding", rng.normal(0.0, 0.02, size=d_in))

    for stack in ("encoder", "decoder"):
        for layer in range(dims.num_layers):
            prefix = f"{stack}.{layer}"
            for m in range(dims.num_heads):
                add(f"{prefix}.head{m}.W", _xavier(rng, d, dh, (d, dh)))
                add(f"{prefix}.head{m}.a", _xavier(rng, 2 * dh, 1, (2 * dh,)))
            # the decoder's final layer omits normalization entirely
            if stack == "encoder" or layer < dims.num_layers - 1:
                add(f"{prefix}.ln_gain", np.ones(d))
                add(f"{prefix}.ln_bias", np.zeros(d))

    add("decoder.out.W", _xavier(rng, d, d_in, (d, d_in)))
    add("decoder.out.b", np.zeros(d_in))

    dm = dims.mlp_hidden
    add("classifier.W1", _xavier(rng, d, dm, (d, dm)))
    add("classifier.b1", np.zeros(dm))
    add("classifier.W2", _xavier(rng, dm, dims.num_classes, (dm, dims.num_classes)))
    add("classifier.b2", np.zeros(dims.num_classes))
    return ModelState(dims=dims, params=params)


def with_self_loops(src: np.ndarray, dst: np.ndarray, num_nodes: int):
    """Append i->i for every node and sort by destination (stable)."""
    loops = np.arange(num_nodes, dtype=np.int64)
    s = np.concatenate([src, loops])
    t = np.concatenate([dst, loops])
    order = np.argsort(t, kind="stable")
    return s[order], t[order]


def gat_layer_forward(
    h: Tensor,
    src: np.ndarray,
    dst: np.ndarray,
    num_nodes: int,
    params: dict[str, Tensor],
    prefix: str,
    num_heads: int,
    final_norm: bool,
    attention_out: list | None = None,
) -> Tensor:
    """One multi-head GAT layer over edges that already include self-loops.

    Attention logits are leaky-relu(0.2) of a^T [W h_dst || W h_src]; the
    coefficients are a softmax over each node's incoming edges. Heads are
    concatenated, passed through elu, the residual added, and (unless this is
    the decoder's final layer) layer norm applied.
    """
    head_dim = params[f"{prefix}.head0.W"].shape[1]
    head_outputs = []
    for m in range(num_heads):
        W = params[f"{prefix}.head{m}.W"]
        a = params[f"{prefix}.head{m}.a"]
        wh = h @ W  # (n, head_dim)
        # split the attention vector into its destination/source halves
        a_dst = T.gather_rows(a, np.arange(head_dim))
        a_src = T.gather_rows(a, np.arange(head_dim, 2 * head_dim))
        s_dst = wh @ a_dst  # (n,)
        s_src = wh @ a_src
        logits = T.leaky_relu(T.gather_rows(s_dst, dst) + T.gather_rows(s_src, src), slope=0.2)
        alpha = T.segment_softmax(logits, dst, num_nodes)
        if attention_out is not None:
            attention_out.append(np.array(alpha.data, copy=True))
        messages = T.gather_rows(wh, src) * alpha.reshape((-1, 1))
        head_outputs.append(T.segment_sum(messages, dst, num_nodes))
    merged = head_outputs[0] if num_heads == 1 else _concat_cols(head_outputs)
    out = T.elu(merged) + h
    if final_norm:
        out = T.layer_norm(out, params[f"{prefix}.ln_gain"], params[f"{prefix}.ln_bias"])
    return out


def _concat_cols(tensors: list) -> Tensor:
    """Concatenate along axis 1 (column blocks)."""
    data = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.data.shape[1] for t in tensors])

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accum(g[:, lo:hi])

    return Tensor._from_op(data, tuple(tensors), back)


def _node_matrix(graph: PatchGraph, state: ModelState, masked_indices: np.ndarray | None) -> Tensor:
    """Raw (N+1, D) node features: patches (mask token substituted at masked
    rows, keeping the token on the gradient path) plus the global embedding."""
    feats = graph.bag.features
    n, d_in = feats.shape
    if masked_indices is not None and len(masked_indices):
        keep = np.ones((n, 1))
        keep[masked_indices] = 0.0
        patch = Tensor(feats * keep) + state.params["mask_token"].reshape((1, d_in)) * Tensor(1.0 - keep)
    else:
        patch = Tensor(feats)
    return T.concat_rows([patch, state.params["global_embedding"].reshape((1, d_in))])


def encode(graph: PatchGraph, state: ModelState, masked_indices: np.ndarray | None = None) -> EncodedGraph:
    """Project raw node features and run the encoder stack, retaining the
    per-layer attention coefficients for diagnostics."""
    if not graph.has_global_node:
        raise ConfigError("encode requires a graph with its global node attached")
    if graph.bag.feature_dim != state.dims.feature_dim:
        raise ConfigError(
            f"feature dim {graph.bag.feature_dim} does not match model {state.dims.feature_dim}"
        )
    n = graph.num_nodes
    src, dst = with_self_loops(graph.edge_src, graph.edge_dst, n)
    x = _node_matrix(graph, state, masked_indices)
    h = x @ state.params["input_proj.W"] + state.params["input_proj.b"]
    attention = []
    for layer in range(state.dims.num_layers):
        layer_attn: list = []
        h = gat_layer_forward(
            h, src, dst, n, state.params, f"encoder.{layer}", state.dims.num_heads,
            final_norm=True, attention_out=layer_attn,
        )
        attention.append(layer_attn)
    return EncodedGraph(
        node_states=h,
        attention=attention,
        edge_src=src,
        edge_dst=dst,
        num_patches=graph.bag.num_patches,
        global_index=graph.global_index,
    )


def decode(enc: EncodedGraph, state: ModelState) -> Tensor:
    """Mirrored GAT stack; the last layer skips layer norm, the global row is
    dropped, and an output projection returns to raw feature space (N, D)."""
    h = enc.node_states
    n = enc.num_patches + 1
    last = state.dims.num_layers - 1
    for layer in range(state.dims.num_layers):
        h = gat_layer_forward(
            h, enc.edge_src, enc.edge_dst, n, state.params, f"decoder.{layer}",
            state.dims.num_heads, final_norm=(layer < last),
        )
    patches = T.gather_rows(h, np.arange(enc.num_patches))
    return patches @ state.params["decoder.out.W"] + state.params["decoder.out.b"]


def classify(enc: EncodedGraph, state: ModelState) -> Tensor:
    """Two-layer elu MLP on the global node's final state; raw logits (C,)."""
    if enc.global_index is None:
        raise ConfigError("classify requires an encoding with a global node")
    row = T.gather_rows(enc.node_states, np.array([enc.global_index]))
    hidden = T.elu(row @ state.params["classifier.W1"] + state.params["classifier.b1"])
    logits = hidden @ state.params["classifier.W2"] + state.params["classifier.b2"]
    return logits.reshape((state.dims.num_classes,))


def global_attention(enc: EncodedGraph, layer: int = -1) -> np.ndarray:
    """Attention over the global node's incoming segment at the given encoder
    layer, averaged over heads. Sums to 1 (one softmax segment, incl. the
    self-loop)."""
    sel = enc.edge_dst == enc.global_index
    heads = enc.attention[layer]
    return np.mean([a[sel] for a in heads], axis=0)


# -- attention-pooling MIL baseline -----------------------------------------


@dataclass
class AbmilDims:
    feature_dim: int
    embed_dim: int = 64
    attn_dim: int = 32
    num_classes: int = 2


def abmil_init(dims: AbmilDims, seed: int) -> ModelState:
    rng = substream(seed, "abmil-init")
    params: dict[str, Tensor] = {}
    params["embed.W"] = Tensor(
        _xavier(rng, dims.feature_dim, dims.embed_dim, (dims.feature_dim, dims.embed_dim)),
        requires_grad=True,
    )
    params["embed.b"] = Tensor(np.zeros(dims.embed_dim), requires_grad=True)
    params["attn.U"] = Tensor(
        _xavier(rng, dims.embed_dim, dims.attn_dim, (dims.embed_dim, dims.attn_dim)), requires_grad=True
    )
    params["attn.w"] = Tensor(_xavier(rng, dims.attn_dim, 1, (dims.attn_dim,)), requires_grad=True)
    params["cls.W"] = Tensor(
        _xavier(rng, dims.embed_dim, dims.num_classes, (dims.embed_dim, dims.num_classes)),
        requires_grad=True,
    )
    params["cls.b"] = Tensor(np.zeros(dims.num_classes), requires_grad=True)
    model_dims = ModelDims(feature_dim=dims.feature_dim, hidden_dim=dims.embed_dim, num_heads=1,
                           num_layers=0, num_classes=dims.num_classes)
    state = ModelState(dims=model_dims, params=params)
    return state


def abmil_forward(features: np.ndarray, state: ModelState) -> tuple[Tensor, Tensor]:
    """Instance embedding, gated-tanh attention over instances, weighted-sum
    bag vector, linear classifier. Returns (logits (C,), attention (N,))."""
    x = Tensor(np.asarray(features, dtype=np.float64))
    n = x.shape[0]
    h = T.elu(x @ state.params["embed.W"] + state.params["embed.b"])
    scores = T.tanh(h @ state.params["attn.U"]) @ state.params["attn.w"]  # (n,)
    attn = T.segment_softmax(scores, np.zeros(n, dtype=np.int64), 1)
    bag = (h * attn.reshape((-1, 1))).sum(axis=0)  # (embed_dim,)
    logits = bag @ state.params["cls.W"] + state.params["cls.b"]
    return logits, attn


def abmil_embed(features: np.ndarray, state: ModelState) -> np.ndarray:
    """Instance embeddings from the baseline (pre-attention)."""
    x = Tensor(np.asarray(features, dtype=np.float64))
    h = T.elu(x @ state.params["embed.W"] + state.params["embed.b"])
    return np.array(h.data)


# -- checkpoints -------------------------------------------------------------
#
# Little-endian layout:
#   magic "GMCK" | u32 version=1 | u32 header_len | header JSON (model dims)
#   u32 n_tensors | per tensor: u16 name_len | name utf8 | u8 ndim |
#   ndim * u32 dims | float64 data

CKPT_MAGIC = b"GMCK"
CKPT_VERSION = 1


def save_checkpoint(state: ModelState, path) -> None:
    header = json.dumps(asdict(state.dims), sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + struct.pack("<I", len(header)) + header
    names = sorted(state.params)
    blob += struct.pack("<I", len(names))
    for name in names:
        arr = state.params[name].data
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise ConfigError(f"bad checkpoint magic {raw[:4]!r}")
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    offset = 12
    dims = ModelDims(**json.loads(raw[offset : offset + header_len].decode("utf-8")))
    offset += header_len
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        n_vals = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n_vals, offset=offset).reshape(shape)
        offset += 8 * n_vals
        params[name] = Tensor(np.array(arr), requires_grad=True)
    return ModelState(dims=dims, params=params)
