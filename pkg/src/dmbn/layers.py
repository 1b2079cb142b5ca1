"""The network architecture: attention scoring, multi-stage aggregation,
encoder stacks, bilinear edge decoders, and the classification head.

All functions accept features shaped (..., N, F) and adjacency shaped
(..., N, N); leading axes batch independent subjects through one recorded
graph. The aggregation weight for an edge combines the raw structural
weight, a learned attention weight, and a binary thresholded weight,
mixed by two learnable scalars.

Per-batch constants (neighborhood masks, threshold indicators, initial
features) are precomputed once in a GraphContext; the hot path uses fused
operations with hand-written gradients to keep epoch cost down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


ACTIVATIONS = {
    "elu": ad.elu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "identity": lambda t: t,
}


@dataclass
class MgckHead:
    """One aggregation head: shared linear transform, attention vector,
    and the two stage-mixing scalars."""

    w: Tensor
    a: Tensor
    alpha: Tensor
    beta: Tensor


@dataclass
class MgckLayer:
    heads: list[MgckHead]
    post_fc: Tensor
    residual: Tensor | None  # None means identity (input dim == output dim)


@dataclass
class Decoder:
    theta: Tensor


@dataclass
class MlpHead:
    hidden: list[Tensor]
    final: Tensor  # (n_classes, F_cls)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters and ablation switches."""

    pos_layer_dims: tuple[int, ...] = (128, 128, 128, 128, 128)
    neg_layer_dims: tuple[int, ...] = (128, 128, 128, 128)
    heads: int = 4
    mlp_dims: tuple[int, ...] = (64,)
    activation: str = "elu"
    attention_slope: float = 0.2
    gamma: float = 0.0
    include_self: bool = True
    init_features: str = "adjacency"  # or "one-hot"
    no_attention: bool = False
    no_threshold: bool = False

    def validate(self) -> None:
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        for dims in (self.pos_layer_dims, self.neg_layer_dims):
            if not dims:
                raise ValueError("encoders need at least one layer")
            for d in dims:
                if d % self.heads != 0:
                    raise ValueError(
                        f"layer dim {d} is not divisible by {self.heads} heads"
                    )
        if not self.mlp_dims:
            raise ValueError("classifier needs at least one feature dim")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.init_features not in ("adjacency", "one-hot"):
            raise ValueError(f"unknown init_features {self.init_features!r}")

    def to_dict(self) -> dict:
        return {
            "pos_layer_dims": list(self.pos_layer_dims),
            "neg_layer_dims": list(self.neg_layer_dims),
            "heads": self.heads,
            "mlp_dims": list(self.mlp_dims),
            "activation": self.activation,
            "attention_slope": self.attention_slope,
            "gamma": self.gamma,
            "include_self": self.include_self,
            "init_features": self.init_features,
            "no_attention": self.no_attention,
            "no_threshold": self.no_threshold,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        cfg = ModelConfig(
            pos_layer_dims=tuple(d["pos_layer_dims"]),
            neg_layer_dims=tuple(d["neg_layer_dims"]),
            heads=int(d["heads"]),
            mlp_dims=tuple(d["mlp_dims"]),
            activation=d["activation"],
            attention_slope=float(d["attention_slope"]),
            gamma=float(d["gamma"]),
            include_self=bool(d["include_self"]),
            init_features=d["init_features"],
            no_attention=bool(d["no_attention"]),
            no_threshold=bool(d["no_threshold"]),
        )
        cfg.validate()
        return cfg


def neighbor_mask(weights: np.ndarray, include_self: bool) -> np.ndarray:
    """Boolean aggregation mask: nonzero edges, plus the diagonal when the
    node's own features join its neighborhood."""
    mask = weights != 0.0
    n = weights.shape[-1]
    eye = np.eye(n, dtype=bool)
    if include_self:
        mask = mask | eye
    else:
        mask = mask & ~eye
    return mask


def threshold_indicator(weights: np.ndarray, gamma: float) -> np.ndarray:
    """Binary aggregation stage: 1 where the edge weight exceeds gamma."""
    return (weights > gamma).astype(np.float64)


def initial_features(weights: np.ndarray, mode: str) -> Tensor:
    """Input node features: each node's connectivity profile (its adjacency
    row) by default, or a one-hot identity."""
    if mode == "adjacency":
        return Tensor(np.asarray(weights, dtype=np.float64))
    if mode == "one-hot":
        n = weights.shape[-1]
        eye = np.eye(n)
        if weights.ndim == 3:
            eye = np.broadcast_to(eye, weights.shape).copy()
        return Tensor(eye)
    raise ValueError(f"unknown init_features {mode!r}")


@dataclass
class GraphContext:
    """Constants derived from one batch of structural graphs, shared by
    every layer and epoch that touches the batch."""

    weights: np.ndarray  # (..., N, N)
    mask: np.ndarray  # bool
    mask_f: np.ndarray  # mask as float
    edge_gate: np.ndarray  # mask * weights
    thresh_gate: np.ndarray  # mask * indicator(weights > gamma), or zeros
    uniform_att: Tensor | None  # row-normalized mask, for the attention ablation
    h0: Tensor | None  # initial node features

    @staticmethod
    def build(weights: np.ndarray, cfg: ModelConfig) -> "GraphContext":
        weights = np.asarray(weights, dtype=np.float64)
        mask = neighbor_mask(weights, cfg.include_self)
        mask_f = mask.astype(np.float64)
        delta = (
            np.zeros_like(weights)
            if cfg.no_threshold
            else threshold_indicator(weights, cfg.gamma) * mask_f
        )
        uniform = None
        if cfg.no_attention:
            counts = mask_f.sum(axis=-1, keepdims=True)
            uniform = Tensor(mask_f / np.where(counts == 0, 1.0, counts))
        return GraphContext(
            weights=weights,
            mask=mask,
            mask_f=mask_f,
            edge_gate=mask_f * weights,
            thresh_gate=delta,
            uniform_att=uniform,
            h0=initial_features(weights, cfg.init_features),
        )


def uniform_attention(mask: np.ndarray) -> Tensor:
    """Attention-free fallback: equal weight over each neighborhood."""
    counts = mask.sum(axis=-1, keepdims=True)
    return Tensor(mask / np.where(counts == 0, 1, counts))


def _attention_softmax(s_src: Tensor, s_dst: Tensor, mask: np.ndarray,
                       slope: float) -> Tensor:
    """Fused attention kernel: pair logits through a leaky rectifier, then
    softmax restricted to the neighborhood mask.

    Pair (i, j) scores s_src_i + s_dst_j; rows with an empty mask come
    back all-zero.
    """
    e = s_src.data + np.swapaxes(s_dst.data, -1, -2)
    factor = np.where(e > 0, 1.0, slope)
    z = e * factor
    row_max = np.max(np.where(mask, z, -np.inf), axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    expz = np.exp(np.where(mask, z - row_max, -np.inf))
    denom = expz.sum(axis=-1, keepdims=True)
    y = expz / np.where(denom == 0.0, 1.0, denom)

    def rule(g):
        dz = y * (g - (g * y).sum(axis=-1, keepdims=True))
        de = dz * factor
        return (
            de.sum(axis=-1, keepdims=True),
            np.swapaxes(de.sum(axis=-2, keepdims=True), -1, -2),
        )

    return ad.custom_op(y, (s_src, s_dst), rule, "attention_softmax")


def _attention(h: Tensor, head: MgckHead, ctx: GraphContext,
               cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Transformed features and their attention matrix."""
    ht = ad.matmul(h, head.w)
    if cfg.no_attention:
        return ht, ctx.uniform_att
    half = head.a.shape[0] // 2
    a_src = ad.gather_rows(head.a, np.arange(half))
    a_dst = ad.gather_rows(head.a, np.arange(half, 2 * half))
    s_src = ad.matmul(ht, a_src)
    s_dst = ad.matmul(ht, a_dst)
    return ht, _attention_softmax(s_src, s_dst, ctx.mask, cfg.attention_slope)


def _edge_weights(x_att: Tensor, alpha: Tensor, beta: Tensor,
                  ctx: GraphContext) -> Tensor:
    """Fused multi-stage edge weights on the neighborhood mask:
    mask * (x + alpha) * (att + beta * indicator)."""
    t_raw = ctx.edge_gate + float(alpha.data) * ctx.mask_f
    t_att = x_att.data + float(beta.data) * ctx.thresh_gate
    w = t_raw * t_att

    def rule(g):
        return (
            g * t_raw,
            np.asarray((g * t_att * ctx.mask_f).sum()),
            np.asarray((g * t_raw * ctx.thresh_gate).sum()),
        )

    return ad.custom_op(w, (x_att, alpha, beta), rule, "mgck_edge_weights")


def attention_scores(h: Tensor, head: MgckHead, mask: np.ndarray,
                     slope: float = 0.2) -> Tensor:
    """Normalized attention over each node's neighborhood.

    Transforms the features by the head's shared linear map, scores each
    ordered pair with the attention vector through a leaky rectifier, and
    softmaxes over the masked neighborhood. Rows sum to 1 wherever the
    mask is nonempty; scores are generally asymmetric.
    """
    ht = ad.matmul(h, head.w)
    half = head.a.shape[0] // 2
    a_src = ad.gather_rows(head.a, np.arange(half))
    a_dst = ad.gather_rows(head.a, np.arange(half, 2 * half))
    return _attention_softmax(
        ad.matmul(ht, a_src), ad.matmul(ht, a_dst), mask, slope
    )


def mgck_aggregate(h: Tensor, weights: np.ndarray, x_att: Tensor,
                   alpha: Tensor, beta: Tensor, gamma: float = 0.0,
                   include_self: bool = True,
                   no_threshold: bool = False) -> Tensor:
    """Multi-stage neighborhood aggregation.

    Each neighbor j of node i contributes h_j scaled by
    (x_ij + alpha) * (att_ij + beta * [x_ij > gamma]); the sum runs over
    the masked neighborhood only.
    """
    weights = np.asarray(weights, dtype=np.float64)
    mask_f = neighbor_mask(weights, include_self).astype(np.float64)
    delta = (
        np.zeros_like(weights)
        if no_threshold
        else threshold_indicator(weights, gamma) * mask_f
    )
    ctx = GraphContext(
        weights=weights, mask=mask_f.astype(bool), mask_f=mask_f,
        edge_gate=mask_f * weights, thresh_gate=delta,
        uniform_att=None, h0=None,
    )
    return ad.matmul(_edge_weights(x_att, alpha, beta, ctx), h)


def mgck_layer_ctx(h: Tensor, ctx: GraphContext, layer: MgckLayer,
                   cfg: ModelConfig) -> Tensor:
    """One convolution block: per-head aggregation, concat, linear mix,
    plus a residual connection."""
    act = ACTIVATIONS[cfg.activation]
    outputs = []
    for head in layer.heads:
        ht, x_att = _attention(h, head, ctx, cfg)
        agg = ad.matmul(_edge_weights(x_att, head.alpha, head.beta, ctx), ht)
        outputs.append(act(agg))
    merged = ad.matmul(ad.concat(outputs, axis=-1), layer.post_fc)
    residual = h if layer.residual is None else ad.matmul(h, layer.residual)
    return ad.add(merged, residual)


def mgck_layer(h: Tensor, weights: np.ndarray, layer: MgckLayer,
               cfg: ModelConfig) -> Tensor:
    return mgck_layer_ctx(h, GraphContext.build(weights, cfg), layer, cfg)


def encode_ctx(ctx: GraphContext, layers: list[MgckLayer], cfg: ModelConfig) -> Tensor:
    h = ctx.h0
    for layer in layers:
        h = mgck_layer_ctx(h, ctx, layer, cfg)
    return h


def encode(weights: np.ndarray, layers: list[MgckLayer], cfg: ModelConfig) -> Tensor:
    """Run the layer stack over the structural graph's initial features."""
    return encode_ctx(GraphContext.build(weights, cfg), layers, cfg)


def decode_edges(h: Tensor, dec: Decoder) -> Tensor:
    """Edge probabilities sigmoid(h_i . Theta . h_j) with Theta symmetric.

    The bilinear form is symmetrized on use, so the output matrix is
    symmetric up to floating-point commutativity. The diagonal is computed
    but carries no meaning.
    """
    sym = ad.mul(ad.add(dec.theta, ad.transpose(dec.theta)), Tensor(0.5))
    return ad.sigmoid(ad.matmul(ad.matmul(h, sym), ad.transpose(h)))


def classify(h_pos: Tensor, h_neg: Tensor, head: MlpHead,
             activation: str = "elu") -> tuple[Tensor, Tensor]:
    """Node-wise MLP over concatenated branch embeddings, mean pool over
    nodes, then the final linear map to class logits.

    Returns (logits, final node features); the node features feed the
    saliency computation.
    """
    act = ACTIVATIONS[activation]
    h = ad.concat([h_pos, h_neg], axis=-1)
    for w in head.hidden:
        h = act(ad.matmul(h, w))
    pooled = ad.reduce_mean(h, axis=-2)  # (..., F_cls)
    if pooled.ndim == 1:
        pooled = ad.reshape(pooled, (1, pooled.shape[0]))
        logits = ad.matmul(pooled, ad.transpose(head.final))
        logits = ad.reshape(logits, (logits.shape[-1],))
    else:
        logits = ad.matmul(pooled, ad.transpose(head.final))
    return logits, h


@dataclass
class ModelOutput:
    logits: Tensor
    xhat_pos: Tensor
    xhat_neg: Tensor
    h_pos: Tensor
    h_neg: Tensor
    node_features: Tensor


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class DmbnModel:
    """Dual encoder-decoder with a shared classification head.

    Both encoders read the structural graph; the positive branch decoder
    reconstructs positive functional connections, the negative branch the
    negative ones, and the classifier consumes both branch embeddings.
    """

    def __init__(self, cfg: ModelConfig, n_nodes: int, n_classes: int,
                 rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.n_nodes = n_nodes
        self.n_classes = n_classes
        in_dim = n_nodes
        self.encoder_pos = self._build_encoder("enc_pos", in_dim, cfg.pos_layer_dims, rng)
        self.encoder_neg = self._build_encoder("enc_neg", in_dim, cfg.neg_layer_dims, rng)
        self.decoder_pos = self._build_decoder("dec_pos", cfg.pos_layer_dims[-1], rng)
        self.decoder_neg = self._build_decoder("dec_neg", cfg.neg_layer_dims[-1], rng)
        self.head = self._build_head(rng)

    def _build_encoder(self, tag: str, in_dim: int, dims: tuple[int, ...],
                       rng: np.random.Generator) -> list[MgckLayer]:
        layers = []
        f_in = in_dim
        for li, f_out in enumerate(dims):
            f_head = f_out // self.cfg.heads
            heads = []
            for hi in range(self.cfg.heads):
                prefix = f"{tag}.l{li}.h{hi}"
                heads.append(
                    MgckHead(
                        w=ad.parameter(_glorot(rng, f_in, f_head), f"{prefix}.w"),
                        a=ad.parameter(np.zeros((2 * f_head, 1)), f"{prefix}.a"),
                        alpha=ad.parameter(1.0, f"{prefix}.alpha"),
                        beta=ad.parameter(1.0, f"{prefix}.beta"),
                    )
                )
            post_fc = ad.parameter(_glorot(rng, f_out, f_out), f"{tag}.l{li}.fc")
            residual = None
            if f_in != f_out:
                residual = ad.parameter(_glorot(rng, f_in, f_out), f"{tag}.l{li}.res")
            layers.append(MgckLayer(heads=heads, post_fc=post_fc, residual=residual))
            f_in = f_out
        return layers

    def _build_decoder(self, tag: str, dim: int, rng: np.random.Generator) -> Decoder:
        theta = _glorot(rng, dim, dim)
        theta = (theta + theta.T) / 2.0
        return Decoder(theta=ad.parameter(theta, f"{tag}.theta"))

    def _build_head(self, rng: np.random.Generator) -> MlpHead:
        dims = self.cfg.mlp_dims
        f_in = self.cfg.pos_layer_dims[-1] + self.cfg.neg_layer_dims[-1]
        hidden = []
        for i, f_out in enumerate(dims):
            hidden.append(ad.parameter(_glorot(rng, f_in, f_out), f"head.fc{i}"))
            f_in = f_out
        final = ad.parameter(_glorot(rng, self.n_classes, f_in), "head.out")
        return MlpHead(hidden=hidden, final=final)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params: list[tuple[str, Tensor]] = []
        for layers in (self.encoder_pos, self.encoder_neg):
            for layer in layers:
                for head in layer.heads:
                    for t in (head.w, head.a, head.alpha, head.beta):
                        params.append((t.name, t))
                params.append((layer.post_fc.name, layer.post_fc))
                if layer.residual is not None:
                    params.append((layer.residual.name, layer.residual))
        params.append((self.decoder_pos.theta.name, self.decoder_pos.theta))
        params.append((self.decoder_neg.theta.name, self.decoder_neg.theta))
        for t in self.head.hidden:
            params.append((t.name, t))
        params.append((self.head.final.name, self.head.final))
        return params

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def build_context(self, weights: np.ndarray) -> GraphContext:
        return GraphContext.build(weights, self.cfg)

    def calibrate(self, reference: np.ndarray, target_rms: float = 0.2) -> None:
        """Rescale freshly initialized transforms so each stage's output has
        a common RMS on a reference batch of structural graphs.

        The aggregation stages are unnormalized sums over neighborhoods, so
        the raw feature scale grows roughly with the mean degree at every
        layer; left alone, a few layers saturate the decoders and freeze
        the reconstruction gradients. Scaling the initial weights against
        the observed statistics keeps every nonlinearity in its active
        range without touching the architecture itself. Call once on a
        fresh model before training; never on trained parameters.
        """

        def rms(arr: np.ndarray) -> float:
            if arr.size == 0:
                return 0.0
            return float(np.sqrt(np.mean(arr * arr)))

        def rescale_to(param: Tensor, current: float, desired: float) -> None:
            if current > 0.0:
                param.data = param.data * (desired / current)

        with ad.no_grad():
            ctx = self.build_context(reference)
            branches = []
            for layers in (self.encoder_pos, self.encoder_neg):
                h = ctx.h0
                for layer in layers:
                    for head in layer.heads:
                        ht, x_att = _attention(h, head, ctx, self.cfg)
                        pre = ad.matmul(
                            _edge_weights(x_att, head.alpha, head.beta, ctx), ht
                        )
                        rescale_to(head.w, rms(pre.data), target_rms)
                    h = mgck_layer_ctx(h, ctx, layer, self.cfg)
                branches.append(h)
            # Decoders and classifier get unit output RMS regardless of the
            # embedding RMS target, so the sigmoid and softmax start in
            # their active ranges.
            for h, dec in zip(branches, (self.decoder_pos, self.decoder_neg)):
                sym = (dec.theta.data + np.swapaxes(dec.theta.data, -1, -2)) / 2.0
                logits = h.data @ sym @ np.swapaxes(h.data, -1, -2)
                off = logits[..., ~np.eye(logits.shape[-1], dtype=bool)]
                rescale_to(dec.theta, rms(off), 1.0)
            h = ad.concat(branches, axis=-1)
            act = ACTIVATIONS[self.cfg.activation]
            for w in self.head.hidden:
                pre = ad.matmul(h, w)
                rescale_to(w, rms(pre.data), 1.0)
                h = act(ad.matmul(h, w))
            pooled = ad.reduce_mean(h, axis=-2)
            logits = pooled.data @ self.head.final.data.T
            rescale_to(self.head.final, rms(logits), 1.0)

    def forward(self, weights: np.ndarray, decode: bool = True,
                ctx: GraphContext | None = None) -> ModelOutput:
        """Full forward pass on structural weights shaped (N, N) or (B, N, N)."""
        if ctx is None:
            ctx = self.build_context(weights)
        h_pos = encode_ctx(ctx, self.encoder_pos, self.cfg)
        h_neg = encode_ctx(ctx, self.encoder_neg, self.cfg)
        if decode:
            xhat_pos = decode_edges(h_pos, self.decoder_pos)
            xhat_neg = decode_edges(h_neg, self.decoder_neg)
        else:
            xhat_pos = xhat_neg = None
        logits, node_features = classify(h_pos, h_neg, self.head, self.cfg.activation)
        return ModelOutput(
            logits=logits,
            xhat_pos=xhat_pos,
            xhat_neg=xhat_neg,
            h_pos=h_pos,
            h_neg=h_neg,
            node_features=node_features,
        )
