"""The full video classifier.

Pipeline: a two-block convolutional stem (depthwise 3x3x3, pointwise
bottleneck, 5x5x5 spatial downsampling, pointwise expansion, strided
residual), a patch-embedding convolution that reinterprets the feature
volume as a (frames x spatial-tokens x dim) grid, a position embedding
computed by a zero-initialized depthwise convolution over the grid, a stack
of transformer blocks whose attention factorizes across the spatial and
temporal axes (two sequential stages, or one fused stage with half the
heads per axis), and a mean-pooled linear classification head.
"""

from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import nn
from .tensor import Tensor, ShapeError, concat

VARIANTS = ("factorized_self", "factorized_dot_product")
STAGES = ("spatial", "temporal")


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    stem_channels: tuple = (64, 128)
    cnn_blocks: int = 2
    patch: tuple = (1, 4, 4)
    embed_dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    variant: str = "factorized_self"
    num_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "stem_channels",
                           tuple(int(c) for c in self.stem_channels))
        object.__setattr__(self, "patch",
                           tuple(int(p) for p in self.patch))
        if self.cnn_blocks not in (1, 2):
            raise ValueError(f"cnn_blocks must be 1 or 2, got "
                             f"{self.cnn_blocks}")
        if len(self.stem_channels) < self.cnn_blocks:
            raise ValueError(f"stem_channels {self.stem_channels} shorter "
                             f"than cnn_blocks {self.cnn_blocks}")
        if self.cnn_blocks == 2 and self.stem_channels[1] != 128:
            raise ValueError(f"a two-block stem must end at 128 channels, "
                             f"got {self.stem_channels}")
        for c in self.stem_channels:
            if c < 4 or c % 4:
                raise ValueError(f"stem channel counts must be multiples of "
                                 f"4 (bottleneck is C/4), got {c}")
        if len(self.patch) != 3 or any(p < 1 for p in self.patch):
            raise ValueError(f"patch {self.patch} must be 3 positive ints")
        if self.embed_dim < 1 or self.heads < 1 \
                or self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} must be divisible "
                             f"by heads {self.heads}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant {self.variant!r} must be one of "
                             f"{VARIANTS}")
        if self.variant == "factorized_dot_product" and self.heads % 2:
            raise ValueError(f"the dot-product variant splits heads across "
                             f"two axes and needs an even count, got "
                             f"{self.heads}")
        if self.depth < 1 or self.num_classes < 1 or self.mlp_ratio < 1 \
                or self.in_channels < 1:
            raise ValueError("depth, num_classes, mlp_ratio and in_channels "
                             "must all be positive")

    @property
    def stem_out_channels(self):
        return self.stem_channels[self.cnn_blocks - 1]

    @property
    def spatial_downsampling(self):
        return 2 ** self.cnn_blocks

    def token_extents(self, t, h, w):
        """(frames, h_tokens, w_tokens) for a (t, h, w) input clip."""
        ds = self.spatial_downsampling
        if h % ds or w % ds:
            raise ShapeError(f"input extents {(h, w)} must be divisible by "
                             f"the stem downsampling factor {ds}")
        hs, ws = h // ds, w // ds
        pt, ph, pw = self.patch
        if t % pt or hs % ph or ws % pw:
            raise ShapeError(
                f"stem output extents {(t, hs, ws)} must be divisible by "
                f"the patch {self.patch}")
        ext = (t // pt, hs // ph, ws // pw)
        if any(e < 1 for e in ext):
            raise ShapeError(f"token grid extents {ext} must be positive "
                             f"for input {(t, h, w)}")
        return ext

    def to_flat(self):
        """Flat string map for checkpoint headers."""
        out = {}
        for f in dc_fields(self):
            v = getattr(self, f.name)
            out[f.name] = (",".join(str(e) for e in v)
                           if isinstance(v, tuple) else str(v))
        return out

    @classmethod
    def from_flat(cls, flat):
        kwargs = {}
        for f in dc_fields(cls):
            if f.name not in flat:
                continue
            raw = flat[f.name]
            if f.name in ("stem_channels", "patch"):
                kwargs[f.name] = tuple(int(e) for e in raw.split(","))
            elif f.name == "variant":
                kwargs[f.name] = raw
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# token grid and attention recording

@dataclass
class TokenGrid:
    """Embedded clip: tokens (B, T, N, D) with N = h_tokens * w_tokens."""
    tokens: Tensor
    h_tokens: int
    w_tokens: int

    def __post_init__(self):
        if self.tokens.ndim != 4:
            raise ShapeError(f"token grid must be rank 4 (batch, frames, "
                             f"tokens, dim), got {self.tokens.shape}")
        n = self.tokens.shape[2]
        if n != self.h_tokens * self.w_tokens:
            raise ShapeError(f"{n} spatial tokens do not factor as "
                             f"{self.h_tokens}x{self.w_tokens}")

    @property
    def frames(self):
        return self.tokens.shape[1]

    @property
    def spatial(self):
        return self.tokens.shape[2]

    @property
    def dim(self):
        return self.tokens.shape[3]


@dataclass
class AttentionRecord:
    """One head's weight matrix from one attention call.

    ``slice_index`` names the axis position the call was restricted to:
    the frame index for spatial-stage records, the spatial-token index for
    temporal-stage records.
    """
    layer: int
    stage: str
    head: int
    slice_index: int
    weights: np.ndarray  # (queries, keys), rows sum to 1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage {self.stage!r} must be one of {STAGES}")


class AttentionSink:
    """Collects per-head attention weights emitted during a forward pass."""

    def __init__(self):
        self.records = []

    def add(self, layer, stage, weights, n_slices, head_offset=0):
        """Split a (groups, heads, Sq, Sk) weight array into records.

        Groups iterate batch-major: group g covers batch g // n_slices,
        slice g % n_slices.
        """
        g_total, heads = weights.shape[:2]
        for g in range(g_total):
            for h in range(heads):
                self.records.append(AttentionRecord(
                    layer, stage, head_offset + h, g % n_slices,
                    weights[g, h]))

    def select(self, layer=None, stage=None, head=None):
        out = self.records
        if layer is not None:
            out = [r for r in out if r.layer == layer]
        if stage is not None:
            out = [r for r in out if r.stage == stage]
        if head is not None:
            out = [r for r in out if r.head == head]
        return out


# ---------------------------------------------------------------------------
# convolutional stem

class CnnBlock(nn.Module):
    """Depthwise 3x3x3 -> bottleneck 1x1x1 -> 5x5x5 (spatial stride 2) ->
    expansion 1x1x1, plus a strided 1x1x1 residual projection.

    Normalization and activation follow the depthwise and 5x5x5 stages;
    the pointwise projections are bare.
    """

    def __init__(self, c_in, c_out, rng):
        super().__init__()
        if c_out % 4:
            raise ValueError(f"block output channels {c_out} must be a "
                             f"multiple of 4")
        mid = c_out // 4
        self.dw = nn.Conv3d(nn.Conv3dSpec(c_in, c_in, (3, 3, 3),
                                          padding=(1, 1, 1), groups=c_in),
                            rng)
        self.bn1 = nn.BatchNorm3d(c_in)
        self.reduce = nn.Conv3d(nn.Conv3dSpec(c_in, mid, (1, 1, 1)), rng)
        self.conv5 = nn.Conv3d(nn.Conv3dSpec(mid, mid, (5, 5, 5),
                                             stride=(1, 2, 2),
                                             padding=(2, 2, 2)), rng)
        self.bn2 = nn.BatchNorm3d(mid)
        self.expand = nn.Conv3d(nn.Conv3dSpec(mid, c_out, (1, 1, 1)), rng)
        self.project = nn.Conv3d(nn.Conv3dSpec(c_in, c_out, (1, 1, 1),
                                               stride=(1, 2, 2)), rng)

    def __call__(self, x):
        h = nn.gelu(self.bn1(self.dw(x)))
        h = self.reduce(h)
        h = nn.gelu(self.bn2(self.conv5(h)))
        h = self.expand(h)
        return h + self.project(x)


class CnnModule(nn.Module):
    """The stem: one or two halving blocks over the channel plan."""

    def __init__(self, config, rng):
        super().__init__()
        plan = ((config.in_channels,)
                + config.stem_channels[:config.cnn_blocks])
        self.blocks = [CnnBlock(plan[i], plan[i + 1], rng)
                       for i in range(config.cnn_blocks)]

    def __call__(self, x):
        for block in self.blocks:
            x = block(x)
        return x


class PatchEmbed(nn.Module):
    """Non-overlapping patch convolution, reshaped to a token grid."""

    def __init__(self, c_in, embed_dim, patch, rng):
        super().__init__()
        self.patch = patch
        self.conv = nn.Conv3d(nn.Conv3dSpec(c_in, embed_dim, patch,
                                            stride=patch), rng)

    def __call__(self, x):
        _, _, t, h, w = x.shape
        pt, ph, pw = self.patch
        if t % pt or h % ph or w % pw:
            raise ShapeError(f"feature extents {(t, h, w)} are not "
                             f"divisible by the patch {self.patch}")
        y = self.conv(x)  # (B, D, T', h', w')
        b, d, tt, hh, ww = y.shape
        tokens = y.reshape(b, d, tt, hh * ww).permute(0, 2, 3, 1)
        return TokenGrid(tokens, hh, ww)


class DynamicPositionEmbed(nn.Module):
    """Additive position signal: a zero-initialized depthwise 3x3x3
    convolution over the token grid, so training starts at identity."""

    def __init__(self, embed_dim):
        super().__init__()
        self.spec = nn.Conv3dSpec(embed_dim, embed_dim, (3, 3, 3),
                                  padding=(1, 1, 1), groups=embed_dim)
        self.weight = Tensor(np.zeros(self.spec.weight_shape, np.float32),
                             requires_grad=True)

    def __call__(self, grid):
        b, t, n, d = grid.tokens.shape
        vol = grid.tokens.permute(0, 3, 1, 2).reshape(
            b, d, t, grid.h_tokens, grid.w_tokens)
        shift = nn.depthwise_conv3d(vol, self.weight, self.spec)
        shift_tokens = shift.reshape(b, d, t, n).permute(0, 2, 3, 1)
        return TokenGrid(grid.tokens + shift_tokens, grid.h_tokens,
                         grid.w_tokens)


# ---------------------------------------------------------------------------
# transformer blocks

class SelfFactorizedBlock(nn.Module):
    """Sequential factorized attention: per-frame spatial self-attention,
    then per-position temporal self-attention, then the MLP — each stage
    pre-normalized with a residual connection.

    A singleton axis (one token attending to itself) carries no pairwise
    structure, so its stage is skipped entirely.
    """

    def __init__(self, dim, heads, mlp_ratio, rng):
        super().__init__()
        spec = nn.AttentionSpec(dim, heads)
        self.norm_spatial = nn.LayerNorm(dim)
        self.attn_spatial = nn.MultiHeadAttention(spec, rng)
        self.norm_temporal = nn.LayerNorm(dim)
        self.attn_temporal = nn.MultiHeadAttention(spec, rng)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = nn.FeedForward(dim, mlp_ratio * dim, rng)

    def spatial_stage(self, tokens, layer=0, sink=None):
        """(B, T, N, D) -> same, attention within each frame."""
        b, t, n, d = tokens.shape
        if n == 1:
            return tokens
        flat = tokens.reshape(b * t, n, d)
        emit = (None if sink is None else
                lambda w: sink.add(layer, "spatial", w, n_slices=t))
        out = flat + self.attn_spatial(self.norm_spatial(flat), sink=emit)
        return out.reshape(b, t, n, d)

    def temporal_stage(self, tokens, layer=0, sink=None):
        """(B, T, N, D) -> same, attention within each spatial position."""
        b, t, n, d = tokens.shape
        if t == 1:
            return tokens
        flat = tokens.permute(0, 2, 1, 3).reshape(b * n, t, d)
        emit = (None if sink is None else
                lambda w: sink.add(layer, "temporal", w, n_slices=n))
        out = flat + self.attn_temporal(self.norm_temporal(flat), sink=emit)
        return out.reshape(b, n, t, d).permute(0, 2, 1, 3)

    def __call__(self, grid, layer=0, sink=None):
        x = self.spatial_stage(grid.tokens, layer, sink)
        x = self.temporal_stage(x, layer, sink)
        x = x + self.mlp(self.norm_mlp(x))
        return TokenGrid(x, grid.h_tokens, grid.w_tokens)


class DotProductFactorizedBlock(nn.Module):
    """Fused factorized attention: one projection set, half the heads
    attending within frames and half within spatial positions, both reading
    the same normalized input; the concatenated head outputs share one
    output projection. The MLP stage follows as usual.

    When both axes are singletons the attention stage is skipped, matching
    the sequential variant's behaviour there.
    """

    def __init__(self, dim, heads, mlp_ratio, rng):
        super().__init__()
        if heads % 2:
            raise ValueError(f"fused factorized attention needs an even "
                             f"head count, got {heads}")
        self.heads = heads
        self.norm_attn = nn.LayerNorm(dim)
        self.wq = Tensor(nn.trunc_normal(rng, (dim, dim)),
                         requires_grad=True)
        self.bq = Tensor(np.zeros(dim, np.float32), requires_grad=True)
        self.wk = Tensor(nn.trunc_normal(rng, (dim, dim)),
                         requires_grad=True)
        self.bk = Tensor(np.zeros(dim, np.float32), requires_grad=True)
        self.wv = Tensor(nn.trunc_normal(rng, (dim, dim)),
                         requires_grad=True)
        self.bv = Tensor(np.zeros(dim, np.float32), requires_grad=True)
        self.wo = Tensor(nn.trunc_normal(rng, (dim, dim)),
                         requires_grad=True)
        self.bo = Tensor(np.zeros(dim, np.float32), requires_grad=True)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = nn.FeedForward(dim, mlp_ratio * dim, rng)

    def _axis_attention(self, q, k, v, groups, length, half_heads, layer,
                        stage, n_slices, head_offset, sink):
        d2 = q.shape[-1]
        qh = nn.split_heads(q.reshape(groups, length, d2), half_heads)
        kh = nn.split_heads(k.reshape(groups, length, d2), half_heads)
        vh = nn.split_heads(v.reshape(groups, length, d2), half_heads)
        emit = (None if sink is None else
                lambda w: sink.add(layer, stage, w, n_slices=n_slices,
                                   head_offset=head_offset))
        return nn.merge_heads(nn.scaled_attention(qh, kh, vh, emit))

    def attention_stage(self, tokens, layer=0, sink=None):
        b, t, n, d = tokens.shape
        if t == 1 and n == 1:
            return tokens
        y = self.norm_attn(tokens)
        q = nn.linear(y, self.wq, self.bq)
        k = nn.linear(y, self.wk, self.bk)
        v = nn.linear(y, self.wv, self.bv)
        d2 = d // 2
        h2 = self.heads // 2

        # spatial half: first d/2 dims, grouped per frame
        out_s = self._axis_attention(
            q.narrow(3, 0, d2), k.narrow(3, 0, d2), v.narrow(3, 0, d2),
            b * t, n, h2, layer, "spatial", t, 0, sink)
        out_s = out_s.reshape(b, t, n, d2)

        # temporal half: last d/2 dims, grouped per spatial position
        qt = q.narrow(3, d2, d2).permute(0, 2, 1, 3)
        kt = k.narrow(3, d2, d2).permute(0, 2, 1, 3)
        vt = v.narrow(3, d2, d2).permute(0, 2, 1, 3)
        out_t = self._axis_attention(qt, kt, vt, b * n, t, h2, layer,
                                     "temporal", n, h2, sink)
        out_t = out_t.reshape(b, n, t, d2).permute(0, 2, 1, 3)

        fused = nn.linear(concat([out_s, out_t], axis=3), self.wo, self.bo)
        return tokens + fused

    def __call__(self, grid, layer=0, sink=None):
        x = self.attention_stage(grid.tokens, layer, sink)
        x = x + self.mlp(self.norm_mlp(x))
        return TokenGrid(x, grid.h_tokens, grid.w_tokens)


# ---------------------------------------------------------------------------
# the classifier

class VideoClassifier(nn.Module):
    """Stem -> patch embedding -> position embedding -> transformer stack
    -> layer norm -> token mean -> linear head."""

    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        self.stem = CnnModule(config, rng)
        self.embed = PatchEmbed(config.stem_out_channels, config.embed_dim,
                                config.patch, rng)
        self.position = DynamicPositionEmbed(config.embed_dim)
        block_cls = (SelfFactorizedBlock
                     if config.variant == "factorized_self"
                     else DotProductFactorizedBlock)
        self.blocks = [block_cls(config.embed_dim, config.heads,
                                 config.mlp_ratio, rng)
                       for _ in range(config.depth)]
        self.norm = nn.LayerNorm(config.embed_dim)
        self.head = nn.Linear(config.embed_dim, config.num_classes, rng)

    def forward_tokens(self, x, sink=None):
        """Everything up to the pooled embedding; returns (B, D) features."""
        if x.ndim != 5:
            raise ShapeError(f"clip batch must be rank 5, got {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"clip has {x.shape[1]} channels, model "
                             f"expects {self.config.in_channels}")
        self.config.token_extents(*x.shape[2:])
        grid = self.embed(self.stem(x))
        grid = self.position(grid)
        for i, block in enumerate(self.blocks):
            grid = block(grid, layer=i, sink=sink)
        tokens = self.norm(grid.tokens)
        b, t, n, d = tokens.shape
        return tokens.reshape(b, t * n, d).mean(axis=1)

    def __call__(self, x, sink=None):
        return self.head(self.forward_tokens(x, sink))


def build_model(config, seed=0):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    return VideoClassifier(config, rng)


# ---------------------------------------------------------------------------
# attention export

@dataclass
class Heatmap:
    frame: int
    values: np.ndarray  # (h_tokens, w_tokens) in [0, 1]
    degenerate: bool    # True when the raw map had zero range


def export_attention_maps(sink, h_tokens, w_tokens, layer=0, head=0):
    """Per-frame maps of attention received by each spatial token.

    For every frame slice of the chosen layer/head, averages the
    spatial-stage weight column over queries, then min-max normalizes to
    [0, 1]. A constant map (no range) comes back as zeros with
    ``degenerate`` set.
    """
    if not sink.records:
        raise ValueError("attention sink is empty; run a forward pass with "
                         "the sink attached first")
    layers = {r.layer for r in sink.records}
    heads = {r.head for r in sink.records if r.stage == "spatial"}
    records = sink.select(layer=layer, stage="spatial", head=head)
    if not records:
        raise ValueError(
            f"no spatial attention recorded for layer {layer} head {head}; "
            f"have layers {sorted(layers)} heads {sorted(heads)}")
    by_frame = {}
    for r in records:
        by_frame.setdefault(r.slice_index, []).append(r.weights)
    maps = []
    for frame in sorted(by_frame):
        received = np.mean([w.mean(axis=0) for w in by_frame[frame]],
                           axis=0)
        lo, hi = float(received.min()), float(received.max())
        degenerate = (hi - lo) <= 1e-12
        if degenerate:
            values = np.zeros((h_tokens, w_tokens), np.float32)
        else:
            values = ((received - lo) / (hi - lo)).astype(np.float32)
            values = values.reshape(h_tokens, w_tokens)
        maps.append(Heatmap(frame, values, degenerate))
    return maps
