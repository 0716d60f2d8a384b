"""Analytic compute accounting.

Counts multiply-accumulate operations (MACs) for the forward pass.  Only
convolutions and matrix multiplies are counted; normalization, activations,
softmax, residual adds, and pooling are excluded.  One attention score
(q.k) and one weighted-sum product each count as one MAC per dimension
element, so an attention sublayer over sequence length S with model width
D costs 4*S*D^2 (q, k, v, output projections) + 2*S^2*D (scores plus
weighted sum) per group.

The ``joint_total`` column answers "what would attention cost if every
axis-restricted attention sublayer instead attended over all frames x
positions jointly", with every other stage unchanged.  Splitting attention
into per-frame and per-position passes is strictly cheaper whenever both
the frame count and the position count are at least 2.
"""

import io
from dataclasses import dataclass

STAGES = ("stem", "patch_embed", "spatial_attention", "temporal_attention",
          "mlp", "head")

CSV_HEADER = "stage,macs"


@dataclass(frozen=True)
class FlopReport:
    variant: str
    batch: int
    frames_in: int
    height_in: int
    width_in: int
    frames: int        # token-grid frames
    positions: int     # token-grid positions per frame
    stages: dict       # stage name -> MACs, keys exactly STAGES
    joint_total: int

    @property
    def factorized_total(self):
        return sum(self.stages.values())

    def to_text(self):
        out = io.StringIO()
        out.write("compute estimate (forward MACs; matmul and conv only; "
                  "norms, activations, softmax excluded)\n")
        out.write(f"variant={self.variant} batch={self.batch} "
                  f"input={self.frames_in}x{self.height_in}"
                  f"x{self.width_in} tokens={self.frames}x{self.positions}\n")
        for name in STAGES:
            out.write(f"  {name:<20} {self.stages[name]:>16,}\n")
        out.write(f"  {'total':<20} {self.factorized_total:>16,}\n")
        out.write(f"  {'joint attention total':<20} "
                  f"{self.joint_total:>16,}\n")
        return out.getvalue()

    def to_csv(self):
        lines = [CSV_HEADER]
        for name in STAGES:
            lines.append(f"{name},{self.stages[name]}")
        lines.append(f"factorized_total,{self.factorized_total}")
        lines.append(f"joint_total,{self.joint_total}")
        return "\n".join(lines) + "\n"


def _stem_macs(config, frames, height, width):
    """MACs for the convolutional stem; returns (macs, out_h, out_w)."""
    total = 0
    h, w = height, width
    plan = (config.in_channels,) + config.stem_channels[:config.cnn_blocks]
    for c_in, c_out in zip(plan, plan[1:]):
        mid = c_out // 4
        ho, wo = h // 2, w // 2
        total += frames * h * w * c_in * 27            # depthwise 3x3x3
        total += frames * h * w * mid * c_in           # 1x1x1 reduce
        total += frames * ho * wo * mid * (mid * 125)  # 5x5x5, stride 2
        total += frames * ho * wo * c_out * mid        # 1x1x1 expand
        total += frames * ho * wo * c_out * c_in       # residual projection
        h, w = ho, wo
    return total, h, w


def count_flops(config, frames, height, width, batch=1):
    """Forward-pass MACs for one batch at the given input geometry."""
    if batch < 1:
        raise ValueError(f"batch must be at least 1, got {batch}")
    t, ht, wt = config.token_extents(frames, height, width)
    n = ht * wt
    d = config.embed_dim

    stem, h_s, w_s = _stem_macs(config, frames, height, width)
    c_stem = config.stem_out_channels

    patch = t * n * d * (c_stem * config.patch[0] * config.patch[1]
                         * config.patch[2])
    patch += d * t * n * 27  # token-grid depthwise position convolution

    if config.variant == "factorized_self":
        spatial = config.depth * t * (4 * n * d * d + 2 * n * n * d)
        temporal = config.depth * n * (4 * t * d * d + 2 * t * t * d)
        joint_sublayers = 2
    else:  # factorized_dot_product: shared projections, split heads
        spatial = config.depth * (2 * t * n * d * d + t * n * n * d)
        temporal = config.depth * (2 * t * n * d * d + n * t * t * d)
        joint_sublayers = 1

    mlp = config.depth * t * n * 2 * config.mlp_ratio * d * d
    head = d * config.num_classes

    stages = {
        "stem": batch * stem,
        "patch_embed": batch * patch,
        "spatial_attention": batch * spatial,
        "temporal_attention": batch * temporal,
        "mlp": batch * mlp,
        "head": batch * head,
    }

    s = t * n
    joint_attention = (config.depth * joint_sublayers
                       * (4 * s * d * d + 2 * s * s * d))
    joint_total = (stages["stem"] + stages["patch_embed"]
                   + batch * joint_attention + stages["mlp"]
                   + stages["head"])

    return FlopReport(variant=config.variant, batch=batch, frames_in=frames,
                      height_in=height, width_in=width, frames=t,
                      positions=n, stages=stages, joint_total=joint_total)
