"""Block-structured convolutional hierarchies and their scale geometry.

A network is an ordered list of blocks. Each block optionally pools its
input (carrying the between-block pooling), zero-pads it, captures the
padded map as the lower member of the neighboring-scale cost pair, appends
noise channels, then runs a stack of valid-mode convolutions with optional
batch norm and activation. A block may end with an average pool, but only
one that collapses the output to 1x1: any other interior pool would break
the window consistency between neighboring feature maps.

The geometry helpers expose, per scale, the feature-map dims, the window
each upper element reads from the padded lower map, and the receptive
field in input pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "NetworkError",
    "ConvLayerSpec",
    "BlockSpec",
    "NetworkSpec",
    "ScaleGeometry",
    "Network",
    "build_network",
    "geometry",
    "window_map",
    "desk_network_spec",
]


class NetworkError(ValueError):
    pass


_ACTS = {"relu", "sigmoid", None}


@dataclass
class ConvLayerSpec:
    kernel: int
    in_channels: int
    out_channels: int
    norm: bool = True
    activation: str | None = "relu"

    def validate(self) -> None:
        if self.kernel < 1:
            raise NetworkError("kernel size must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise NetworkError("channel counts must be >= 1")
        if self.activation not in _ACTS:
            raise NetworkError(f"unknown activation {self.activation!r}")

    def to_json(self) -> dict:
        return {
            "kernel": self.kernel,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "norm": self.norm,
            "activation": self.activation,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ConvLayerSpec":
        return cls(**_checked_keys(d, {"kernel", "in_channels", "out_channels", "norm", "activation"}))


@dataclass
class BlockSpec:
    """One downsampling block.

    pre_pool  -- window of the average pool applied to the incoming tensor
                 (1 = none); owns the between-block pooling.
    pre_pad   -- zero padding applied next; the padded map is the lower
                 member of this block's neighboring-scale cost pair.
    n_noise   -- uniform noise channels appended after the capture.
    layers    -- convolution stack.
    post_pool -- average pool on the block output (1 = none); must collapse
                 the output to 1x1 when present.
    """

    layers: list[ConvLayerSpec] = field(default_factory=list)
    pre_pool: int = 1
    pre_pad: int = 0
    n_noise: int = 0
    post_pool: int = 1

    def validate(self) -> None:
        if not self.layers:
            raise NetworkError("block needs at least one conv layer")
        if self.pre_pool < 1 or self.post_pool < 1:
            raise NetworkError("pool windows must be >= 1")
        if self.pre_pad < 0 or self.n_noise < 0:
            raise NetworkError("pre_pad and n_noise must be >= 0")
        for lay in self.layers:
            lay.validate()
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_channels != nxt.in_channels:
                raise NetworkError(
                    f"channel chain broken inside block: {prev.out_channels} -> {nxt.in_channels}"
                )

    @property
    def coverage(self) -> int:
        """Composed valid-conv coverage: side of the window one output reads."""
        return 1 + sum(l.kernel - 1 for l in self.layers)

    def to_json(self) -> dict:
        return {
            "layers": [l.to_json() for l in self.layers],
            "pre_pool": self.pre_pool,
            "pre_pad": self.pre_pad,
            "n_noise": self.n_noise,
            "post_pool": self.post_pool,
        }

    @classmethod
    def from_json(cls, d: dict) -> "BlockSpec":
        d = _checked_keys(d, {"layers", "pre_pool", "pre_pad", "n_noise", "post_pool"})
        d["layers"] = [ConvLayerSpec.from_json(l) for l in d.get("layers", [])]
        return cls(**d)


@dataclass
class NetworkSpec:
    """Backbone blocks plus an optional head consuming a grid of view features."""

    input_channels: int
    blocks: list[BlockSpec]
    head: BlockSpec | None = None

    def validate(self) -> None:
        if self.input_channels < 1:
            raise NetworkError("input_channels must be >= 1")
        if not self.blocks:
            raise NetworkError("network needs at least one block")
        ch = self.input_channels
        for b, blk in enumerate(self.blocks):
            blk.validate()
            expect = ch + blk.n_noise
            if blk.layers[0].in_channels != expect:
                raise NetworkError(
                    f"block {b}: first conv expects {blk.layers[0].in_channels} channels, "
                    f"gets {expect} (input {ch} + noise {blk.n_noise})"
                )
            ch = blk.layers[-1].out_channels
        k = self.feature_width
        for b, blk in enumerate(self.blocks):
            if blk.layers[-1].out_channels != k:
                raise NetworkError(
                    f"block {b} outputs {blk.layers[-1].out_channels} channels; "
                    f"feature width is fixed at {k}"
                )
        if self.head is not None:
            self.head.validate()
            if self.head.layers[0].in_channels != k + self.head.n_noise:
                raise NetworkError("head first conv inconsistent with feature width + noise")
            if self.head.layers[-1].out_channels != k:
                raise NetworkError("head must output the shared feature width")
            if self.head.pre_pad != 0 or self.head.pre_pool != 1:
                raise NetworkError("head takes the view grid directly: no pre pad/pool")

    @property
    def feature_width(self) -> int:
        return self.blocks[-1].layers[-1].out_channels

    @property
    def scales(self) -> int:
        return len(self.blocks)

    def to_json(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "blocks": [b.to_json() for b in self.blocks],
            "head": self.head.to_json() if self.head is not None else None,
        }

    @classmethod
    def from_json(cls, d: dict) -> "NetworkSpec":
        d = _checked_keys(d, {"input_channels", "blocks", "head"})
        blocks = [BlockSpec.from_json(b) for b in d.get("blocks", [])]
        head = d.get("head")
        return cls(
            input_channels=d["input_channels"],
            blocks=blocks,
            head=BlockSpec.from_json(head) if head is not None else None,
        )


def _checked_keys(d: dict, allowed: set) -> dict:
    unknown = set(d) - allowed
    if unknown:
        raise NetworkError(f"unknown keys in spec: {sorted(unknown)}")
    return dict(d)


@dataclass
class ScaleGeometry:
    """Spatial bookkeeping for every scale and neighboring-scale pair.

    dims[s]        -- feature-map dims of scale s (1-based, s = 1..S)
    lower_dims[s]  -- dims of the padded (and pre-pooled) map that pairs
                       with scale s+1, for s = 1..S-1
    window[s]      -- (dM, dN) window of the lower map read by one upper
                       element, for s = 1..S-1
    pre_pool[s], pre_pad[s] -- the transition applied between capturing
                       scale s and building the pair lower map
    receptive[s]   -- receptive field side length in input pixels
    pool_acc[s]    -- accumulated pooling factor (input pixels per step)
    """

    input_dims: tuple[int, int]
    dims: dict[int, tuple[int, int]]
    lower_dims: dict[int, tuple[int, int]]
    window: dict[int, tuple[int, int]]
    pre_pool: dict[int, int]
    pre_pad: dict[int, int]
    receptive: dict[int, int]
    pool_acc: dict[int, int]

    @property
    def scales(self) -> int:
        return len(self.dims)


def geometry(spec: NetworkSpec, input_dims: tuple[int, int]) -> ScaleGeometry:
    """Per-scale dims, pair windows and pixel receptive fields; pure in spec."""
    spec.validate()
    h, w = int(input_dims[0]), int(input_dims[1])
    dims: dict[int, tuple[int, int]] = {}
    lower_dims: dict[int, tuple[int, int]] = {}
    window: dict[int, tuple[int, int]] = {}
    pre_pool: dict[int, int] = {}
    pre_pad: dict[int, int] = {}
    receptive: dict[int, int] = {}
    pool_acc: dict[int, int] = {}
    rf, jump = 1, 1
    for b, blk in enumerate(spec.blocks):
        s = b + 1
        if blk.pre_pool > 1:
            if h % blk.pre_pool or w % blk.pre_pool:
                raise NetworkError(
                    f"block {b}: dims {h}x{w} not divisible by pre_pool {blk.pre_pool}"
                )
            h //= blk.pre_pool
            w //= blk.pre_pool
            rf += (blk.pre_pool - 1) * jump
            jump *= blk.pre_pool
        h_pad, w_pad = h + 2 * blk.pre_pad, w + 2 * blk.pre_pad
        if b > 0:
            lower_dims[s - 1] = (h_pad, w_pad)
            pre_pool[s - 1] = blk.pre_pool
            pre_pad[s - 1] = blk.pre_pad
        cov = blk.coverage
        if cov > h_pad or cov > w_pad:
            raise NetworkError(f"block {b}: conv coverage {cov} exceeds padded dims")
        h, w = h_pad - cov + 1, w_pad - cov + 1
        rf += (cov - 1) * jump
        if blk.post_pool > 1:
            if (h, w) != (blk.post_pool, blk.post_pool):
                raise NetworkError(
                    f"block {b}: post_pool {blk.post_pool} must collapse "
                    f"the {h}x{w} output to 1x1"
                )
            rf += (blk.post_pool - 1) * jump
            jump *= blk.post_pool
            h, w = 1, 1
        if b > 0:
            hl, wl = lower_dims[s - 1]
            window[s - 1] = (hl - h + 1, wl - w + 1)
        dims[s] = (h, w)
        receptive[s] = rf
        pool_acc[s] = jump
    return ScaleGeometry(
        input_dims=(int(input_dims[0]), int(input_dims[1])),
        dims=dims,
        lower_dims=lower_dims,
        window=window,
        pre_pool=pre_pool,
        pre_pad=pre_pad,
        receptive=receptive,
        pool_acc=pool_acc,
    )


def window_map(
    geom: ScaleGeometry, s: int, i: int, j: int, direction: str
) -> tuple[tuple[int, int], tuple[int, int]]:
    """Index ranges coupling the pair-s lower map and scale s+1.

    direction="down": (i, j) is an upper element; returns the inclusive
    (row_lo, row_hi), (col_lo, col_hi) of the lower window it reads.
    direction="up": (i, j) is a lower element; returns the inclusive ranges
    of upper elements whose windows contain it.
    """
    if s not in geom.window:
        raise NetworkError(f"no neighboring pair at scale {s}")
    dm, dn = geom.window[s]
    hu, wu = geom.dims[s + 1]
    hl, wl = geom.lower_dims[s]
    if direction == "down":
        if not (0 <= i < hu and 0 <= j < wu):
            raise NetworkError(f"upper index ({i},{j}) outside {hu}x{wu}")
        return (i, i + dm - 1), (j, j + dn - 1)
    if direction == "up":
        if not (0 <= i < hl and 0 <= j < wl):
            raise NetworkError(f"lower index ({i},{j}) outside {hl}x{wl}")
        return (max(0, i - dm + 1), min(i, hu - 1)), (max(0, j - dn + 1), min(j, wu - 1))
    raise NetworkError(f"direction must be 'down' or 'up', got {direction!r}")


class _ConvLayer:
    def __init__(self, spec: ConvLayerSpec, prefix: str, rng: np.random.Generator):
        self.spec = spec
        k, ci, co = spec.kernel, spec.in_channels, spec.out_channels
        bound = np.sqrt(6.0 / (ci * k * k))
        self.kernel = ad.parameter(rng.uniform(-bound, bound, (co, ci, k, k)), f"{prefix}.kernel")
        self.bias = ad.parameter(np.zeros(co), f"{prefix}.bias")
        if spec.norm:
            self.gamma = ad.parameter(np.ones(co), f"{prefix}.gamma")
            self.beta = ad.parameter(np.zeros(co), f"{prefix}.beta")
            self.running_mean = np.zeros(co)
            self.running_var = np.ones(co)
        else:
            self.gamma = self.beta = None
            self.running_mean = self.running_var = None
        self.prefix = prefix

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        x = ad.conv2d(x, self.kernel, self.bias)
        if self.spec.norm:
            x = ad.batchnorm2d(
                x, self.gamma, self.beta, self.running_mean, self.running_var, train
            )
        if self.spec.activation == "relu":
            x = ad.relu(x)
        elif self.spec.activation == "sigmoid":
            x = ad.sigmoid(x)
        return x

    def params(self) -> list[Tensor]:
        out = [self.kernel, self.bias]
        if self.spec.norm:
            out += [self.gamma, self.beta]
        return out

    def state(self) -> list[tuple[str, np.ndarray]]:
        if not self.spec.norm:
            return []
        return [
            (f"{self.prefix}.running_mean", self.running_mean),
            (f"{self.prefix}.running_var", self.running_var),
        ]


class _Block:
    def __init__(self, spec: BlockSpec, prefix: str, rng: np.random.Generator):
        self.spec = spec
        self.prefix = prefix
        self.layers = [
            _ConvLayer(lay, f"{prefix}.conv{i}", rng) for i, lay in enumerate(spec.layers)
        ]

    def __call__(
        self, x: Tensor, train: bool, noise_rng: np.random.Generator
    ) -> tuple[Tensor, Tensor]:
        """Returns (padded lower capture, block output)."""
        if self.spec.pre_pool > 1:
            x = ad.avgpool2d(x, self.spec.pre_pool)
        x = ad.pad2d(x, self.spec.pre_pad)
        lower = x
        x = ad.append_noise(x, self.spec.n_noise, noise_rng)
        for lay in self.layers:
            x = lay(x, train)
        if self.spec.post_pool > 1:
            x = ad.avgpool2d(x, self.spec.post_pool)
        return lower, x

    def params(self) -> list[Tensor]:
        return [p for lay in self.layers for p in lay.params()]

    def state(self) -> list[tuple[str, np.ndarray]]:
        return [s for lay in self.layers for s in lay.state()]


class Network:
    """A parameterized hierarchy; owns parameters and batch-norm state."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        spec.validate()
        self.spec = spec
        self.blocks = [_Block(b, f"block{i}", rng) for i, b in enumerate(spec.blocks)]
        self.head = _Block(spec.head, "head", rng) if spec.head is not None else None

    @property
    def feature_width(self) -> int:
        return self.spec.feature_width

    @property
    def scales(self) -> int:
        return self.spec.scales

    def params(self) -> list[Tensor]:
        out = [p for b in self.blocks for p in b.params()]
        if self.head is not None:
            out += self.head.params()
        return out

    def state(self) -> list[tuple[str, np.ndarray]]:
        out = [s for b in self.blocks for s in b.state()]
        if self.head is not None:
            out += self.head.state()
        return out

    def named_params(self) -> list[tuple[str, Tensor]]:
        return [(p.name, p) for p in self.params()]

    def forward_all(
        self,
        batch: Tensor | np.ndarray,
        train: bool,
        noise_rng: np.random.Generator | None = None,
    ) -> tuple[list[Tensor], dict[int, Tensor]]:
        """Run every block; returns (feature maps Z^(1..S), pair lower maps).

        The s-th entry of the first list is scale s's feature map (block
        output). The dict maps pair index s (1..S-1) to the padded map that
        plays the lower role against scale s+1.
        """
        if noise_rng is None:
            noise_rng = np.random.default_rng(0)
        x = batch if isinstance(batch, Tensor) else ad.constant(batch)
        feature_maps: list[Tensor] = []
        lowers: dict[int, Tensor] = {}
        for b, blk in enumerate(self.blocks):
            lower, x = blk(x, train, noise_rng)
            if b > 0:
                lowers[b] = lower
            feature_maps.append(x)
        return feature_maps, lowers

    def forward_head(
        self,
        view_features: list[Tensor],
        train: bool,
        noise_rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Arrange L view feature vectors on a spatial grid and run the head.

        Each entry of ``view_features`` must be (N, K, 1, 1). The grid is the
        squarest rows x cols factorization of L (rows <= cols); the head's
        conv coverage must collapse it to 1x1.
        """
        if self.head is None:
            raise NetworkError("network has no head")
        if noise_rng is None:
            noise_rng = np.random.default_rng(0)
        L = len(view_features)
        if L < 1:
            raise NetworkError("head needs at least one view")
        for v in view_features:
            if v.data.ndim != 4 or v.shape[2:] != (1, 1):
                raise NetworkError("head inputs must be (N, K, 1, 1) feature vectors")
        rows, cols = head_grid(L)
        grid_rows = []
        for r in range(rows):
            grid_rows.append(ad.concat(view_features[r * cols : (r + 1) * cols], axis=3))
        x = ad.concat(grid_rows, axis=2) if rows > 1 else grid_rows[0]
        cov = self.head.spec.coverage
        if (x.shape[2] - cov + 1, x.shape[3] - cov + 1) != (1, 1):
            raise NetworkError(
                f"head coverage {cov} does not collapse the {rows}x{cols} view grid to 1x1"
            )
        x = ad.append_noise(x, self.head.spec.n_noise, noise_rng)
        for lay in self.head.layers:
            x = lay(x, train)
        if self.head.spec.post_pool > 1:
            x = ad.avgpool2d(x, self.head.spec.post_pool)
        return x


def head_grid(views: int) -> tuple[int, int]:
    """Squarest rows x cols factorization of the view count, rows <= cols."""
    if views < 1:
        raise NetworkError("view count must be >= 1")
    rows = int(np.floor(np.sqrt(views)))
    while views % rows:
        rows -= 1
    return rows, views // rows


def build_network(spec: NetworkSpec, rng: np.random.Generator) -> Network:
    """He-uniform conv kernels, zero biases, unit/zero norm affine; the
    parameter count and values are a pure function of (spec, rng state)."""
    return Network(spec, rng)


def _sandwich(
    in_ch: int, hidden: int, out_ch: int, mid_kernel: int, norm: bool = True
) -> list[ConvLayerSpec]:
    return [
        ConvLayerSpec(1, in_ch, hidden, norm, "relu"),
        ConvLayerSpec(mid_kernel, hidden, hidden, norm, "relu"),
        ConvLayerSpec(1, hidden, out_ch, norm, "sigmoid"),
    ]


def desk_network_spec(
    input_channels: int = 3,
    feature_width: int = 16,
    hidden: int = 24,
    n_noise: int = 4,
    views: int = 4,
    final_pool: int = 8,
    with_head: bool = True,
) -> NetworkSpec:
    """Desk-scale default: 4 blocks (1x1 entry block, then three 1x1/3x3/1x1
    sandwiches), pool-2 after every second block, final spatial average to a
    single feature vector, plus a head over the view grid."""
    k, h, nn = feature_width, hidden, n_noise
    entry = BlockSpec(
        layers=[
            ConvLayerSpec(1, input_channels + nn, h, True, "relu"),
            ConvLayerSpec(1, h, h, True, "relu"),
            ConvLayerSpec(1, h, k, True, "sigmoid"),
        ],
        n_noise=nn,
    )
    b1 = BlockSpec(layers=_sandwich(k + nn, h, k, 3), pre_pad=1, n_noise=nn)
    b2 = BlockSpec(layers=_sandwich(k + nn, h, k, 3), pre_pool=2, pre_pad=1, n_noise=nn)
    b3 = BlockSpec(layers=_sandwich(k + nn, h, k, 3), pre_pad=1, n_noise=nn, post_pool=final_pool)
    head = None
    if with_head:
        rows, cols = head_grid(views)
        if rows != cols:
            raise NetworkError(
                f"view count {views} has no square grid; use 1, 4, 9, 16, ..."
            )
        mid = cols
        head_layers = [
            ConvLayerSpec(1, k + nn, h, True, "relu"),
            ConvLayerSpec(mid, h, h, True, "relu"),
            ConvLayerSpec(1, h, k, True, "sigmoid"),
        ]
        head = BlockSpec(layers=head_layers, n_noise=nn)
    return NetworkSpec(input_channels=input_channels, blocks=[entry, b1, b2, b3], head=head)
