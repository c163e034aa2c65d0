"""Encoder-decoder segmentation network with cross-attention decoder stages.

The encoder repeats (conv, relu) blocks per resolution level and halves the
grid between levels with a stride-2 convolution, doubling channel width. The
decoder mirrors it with stride-2 transposed convolutions, concatenating the
matching encoder output before each conv block. After each decoder stage
whose voxel count fits the dense-attention cap, a graph cross-attention
block refines the features over the voxel-adjacency graph.

Every decoder stage owns its attention block regardless of grid size, and a
stage applies it only when the current voxel count is within the cap. One
checkpoint therefore serves any legal input extent.

The main head is a pointwise convolution to class logits at full resolution.
With deep supervision on, auxiliary heads emit logits at every coarser level
(level k has extents input / 2^k); the deepest one reads the bottleneck.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .conv import conv3d, conv3d_transpose
from .graph import GCAModule, build_grid_graph, graph_cross_attention
from .tensor import Parameter, ShapeError, Tensor

__all__ = ["NetworkConfig", "SegmentationModel", "predict_labels"]


@dataclass
class NetworkConfig:
    in_channels: int = 4
    n_classes: int = 4
    base_width: int = 16
    n_stages: int = 3
    kernel_size: int = 3
    blocks_per_stage: int = 1
    deep_sup: bool = True
    gca_dense_cap: int = 4096
    gca_scaled: bool = True

    def validate(self):
        if self.in_channels < 1 or self.n_classes < 2:
            raise ShapeError(
                f"NetworkConfig: need in_channels >= 1 and n_classes >= 2, got "
                f"{self.in_channels}, {self.n_classes}")
        if self.base_width < 1 or self.blocks_per_stage < 1:
            raise ShapeError(
                f"NetworkConfig: base_width and blocks_per_stage must be >= 1, got "
                f"{self.base_width}, {self.blocks_per_stage}")
        if self.n_stages < 2:
            raise ShapeError(f"NetworkConfig: n_stages must be >= 2, got {self.n_stages}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            # stride-1 blocks preserve extents only with odd kernels
            raise ShapeError(
                f"NetworkConfig: kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.gca_dense_cap < 1:
            raise ShapeError(
                f"NetworkConfig: gca_dense_cap must be >= 1, got {self.gca_dense_cap}")

    @property
    def widths(self):
        return [self.base_width * (1 << s) for s in range(self.n_stages)]


class _ConvLayer:
    """conv3d with weights uniform in +-sqrt(1/fan_in), zero bias."""

    def __init__(self, rng, cin, cout, k, stride, padding, name, dtype):
        bound = float(np.sqrt(1.0 / (cin * k ** 3)))
        self.w = Parameter(
            rng.uniform(-bound, bound, (cout, cin, k, k, k)).astype(dtype), f"{name}.w")
        self.b = Parameter(np.zeros(cout, dtype=dtype), f"{name}.b")
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return conv3d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class _UpsampleLayer:
    """Stride-2 transposed conv; each output voxel reads one tap, so fan_in = cin."""

    def __init__(self, rng, cin, cout, name, dtype):
        bound = float(np.sqrt(1.0 / cin))
        self.w = Parameter(
            rng.uniform(-bound, bound, (cin, cout, 2, 2, 2)).astype(dtype), f"{name}.w")
        self.b = Parameter(np.zeros(cout, dtype=dtype), f"{name}.b")

    def __call__(self, x):
        return conv3d_transpose(x, self.w, self.b)


class SegmentationModel:
    """Owns all parameters and the forward pass.

    Parameter names follow the stage layout and are stable across runs:
    enc.<s>.block<i>.{w,b}, down.<s>.{w,b}, up.<s>.{w,b},
    dec.<s>.block<i>.{w,b}, gca.<s>.{q,k,v}.{w_src,w_dst,a} plus
    gca.<s>.gamma and gca.<s>.merge.{w,b}, head.{w,b}, aux.<k>.{w,b}.
    """

    def __init__(self, config, rng=None, dtype=np.float32):
        config.validate()
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        self.dtype = np.dtype(dtype)
        n = config.n_stages
        widths = config.widths
        k = config.kernel_size

        self.enc = []
        for s in range(n):
            blocks = []
            for i in range(config.blocks_per_stage):
                cin = widths[s]
                if i == 0:
                    cin = config.in_channels if s == 0 else widths[s]
                blocks.append(_ConvLayer(
                    rng, cin, widths[s], k, 1, k // 2, f"enc.{s}.block{i}", dtype))
            self.enc.append(blocks)
        self.down = [
            _ConvLayer(rng, widths[s], widths[s + 1], 2, 2, 0, f"down.{s}", dtype)
            for s in range(n - 1)]
        self.up = [
            _UpsampleLayer(rng, widths[s + 1], widths[s], f"up.{s}", dtype)
            for s in range(n - 1)]
        self.dec = []
        for s in range(n - 1):
            blocks = []
            for i in range(config.blocks_per_stage):
                cin = 2 * widths[s] if i == 0 else widths[s]
                blocks.append(_ConvLayer(
                    rng, cin, widths[s], k, 1, k // 2, f"dec.{s}.block{i}", dtype))
            self.dec.append(blocks)
        self.gca = [
            GCAModule(widths[s], dense_cap=config.gca_dense_cap,
                      scaled=config.gca_scaled, rng=rng, name=f"gca.{s}", dtype=dtype)
            for s in range(n - 1)]
        self.head = _ConvLayer(rng, widths[0], config.n_classes, 1, 1, 0, "head", dtype)
        self.aux = {}
        if config.deep_sup:
            for level in range(1, n):
                self.aux[level] = _ConvLayer(
                    rng, widths[level], config.n_classes, 1, 1, 0, f"aux.{level}", dtype)

        self._params = {}
        for layer in self._conv_layers():
            self._register(layer.w, layer.b)
        for block in self.gca:
            self._register(*block.parameters())
        self._edge_cache = {}
        self.gca_applied = {s: 0 for s in range(n - 1)}
        self.gca_skipped = {s: 0 for s in range(n - 1)}

    def _conv_layers(self):
        for blocks in self.enc:
            yield from blocks
        yield from self.down
        yield from self.up
        for blocks in self.dec:
            yield from blocks
        yield self.head
        yield from self.aux.values()

    def _register(self, *params):
        for p in params:
            if p.name in self._params:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            self._params[p.name] = p

    def parameters(self):
        """name -> Parameter, in construction order."""
        return self._params

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def load_parameters(self, arrays):
        """Assign named arrays to parameters. Names and shapes must match
        the model exactly; values are cast to the parameter dtype."""
        params = self._params
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise ShapeError(
                f"parameter set mismatch: missing {missing[:3]}..., "
                f"unexpected {extra[:3]}..." if len(missing) + len(extra) > 6
                else f"parameter set mismatch: missing {missing}, "
                     f"unexpected {extra}")
        for name, p in params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.data.shape:
                raise ShapeError(
                    f"{name}: checkpoint shape {arr.shape} does not match "
                    f"model shape {p.data.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)

    def _edges_for(self, spatial):
        got = self._edge_cache.get(spatial)
        if got is None:
            got = build_grid_graph(*spatial)
            self._edge_cache[spatial] = got
        return got

    def forward(self, x):
        """x [B, in_channels, D, H, W] -> (logits, aux_logits).

        logits matches x spatially; aux_logits[k-1] sits at extents / 2^k for
        k = 1 .. n_stages-1, empty when deep supervision is off.
        """
        xd = x.data
        cfg = self.config
        if xd.ndim != 5:
            raise ShapeError(f"forward: input must be [B, C, D, H, W], got {xd.shape}")
        if xd.shape[1] != cfg.in_channels:
            raise ShapeError(
                f"forward: input has {xd.shape[1]} channels, config says {cfg.in_channels}")
        if xd.dtype != self.dtype:
            raise ShapeError(f"forward: input dtype {xd.dtype}, model is {self.dtype}")
        divisor = 1 << (cfg.n_stages - 1)
        if any(e % divisor or e < divisor for e in xd.shape[2:]):
            raise ShapeError(
                f"forward: spatial extents {xd.shape[2:]} must be divisible by "
                f"2^(n_stages-1) = {divisor}")

        skips = []
        cur = x
        for s in range(cfg.n_stages):
            for block in self.enc[s]:
                cur = T.relu(block(cur))
            if s < cfg.n_stages - 1:
                skips.append(cur)
                cur = self.down[s](cur)
        bottleneck = cur

        stage_out = {}
        for s in reversed(range(cfg.n_stages - 1)):
            cur = self.up[s](cur)
            cur = T.concat([cur, skips[s]], axis=1)
            for block in self.dec[s]:
                cur = T.relu(block(cur))
            spatial = cur.data.shape[2:]
            if int(np.prod(spatial)) <= cfg.gca_dense_cap:
                cur = graph_cross_attention(cur, self._edges_for(spatial), self.gca[s])
                self.gca_applied[s] += 1
            else:
                self.gca_skipped[s] += 1
            stage_out[s] = cur

        logits = self.head(cur)
        aux = []
        for level in sorted(self.aux):
            source = bottleneck if level == cfg.n_stages - 1 else stage_out[level]
            aux.append(self.aux[level](source))
        return logits, aux


def predict_labels(logits):
    """Per-voxel argmax over the class axis; ties go to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data.ndim != 5:
        raise ShapeError(f"predict_labels: logits must be [B, C, D, H, W], got {data.shape}")
    return data.argmax(axis=1).astype(np.uint8)
