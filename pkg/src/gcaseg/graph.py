"""Voxel-adjacency graphs and the graph cross-attention block.

The voxels of a feature grid form the nodes of a directed graph whose edges
connect spatial neighbors. Query, key, and value projections are computed by
a graph-attention layer over that structure (per-edge scores, neighborhood
softmax, weighted message sums); a dense node-by-node attention then mixes
the projected features globally. A learnable residual weight and a pointwise
merge convolution close the block.

Edge structure is static per grid shape, so every index layout the attention
needs (per-edge gathers, segment-softmax plans, batch tilings) is built once
and cached on the EdgeIndex that owns it.
"""

import numpy as np

from . import tensor as T
from .conv import conv3d
from .tensor import Parameter, ShapeError, Tensor

__all__ = [
    "EdgeIndex",
    "GraphAttentionLayer",
    "GCAModule",
    "build_grid_graph",
    "gatv2_attend",
    "graph_cross_attention",
]


class _AttendPlan:
    """Row plans for one (heads, self-loops) attention layout.

    Attention rows are laid out edge-major: row e*heads + h carries head h of
    edge e, and belongs to softmax segment dst[e]*heads + h.
    """

    __slots__ = ("src_gather", "dst_gather", "seg_plan", "head_gather", "n_rows")

    def __init__(self, src, dst, node_count, heads):
        n_edges = src.shape[0]
        self.src_gather = T.RowPlan(src, node_count)
        self.dst_gather = T.RowPlan(dst, node_count)
        seg = (dst[:, None] * heads + np.arange(heads, dtype=np.int64)[None, :]).ravel()
        self.seg_plan = T.RowPlan(seg, node_count * heads)
        self.head_gather = T.RowPlan(np.tile(np.arange(heads, dtype=np.int64), n_edges), heads)
        self.n_rows = n_edges * heads


class EdgeIndex:
    """Directed (source, target) node pairs over a flattened voxel grid.

    Pairs must lie in [0, node_count), contain no self-loops, and contain no
    duplicates. Grid builders emit a symmetric edge set (i,j present iff j,i
    present); hand-built instances may be directed.
    """

    def __init__(self, pairs, node_count):
        pairs = np.asarray(pairs, dtype=np.int64)
        if pairs.size == 0:
            pairs = pairs.reshape(0, 2)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise ShapeError(f"EdgeIndex: pairs must be [n_edges, 2], got {pairs.shape}")
        node_count = int(node_count)
        if node_count < 1:
            raise ShapeError(f"EdgeIndex: node_count must be >= 1, got {node_count}")
        if pairs.shape[0]:
            if pairs.min() < 0 or pairs.max() >= node_count:
                raise ShapeError(f"EdgeIndex: node indices outside [0, {node_count})")
            if np.any(pairs[:, 0] == pairs[:, 1]):
                raise ShapeError("EdgeIndex: explicit self-loops are not allowed")
            key = pairs[:, 0] * node_count + pairs[:, 1]
            if np.unique(key).size != key.size:
                raise ShapeError("EdgeIndex: duplicate edge pairs")
        self.pairs = pairs
        self.node_count = node_count
        self._plans = {}
        self._tiled = {}

    @property
    def n_edges(self):
        return self.pairs.shape[0]

    def tiled(self, batch):
        """This edge set replicated over `batch` disjoint node blocks."""
        if batch == 1:
            return self
        got = self._tiled.get(batch)
        if got is None:
            offsets = np.arange(batch, dtype=np.int64) * self.node_count
            stacked = (self.pairs[None, :, :] + offsets[:, None, None]).reshape(-1, 2)
            got = EdgeIndex(stacked, batch * self.node_count)
            self._tiled[batch] = got
        return got

    def attend_plan(self, heads, with_self_loops):
        key = (int(heads), bool(with_self_loops))
        got = self._plans.get(key)
        if got is None:
            src, dst = self.pairs[:, 0], self.pairs[:, 1]
            if with_self_loops:
                loop = np.arange(self.node_count, dtype=np.int64)
                src = np.concatenate([src, loop])
                dst = np.concatenate([dst, loop])
            else:
                degree = np.bincount(dst, minlength=self.node_count)
                if np.any(degree == 0):
                    node = int(np.flatnonzero(degree == 0)[0])
                    raise ValueError(
                        f"node {node} has an empty neighborhood and self-loops are "
                        "disabled; its attention weights cannot be normalized")
            got = _AttendPlan(src, dst, self.node_count, key[0])
            self._plans[key] = got
        return got

    def __repr__(self):
        return f"EdgeIndex({self.n_edges} edges over {self.node_count} nodes)"


def _axis_span(delta, extent, shifted):
    lo = max(0, delta) if shifted else max(0, -delta)
    hi = extent - (max(0, -delta) if shifted else max(0, delta))
    return slice(lo, hi)


def build_grid_graph(d, h, w, connectivity=6):
    """Neighbor adjacency over a d*h*w grid flattened in C order.

    connectivity 6 links face neighbors only; 26 links the full unit cube.
    Every undirected neighbor relation yields both directed pairs.
    """
    if d < 1 or h < 1 or w < 1:
        raise ShapeError(f"build_grid_graph: extents must be >= 1, got {(d, h, w)}")
    if connectivity not in (6, 26):
        raise ValueError(f"build_grid_graph: connectivity must be 6 or 26, got {connectivity}")
    ids = np.arange(d * h * w, dtype=np.int64).reshape(d, h, w)
    if connectivity == 6:
        offsets = [(1, 0, 0), (0, 1, 0), (0, 0, 1)]
        mirror = True  # the reverse directions are not in the offset list
    else:
        offsets = [(dz, dy, dx)
                   for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                   if (dz, dy, dx) != (0, 0, 0)]
        mirror = False  # every offset's opposite is already listed
    chunks = []
    for dz, dy, dx in offsets:
        a = ids[_axis_span(dz, d, False), _axis_span(dy, h, False), _axis_span(dx, w, False)]
        b = ids[_axis_span(dz, d, True), _axis_span(dy, h, True), _axis_span(dx, w, True)]
        a, b = a.ravel(), b.ravel()
        chunks.append(np.stack([a, b], axis=1))
        if mirror:
            chunks.append(np.stack([b, a], axis=1))
    pairs = np.concatenate(chunks, axis=0)
    return EdgeIndex(pairs, d * h * w)


class GraphAttentionLayer:
    """Attention projection with per-edge scores a . leaky_relu(W_src h_j + W_dst h_i).

    W_src and W_dst map f_in to f_out per head and carry no bias; `a` is one
    attention vector per head. The layer's output width is heads * f_out with
    head outputs concatenated.
    """

    def __init__(self, f_in, f_out, heads=1, negative_slope=0.2, rng=None,
                 name="", dtype=np.float32):
        if f_in < 1 or f_out < 1 or heads < 1:
            raise ShapeError(
                f"GraphAttentionLayer: f_in={f_in}, f_out={f_out}, heads={heads} "
                "must all be >= 1")
        if rng is None:
            rng = np.random.default_rng(0)
        self.f_in = int(f_in)
        self.f_out = int(f_out)
        self.heads = int(heads)
        self.negative_slope = float(negative_slope)
        sep = "." if name else ""
        bw = float(np.sqrt(1.0 / f_in))
        ba = float(np.sqrt(1.0 / f_out))
        self.w_src = Parameter(
            rng.uniform(-bw, bw, (f_in, heads * f_out)).astype(dtype), f"{name}{sep}w_src")
        self.w_dst = Parameter(
            rng.uniform(-bw, bw, (f_in, heads * f_out)).astype(dtype), f"{name}{sep}w_dst")
        self.a = Parameter(
            rng.uniform(-ba, ba, (heads, f_out)).astype(dtype), f"{name}{sep}a")

    def parameters(self):
        return (self.w_src, self.w_dst, self.a)


def gatv2_attend(feats, edges, layer, add_self_loops=True, return_attention=False):
    """Neighborhood attention over `edges`, one output row per node.

    For target node i with in-neighborhood N(i), extended by an implicit
    self-loop unless disabled: per head, e_ij = a . leaky_relu(W_src h_j +
    W_dst h_i) for j in N(i), alpha_i = softmax_j(e_ij), and output_i =
    sum_j alpha_ij (W_src h_j). Heads are concatenated, so the result is
    [node_count, heads * f_out].

    With return_attention the coefficients come back as a second value,
    one [rows, 1] tensor laid out edge-major per the edges' attend plan.
    """
    fd = feats.data
    if fd.ndim != 2:
        raise ShapeError(f"gatv2_attend: feats must be [nodes, features], got {fd.shape}")
    if fd.shape[0] != edges.node_count:
        raise ShapeError(
            f"gatv2_attend: {fd.shape[0]} feature rows vs {edges.node_count} graph nodes")
    if fd.shape[1] != layer.f_in:
        raise ShapeError(
            f"gatv2_attend: feats have {fd.shape[1]} features, layer expects {layer.f_in}")
    if fd.dtype != layer.w_src.data.dtype:
        raise ShapeError(
            f"gatv2_attend: feats dtype {fd.dtype} vs layer dtype {layer.w_src.data.dtype}")
    heads, f_out = layer.heads, layer.f_out
    plan = edges.attend_plan(heads, add_self_loops)

    hs = T.matmul(feats, layer.w_src)
    hd = T.matmul(feats, layer.w_dst)
    src = T.gather_rows(hs, plan.src_gather)  # W_src h_j per edge row
    dst = T.gather_rows(hd, plan.dst_gather)  # W_dst h_i per edge row
    z = T.leaky_relu(T.add(src, dst), layer.negative_slope)
    zr = T.reshape(z, (plan.n_rows, f_out))
    att_vec = T.gather_rows(layer.a, plan.head_gather)
    scores = T.tsum(T.mul(zr, att_vec), axis=1, keepdims=True)

    # Segment softmax over each target's neighborhood. The max shift is a
    # per-segment constant; softmax is invariant to it, so it stays out of
    # the gradient.
    shift = plan.seg_plan.segment_max_data(scores.data[:, 0])[plan.seg_plan.idx]
    ex = T.exp(T.sub(scores, Tensor(shift[:, None])), floored=True)
    denom = T.scatter_rows(ex, plan.seg_plan)
    alpha = T.div(ex, T.gather_rows(denom, plan.seg_plan))

    msgs = T.reshape(src, (plan.n_rows, f_out))
    out = T.scatter_rows(T.scale_rows(msgs, alpha), plan.seg_plan)
    out = T.reshape(out, (edges.node_count, heads * f_out))
    if return_attention:
        return out, alpha
    return out


class GCAModule:
    """Parameters of one graph cross-attention block over C-channel grids.

    Query, key, and value are graph-attention projections of the flattened
    grid. A dense node-by-node softmax attention mixes the value rows, the
    result enters a learnable residual (gamma starts at 0, so the block
    begins as identity plus merge), and a pointwise convolution maps the
    concatenated [attended; input] pair back to C channels.

    Dense attention is quadratic in voxel count; grids above `dense_cap`
    nodes are rejected.
    """

    def __init__(self, channels, heads=1, negative_slope=0.2, dense_cap=4096,
                 scaled=True, rng=None, name="gca", dtype=np.float32):
        channels = int(channels)
        heads = int(heads)
        if channels < 1:
            raise ShapeError(f"GCAModule: channels must be >= 1, got {channels}")
        if channels % heads != 0:
            raise ShapeError(
                f"GCAModule: channels {channels} not divisible by heads {heads}")
        if rng is None:
            rng = np.random.default_rng(0)
        f_out = channels // heads
        self.channels = channels
        self.dense_cap = int(dense_cap)
        self.scaled = bool(scaled)
        self.q_layer = GraphAttentionLayer(
            channels, f_out, heads, negative_slope, rng, f"{name}.q", dtype)
        self.k_layer = GraphAttentionLayer(
            channels, f_out, heads, negative_slope, rng, f"{name}.k", dtype)
        self.v_layer = GraphAttentionLayer(
            channels, f_out, heads, negative_slope, rng, f"{name}.v", dtype)
        self.gamma = Parameter(np.zeros((), dtype=dtype), f"{name}.gamma")
        bm = float(np.sqrt(1.0 / (2 * channels)))
        self.merge_w = Parameter(
            rng.uniform(-bm, bm, (channels, 2 * channels, 1, 1, 1)).astype(dtype),
            f"{name}.merge.w")
        self.merge_b = Parameter(np.zeros(channels, dtype=dtype), f"{name}.merge.b")

    def parameters(self):
        return (self.q_layer.parameters() + self.k_layer.parameters()
                + self.v_layer.parameters() + (self.gamma, self.merge_w, self.merge_b))


def graph_cross_attention(x, edges, module, return_attention=False):
    """Apply one graph cross-attention block to x [B, C, D, H, W].

    Per batch item: spatial positions flatten to N graph nodes; Q, K, V come
    from the module's attention layers; Energy = Q K^T over all node pairs
    (scaled by 1/sqrt(C) when the module says so, folded into Q before the
    product); Attention = row softmax; Output = Attention V regridded;
    Enhanced = gamma * Output + x; the result is the pointwise merge of
    [Enhanced; x]. Output shape equals input shape.
    """
    xd = x.data
    if xd.ndim != 5:
        raise ShapeError(f"graph_cross_attention: x must be [B, C, D, H, W], got {xd.shape}")
    b, c = xd.shape[0], xd.shape[1]
    n = xd.shape[2] * xd.shape[3] * xd.shape[4]
    if c != module.channels:
        raise ShapeError(
            f"graph_cross_attention: x has {c} channels, module expects {module.channels}")
    if n != edges.node_count:
        raise ShapeError(
            f"graph_cross_attention: grid has {n} voxels but the graph has "
            f"{edges.node_count} nodes")
    if n > module.dense_cap:
        raise ShapeError(
            f"graph_cross_attention: {n} voxels exceeds the dense attention cap "
            f"({module.dense_cap}); apply the block at a coarser stage or raise the cap")
    if xd.dtype != module.merge_w.data.dtype:
        raise ShapeError(
            f"graph_cross_attention: x dtype {xd.dtype} vs module dtype "
            f"{module.merge_w.data.dtype}")

    tiled = edges.tiled(b)
    feats = T.reshape(T.transpose(T.reshape(x, (b, c, n)), (0, 2, 1)), (b * n, c))
    q = gatv2_attend(feats, tiled, module.q_layer)
    k = gatv2_attend(feats, tiled, module.k_layer)
    v = gatv2_attend(feats, tiled, module.v_layer)
    if module.scaled:
        q = T.scale(q, 1.0 / float(np.sqrt(module.channels)))

    qb = T.reshape(q, (b, n, c))
    kb = T.reshape(k, (b, n, c))
    vb = T.reshape(v, (b, n, c))
    energy = T.matmul(qb, T.transpose(kb, (0, 2, 1)))
    att = T.softmax(energy, axis=2, consume_input=True)
    mixed = T.matmul(att, vb)

    out = T.reshape(T.transpose(mixed, (0, 2, 1)), xd.shape)
    enhanced = T.add(T.scale_by(out, module.gamma), x)
    merged = conv3d(T.concat([enhanced, x], axis=1), module.merge_w, module.merge_b)
    if return_attention:
        return merged, att
    return merged
