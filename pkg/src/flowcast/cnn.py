"""From-scratch convolutional network mapping frame windows to kernel coefficients.

Architecture: the tau frames of a window enter as channels; each stage applies
same-padded convolution (odd patch, true-convolution orientation

    F_k[i, j] = sum_q sum_{l,m} X_q[i - l, j - m] g_{q,k}[l, m] + b_k),

a rectifier, and 2x2 max pooling with stride 2.  After the last stage the
feature maps are flattened and three head matrices emit the coefficient
vectors (w1, w2, w3).

Weight tying: the w2 and w3 towers share one set of stage-1 filters, with the
w3 tower reading them spatially transposed (the last two filter axes swapped;
a numpy view, not a copy), share all deeper-stage filters and biases, and
share one head matrix (A3 is A2).  The w1 tower has its own filters and head.
Gradients for tied tensors accumulate from every tower that reads them.

Everything is plain numpy with reverse-mode gradients written out by hand;
no autodiff framework is involved.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import OddSide, ShapeMismatch, StaleCache, ValidationError
from .grid import FrameWindow
from .kernels import DynamicsWeights

HEAD_INIT_SCALE = 1e-3


@dataclass(frozen=True)
class CnnArchitecture:
    """Static shape information: window depth, input side, stage widths, patch, r."""

    tau: int
    input_side: int
    filters: tuple
    patch: int = 5
    r: int = 16

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        if self.tau < 2:
            raise ValidationError(f"window depth tau must be >= 2, got {self.tau}")
        if self.patch % 2 != 1 or self.patch < 1:
            raise ValidationError(f"patch size must be odd, got {self.patch}")
        if len(self.filters) < 1 or any(f < 1 for f in self.filters):
            raise ValidationError(f"bad filter counts {self.filters}")
        if self.r < 1:
            raise ValidationError(f"head size r must be >= 1, got {self.r}")
        if self.input_side % (2 ** self.n_stages) != 0:
            raise ValidationError(
                f"input side {self.input_side} not divisible by 2^{self.n_stages}"
            )

    @property
    def n_stages(self):
        return len(self.filters)

    @property
    def feature_side(self):
        return self.input_side // (2 ** self.n_stages)

    @property
    def flat_dim(self):
        return self.filters[-1] * self.feature_side * self.feature_side

    @property
    def stage_channels(self):
        """Input channel count of each stage."""
        return (self.tau,) + self.filters[:-1]

    def tensor_names(self):
        names = []
        for l in range(1, self.n_stages + 1):
            for p in (1, 2):
                names.append(f"stage{l}.pathway{p}.filters")
                names.append(f"stage{l}.pathway{p}.bias")
        names.append("head.A1")
        names.append("head.A2")
        return names

    def tensor_shape(self, name):
        if name in ("head.A1", "head.A2"):
            return (self.r, self.flat_dim)
        stage_part, _, kind = name.partition(".pathway")
        l = int(stage_part.removeprefix("stage"))
        c = self.stage_channels[l - 1]
        k = self.filters[l - 1]
        if kind.endswith("filters"):
            return (k, c, self.patch, self.patch)
        return (k,)


class CnnParams:
    """Named tensor storage.  pathway1 feeds w1; pathway2 feeds w2 and (via the
    transpose view) w3.  `version` lets forward caches detect staleness."""

    def __init__(self, arch, tensors):
        self.arch = arch
        expected = arch.tensor_names()
        if sorted(tensors) != sorted(expected):
            raise ShapeMismatch(
                f"tensor names {sorted(tensors)} do not match architecture"
            )
        for name in expected:
            if tensors[name].shape != arch.tensor_shape(name):
                raise ShapeMismatch(
                    f"{name} has shape {tensors[name].shape}, "
                    f"expected {arch.tensor_shape(name)}"
                )
        self.tensors = {name: np.asarray(tensors[name], dtype=np.float64) for name in expected}
        self.version = 0

    def names(self):
        return self.arch.tensor_names()

    @property
    def w3_stage1_filters(self):
        """Transpose view of the w2 stage-1 filters (shared storage)."""
        return np.swapaxes(self.tensors["stage1.pathway2.filters"], -1, -2)

    @property
    def head_a3(self):
        """A3 is A2 (same array object)."""
        return self.tensors["head.A2"]

    def n_parameters(self):
        return sum(t.size for t in self.tensors.values())

    def copy(self):
        out = CnnParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})
        out.version = self.version
        return out


def init_cnn_params(arch, seed=0):
    """Glorot-uniform filters, uniform(+-1e-3) heads, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for l in range(1, arch.n_stages + 1):
        c = arch.stage_channels[l - 1]
        k = arch.filters[l - 1]
        fan_in = c * arch.patch * arch.patch
        fan_out = k * arch.patch * arch.patch
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        for p in (1, 2):
            tensors[f"stage{l}.pathway{p}.filters"] = rng.uniform(
                -limit, limit, size=(k, c, arch.patch, arch.patch)
            )
            tensors[f"stage{l}.pathway{p}.bias"] = np.zeros(k)
    for name in ("head.A1", "head.A2"):
        tensors[name] = rng.uniform(
            -HEAD_INIT_SCALE, HEAD_INIT_SCALE, size=(arch.r, arch.flat_dim)
        )
    return CnnParams(arch, tensors)


# ---------------------------------------------------------------------------
# convolution / pooling primitives (batched, channel-first)

def _conv_patches(x, patch):
    """True-convolution patches: out[b, i*W+j, (c,a,b')] = x[b, c, i-(a-P), j-(b'-P)].

    x: (B, C, H, W) -> (B, H*W, C*patch*patch), zero padded."""
    b, c, h, w = x.shape
    p = patch // 2
    xpad = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xpad, (patch, patch), axis=(2, 3))
    pat = win[..., ::-1, ::-1]  # flip offsets: convolution, not correlation
    return np.ascontiguousarray(pat.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b, h * w, c * patch * patch
    )


def _corr_patches(x, patch):
    """Cross-correlation patches (no flip); used for input gradients."""
    b, c, h, w = x.shape
    p = patch // 2
    xpad = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xpad, (patch, patch), axis=(2, 3))
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b, h * w, c * patch * patch
    )


def _conv_forward(x, filters, bias):
    """Same-padded multi-channel convolution.  x (B,C,H,W), filters (K,C,p,p)."""
    b, c, h, w = x.shape
    k = filters.shape[0]
    patch = filters.shape[-1]
    pat = _conv_patches(x, patch)
    gmat = np.ascontiguousarray(filters.reshape(k, -1))
    pre = pat @ gmat.T  # (B, HW, K)
    pre = pre.transpose(0, 2, 1).reshape(b, k, h, w) + bias[None, :, None, None]
    return pre, pat


def _conv_backward(dpre, pat, filters, x_shape, need_dx):
    """Gradients of _conv_forward.  dpre (B,K,H,W); pat from the forward pass."""
    b, c, h, w = x_shape
    k, _, patch, _ = filters.shape
    dpre_flat = dpre.reshape(b, k, h * w).transpose(0, 2, 1)  # (B, HW, K)
    dg = np.tensordot(dpre_flat, pat, axes=([0, 1], [0, 1]))  # (K, C*p*p)
    dg = dg.reshape(k, c, patch, patch)
    db = dpre.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        # dX_c = sum_k xcorr(dpre_k, g[k, c])
        win = _corr_patches(dpre, patch)  # (B, HW, K*p*p)
        gback = np.ascontiguousarray(filters.transpose(0, 2, 3, 1)).reshape(
            k * patch * patch, c
        )
        dx = (win @ gback).transpose(0, 2, 1).reshape(b, c, h, w)
    return dg, db, dx


def rectify(x):
    """Elementwise max(x, 0)."""
    return np.maximum(x, 0.0)


def _maxpool2_forward(x):
    """2x2/stride-2 max pooling.  x (B,K,H,W) -> (pooled (B,K,H/2,W/2), argmax idx)."""
    b, k, h, w = x.shape
    if h % 2 or w % 2:
        raise OddSide(f"max pooling needs even sides, got {h}x{w}")
    x4 = x.reshape(b, k, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    x4 = np.ascontiguousarray(x4).reshape(b, k, h // 2, w // 2, 4)
    idx = x4.argmax(axis=-1)
    pooled = np.take_along_axis(x4, idx[..., None], axis=-1)[..., 0]
    return pooled, idx


def _maxpool2_backward(dpool, idx, out_shape):
    b, k, h, w = out_shape
    d4 = np.zeros((b, k, h // 2, w // 2, 4))
    np.put_along_axis(d4, idx[..., None], dpool[..., None], axis=-1)
    d4 = d4.reshape(b, k, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(d4).reshape(b, k, h, w)


def conv3d_stage(inputs, filters, bias):
    """Single-sample stage convolution (C,H,W) -> (K,H,W), same padding."""
    inputs = np.asarray(inputs, dtype=np.float64)
    filters = np.asarray(filters, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if inputs.ndim != 3 or filters.ndim != 4 or filters.shape[1] != inputs.shape[0]:
        raise ShapeMismatch(
            f"conv stage got input {inputs.shape}, filters {filters.shape}"
        )
    if filters.shape[-1] % 2 != 1 or filters.shape[-1] != filters.shape[-2]:
        raise ValidationError(f"patch must be square and odd, got {filters.shape[-2:]}")
    pre, _ = _conv_forward(inputs[None], filters, bias)
    return pre[0]


def maxpool2(x):
    """Single-sample 2x2/stride-2 max pooling (K,H,W) -> (K,H/2,W/2)."""
    pooled, _ = _maxpool2_forward(np.asarray(x, dtype=np.float64)[None])
    return pooled[0]


# ---------------------------------------------------------------------------
# full network

_TOWERS = ("w1", "w2", "w3")


@dataclass
class _StageCache:
    pat: np.ndarray
    pre: np.ndarray
    pool_idx: np.ndarray
    in_shape: tuple


@dataclass
class CnnCache:
    """Intermediates retained for the backward pass (one forward call)."""

    version: int
    batch: int
    stages: dict = field(default_factory=dict)  # tower -> [_StageCache, ...]
    flats: dict = field(default_factory=dict)  # tower -> (B, flat_dim)

    def relu_masks(self):
        """tower -> list of boolean pre-activation sign masks (for kink checks)."""
        return {
            t: [s.pre > 0 for s in stages] for t, stages in self.stages.items()
        }

    def pool_choices(self):
        return {t: [s.pool_idx for s in stages] for t, stages in self.stages.items()}


def _tower_tensors(params, tower):
    """Stage (filters, bias) pairs seen by one tower, honoring the tying."""
    arch = params.arch
    out = []
    for l in range(1, arch.n_stages + 1):
        p = 1 if tower == "w1" else 2
        filt = params.tensors[f"stage{l}.pathway{p}.filters"]
        if tower == "w3" and l == 1:
            filt = params.w3_stage1_filters
        out.append((filt, params.tensors[f"stage{l}.pathway{p}.bias"]))
    return out


def forward_batch(windows, params, need_cache=False):
    """Run the three towers on a batch of windows.

    windows: (B, tau, side, side) array, frames oldest to newest.
    Returns (w1, w2, w3, cache); each w is (B, r).
    """
    arch = params.arch
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 4 or windows.shape[1:] != (arch.tau, arch.input_side, arch.input_side):
        raise ShapeMismatch(
            f"windows shaped {windows.shape}, architecture wants "
            f"(B, {arch.tau}, {arch.input_side}, {arch.input_side})"
        )
    cache = CnnCache(version=params.version, batch=windows.shape[0]) if need_cache else None
    heads = {"w1": params.tensors["head.A1"], "w2": params.tensors["head.A2"],
             "w3": params.head_a3}
    outputs = {}
    for tower in _TOWERS:
        x = windows
        stage_caches = []
        for filt, bias in _tower_tensors(params, tower):
            in_shape = x.shape
            pre, pat = _conv_forward(x, filt, bias)
            act = rectify(pre)
            x, idx = _maxpool2_forward(act)
            if need_cache:
                stage_caches.append(_StageCache(pat=pat, pre=pre, pool_idx=idx,
                                                in_shape=in_shape))
        flat = x.reshape(x.shape[0], -1)
        outputs[tower] = flat @ heads[tower].T
        if need_cache:
            cache.stages[tower] = stage_caches
            cache.flats[tower] = flat
    return outputs["w1"], outputs["w2"], outputs["w3"], cache


def backward_batch(params, cache, dw1, dw2, dw3):
    """Accumulate parameter gradients for a batch; tied tensors sum all towers.

    dw*: (B, r) upstream gradients.  Returns {name: gradient array} matching
    the parameter storage (so the w3 stage-1 contribution arrives transposed
    into the w2 storage and the A3 contribution lands on A2).
    """
    if cache is None:
        raise StaleCache("backward needs the cache from a forward call")
    if cache.version != params.version:
        raise StaleCache(
            f"cache built at parameter version {cache.version}, "
            f"parameters now at {params.version}"
        )
    arch = params.arch
    grads = {name: np.zeros(arch.tensor_shape(name)) for name in params.names()}
    upstream = {"w1": np.atleast_2d(dw1), "w2": np.atleast_2d(dw2), "w3": np.atleast_2d(dw3)}
    head_of = {"w1": "head.A1", "w2": "head.A2", "w3": "head.A2"}
    for tower in _TOWERS:
        dw = np.asarray(upstream[tower], dtype=np.float64)
        flat = cache.flats[tower]
        head = params.tensors[head_of[tower]]
        grads[head_of[tower]] += dw.T @ flat
        dflat = dw @ head
        tensors = _tower_tensors(params, tower)
        fs = arch.feature_side
        dx = dflat.reshape(cache.batch, arch.filters[-1], fs, fs)
        for l in range(arch.n_stages, 0, -1):
            st = cache.stages[tower][l - 1]
            act_shape = st.pre.shape
            dact = _maxpool2_backward(dx, st.pool_idx, act_shape)
            dpre = dact * (st.pre > 0)
            filt, _ = tensors[l - 1]
            dg, db, dx = _conv_backward(dpre, st.pat, filt, st.in_shape, need_dx=(l > 1))
            p = 1 if tower == "w1" else 2
            if tower == "w3" and l == 1:
                # gradient w.r.t. the transposed view accumulates transposed
                grads["stage1.pathway2.filters"] += np.swapaxes(dg, -1, -2)
            else:
                grads[f"stage{l}.pathway{p}.filters"] += dg
            grads[f"stage{l}.pathway{p}.bias"] += db
    return grads


def cnn_forward(window, params):
    """Single-window forward: FrameWindow -> (DynamicsWeights, cache)."""
    if not isinstance(window, FrameWindow):
        raise ShapeMismatch("cnn_forward expects a FrameWindow")
    arch = params.arch
    if window.tau != arch.tau or window.grid.n != arch.input_side:
        raise ShapeMismatch(
            f"window (tau={window.tau}, n={window.grid.n}) does not match "
            f"architecture (tau={arch.tau}, side={arch.input_side})"
        )
    stack = window.stack().reshape(1, arch.tau, arch.input_side, arch.input_side)
    w1, w2, w3, cache = forward_batch(stack, params, need_cache=True)
    return DynamicsWeights(w1=w1[0], w2=w2[0], w3=w3[0]), cache


def cnn_backward(params, cache, dw1, dw2, dw3):
    """Single-window backward; accepts (r,) or (B, r) upstream gradients."""
    return backward_batch(params, cache, dw1, dw2, dw3)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def init_adam_state(params):
    zeros = lambda: {k: np.zeros_like(v) for k, v in params.tensors.items()}
    return AdamState(m=zeros(), v=zeros(), step=0)


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update with bias correction; tied storage updates once."""
    if sorted(grads) != sorted(params.names()):
        raise ShapeMismatch("gradient keys do not match parameter names")
    state.step += 1
    t = state.step
    for name in params.names():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        params.tensors[name] -= lr * mhat / (np.sqrt(vhat) + eps)
    params.version += 1
    return params, state
