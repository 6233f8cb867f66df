"""Image encoder, volume-to-volume U-Net with feature fusion, and normal refiner.

Channel lists and strides follow the reference architecture table at
``scale_divisor`` 1 (input volume 128x192x128, image 192x128).  Larger
divisors shrink every spatial extent; encoder levels whose extents would stop
being integral are dropped, so the bottleneck stays a proper grid.

Tensor layout is channels-first with a batch axis: images ``(N, C, H, W)``,
volumes ``(N, C, X, Y, Z)``, where ``H = Y`` and ``W = X``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ParameterStore,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    conv2d,
    conv3d,
    conv_output_size,
    conv_transpose_output_size,
    leaky_relu,
    sigmoid,
    tanh,
    transposed_conv2d,
    transposed_conv3d,
)
from .layers import (
    LRELU_SLOPE,
    ModulationPair,
    depth_to_normal,
    project_depth,
    project_silhouette,
    upsample2x,
    vft_apply,
    vft_modulators,
)

FUSION_MODES = ("multi_scale", "finest_only", "coarsest_only", "latent_concat")
FULL_VOLUME = (128, 192, 128)
MAX_LEVELS = 5
IMAGE_CHANNELS = 3
SEMANTIC_CHANNELS = 3


@dataclass(frozen=True)
class NetworkSpec:
    scale_divisor: int = 1
    g_channels: tuple = (8, 16, 32, 64, 128)
    h_channels: tuple = (8, 16, 32, 64, 128)
    h_out_channels: int = 4
    r_channels: tuple = (16, 32, 32, 32, 32)
    r_decoder_channels: tuple = (32, 32, 32, 16, 8)
    fusion_mode: str = "multi_scale"

    def __post_init__(self):
        d = self.scale_divisor
        if d < 1 or d & (d - 1):
            raise ValueError(f"scale_divisor must be a power of two >= 1, got {d}")
        if any(e % d for e in FULL_VOLUME):
            raise ValueError(f"scale_divisor {d} does not divide the volume extents {FULL_VOLUME}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if list(self.g_channels) != list(self.h_channels):
            raise ValueError("image and volume encoders need matching channels for fusion")

    @property
    def volume_dims(self) -> tuple[int, int, int]:
        return tuple(e // self.scale_divisor for e in FULL_VOLUME)

    @property
    def image_dims(self) -> tuple[int, int]:
        X, Y, _ = self.volume_dims
        return (Y, X)

    @property
    def refined_dims(self) -> tuple[int, int]:
        H, W = self.image_dims
        return (2 * H, 2 * W)

    @staticmethod
    def _levels(extents) -> int:
        n = 0
        while n < MAX_LEVELS and all(e % (2 ** (n + 1)) == 0 for e in extents):
            n += 1
        return n

    @property
    def levels(self) -> int:
        """Encoder depth shared by the image and volume encoders (the VFT level count)."""
        return self._levels(self.volume_dims)

    @property
    def vft_levels(self) -> tuple[int, ...]:
        """1-based encoder levels that receive feature modulation."""
        L = self.levels
        return {
            "multi_scale": tuple(range(1, L + 1)),
            "finest_only": (1,),
            "coarsest_only": (L,),
            "latent_concat": (),
        }[self.fusion_mode]

    @property
    def refiner_levels(self) -> int:
        return self._levels(self.refined_dims)


@dataclass
class ForwardOutputs:
    V_o: Tensor      # (N, 1, X, Y, Z), sigmoid occupancy
    S_fv: Tensor     # (N, H, W)
    S_sv: Tensor     # (N, Y, Z)
    D: Tensor        # (N, H, W)
    N_raw: Tensor    # (N, 3, H, W)
    N: Tensor        # (N, 3, 2H, 2W), tanh head


@dataclass
class Network:
    spec: NetworkSpec
    params: ParameterStore = field(default_factory=ParameterStore)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


# -- construction ---------------------------------------------------------------

def _uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


def _add_conv(store, rng, name, c_in, c_out, kernel, dims, dtype, transposed=False, stride=1, bias_value=0.0):
    k = (kernel,) * dims
    shape = (c_in, c_out) + k if transposed else (c_out, c_in) + k
    fan_in = c_in * kernel ** dims / (stride ** dims if transposed else 1)
    store.add(f"{name}/w", _uniform(rng, shape, fan_in, dtype))
    store.add(f"{name}/b", np.full(c_out, bias_value, dtype))


def _decoder_channels(enc: list[int], final: int) -> list[int]:
    return enc[-2::-1] + [final]


def build(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Network:
    """Initialise all parameters (uniform in +-sqrt(1/fan_in), zero biases).

    The alpha branches of the modulators start with bias 1 so that fusion
    begins near the identity.
    """
    rng = np.random.default_rng(seed)
    net = Network(spec)
    P = net.params
    L = spec.levels
    if L < 1:
        raise ValueError(f"scale_divisor {spec.scale_divisor} leaves no encoder level")
    enc = list(spec.h_channels[:L])

    c = IMAGE_CHANNELS + SEMANTIC_CHANNELS
    for k in range(L):
        _add_conv(P, rng, f"g/enc{k + 1}", c, spec.g_channels[k], 4, 2, dtype)
        c = spec.g_channels[k]

    c = SEMANTIC_CHANNELS
    for k in range(L):
        _add_conv(P, rng, f"h/enc{k + 1}", c, enc[k], 4, 3, dtype)
        c = enc[k]
    for k in range(L):
        ch = enc[k]
        _add_conv(P, rng, f"h/vft{k + 1}/alpha", ch, ch, 3, 2, dtype, bias_value=1.0)
        _add_conv(P, rng, f"h/vft{k + 1}/beta", ch, ch, 3, 2, dtype)
    if spec.fusion_mode == "latent_concat":
        H, W = spec.image_dims
        flat = spec.g_channels[L - 1] * (H >> L) * (W >> L)
        cb = enc[-1]
        P.add("h/latent/image/w", _uniform(rng, (flat, cb), flat, dtype))
        P.add("h/latent/image/b", np.zeros(cb, dtype))
        _add_conv(P, rng, "h/latent/proj", 2 * cb, cb, 1, 3, dtype)
    dec = _decoder_channels(enc, spec.h_out_channels)
    c = enc[-1]
    for i, co in enumerate(dec):
        _add_conv(P, rng, f"h/dec{i + 1}", c, co, 4, 3, dtype, transposed=True, stride=2)
        c = co + (enc[L - 2 - i] if i < L - 1 else 0)
    _add_conv(P, rng, "h/out", c + SEMANTIC_CHANNELS, 1, 3, 3, dtype)

    Lr = spec.refiner_levels
    renc = list(spec.r_channels[:Lr])
    rdec = list(spec.r_decoder_channels[MAX_LEVELS - Lr:])
    r_in = 2 * IMAGE_CHANNELS + 3  # image, semantic map, projected normals
    c = r_in
    for k in range(Lr):
        _add_conv(P, rng, f"r/enc{k + 1}", c, renc[k], 4, 2, dtype)
        c = renc[k]
    for i, co in enumerate(rdec):
        _add_conv(P, rng, f"r/dec{i + 1}", c, co, 4, 2, dtype, transposed=True, stride=2)
        c = co + (renc[Lr - 2 - i] if i < Lr - 1 else 0)
    _add_conv(P, rng, "r/out", c + r_in, 3, 3, 2, dtype)
    return net


# -- shape audit ------------------------------------------------------------------

def trace_shapes(spec: NetworkSpec) -> list[tuple[str, str, tuple]]:
    """Per-layer output shapes (channels last, no batch) from conv arithmetic alone."""
    out = []
    L, Lr = spec.levels, spec.refiner_levels
    H, W = spec.image_dims
    for k in range(L):
        H, W = conv_output_size(H, 4, 2, 1), conv_output_size(W, 4, 2, 1)
        out.append(("G", f"enc{k + 1}", (H, W, spec.g_channels[k])))
    vol = spec.volume_dims
    enc = list(spec.h_channels[:L])
    for k in range(L):
        vol = tuple(conv_output_size(e, 4, 2, 1) for e in vol)
        out.append(("H", f"enc{k + 1}", vol + (enc[k],)))
    for i, co in enumerate(_decoder_channels(enc, spec.h_out_channels)):
        vol = tuple(conv_transpose_output_size(e, 4, 2, 1) for e in vol)
        out.append(("H", f"dec{i + 1}", vol + (co,)))
    vol = tuple(conv_output_size(e, 3, 1, 1) for e in vol)
    out.append(("H", "out", vol + (1,)))
    H, W = spec.refined_dims
    renc = list(spec.r_channels[:Lr])
    for k in range(Lr):
        H, W = conv_output_size(H, 4, 2, 1), conv_output_size(W, 4, 2, 1)
        out.append(("R", f"enc{k + 1}", (H, W, renc[k])))
    for i, co in enumerate(spec.r_decoder_channels[MAX_LEVELS - Lr:]):
        H, W = conv_transpose_output_size(H, 4, 2, 1), conv_transpose_output_size(W, 4, 2, 1)
        out.append(("R", f"dec{i + 1}", (H, W, co)))
    H, W = conv_output_size(H, 3, 1, 1), conv_output_size(W, 3, 1, 1)
    out.append(("R", "out", (H, W, 3)))
    return out


def _record(trace, net, label, t: Tensor):
    if trace is not None:
        s = t.shape[1:]
        trace.append((net, label, tuple(s[1:]) + (s[0],)))


# -- forward --------------------------------------------------------------------

def _conv(net, name, x, stride, padding, dims, transposed=False):
    w, b = net[f"{name}/w"], net[f"{name}/b"]
    if transposed:
        fn = transposed_conv3d if dims == 3 else transposed_conv2d
    else:
        fn = conv3d if dims == 3 else conv2d
    return fn(x, w, b, stride, padding)


def encode_image(net: Network, image, semantic_map, trace=None) -> list[Tensor]:
    x = concat([as_tensor(image), as_tensor(semantic_map)], axis=1)
    feats = []
    for k in range(net.spec.levels):
        x = leaky_relu(_conv(net, f"g/enc{k + 1}", x, 2, 1, 2), LRELU_SLOPE)
        _record(trace, "G", f"enc{k + 1}", x)
        feats.append(x)
    return feats


def modulators(net: Network, level: int, feature_map: Tensor, slice_shape) -> ModulationPair:
    p = f"h/vft{level}"
    return vft_modulators(feature_map, net[f"{p}/alpha/w"], net[f"{p}/alpha/b"],
                          net[f"{p}/beta/w"], net[f"{p}/beta/b"], slice_shape=slice_shape)


def _latent_fuse(net: Network, bottleneck: Tensor, image_feature: Tensor) -> Tensor:
    n = image_feature.shape[0]
    flat = image_feature.reshape(n, -1)
    code = leaky_relu(flat @ net["h/latent/image/w"] + net["h/latent/image/b"], LRELU_SLOPE)
    code = code.reshape(code.shape + (1, 1, 1))
    ones = np.ones((1, 1) + bottleneck.shape[2:], dtype=bottleneck.dtype)
    fused = concat([bottleneck, code * ones], axis=1)
    return leaky_relu(_conv(net, "h/latent/proj", fused, 1, 0, 3), LRELU_SLOPE)


def volume_to_volume(net: Network, semantic_volume, image_feats: list[Tensor], trace=None) -> Tensor:
    """Volume U-Net with fusion in the encoder; returns sigmoid occupancy ``(N, 1, X, Y, Z)``."""
    spec = net.spec
    vs = as_tensor(semantic_volume)
    fuse_at = set(spec.vft_levels)
    x = vs
    skips = []
    for k in range(1, spec.levels + 1):
        x = leaky_relu(_conv(net, f"h/enc{k}", x, 2, 1, 3), LRELU_SLOPE)
        _record(trace, "H", f"enc{k}", x)
        if k in fuse_at:
            x = vft_apply(x, modulators(net, k, image_feats[k - 1], x.shape[2:4]))
        skips.append(x)
    if spec.fusion_mode == "latent_concat":
        x = _latent_fuse(net, x, image_feats[-1])
    L = spec.levels
    for i in range(L):
        x = leaky_relu(_conv(net, f"h/dec{i + 1}", x, 2, 1, 3, transposed=True), LRELU_SLOPE)
        _record(trace, "H", f"dec{i + 1}", x)
        if i < L - 1:
            x = concat([x, skips[L - 2 - i]], axis=1)
    x = concat([x, vs], axis=1)
    out = sigmoid(_conv(net, "h/out", x, 1, 1, 3))
    _record(trace, "H", "out", out)
    return out


def project_normals(occupancy: Tensor) -> tuple[Tensor, Tensor]:
    """Front depth ``(N, H, W)`` and masked normals ``(N, 3, H, W)`` of ``(N, X, Y, Z)`` occupancy.

    A pixel counts as foreground when its depth is below ``Z``; normals next
    to background are zero.
    """
    occ = as_tensor(occupancy)
    D = project_depth(occ)
    return D, depth_to_normal(D, background_level=float(occ.shape[-1]))


def refine(net: Network, image, semantic_map, normals_raw, trace=None) -> Tensor:
    """Refinement U-Net on ``concat(I, M_s, N_raw)`` upsampled 2x; tanh output ``(N, 3, 2H, 2W)``."""
    spec = net.spec
    x0 = concat([upsample2x(as_tensor(image)), upsample2x(as_tensor(semantic_map)),
                 upsample2x(as_tensor(normals_raw))], axis=1)
    Lr = spec.refiner_levels
    x = x0
    skips = []
    for k in range(1, Lr + 1):
        x = leaky_relu(_conv(net, f"r/enc{k}", x, 2, 1, 2), LRELU_SLOPE)
        _record(trace, "R", f"enc{k}", x)
        skips.append(x)
    for i in range(Lr):
        x = leaky_relu(_conv(net, f"r/dec{i + 1}", x, 2, 1, 2, transposed=True), LRELU_SLOPE)
        _record(trace, "R", f"dec{i + 1}", x)
        if i < Lr - 1:
            x = concat([x, skips[Lr - 2 - i]], axis=1)
    out = tanh(_conv(net, "r/out", concat([x, x0], axis=1), 1, 1, 2))
    _record(trace, "R", "out", out)
    return out


def check_inputs(spec: NetworkSpec, image, semantic_map, semantic_volume) -> None:
    H, W = spec.image_dims
    X, Y, Z = spec.volume_dims
    shapes = {"image": np.shape(image), "semantic map": np.shape(semantic_map),
              "semantic volume": np.shape(semantic_volume)}
    want = {"image": (IMAGE_CHANNELS, H, W), "semantic map": (SEMANTIC_CHANNELS, H, W),
            "semantic volume": (SEMANTIC_CHANNELS, X, Y, Z)}
    batch = {s[0] for s in shapes.values() if len(s)}
    for key, s in shapes.items():
        if len(s) != len(want[key]) + 1 or tuple(s[1:]) != want[key]:
            raise ShapeError(f"{key} has shape {s}; expected (N,) + {want[key]} at divisor {spec.scale_divisor}")
    if len(batch) != 1:
        raise ShapeError(f"batch extents differ: {sorted(batch)}")


def forward(net: Network, image, semantic_map, semantic_volume, trace: list | None = None) -> ForwardOutputs:
    """Full differentiable pass from ``(I, M_s, V_s)`` to occupancy and refined normals."""
    check_inputs(net.spec, image, semantic_map, semantic_volume)
    feats = encode_image(net, image, semantic_map, trace)
    V_o = volume_to_volume(net, semantic_volume, feats, trace)
    occ = V_o[:, 0]
    S_fv = project_silhouette(occ, "front")
    S_sv = project_silhouette(occ, "side")
    D, N_raw = project_normals(occ)
    N = refine(net, image, semantic_map, N_raw, trace)
    return ForwardOutputs(V_o, S_fv, S_sv, D, N_raw, N)


def parameter_groups(net: Network) -> dict[str, list]:
    return {k: net.params.select(f"{k}/") for k in ("g", "h", "r")}


def to_batch(items, dtype=np.float32) -> dict[str, np.ndarray]:
    """Stack corpus items into channels-first network inputs and targets."""
    return {
        "image": np.stack([np.transpose(it.image, (2, 0, 1)) for it in items]).astype(dtype),
        "semantic_map": np.stack([np.transpose(it.semantic_map, (2, 0, 1)) for it in items]).astype(dtype),
        "semantic_volume": np.stack([np.moveaxis(it.semantic_volume, -1, 0) for it in items]).astype(dtype),
        "occupancy": np.stack([it.occupancy for it in items]).astype(dtype),
        "sil_front": np.stack([it.sil_front for it in items]).astype(dtype),
        "sil_side": np.stack([it.sil_side for it in items]).astype(dtype),
        "normal": np.stack([np.transpose(it.normal, (2, 0, 1)) for it in items]).astype(dtype),
    }
