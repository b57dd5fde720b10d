"""DeepONet, FNO, and parameter-embedded FNO forward maps.

Weights are containers of autodiff leaves; every forward pass is a pure
function of (weights, inputs) built from the engine ops, so gradients flow
to all parameters and, when asked, through the voltage map.

Spectral convolutions keep k_t non-negative temporal frequencies and k_r
signed radial frequencies (fftfreq order); the mirrored half-spectrum is
filled by conjugation so outputs are real to round-off. The normalized
coordinate channels run 0 -> 1 across the unpadded grid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import CellParameters
from .solver import Field2D, terminal_voltage


def _uniform(rng, fan_in, fan_out, shape):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _affine_pair(rng, dim_in, dim_out):
    w = ad.leaf(_uniform(rng, dim_in, dim_out, (dim_in, dim_out)))
    b = ad.leaf(np.zeros(dim_out))
    return w, b


def _spectral_leaf(rng, k_r, k_t, d_in, d_out):
    scale = 1.0 / (d_in * np.sqrt(k_r * k_t))
    re = rng.standard_normal((k_r, k_t, d_in, d_out))
    im = rng.standard_normal((k_r, k_t, d_in, d_out))
    return ad.leaf(scale * (re + 1j * im))


def kept_rows(k_r: int, H: int) -> np.ndarray:
    """Signed row frequencies in fftfreq order: {0..ceil(k/2)-1} u {-floor(k/2)..-1}."""
    return np.array(list(range((k_r + 1) // 2)) + list(range(H - k_r // 2, H)))


def spectral_conv(v: Tensor, modes: Tensor, fused: bool = True) -> Tensor:
    """F^-1(R . truncate(F v)) with Hermitian completion; output is real.

    The fused half-spectrum path and the composed complex-op path are
    numerically identical for real inputs; the latter stays available as the
    correctness reference.
    """
    B, d, H, W = v.data.shape
    k_r, k_t = modes.data.shape[:2]
    if k_r > H // 2 or k_t > W // 2:
        raise ValueError(f"kept modes ({k_r},{k_t}) exceed Nyquist counts ({H // 2},{W // 2})")
    rows = kept_rows(k_r, H)
    cols = np.arange(k_t)
    if fused:
        return ad.spectral_mix(modes, v, rows, cols)
    block = ad.mode_gather(ad.fft2(v), rows, cols)
    mixed = ad.complex_mode_mul(modes, block)
    return ad.real_part(ad.ifft2(ad.mode_scatter(mixed, rows, cols, (H, W))))


# ------------------------------------------------------------------- inputs

@dataclass
class InputImage:
    channels: np.ndarray          # (4, n_r + p_r, n_t + p_t), zero margins
    pad: tuple[int, int]
    r_axis: np.ndarray
    t_axis: np.ndarray


def assemble_input(profile, c0, c_max: float, pad: tuple[int, int],
                   r_axis=None) -> InputImage:
    """Four-channel image [I(t), c0(r), r-coord, t-coord], scaled and zero-padded.

    The profile supplies the t grid (current scaled to [-1,1] by 1.5C) and c0
    the r grid (scaled to [0,1] by c_max); coordinate channels are the
    normalized grid indices so the last unpadded cell reads (1,1).
    """
    i_scaled = np.asarray(profile.i, dtype=float) / profile.c_rate_bound
    c0 = np.asarray(getattr(c0, "c", c0), dtype=float) / c_max
    n_r, n_t = c0.size, i_scaled.size
    p_r, p_t = pad
    ch = np.zeros((4, n_r + p_r, n_t + p_t))
    ch[0, :n_r, :n_t] = i_scaled[None, :]
    ch[1, :n_r, :n_t] = c0[:, None]
    ch[2, :n_r, :n_t] = np.linspace(0.0, 1.0, n_r)[:, None]
    ch[3, :n_r, :n_t] = np.linspace(0.0, 1.0, n_t)[None, :]
    if r_axis is None:
        r_axis = np.arange(n_r, dtype=float)
    return InputImage(channels=ch, pad=(p_r, p_t), r_axis=np.asarray(r_axis),
                      t_axis=np.asarray(profile.t, dtype=float))


def stack_images(images: list[InputImage]) -> np.ndarray:
    return np.stack([im.channels for im in images])


# ---------------------------------------------------------------------- FNO

@dataclass
class FnoWeights:
    lift: tuple[Tensor, Tensor]                 # 4 -> d channel affine
    blocks: list[tuple[Tensor, Tensor, Tensor]]  # (spectral modes, W, bias) per layer
    proj: tuple[Tensor, Tensor]                 # d -> 1
    width: int
    modes: tuple[int, int]
    pad: tuple[int, int]

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [("lift.w", self.lift[0]), ("lift.b", self.lift[1])]
        for l, (r, w, b) in enumerate(self.blocks):
            out += [(f"block{l}.modes", r), (f"block{l}.w", w), (f"block{l}.b", b)]
        out += [("proj.w", self.proj[0]), ("proj.b", self.proj[1])]
        return out


def init_fno(rng, width: int = 32, depth: int = 6, modes: tuple[int, int] = (10, 10),
             pad: tuple[int, int] = (2, 5), in_channels: int = 4) -> FnoWeights:
    lift_w = ad.leaf(_uniform(rng, in_channels, width, (width, in_channels)))
    lift_b = ad.leaf(np.zeros(width))
    blocks = []
    for _ in range(depth):
        r = _spectral_leaf(rng, modes[0], modes[1], width, width)
        w = ad.leaf(_uniform(rng, width, width, (width, width)))
        b = ad.leaf(np.zeros(width))
        blocks.append((r, w, b))
    proj_w = ad.leaf(_uniform(rng, width, 1, (1, width)))
    proj_b = ad.leaf(np.zeros(1))
    return FnoWeights(lift=(lift_w, lift_b), blocks=blocks, proj=(proj_w, proj_b),
                      width=width, modes=modes, pad=pad)


def _fno_stack(w: FnoWeights, v: Tensor) -> Tensor:
    for r, wm, b in w.blocks:
        v = ad.gelu(ad.add(ad.conv1x1(v, wm, b), spectral_conv(v, r)))
    return v


def _lift(pair, x: Tensor) -> Tensor:
    return ad.conv1x1(x, pair[0], pair[1])


def fno_forward(w: FnoWeights, x) -> Tensor:
    """x: InputImage or (B,4,H,W) array/Tensor -> (B, n_r, n_t) scaled field."""
    x = _as_batch(x)
    v = _fno_stack(w, _lift(w.lift, x))
    out = ad.crop2d(ad.conv1x1(v, w.proj[0], w.proj[1]), w.pad)
    return ad.sum_tensor(out, axes=1)  # squeeze the singleton channel


def _as_batch(x) -> Tensor:
    if isinstance(x, InputImage):
        x = x.channels[None]
    if isinstance(x, np.ndarray):
        if x.ndim == 3:
            x = x[None]
        return Tensor(np.asarray(x, dtype=float))
    return x


# ------------------------------------------------------------------- PE-FNO

@dataclass
class PefnoWeights:
    core: FnoWeights
    embed_conv: tuple[Tensor, Tensor]           # 1x1 channel mix
    embed_dw: Tensor                            # depthwise 3x3 kernels (d,3,3)
    embed_modes: Tensor                         # one spectral layer
    param_mlp: list[tuple[Tensor, Tensor]]      # 2 affine layers, hidden width 32

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = self.core.parameters()
        out += [("embed.conv.w", self.embed_conv[0]), ("embed.conv.b", self.embed_conv[1]),
                ("embed.dw", self.embed_dw), ("embed.modes", self.embed_modes)]
        for l, (wm, b) in enumerate(self.param_mlp):
            out += [(f"pemlp{l}.w", wm), (f"pemlp{l}.b", b)]
        return out


def init_pefno(rng, width: int = 64, depth: int = 8, modes: tuple[int, int] = (5, 20),
               pad: tuple[int, int] = (2, 5), pe_width: int = 32,
               n_params: int = 2) -> PefnoWeights:
    core = init_fno(rng, width=width, depth=depth, modes=modes, pad=pad)
    conv_w = ad.leaf(_uniform(rng, width, width, (width, width)))
    conv_b = ad.leaf(np.zeros(width))
    dw = ad.leaf(_uniform(rng, 9, 9, (width, 3, 3)))
    emb_modes = _spectral_leaf(rng, modes[0], modes[1], width, width)
    mlp = [_affine_pair(rng, n_params, pe_width), _affine_pair(rng, pe_width, width)]
    return PefnoWeights(core=core, embed_conv=(conv_w, conv_b), embed_dw=dw,
                        embed_modes=emb_modes, param_mlp=mlp)


def pe_modulate(w: PefnoWeights, lifted: Tensor, params_norm) -> Tensor:
    """(conv1x1 + dw3x3 + one spectral layer)(lifted), modulated channel-wise
    by the MLP image of the normalized (log D, log R) pair."""
    if not isinstance(params_norm, Tensor):
        params_norm = Tensor(np.atleast_2d(np.asarray(params_norm, dtype=float)))
    h = ad.gelu(ad.affine(params_norm, *w.param_mlp[0]))
    gate = ad.affine(h, *w.param_mlp[1])            # (B, d)
    branches = ad.add(ad.add(ad.conv1x1(lifted, *w.embed_conv),
                             ad.dwconv3x3(lifted, w.embed_dw)),
                      spectral_conv(lifted, w.embed_modes))
    B, d, H, W = lifted.data.shape
    gate4 = ad.broadcast_axis(ad.broadcast_axis(gate, 2, H), 3, W)
    return ad.mul(branches, gate4)


def pefno_forward(w: PefnoWeights, x, params_norm) -> Tensor:
    x = _as_batch(x)
    v = pe_modulate(w, _lift(w.core.lift, x), params_norm)
    v = _fno_stack(w.core, v)
    out = ad.crop2d(ad.conv1x1(v, w.core.proj[0], w.core.proj[1]), w.core.pad)
    return ad.sum_tensor(out, axes=1)


# ----------------------------------------------------------------- DeepONet

@dataclass
class DeepOnetWeights:
    branch: list[tuple[Tensor, Tensor]]
    trunk: list[tuple[Tensor, Tensor]]
    p: int

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for tag, layers in (("branch", self.branch), ("trunk", self.trunk)):
            for l, (w, b) in enumerate(layers):
                out += [(f"{tag}{l}.w", w), (f"{tag}{l}.b", b)]
        return out


def init_residual_mlp(rng, dim_in: int, width: int, depth: int, dim_out: int):
    """depth counts affine layers: lift + residual pairs (+ one odd layer) + head."""
    if depth < 2:
        raise ValueError(f"depth must be >= 2 affine layers, got {depth}")
    dims = [(dim_in, width)]
    dims += [(width, width)] * (depth - 2)
    dims += [(width, dim_out)]
    return [_affine_pair(rng, a, b) for a, b in dims]


def residual_mlp_forward(layers, x: Tensor) -> Tensor:
    h = ad.gelu(ad.affine(x, *layers[0]))
    body = layers[1:-1]
    i = 0
    while i + 1 < len(body):
        z = ad.gelu(ad.affine(h, *body[i]))
        z = ad.gelu(ad.affine(z, *body[i + 1]))
        h = ad.add(h, z)
        i += 2
    if i < len(body):
        h = ad.gelu(ad.affine(h, *body[i]))
    return ad.affine(h, *layers[-1])


def init_deeponet(rng, p: int = 16, width: int = 500, depth: int = 11,
                  branch_in: int = 95, trunk_in: int = 20) -> DeepOnetWeights:
    return DeepOnetWeights(branch=init_residual_mlp(rng, branch_in, width, depth, p),
                           trunk=init_residual_mlp(rng, trunk_in, width, depth, p),
                           p=p)


TRUNK_FREQS = (1.0, 2.0, 4.0, 8.0, 16.0)


def trunk_features(queries: np.ndarray) -> np.ndarray:
    """Fixed 20-d sinusoidal lift of (r,t) queries normalized to [0,1]^2."""
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    feats = []
    for col in range(2):
        for k in TRUNK_FREQS:
            feats.append(np.sin(k * np.pi * q[:, col]))
            feats.append(np.cos(k * np.pi * q[:, col]))
    return np.stack(feats, axis=1)


def branch_input(profile, sto0: float, n_sensors: int = 94) -> np.ndarray:
    """Scaled current at uniform sensors plus the initial stoichiometry."""
    sensors = np.linspace(0.0, profile.horizon, n_sensors)
    return np.concatenate([profile.eval(sensors) / profile.c_rate_bound, [sto0]])


def deeponet_forward(w: DeepOnetWeights, branch_in, queries) -> Tensor:
    """Coefficient-basis sum <beta(a), tau(r,t)> -> (B, n_queries)."""
    b = np.atleast_2d(np.asarray(branch_in, dtype=float))
    if b.shape[1] != w.branch[0][0].data.shape[0]:
        raise ValueError(f"branch input dim {b.shape[1]} != {w.branch[0][0].data.shape[0]}")
    beta = residual_mlp_forward(w.branch, Tensor(b))
    tau = residual_mlp_forward(w.trunk, Tensor(trunk_features(queries)))
    return ad.matmul(beta, ad.transpose(tau))


def grid_queries(n_r: int, n_t: int) -> np.ndarray:
    """All (r,t) grid points normalized to [0,1]^2, r-major."""
    r = np.linspace(0.0, 1.0, n_r)
    t = np.linspace(0.0, 1.0, n_t)
    rr, tt = np.meshgrid(r, t, indexing="ij")
    return np.stack([rr.ravel(), tt.ravel()], axis=1)


# ------------------------------------------------------------------ voltage

def predict_voltage(field_n, field_p, profile, cell: CellParameters) -> Tensor:
    """Voltage trace from denormalized fields; differentiable when fields are Tensors."""
    fn = field_n if isinstance(field_n, Tensor) else Tensor(np.asarray(_vals(field_n), dtype=float))
    fp = field_p if isinstance(field_p, Tensor) else Tensor(np.asarray(_vals(field_p), dtype=float))
    sto_n = _last_row(fn) * (1.0 / cell.negative.c_max)
    sto_p = _last_row(fp) * (1.0 / cell.positive.c_max)
    i_axis = profile.eval(np.linspace(0.0, profile.horizon, sto_n.data.shape[-1]))
    return terminal_voltage(sto_n, sto_p, i_axis, cell, xp=ad)


def _vals(f):
    return f.values if isinstance(f, Field2D) else f


def _last_row(f: Tensor) -> Tensor:
    return ad.surface_row(f)
