"""Spatio-temporal DiT blocks for the camera and LiDAR branches.

Camera latents are laid out (frame, view, token, channel) and LiDAR latents
(frame, token, channel). Spatial, cross-view and temporal attention are the
same multi-head primitive applied after a permute/reshape that puts the
attended axis second. Every conditioning pathway ends in an output projection
that starts at zero, so a fresh block is bitwise equal to its unconditioned
path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor
from .layers import linear


@dataclass(frozen=True)
class BlockConfig:
    d_model: int = 8
    heads: int = 2
    d_cap: int = 16
    d_layout: int = 4
    d_ctrl: int = 4
    d_box: int = 8
    d_cond: int = 8
    ctrl_hidden: int = 8

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class ConditionBundle:
    e_cap: np.ndarray                  # (d_cap,)
    z_s: np.ndarray | None = None      # camera: (F, V, Ts, d_layout)
    e_box: np.ndarray | None = None    # (Nb, d_box)
    bev_cond: np.ndarray | None = None  # LiDAR: (F, T, d_cond)


# --------------------------------------------------------------- parameters

def _attn_params(p, prefix, d_q, d_kv, d, rng, zero_out=False):
    s_q, s_kv = 1.0 / np.sqrt(d_q), 1.0 / np.sqrt(d_kv)
    p[prefix + ".q"] = rng.normal(0.0, s_q, (d_q, d))
    p[prefix + ".k"] = rng.normal(0.0, s_kv, (d_kv, d))
    p[prefix + ".v"] = rng.normal(0.0, s_kv, (d_kv, d))
    p[prefix + ".o"] = np.zeros((d, d)) if zero_out else rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))


def _ln_params(p, prefix, d, rng, jitter):
    p[prefix + ".g"] = np.ones(d) + (rng.normal(0.0, 0.1, d) if jitter else 0.0)
    p[prefix + ".b"] = rng.normal(0.0, 0.1, d) if jitter else np.zeros(d)


CAM_COND_OUT = ("cross.o", "ctrl.o")
LIDAR_COND_OUT = ("cross.o", "cn.out0")


def init_cam_block(cfg: BlockConfig, seed: int = 0, zero_cond: bool = True,
                   jitter_norms: bool = False) -> dict:
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    p: dict = {}
    for stage in ("spatial", "view", "time"):
        _ln_params(p, f"ln_{stage}", d, rng, jitter_norms)
        _attn_params(p, f"attn_{stage}", d, d, d, rng)
    _ln_params(p, "ln_cross", d, rng, jitter_norms)
    p["cap_proj"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.d_cap), (cfg.d_cap, d))
    p["zs_proj"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.d_layout), (cfg.d_layout, d))
    _attn_params(p, "cross", d, d, d, rng, zero_out=zero_cond)
    _ln_params(p, "ln_ctrl", d, rng, jitter_norms)
    p["mv_proj"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.d_ctrl), (cfg.d_ctrl, d))
    _attn_params(p, "ctrl", d, d, d, rng, zero_out=zero_cond)
    return p


def init_controlnet(cfg: BlockConfig, seed: int = 0, n_outputs: int = 1,
                    zero_out: bool = True, prefix: str = "cn") -> dict:
    rng = np.random.default_rng(seed)
    p = {
        f"{prefix}.w1": rng.normal(0.0, np.sqrt(2.0 / cfg.d_cond), (cfg.d_cond, cfg.ctrl_hidden)),
        f"{prefix}.b1": rng.normal(0.0, 0.1, cfg.ctrl_hidden),
    }
    for i in range(n_outputs):
        p[f"{prefix}.out{i}"] = (np.zeros((cfg.ctrl_hidden, cfg.d_model)) if zero_out else
                                 rng.normal(0.0, 1.0 / np.sqrt(cfg.ctrl_hidden),
                                            (cfg.ctrl_hidden, cfg.d_model)))
    return p


def init_lidar_block(cfg: BlockConfig, seed: int = 0, zero_cond: bool = True,
                     jitter_norms: bool = False) -> dict:
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    p: dict = {}
    _ln_params(p, "ln_cross", d, rng, jitter_norms)
    p["cap_proj"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.d_cap), (cfg.d_cap, d))
    p["box_proj"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.d_box), (cfg.d_box, d))
    _attn_params(p, "cross", d, d, d, rng, zero_out=zero_cond)
    _attn_params(p, "mhsa", d, d, d, rng)
    p.update(init_controlnet(cfg, seed + 1, zero_out=zero_cond))
    return p


def zero_conditioning(params: dict, keys=CAM_COND_OUT + LIDAR_COND_OUT) -> dict:
    """Copy of ``params`` with every conditioning output projection zeroed."""
    return {k: (np.zeros_like(v) if k in keys else v) for k, v in params.items()}


def bind(tape: Tape, params: dict, trainable: bool = False) -> dict:
    make = tape.leaf if trainable else tape.constant
    return {k: (v if isinstance(v, Tensor) else make(v)) for k, v in params.items()}


# ---------------------------------------------------------------- attention

def attention(xq: Tensor, xkv: Tensor, p: dict, prefix: str, heads: int,
              trace: dict | None = None) -> Tensor:
    """Multi-head attention: xq (B, Nq, Dq), xkv (B, Nk, Dkv) -> (B, Nq, D)."""
    b, nq, _ = xq.shape
    b2, nk, _ = xkv.shape
    if b != b2:
        raise ShapeError(f"attention batch mismatch {xq.shape} vs {xkv.shape}")
    d = p[prefix + ".q"].shape[1]
    dh = d // heads
    q = ad.reshape(linear(xq, p[prefix + ".q"]), (b, nq, heads, dh))
    k = ad.reshape(linear(xkv, p[prefix + ".k"]), (b, nk, heads, dh))
    v = ad.reshape(linear(xkv, p[prefix + ".v"]), (b, nk, heads, dh))
    q = ad.reshape(ad.permute(q, (0, 2, 1, 3)), (b * heads, nq, dh))
    kt = ad.reshape(ad.permute(k, (0, 2, 3, 1)), (b * heads, dh, nk))
    v = ad.reshape(ad.permute(v, (0, 2, 1, 3)), (b * heads, nk, dh))
    probs = ad.softmax_lastdim(ad.mul_scalar(ad.matmul(q, kt), 1.0 / np.sqrt(dh)))
    if trace is not None:
        trace.setdefault(prefix, []).append(probs.value)
    out = ad.matmul(probs, v)
    out = ad.reshape(ad.permute(ad.reshape(out, (b, heads, nq, dh)), (0, 2, 1, 3)), (b, nq, d))
    return linear(out, p[prefix + ".o"])


def _ln(x: Tensor, p: dict, prefix: str) -> Tensor:
    return ad.layer_norm_lastdim(x, p[prefix + ".g"], p[prefix + ".b"])


def _self_attend(x: Tensor, p, prefix, heads, trace, norm: str | None) -> Tensor:
    """Attention over axis -2 of a (..., N, D) tensor, batching the leading axes."""
    *lead, n, d = x.shape
    b = int(np.prod(lead))
    h = _ln(x, p, norm) if norm else x
    h = ad.reshape(h, (b, n, d))
    return ad.reshape(attention(h, h, p, prefix, heads, trace), (*lead, n, d))


def _broadcast_token(tok: Tensor, b: int) -> Tensor:
    """(1, D) -> (b, 1, D) via a ones matmul (no implicit broadcasting)."""
    ones = tok.tape.constant(np.ones((b, 1)))
    return ad.reshape(ad.matmul(ones, tok), (b, 1, tok.shape[1]))


def _const(tape: Tape, x) -> Tensor:
    return x if isinstance(x, Tensor) else tape.constant(np.asarray(x, dtype=np.float64))


def _embed_tokens(tape, x, proj: Tensor, lead: tuple) -> Tensor:
    """Project (..., N, d_in) condition tokens to (prod(lead), N, D)."""
    x = _const(tape, x)
    if tuple(x.shape[:-2]) != tuple(lead):
        raise ShapeError(f"condition tokens {x.shape} do not match host axes {lead}")
    if x.shape[-1] != proj.shape[0]:
        raise ShapeError(f"condition dim {x.shape[-1]} vs projection {proj.shape}")
    b = int(np.prod(lead))
    y = linear(x, proj)
    return ad.reshape(y, (b, x.shape[-2], proj.shape[1]))


def _caption_token(tape, e_cap, proj: Tensor, b: int) -> Tensor:
    e = _const(tape, e_cap)
    if e.shape != (proj.shape[0],):
        raise ShapeError(f"e_cap shape {e.shape} vs expected ({proj.shape[0]},)")
    return _broadcast_token(ad.matmul(ad.reshape(e, (1, proj.shape[0])), proj), b)


# -------------------------------------------------------------------- blocks

def cam_base(z: Tensor, p: dict, cfg: BlockConfig, trace: dict | None = None) -> Tensor:
    """Unconditioned DiT path: spatial, cross-view, temporal attention with residuals."""
    if z.value.ndim != 4 or z.shape[-1] != cfg.d_model:
        raise ShapeError(f"camera latent must be (F, V, T, {cfg.d_model}), got {z.shape}")
    x = ad.add(z, _self_attend(z, p, "attn_spatial", cfg.heads, trace, "ln_spatial"))
    xv = ad.permute(x, (0, 2, 1, 3))  # (F, T, V, D)
    xv = ad.add(xv, _self_attend(xv, p, "attn_view", cfg.heads, trace, "ln_view"))
    xt = ad.permute(xv, (2, 1, 0, 3))  # (V, T, F, D)
    xt = ad.add(xt, _self_attend(xt, p, "attn_time", cfg.heads, trace, "ln_time"))
    return ad.permute(xt, (2, 0, 1, 3))


def stdit_block_cam(z: Tensor, m_v, bundle: ConditionBundle | None, params: dict,
                    cfg: BlockConfig, residual: Tensor | None = None,
                    trace: dict | None = None) -> Tensor:
    """Camera block.

    h_base = DiT(z); out = h_base + CrossAttn(h_base, [e_cap, z_s])
    + CtrlAttn(h_base, M_v) (+ an optional ControlNet residual). ``m_v`` is a
    (F, V, Tm, d_ctrl) control-map embedding; ``None`` uses z_s. With
    ``bundle=None`` only the base path runs.
    """
    p = bind(z.tape, params)
    tape = z.tape
    h = cam_base(z, p, cfg, trace)
    if bundle is not None:
        f, v, t, d = h.shape
        lead = (f, v)
        b = f * v
        q = ad.reshape(_ln(h, p, "ln_cross"), (b, t, d))
        cap = _caption_token(tape, bundle.e_cap, p["cap_proj"], b)
        if bundle.z_s is None:
            raise ShapeError("camera block needs z_s in the condition bundle")
        zs = _embed_tokens(tape, bundle.z_s, p["zs_proj"], lead)
        kv = ad.concat([cap, zs], axis=1)
        cross = ad.reshape(attention(q, kv, p, "cross", cfg.heads, trace), (f, v, t, d))
        ctrl_src = bundle.z_s if m_v is None else m_v
        mv = _embed_tokens(tape, ctrl_src, p["mv_proj"], lead)
        qc = ad.reshape(_ln(h, p, "ln_ctrl"), (b, t, d))
        ctrl = ad.reshape(attention(qc, mv, p, "ctrl", cfg.heads, trace), (f, v, t, d))
        h = ad.add(ad.add(h, cross), ctrl)
    if residual is not None:
        h = ad.add(h, residual)
    return h


def controlnet_residuals(cond, params: dict, cfg: BlockConfig, tape: Tape,
                         prefix: str = "cn") -> list[Tensor]:
    """Per-block residuals relu(cond W1 + b1) W_out_i from (..., d_cond) condition tokens."""
    p = bind(tape, params)
    c = _const(tape, cond)
    if c.shape[-1] != cfg.d_cond:
        raise ShapeError(f"conditioning has {c.shape[-1]} channels, expected {cfg.d_cond}")
    hidden = ad.relu(linear(c, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    outs = sorted((k for k in p if k.startswith(f"{prefix}.out")), key=lambda k: int(k[len(prefix) + 4:]))
    return [linear(hidden, p[k]) for k in outs]


def stdit_block_lidar(z: Tensor, bundle: ConditionBundle | None, params: dict,
                      cfg: BlockConfig, trace: dict | None = None) -> Tensor:
    """LiDAR block.

    z' = z + CrossAttn(LN z, [e_cap, e_box]); z_bar = MHSA(z') + z' along the
    frame axis; plus the ControlNet residual of ``bundle.bev_cond`` if given.
    """
    if z.value.ndim != 3 or z.shape[-1] != cfg.d_model:
        raise ShapeError(f"LiDAR latent must be (F, T, {cfg.d_model}), got {z.shape}")
    tape = z.tape
    p = bind(tape, params)
    f, t, d = z.shape
    zp = z
    if bundle is not None:
        q = _ln(z, p, "ln_cross")
        cap = _caption_token(tape, bundle.e_cap, p["cap_proj"], f)
        keys = [cap]
        if bundle.e_box is not None:
            box = _const(tape, bundle.e_box)
            if box.value.ndim != 2 or box.shape[1] != cfg.d_box:
                raise ShapeError(f"e_box must be (Nb, {cfg.d_box}), got {box.shape}")
            nb = box.shape[0]
            tok = linear(box, p["box_proj"])  # (Nb, D)
            ones = tape.constant(np.ones((f, 1)))
            rep = ad.matmul(ones, ad.reshape(tok, (1, nb * d)))
            keys.append(ad.reshape(rep, (f, nb, d)))
        kv = ad.concat(keys, axis=1) if len(keys) > 1 else keys[0]
        zp = ad.add(z, attention(q, kv, p, "cross", cfg.heads, trace))
    zt = ad.permute(zp, (1, 0, 2))  # (T, F, D)
    zbar = ad.add(ad.permute(attention(zt, zt, p, "mhsa", cfg.heads, trace), (1, 0, 2)), zp)
    if bundle is not None and bundle.bev_cond is not None:
        cond = _const(tape, bundle.bev_cond)
        if cond.shape[:-1] != (f, t):
            raise ShapeError(f"bev_cond {cond.shape} does not match latent tokens {(f, t)}")
        zbar = ad.add(zbar, controlnet_residuals(cond, params, cfg, tape)[0])
    return zbar
