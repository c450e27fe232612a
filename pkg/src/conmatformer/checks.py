"""The finite-difference verification suite behind the gradcheck command.

Every differentiable op and block is checked at 64-bit against central
differences; the full model is checked end-to-end at reduced scale with a
deterministic sample of input/parameter elements.
"""

import dataclasses

import numpy as np

from . import tensor as T
from .blocks import (Cbam, ChannelPairAttention, ConvNextBlock, Downsample,
                     DualAttention, PositionAttention, Stem, TransformerBlock)
from .gradcheck import grad_check, param_grad_check
from .model import build_model, model_presets
from .tensor import Tensor

SMOOTH_TOL = 1e-6
BLOCK_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclasses.dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self):
        return self.error < self.tolerance


def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape), dtype=np.float64)


def _away_from_zero(rng, *shape):
    x = rng.normal(size=shape)
    return Tensor(x + 0.2 * np.sign(x), dtype=np.float64)


def run_gradient_suite(include_models=True, seed=0):
    """Run every check; returns a list of CheckResult."""
    rng = np.random.default_rng(seed)
    results = []

    def check(name, f, x, tol, sample=None):
        err = grad_check(f, x, sample=sample, rng=np.random.default_rng(seed + 1))
        results.append(CheckResult(name, err, tol))

    # primitive ops
    w = _rand(rng, 5, 4)
    check("matmul", lambda x: T.tsum(T.matmul(x, w)), _rand(rng, 3, 5), SMOOTH_TOL)
    wl = _rand(rng, 4, 3)
    bl = _rand(rng, 3)
    check("linear", lambda x: T.tsum(T.linear(x, wl, bl)), _rand(rng, 2, 6, 4), SMOOTH_TOL)
    cw = _rand(rng, 4, 3, 3, 3)
    check("conv2d", lambda x: T.tsum(T.conv2d(x, cw, stride=2, padding=1)),
          _rand(rng, 2, 3, 6, 6), SMOOTH_TOL)
    dw = _rand(rng, 4, 1, 3, 3)
    check("conv2d_depthwise", lambda x: T.tsum(T.conv2d(x, dw, padding=1, groups=4)),
          _rand(rng, 2, 4, 5, 5), SMOOTH_TOL)
    gamma, beta = _rand(rng, 6), _rand(rng, 6)
    check("layer_norm", lambda x: T.tsum(T.mul(T.layer_norm(x, gamma, beta, axis=-3), probe_ln)),
          _rand(rng, 6, 4, 4), BLOCK_TOL)
    check("softmax", lambda x: T.tsum(T.mul(T.softmax(x, axis=-1), probe_sm)),
          _rand(rng, 3, 7), SMOOTH_TOL)
    check("gelu", lambda x: T.tsum(T.gelu(x)), _rand(rng, 4, 5), SMOOTH_TOL)
    check("sigmoid", lambda x: T.tsum(T.sigmoid(x)), _rand(rng, 4, 5), SMOOTH_TOL)
    check("relu", lambda x: T.tsum(T.relu(x)), _away_from_zero(rng, 4, 5), SMOOTH_TOL)
    check("pool_avg_global", lambda x: T.tsum(T.pool2d(x, "avg")), _rand(rng, 2, 3, 4, 4), SMOOTH_TOL)
    check("pool_max_global", lambda x: T.tsum(T.pool2d(x, "max")), _rand(rng, 2, 3, 4, 4), BLOCK_TOL)
    check("pool_avg_window", lambda x: T.tsum(T.pool2d(x, "avg", window=2)),
          _rand(rng, 2, 3, 4, 4), SMOOTH_TOL)
    check("pool_channel_max", lambda x: T.tsum(T.pool2d(x, "max", axis="channel")),
          _rand(rng, 2, 3, 4, 4), BLOCK_TOL)
    check("cross_entropy", lambda x: T.cross_entropy(x, np.array([0, 2, 1])),
          _rand(rng, 3, 4), SMOOTH_TOL)

    # blocks, all float64, inputs no larger than [8,6,6]
    cbam = Cbam(8, reduction=4, rng=rng, dtype=np.float64)
    check("cbam_channel", lambda x: T.tsum(cbam.channel_attention(x)), _rand(rng, 8, 4, 4), BLOCK_TOL)
    check("cbam_spatial", lambda x: T.tsum(cbam.spatial_attention(x)), _rand(rng, 8, 4, 4), BLOCK_TOL)
    check("cbam_forward", lambda x: T.tsum(cbam(x)), _rand(rng, 8, 4, 4), BLOCK_TOL)
    pam = PositionAttention(4, rng=rng, dtype=np.float64)
    pam.alpha.data = np.asarray(0.7)
    check("pam", lambda x: T.tsum(T.mul(pam(x), probe_pam)), _rand(rng, 4, 3, 3), BLOCK_TOL)
    cam = ChannelPairAttention(dtype=np.float64)
    cam.beta.data = np.asarray(0.5)
    check("cam", lambda x: T.tsum(T.mul(cam(x), probe_pam)), _rand(rng, 4, 3, 3), BLOCK_TOL)
    danet = DualAttention(2, rng=rng, dtype=np.float64)
    danet.position.alpha.data = np.asarray(0.3)
    danet.channel.beta.data = np.asarray(-0.4)
    check("danet", lambda x: T.tsum(T.mul(danet(x), probe_da)), _rand(rng, 2, 3, 3), BLOCK_TOL)
    for grn in (False, True):
        blk = ConvNextBlock(4, use_grn=grn, rng=rng, dtype=np.float64)
        blk.layer_scale.data = np.full(4, 0.5)
        if grn:
            blk.grn_gamma.data = rng.normal(size=16) * 0.3
            blk.grn_beta.data = rng.normal(size=16) * 0.3
        check(f"convnext_block{'_grn' if grn else ''}",
              lambda x, b=blk: T.tsum(T.mul(b(x), probe_cn)), _rand(rng, 4, 5, 5), BLOCK_TOL)
    tr = TransformerBlock(8, heads=2, dropout_p=0.0, rng=rng, dtype=np.float64)
    check("transformer_block", lambda x: T.tsum(T.mul(tr(x), probe_tr)),
          _rand(rng, 8, 2, 2), BLOCK_TOL)
    stem = Stem(3, 8, rng=rng, dtype=np.float64)
    check("stem", lambda x: T.tsum(T.mul(stem(x), probe_stem)), _rand(rng, 3, 8, 8), BLOCK_TOL)
    down = Downsample(4, 8, rng=rng, dtype=np.float64)
    check("downsample", lambda x: T.tsum(T.mul(down(x), probe_down)), _rand(rng, 4, 4, 4), BLOCK_TOL)

    if include_models:
        for preset in ("toy", "desk"):
            cfg = model_presets()[preset]
            model = build_model(cfg, rng=np.random.default_rng(seed + 2), dtype=np.float64)
            probe = np.random.default_rng(seed + 3).normal(
                size=(1, cfg.num_classes)).astype(np.float64)

            def scalar_out(x, m=model, p=probe):
                return T.tsum(T.mul(m.forward(x, training=False), Tensor(p, dtype=np.float64)))

            x = _rand(np.random.default_rng(seed + 4), 1, 3, cfg.input_size, cfg.input_size)
            err = grad_check(scalar_out, x, sample=96, rng=np.random.default_rng(seed + 5))
            results.append(CheckResult(f"model_{preset}_input", err, END_TO_END_TOL))
            for pname in ("stem.weight", "head_w"):
                param = dict(model.named_parameters())[pname]
                xfix = Tensor(x.data.copy(), dtype=np.float64)
                err = param_grad_check(lambda m=model, p=probe: T.tsum(
                    T.mul(m.forward(xfix, training=False), Tensor(p, dtype=np.float64))),
                    param, sample=24, rng=np.random.default_rng(seed + 6))
                results.append(CheckResult(f"model_{preset}_{pname}", err, END_TO_END_TOL))
    return results


# probe tensors give the scalar targets non-uniform weights so adjoints are
# exercised beyond the all-ones cotangent
_probe_rng = np.random.default_rng(12345)
probe_ln = Tensor(_probe_rng.normal(size=(6, 4, 4)), dtype=np.float64)
probe_sm = Tensor(_probe_rng.normal(size=(3, 7)), dtype=np.float64)
probe_pam = Tensor(_probe_rng.normal(size=(4, 3, 3)), dtype=np.float64)
probe_da = Tensor(_probe_rng.normal(size=(2, 3, 3)), dtype=np.float64)
probe_cn = Tensor(_probe_rng.normal(size=(4, 5, 5)), dtype=np.float64)
probe_tr = Tensor(_probe_rng.normal(size=(8, 2, 2)), dtype=np.float64)
probe_stem = Tensor(_probe_rng.normal(size=(8, 2, 2)), dtype=np.float64)
probe_down = Tensor(_probe_rng.normal(size=(8, 2, 2)), dtype=np.float64)


def format_results(results):
    lines = [f"{'check':34s} {'max rel err':>12s} {'tol':>8s}  status"]
    for r in results:
        lines.append(f"{r.name:34s} {r.error:12.3e} {r.tolerance:8.0e}  "
                     f"{'pass' if r.passed else 'FAIL'}")
    return lines
