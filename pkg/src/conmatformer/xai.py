"""Post-hoc explanations: gradient-weighted class activation maps (plus the
second-order '++' variant) and local surrogate explanations over superpixel
perturbations, with PNG overlay rendering.

All methods are read-only with respect to model parameters.
"""

import dataclasses
import json

import numpy as np
from PIL import Image
from scipy import ndimage

from .tensor import Tensor, backward, no_grad, softmax

DEFAULT_TAP = "stage4"


@dataclasses.dataclass
class Saliency:
    map: np.ndarray            # [Hf, Wf] feature-resolution, post-ReLU, unnormalized
    upsampled: np.ndarray      # [H, W] bilinear-upsampled, min-max normalized to [0,1]
    target_class: int
    method: str


@dataclasses.dataclass
class LimeExplanation:
    segments: np.ndarray       # [H, W] int segment ids
    coefficients: np.ndarray   # one weight per segment
    intercept: float
    fit_r2: float
    target_class: int

    def to_json(self):
        return json.dumps({
            "target_class": self.target_class,
            "intercept": self.intercept,
            "fit_r2": self.fit_r2,
            "coefficients": {str(i): float(c) for i, c in enumerate(self.coefficients)},
        }, indent=2, sort_keys=True)


def _upsample_bilinear(fmap, out_h, out_w):
    h, w = fmap.shape
    if (h, w) == (out_h, out_w):
        return fmap.astype(np.float64)
    sy, sx = h / out_h, w / out_w
    matrix = np.array([[sy, 0.0], [0.0, sx]])
    offset = np.array([0.5 * sy - 0.5, 0.5 * sx - 0.5])
    return ndimage.affine_transform(fmap.astype(np.float64), matrix, offset=offset,
                                    output_shape=(out_h, out_w), order=1,
                                    mode="nearest")


def _normalize(arr):
    lo, hi = arr.min(), arr.max()
    if hi - lo < 1e-12:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def _tap_activations_and_grads(model, image, target_class, tap_layer):
    """Forward to the logits, backprop the target logit, return (A, dA, class)."""
    x = Tensor(image[None].astype(model.dtype))
    logits, taps = model.forward(x, training=False, taps=(tap_layer,))
    tapped = taps[tap_layer]
    if tapped.ndim != 4 or tapped.shape[-1] < 1 or tapped.shape[-2] < 1:
        raise ValueError(f"tap layer {tap_layer!r} has no spatial extent: {tapped.shape}")
    if target_class is None:
        target_class = int(logits.data[0].argmax())
    score = logits[0, target_class]
    backward(score)
    activations = tapped.data[0]
    grads = tapped.grad.data[0]
    for p in model.parameters():
        p.grad = None
    return activations, grads, target_class


def cam_from_gradients(activations, grads):
    """Spatial-mean gradient weights, weighted feature sum, ReLU."""
    alphas = grads.mean(axis=(1, 2))
    fmap = np.einsum("k,kij->ij", alphas, activations)
    return np.maximum(fmap, 0.0)


def grad_cam(model, image, target_class=None, tap_layer=DEFAULT_TAP):
    """Gradient-weighted class activation map at the tapped feature layer.

    The class score is the pre-softmax logit; target_class defaults to the
    predicted class.
    """
    activations, grads, cls = _tap_activations_and_grads(model, image,
                                                         target_class, tap_layer)
    fmap = cam_from_gradients(activations, grads)
    up = _normalize(_upsample_bilinear(fmap, image.shape[1], image.shape[2]))
    return Saliency(map=fmap, upsampled=up, target_class=cls, method="gradcam")


def cam_pp_from_gradients(activations, grads, eps=1e-12):
    """'++' weighting: per-pixel second-order ratio under the exp-score outer
    derivative, times the positive part of the gradient."""
    g2 = grads ** 2
    g3 = g2 * grads
    sum_ag3 = (activations * g3).sum(axis=(1, 2), keepdims=True)
    denom = 2.0 * g2 + sum_ag3
    ratio = np.where(g2 > 0, g2 / np.where(np.abs(denom) < eps, eps, denom), 0.0)
    weights = (ratio * np.maximum(grads, 0.0)).sum(axis=(1, 2))
    fmap = np.einsum("k,kij->ij", weights, activations)
    return np.maximum(fmap, 0.0)


def grad_cam_pp(model, image, target_class=None, tap_layer=DEFAULT_TAP):
    activations, grads, cls = _tap_activations_and_grads(model, image,
                                                         target_class, tap_layer)
    fmap = cam_pp_from_gradients(activations, grads)
    up = _normalize(_upsample_bilinear(fmap, image.shape[1], image.shape[2]))
    return Saliency(map=fmap, upsampled=up, target_class=cls, method="gradcampp")


# -- local surrogate explanations --------------------------------------------------


def segment_grid(image, k_per_axis):
    """Deterministic k x k grid partition of the image plane."""
    if k_per_axis < 1:
        raise ValueError("k_per_axis must be >= 1")
    h, w = image.shape[1], image.shape[2]
    rows = np.minimum(np.arange(h) * k_per_axis // h, k_per_axis - 1)
    cols = np.minimum(np.arange(w) * k_per_axis // w, k_per_axis - 1)
    return (rows[:, None] * k_per_axis + cols[None, :]).astype(np.int64)


def lime_explain(black_box, image, target_class, segments, n_samples=200,
                 kernel_width=0.25, ridge_lambda=1e-3, rng=None, batch_size=32,
                 workers=1):
    """Weighted ridge fit of the black box over segment on/off perturbations.

    black_box maps a [N,3,H,W] float batch to [N,K] class scores. Masked-off
    segments are replaced by the per-channel image mean. Sample weights are
    exp(-d^2 / width^2) with d the cosine distance between the mask and the
    all-ones mask. Perturbation batches may be forwarded on `workers` threads
    against the shared read-only model; results land in fixed slots, so the
    fit is identical regardless of parallelism.
    """
    rng = rng or np.random.default_rng(0)
    seg_ids = np.unique(segments)
    n_seg = len(seg_ids)
    if n_samples < n_seg + 1:
        raise ValueError(f"need at least {n_seg + 1} samples for {n_seg} segments")
    masks = rng.integers(0, 2, size=(n_samples, n_seg)).astype(np.float64)

    mean_color = image.mean(axis=(1, 2), keepdims=True)
    seg_onehot = np.stack([(segments == s) for s in seg_ids])   # [S, H, W]

    def run_chunk(start):
        chunk = masks[start:start + batch_size]
        batch = np.empty((len(chunk),) + image.shape, dtype=np.float32)
        for i, z in enumerate(chunk):
            keep = np.einsum("s,shw->hw", z, seg_onehot)
            batch[i] = image * keep + mean_color * (1.0 - keep)
        return np.asarray(black_box(batch))[:, target_class]

    starts = list(range(0, n_samples, batch_size))
    scores = np.empty(n_samples, dtype=np.float64)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for start, out in zip(starts, pool.map(run_chunk, starts)):
                scores[start:start + len(out)] = out
    else:
        for start in starts:
            out = run_chunk(start)
            scores[start:start + len(out)] = out

    on_frac = masks.sum(axis=1) / n_seg
    distance = 1.0 - np.sqrt(on_frac)          # cosine distance of z to all-ones
    weights = np.exp(-(distance ** 2) / kernel_width ** 2)

    design = np.concatenate([np.ones((n_samples, 1)), masks], axis=1)
    wd = design * weights[:, None]
    normal = design.T @ wd
    penalty = np.eye(n_seg + 1) * ridge_lambda
    penalty[0, 0] = 0.0                        # intercept unpenalized
    rhs = wd.T @ scores
    try:
        beta = np.linalg.solve(normal + penalty, rhs)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"singular normal equations (ridge_lambda={ridge_lambda}); "
            "increase ridge_lambda") from exc

    fitted = design @ beta
    wmean = (weights * scores).sum() / weights.sum()
    ss_res = (weights * (scores - fitted) ** 2).sum()
    ss_tot = (weights * (scores - wmean) ** 2).sum()
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return LimeExplanation(segments=segments, coefficients=beta[1:],
                           intercept=float(beta[0]), fit_r2=float(r2),
                           target_class=int(target_class))


def model_black_box(model):
    """Adapt a model to the black-box callable expected by lime_explain."""

    def predict(batch):
        with no_grad():
            logits = model.forward(Tensor(batch.astype(model.dtype)), training=False)
            return softmax(logits, axis=-1).data
    return predict


# -- rendering -----------------------------------------------------------------------

_HEAT_STOPS = np.array([
    [0.0, 0.0, 0.5], [0.0, 0.0, 1.0], [0.0, 1.0, 1.0],
    [0.0, 1.0, 0.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0],
])


def heat_colormap(values):
    """Map [0,1] saliency to an RGB heat ramp (blue -> cyan -> yellow -> red)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    pos = v * (len(_HEAT_STOPS) - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(_HEAT_STOPS) - 1)
    frac = (pos - lo)[..., None]
    return _HEAT_STOPS[lo] * (1.0 - frac) + _HEAT_STOPS[hi] * frac


def render_overlay(image, saliency, path, alpha=0.4):
    """Alpha-blend the heat-mapped saliency over the input and write a PNG.

    The blend weight is alpha * saliency per pixel, so zero-saliency regions
    show the untouched input.
    """
    sal = saliency.upsampled if isinstance(saliency, Saliency) else np.asarray(saliency)
    if sal.shape != image.shape[1:]:
        raise ValueError(f"saliency {sal.shape} does not match image {image.shape[1:]}")
    rgb = image.transpose(1, 2, 0).astype(np.float64)
    heat = heat_colormap(sal)
    weight = (alpha * sal)[..., None]
    blended = (1.0 - weight) * rgb + weight * heat
    out = np.clip(np.round(blended * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(out).save(path, format="PNG")
    return path


def render_lime_overlay(image, explanation, path, top_q=4, alpha=0.4):
    """Highlight the top positive-coefficient segments in green and outline
    their boundaries in yellow."""
    coeffs = explanation.coefficients
    positive = [i for i in np.argsort(-coeffs) if coeffs[i] > 0][:top_q]
    mask = np.isin(explanation.segments, positive)
    rgb = image.transpose(1, 2, 0).astype(np.float64)
    tint = rgb.copy()
    tint[mask] = (1.0 - alpha) * rgb[mask] + alpha * np.array([0.0, 1.0, 0.0])
    inner = ndimage.binary_erosion(mask)
    tint[mask & ~inner] = np.array([1.0, 1.0, 0.0])
    out = np.clip(np.round(tint * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(out).save(path, format="PNG")
    return path
