"""Moment propagation through networks with Gaussian weight distributions.

Each weight carries a mean and a log-variance. Pre-activation means and
variances are propagated in closed form (diagonal covariance only), and
ReLU/ELU activations are pushed through via their analytic Gaussian
moments. The whole pass is differentiable with respect to every weight
mean and log-variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

# Below this variance the activation moments switch to their deterministic
# limit to avoid 0/0 in mean/std ratios.
SIGMA2_MIN = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the network.

    kind "dense": fan_in x fan_out units.
    kind "conv2d": valid (unpadded) strided convolution with square kernel,
    in_channels -> out_channels.
    activation applies after this layer's affine moments.
    """

    kind: str
    fan_in: int = 0
    fan_out: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    activation: str = "identity"
    alpha: float = 1.0
    bias: bool = True

    def __post_init__(self):
        if self.kind not in ("dense", "conv2d"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ("relu", "elu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind == "conv2d" and self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "dense":
            return (self.fan_in, self.fan_out)
        return (self.kernel * self.kernel * self.in_channels, self.out_channels)

    @property
    def n_out(self) -> int:
        return self.fan_out if self.kind == "dense" else self.out_channels


@dataclass
class WeightDistribution:
    """Gaussian weight hyperparameters: mean and log-variance per weight."""

    mean: Parameter
    log_var: Parameter
    bias_mean: Parameter | None = None
    bias_log_var: Parameter | None = None

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ValueError("weight mean/log-variance shape mismatch")

    def parameters(self) -> list[Parameter]:
        ps = [self.mean, self.log_var]
        if self.bias_mean is not None:
            ps += [self.bias_mean, self.bias_log_var]
        return ps

    def variance(self) -> Tensor:
        return T.exp(self.log_var)

    def bias_variance(self) -> Tensor:
        return T.exp(self.bias_log_var)


@dataclass
class GaussianActivation:
    """Moment-matched activation distribution: per-unit mean and variance."""

    mean: Tensor
    var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.var.shape:
            raise ValueError("activation mean/variance shape mismatch")


def _check_input_var(h: GaussianActivation) -> None:
    if np.any(h.var.data < 0.0):
        raise ValueError("negative input variance")


def dense_moments(w: WeightDistribution, h: GaussianActivation) -> GaussianActivation:
    """Affine layer moments for Gaussian weights and independent Gaussian
    inputs: E[f] = E[h] E[w], var[f] = E[w^2] var[h] + var[w] E[h]^2."""
    _check_input_var(h)
    wvar = w.variance()
    e_w2 = T.square(w.mean) + wvar
    mean = T.matmul(h.mean, w.mean)
    var = T.matmul(h.var, e_w2) + T.matmul(T.square(h.mean), wvar)
    if w.bias_mean is not None:
        mean = mean + w.bias_mean
        var = var + w.bias_variance()
    return GaussianActivation(mean, var)


def input_moments(w: WeightDistribution, x: Tensor) -> GaussianActivation:
    """First-layer moments for a deterministic input: the input's second
    central moment is zero, so var[f] = var[w] x^2."""
    mean = T.matmul(x, w.mean)
    var = T.matmul(T.square(x), w.variance())
    if w.bias_mean is not None:
        mean = mean + w.bias_mean
        var = var + w.bias_variance()
    return GaussianActivation(mean, var)


def conv2d_moments(
    w: WeightDistribution, h: GaussianActivation, kernel: int, stride: int
) -> GaussianActivation:
    """Valid strided convolution moments; per output position the sums are
    identical to dense_moments over the flattened receptive field.

    Activations are laid out (N, H, W, C); weights (kernel*kernel*C_in, C_out).
    """
    _check_input_var(h)
    n, hh, ww, _ = h.mean.shape
    oh = (hh - kernel) // stride + 1
    ow = (ww - kernel) // stride + 1
    cout = w.mean.shape[1]

    pm = T.extract_patches(h.mean, kernel, stride)
    pv = T.extract_patches(h.var, kernel, stride)
    k = pm.shape[-1]
    pm2 = T.reshape(pm, (n * oh * ow, k))
    pv2 = T.reshape(pv, (n * oh * ow, k))

    wvar = w.variance()
    e_w2 = T.square(w.mean) + wvar
    mean = T.matmul(pm2, w.mean)
    var = T.matmul(pv2, e_w2) + T.matmul(T.square(pm2), wvar)
    if w.bias_mean is not None:
        mean = mean + w.bias_mean
        var = var + w.bias_variance()
    return GaussianActivation(
        T.reshape(mean, (n, oh, ow, cout)), T.reshape(var, (n, oh, ow, cout))
    )


def relu_moments(f: GaussianActivation) -> GaussianActivation:
    """Closed-form mean/variance of max(0, f) for Gaussian f.

    With r = mu/sigma: E = mu*Phi(r) + sigma*pdf(r),
    var = (mu^2 + sigma^2)*Phi(r) + mu*sigma*pdf(r) - E^2.
    Degenerate variances fall back to the deterministic ReLU.
    """
    _check_input_var(f)
    det_mask = f.var.data < SIGMA2_MIN
    safe_var = T.clamp_min(f.var, SIGMA2_MIN)
    sigma = T.sqrt(safe_var)
    r = f.mean / sigma
    cdf = T.normal_cdf(r)
    pdf = T.normal_pdf(r)
    mean_s = f.mean * cdf + sigma * pdf
    var_s = (T.square(f.mean) + safe_var) * cdf + f.mean * sigma * pdf - T.square(mean_s)
    var_s = T.clamp_min(var_s, 0.0)
    mean = T.where(det_mask, T.relu(f.mean), mean_s)
    var = T.where(det_mask, T.constant(np.zeros(f.var.shape)), var_s)
    return GaussianActivation(mean, var)


def elu_moments(f: GaussianActivation, alpha: float = 1.0) -> GaussianActivation:
    """Closed-form mean/variance of the ELU of a Gaussian.

    The negative branch contributes terms of the form exp(a)*Phi(-b) that
    are evaluated through the scaled erfcx product, which never overflows
    (the effective exponent is -mu^2 / (2 sigma^2) <= 0).
    """
    _check_input_var(f)
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    det_mask = f.var.data < SIGMA2_MIN
    safe_var = T.clamp_min(f.var, SIGMA2_MIN)
    sigma = T.sqrt(safe_var)
    mu = f.mean
    r = mu / sigma

    cdf = T.normal_cdf(r)
    pdf = T.normal_pdf(r)
    relu_mean = mu * cdf + sigma * pdf
    relu_second = (T.square(mu) + safe_var) * cdf + mu * sigma * pdf

    # exp(mu + s^2/2) Phi(-(mu + s^2)/sigma)
    t1 = T.exp_scaled_cdf(mu + 0.5 * safe_var, (mu + safe_var) / sigma)
    # exp(2 mu + 2 s^2) Phi(-(mu + 2 s^2)/sigma)
    t2 = T.exp_scaled_cdf(2.0 * mu + 2.0 * safe_var, (mu + 2.0 * safe_var) / sigma)
    cdf_neg = T.normal_cdf(-r)

    mean_s = alpha * (t1 - cdf_neg) + relu_mean
    second_s = alpha * alpha * (t2 - 2.0 * t1 + cdf_neg) + relu_second
    var_s = T.clamp_min(second_s - T.square(mean_s), 0.0)

    det_mean = T.where(f.mean.data > 0.0, f.mean, alpha * (T.exp(T.clamp_max(f.mean, 0.0)) - 1.0))
    mean = T.where(det_mask, det_mean, mean_s)
    var = T.where(det_mask, T.constant(np.zeros(f.var.shape)), var_s)
    return GaussianActivation(mean, var)


def activation_moments(f: GaussianActivation, spec: LayerSpec) -> GaussianActivation:
    if spec.activation == "relu":
        return relu_moments(f)
    if spec.activation == "elu":
        return elu_moments(f, spec.alpha)
    return f


@dataclass
class MomentNetwork:
    """A chain of layers with Gaussian weights, evaluated by recursive
    moment matching from the (deterministic) input upward."""

    specs: list[LayerSpec]
    weights: list[WeightDistribution] = field(default_factory=list)

    def parameters(self) -> list[Parameter]:
        return [p for w in self.weights for p in w.parameters()]

    def forward(self, x: np.ndarray | Tensor) -> GaussianActivation:
        """Propagate a deterministic input batch; returns final-layer
        pre-activation moments (the last spec's activation is applied only
        if it is not 'identity')."""
        xt = x if isinstance(x, Tensor) else T.constant(np.asarray(x, dtype=np.float64))
        h: GaussianActivation | None = None
        for i, (spec, w) in enumerate(zip(self.specs, self.weights)):
            if spec.kind == "dense":
                if h is None:
                    if xt.data.ndim != 2:
                        raise ValueError("dense input must be (N, d)")
                    h = input_moments(w, xt)
                else:
                    if h.mean.data.ndim == 4:  # conv -> dense flatten
                        n = h.mean.shape[0]
                        h = GaussianActivation(
                            T.reshape(h.mean, (n, -1)), T.reshape(h.var, (n, -1))
                        )
                    h = dense_moments(w, h)
            else:
                if h is None:
                    if xt.data.ndim != 4:
                        raise ValueError("conv2d input must be (N, H, W, C)")
                    zero_var = T.constant(np.zeros(xt.shape))
                    h = conv2d_moments(
                        w, GaussianActivation(xt, zero_var), spec.kernel, spec.stride
                    )
                else:
                    h = conv2d_moments(w, h, spec.kernel, spec.stride)
            h = activation_moments(h, spec)
        if h is None:
            raise ValueError("network has no layers")
        return h


def init_weights(
    spec: LayerSpec,
    rng: np.random.Generator,
    log_var_mean: float = -9.0,
    log_var_var: float = 0.001,
) -> WeightDistribution:
    """He-Normal means (std sqrt(2/fan_in)) and near-deterministic
    log-variances drawn from N(log_var_mean, log_var_var)."""
    shape = spec.weight_shape
    fan_in = shape[0]
    mean = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
    log_var = Parameter(rng.normal(log_var_mean, np.sqrt(log_var_var), size=shape))
    if spec.bias:
        bias_mean = Parameter(np.zeros(shape[1]))
        bias_log_var = Parameter(rng.normal(log_var_mean, np.sqrt(log_var_var), size=shape[1]))
        return WeightDistribution(mean, log_var, bias_mean, bias_log_var)
    return WeightDistribution(mean, log_var)


def build_network(specs: list[LayerSpec], rng: np.random.Generator, **init_kw) -> MomentNetwork:
    return MomentNetwork(specs, [init_weights(s, rng, **init_kw) for s in specs])
