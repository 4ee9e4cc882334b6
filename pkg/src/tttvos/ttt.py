"""Test-time-training sequence layer.

The hidden state of the layer is itself a small model (a linear map or a
two-layer MLP).  Each incoming token drives one gradient-descent step on a
self-supervised reconstruction loss, after which the updated state produces
the output token.  Cost is linear in sequence length by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GELU_C = np.sqrt(2.0 / np.pi)
GELU_A = 0.044715


def gelu(x):
    """tanh-form gelu, vectorized."""
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x**3)))


def gelu_grad(x):
    """Derivative of the tanh-form gelu."""
    t = np.tanh(GELU_C * (x + GELU_A * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)


@dataclass(frozen=True)
class TTTConfig:
    variant: str = "linear"  # "linear" | "mlp"
    d: int = 64
    h: int = 0               # MLP hidden width; 0 means 4*d
    eta: float = 0.05        # inner learning rate
    mask_ratio: float = 0.25
    init_scale: float = 1.0

    def __post_init__(self):
        if self.variant not in ("linear", "mlp"):
            raise ValueError(f"unknown TTT variant {self.variant!r}")
        if self.d < 1:
            raise ValueError(f"feature dimension must be >= 1, got {self.d}")
        if self.variant == "mlp" and self.hidden_width < 1:
            raise ValueError(f"MLP hidden width must be >= 1, got {self.hidden_width}")
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")
        if self.init_scale < 0:
            raise ValueError(f"init_scale must be >= 0, got {self.init_scale}")

    @property
    def hidden_width(self) -> int:
        return self.h if self.h else 4 * self.d


@dataclass
class TTTState:
    """Trainable hidden state: parameters of the inner model.

    params holds "W", "b" for the linear variant and "W1", "b1", "W2", "b2"
    for the MLP variant.  All update operations are value-semantic: they
    return a new state and leave the input untouched.
    """

    variant: str
    params: dict[str, np.ndarray]
    step_count: int = 0

    @property
    def d(self) -> int:
        if self.variant == "linear":
            return self.params["W"].shape[0]
        return self.params["W2"].shape[0]

    def copy(self) -> "TTTState":
        return TTTState(self.variant, {k: v.copy() for k, v in self.params.items()},
                        self.step_count)


@dataclass
class LossGrad:
    loss: float
    grad: dict[str, np.ndarray]


def ttt_init(config: TTTConfig, rng: np.random.Generator) -> TTTState:
    """Draw an initial state, i.i.d. N(0, (init_scale/sqrt(d))^2) per entry."""
    d, std = config.d, config.init_scale / np.sqrt(config.d)

    def draw(*shape):
        if config.init_scale == 0.0:
            return np.zeros(shape)
        return rng.normal(0.0, std, size=shape)

    if config.variant == "linear":
        params = {"W": draw(d, d), "b": draw(d)}
    else:
        h = config.hidden_width
        params = {"W1": draw(h, d), "b1": draw(h), "W2": draw(d, h), "b2": draw(d)}
    return TTTState(config.variant, params, step_count=0)


def corrupt_token(x: np.ndarray, mask_ratio: float, rng: np.random.Generator):
    """Zero out round(mask_ratio*d) coordinates, chosen uniformly without replacement.

    Returns (corrupted copy, sorted masked index array).  mask_ratio == 0
    draws nothing from the rng.
    """
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError(f"mask_ratio must be in [0, 1], got {mask_ratio}")
    d = x.shape[-1]
    k = int(round(mask_ratio * d))
    if k == 0:
        return x.copy(), np.empty(0, dtype=np.intp)
    idx = np.sort(rng.choice(d, size=k, replace=False))
    x_tilde = x.copy()
    x_tilde[idx] = 0.0
    return x_tilde, idx


def ttt_apply(state: TTTState, x: np.ndarray) -> np.ndarray:
    """Inner-model prediction: W x + b, or W2 gelu(W1 x + b1) + b2."""
    _check_dim(state, x)
    p = state.params
    if state.variant == "linear":
        return p["W"] @ x + p["b"]
    return p["W2"] @ gelu(p["W1"] @ x + p["b1"]) + p["b2"]


def ttt_loss_grad(state: TTTState, x: np.ndarray, x_tilde: np.ndarray) -> LossGrad:
    """Reconstruction loss (1/d)*sum((f(x_tilde) - x)^2) and its exact gradient.

    The model reads the corrupted token, the target is the clean token.
    Gradients are closed-form; see the finite-difference tests.
    """
    _check_dim(state, x)
    _check_dim(state, x_tilde)
    d = state.d
    p = state.params
    if state.variant == "linear":
        r = p["W"] @ x_tilde + p["b"] - x
        loss = float(r @ r) / d
        c = (2.0 / d) * r
        grad = {"W": np.outer(c, x_tilde), "b": c}
    else:
        z1 = p["W1"] @ x_tilde + p["b1"]
        a = gelu(z1)
        r = p["W2"] @ a + p["b2"] - x
        loss = float(r @ r) / d
        c = (2.0 / d) * r
        dz1 = (p["W2"].T @ c) * gelu_grad(z1)
        grad = {"W1": np.outer(dz1, x_tilde), "b1": dz1,
                "W2": np.outer(c, a), "b2": c}
    return LossGrad(loss, grad)


def ttt_step(state: TTTState, lg: LossGrad, eta: float) -> TTTState:
    """One inner gradient-descent step: p <- p - eta * grad_p."""
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    new = {}
    for name, p in state.params.items():
        g = lg.grad.get(name)
        if g is None or g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} missing or mis-shaped")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient entries in {name!r}")
        new[name] = p - eta * g
    return TTTState(state.variant, new, state.step_count + 1)


def ttt_scan(state0: TTTState, tokens: np.ndarray, config: TTTConfig,
             rng: np.random.Generator, record: dict | None = None):
    """Run the layer over a token sequence.

    Per token: corrupt, take one gradient step on the reconstruction loss,
    then emit the post-update prediction on the clean token.  Returns the
    (T, d) output array and the final state.  When `record` is a dict it
    receives stacked per-token post-update parameters under the parameter
    names (used by the fusion layer to route outer gradients).
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    d = state0.d
    if tokens.size == 0:
        tokens = tokens.reshape(0, d)
    if tokens.ndim != 2 or tokens.shape[1] != d:
        raise ValueError(f"token array shape {tokens.shape} incompatible with state dimension {d}")
    T = tokens.shape[0]
    outputs = np.empty((T, d))
    if T == 0:
        return outputs, state0.copy()

    p = {k: v.copy() for k, v in state0.params.items()}
    eta = config.eta
    snaps = {k: np.empty((T,) + v.shape) for k, v in p.items()} if record is not None else None

    if state0.variant == "linear":
        W, b = p["W"], p["b"]
        for t in range(T):
            x = tokens[t]
            x_tilde, _ = corrupt_token(x, config.mask_ratio, rng)
            r = W @ x_tilde + b - x
            c = (2.0 / d) * r
            W -= eta * np.outer(c, x_tilde)
            b -= eta * c
            outputs[t] = W @ x + b
            if snaps is not None:
                snaps["W"][t] = W
                snaps["b"][t] = b
    else:
        W1, b1, W2, b2 = p["W1"], p["b1"], p["W2"], p["b2"]
        for t in range(T):
            x = tokens[t]
            x_tilde, _ = corrupt_token(x, config.mask_ratio, rng)
            z1 = W1 @ x_tilde + b1
            a = gelu(z1)
            r = W2 @ a + b2 - x
            c = (2.0 / d) * r
            dz1 = (W2.T @ c) * gelu_grad(z1)
            W1 -= eta * np.outer(dz1, x_tilde)
            b1 -= eta * dz1
            W2 -= eta * np.outer(c, a)
            b2 -= eta * c
            outputs[t] = W2 @ gelu(W1 @ x + b1) + b2
            if snaps is not None:
                snaps["W1"][t] = W1
                snaps["b1"][t] = b1
                snaps["W2"][t] = W2
                snaps["b2"][t] = b2

    if record is not None:
        record.update(snaps)
    final = TTTState(state0.variant, p, state0.step_count + T)
    return outputs, final


def _check_dim(state: TTTState, x: np.ndarray):
    if x.shape != (state.d,):
        raise ValueError(f"token shape {x.shape} incompatible with state dimension {state.d}")
