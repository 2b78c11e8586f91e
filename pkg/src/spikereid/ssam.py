"""Spike-guided spatiotemporal attention with a causal time mask.

Spike-valued Q/K/V come from per-token 1x1 convolutions followed by
independent LIF layers. For the current step t, attention blocks are formed
against steps t' <= t only (the block matrix is upper triangular in (t', t));
the same-step block additionally receives a learnable intra-frame relative
position bias gathered from a (2H-1) x (2W-1) table. Softmax-normalized
blocks mix the value tokens, the sum over past steps feeds an output LIF
layer, and the spike map is added back onto the stage input (optional
residual).

Variants: ``staw`` (causal, biased diagonal), ``faw`` (all step pairs),
``zaw`` (all attention logits forced to zero; output independent of Q/K).
"""

import numpy as np

from . import tensor as tt
from .layers import Module
from .spiking import LIFLayer, LIFParams, SurrogateSpec, lif_sequence
from .tensor import Parameter, Tensor

VARIANTS = ("staw", "faw", "zaw")
VALUE_MODES = ("literal", "standard-causal")


def relative_index(dh, dw, height, width):
    """Map a token displacement to its (row, col) in the bias table."""
    if abs(dh) > height - 1 or abs(dw) > width - 1:
        raise ValueError(f"displacement ({dh}, {dw}) out of range for {height}x{width}")
    return dh + height - 1, dw + width - 1


def _bias_gather_indices(height, width):
    n = height * width
    hh, ww = np.divmod(np.arange(n), width)
    dh = hh[:, None] - hh[None, :]
    dw = ww[:, None] - ww[None, :]
    return dh + height - 1, dw + width - 1


def compute_bias_matrix(table, height, width):
    """Expand the displacement table P into the N x N bias matrix B,
    B[i, j] = P[relative_index(h_i - h_j, w_i - w_j)] for row-major tokens."""
    table = tt.as_tensor(table)
    if table.shape != (2 * height - 1, 2 * width - 1):
        raise ValueError(f"bias table must be {(2 * height - 1, 2 * width - 1)}, got {table.shape}")
    rows, cols = _bias_gather_indices(height, width)
    return table[(rows, cols)]


def compute_staw(q_tp, k_t, bias, t_prime, t, variant="staw", channels=None):
    """Reference attention-weight block A_{t',t} for token matrices (N, C).

    staw: Q K^T / sqrt(D) for t' < t, plus bias at t' = t, zero for t' > t.
    faw: no zeroing (bias still only at t' = t). zaw: all zero.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown attention variant {variant!r}")
    q = q_tp.data if isinstance(q_tp, Tensor) else np.asarray(q_tp)
    k = k_t.data if isinstance(k_t, Tensor) else np.asarray(k_t)
    b = bias.data if isinstance(bias, Tensor) else np.asarray(bias)
    n = q.shape[0]
    if variant == "zaw":
        return np.zeros((n, n), dtype=q.dtype)
    if variant == "staw" and t_prime > t:
        return np.zeros((n, n), dtype=q.dtype)
    d = channels if channels is not None else q.shape[1]
    block = (q @ k.T) / np.sqrt(d)
    if t_prime == t:
        block = block + b
    return block


def project_qkv(x_tokens, stage, time_steps):
    """Spike-valued Q/K/V for a (T, C, N) token tensor: each is its own
    1x1 token convolution followed by its own LIF sequence."""
    q = stage.lif_q(tt.conv1x1_tokens(x_tokens, stage.wq), time_steps)
    k = stage.lif_k(tt.conv1x1_tokens(x_tokens, stage.wk), time_steps)
    v = stage.lif_v(tt.conv1x1_tokens(x_tokens, stage.wv), time_steps)
    return q, k, v


class AttentionStage(Module):
    """One attention insertion point over a (T*B, C, H, W) feature map."""

    def __init__(self, channels, height, width, rng=None, variant="staw",
                 value_mode="literal", residual=True, lif_params=None, surrogate=None):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {variant!r}")
        if value_mode not in VALUE_MODES:
            raise ValueError(f"unknown value mode {value_mode!r}")
        self.channels, self.height, self.width = channels, height, width
        self.n_tokens = height * width
        self.variant = variant
        self.value_mode = value_mode
        self.residual = residual
        rng = rng or np.random.default_rng(0)
        std = 1.0 / np.sqrt(channels)
        self.wq = Parameter(rng.normal(0.0, std, size=(channels, channels)))
        self.wk = Parameter(rng.normal(0.0, std, size=(channels, channels)))
        self.wv = Parameter(rng.normal(0.0, std, size=(channels, channels)))
        self.bias_table = Parameter(np.zeros((2 * height - 1, 2 * width - 1)))
        self.lif_q = LIFLayer(lif_params, surrogate)
        self.lif_k = LIFLayer(lif_params, surrogate)
        self.lif_v = LIFLayer(lif_params, surrogate)
        self.lif_out = LIFLayer(lif_params, surrogate)

    # token layout: x (T*B, C, H, W) -> (T, C, B*N) for the projections,
    # then (T, B, N, C) for attention.
    def _to_tokens(self, x, time_steps):
        b = x.shape[0] // time_steps
        x5 = x.reshape(time_steps, b, self.channels, self.n_tokens)
        return x5.transpose(0, 2, 1, 3).reshape(time_steps, self.channels, b * self.n_tokens), b

    def _to_attention(self, tokens, time_steps, b):
        return tokens.reshape(time_steps, self.channels, b, self.n_tokens).transpose(0, 2, 3, 1)

    def forward(self, x, time_steps, capture=None):
        t_steps = time_steps
        n = self.n_tokens
        tokens, b = self._to_tokens(x, t_steps)
        use_qk = self.variant != "zaw"
        v = self.lif_v(tt.conv1x1_tokens(tokens, self.wv), t_steps)
        v = self._to_attention(v, t_steps, b)
        if use_qk:
            q = self.lif_q(tt.conv1x1_tokens(tokens, self.wq), t_steps)
            k = self.lif_k(tt.conv1x1_tokens(tokens, self.wk), t_steps)
            q = self._to_attention(q, t_steps, b)
            k = self._to_attention(k, t_steps, b)
            bias = compute_bias_matrix(self.bias_table, self.height, self.width)
            scale = 1.0 / np.sqrt(self.channels)
        outs = []
        for t in range(t_steps):
            past = t_steps if self.variant == "faw" else t + 1
            if use_qk:
                logits = tt.einsum("pbic,bjc->pbij", q[0:past], k[t]) * scale
                diag = np.zeros((past, 1, 1, 1), dtype=x.dtype)
                diag[t] = 1.0
                logits = logits + Tensor(diag) * bias.reshape(1, 1, n, n)
                weights = tt.softmax_lastdim(logits)
            else:
                weights = Tensor(np.full((past, b, n, n), 1.0 / n, dtype=x.dtype))
            if self.value_mode == "literal":
                terms = tt.einsum("pbij,bjc->pbic", weights, v[t])
            else:
                terms = tt.einsum("pbij,pbjc->pbic", weights, v[0:past])
            outs.append(terms.sum(axis=0))
        fused = tt.stack(outs, axis=0)                       # (T, B, N, C)
        if capture is not None:
            capture["fused"] = fused.data
        spikes = self.lif_out(fused.reshape(t_steps, b * n * self.channels), t_steps)
        y = spikes.reshape(t_steps, b, n, self.channels).transpose(0, 1, 3, 2)
        y = y.reshape(t_steps * b, self.channels, self.height, self.width)
        if self.residual:
            y = y + x
        return y

    def staw_blocks(self, x, time_steps):
        """Full (T, T, N, N) attention-weight matrix for batch item 0,
        built block-by-block with compute_staw (used by inspection dumps)."""
        with tt.no_grad():
            tokens, b = self._to_tokens(tt.as_tensor(x), time_steps)
            if self.variant == "zaw":
                zero = np.zeros((self.n_tokens, self.n_tokens))
                q = k = None
            else:
                q, k, _ = project_qkv(tokens, self, time_steps)
                q = self._to_attention(q, time_steps, b)
                k = self._to_attention(k, time_steps, b)
            bias = compute_bias_matrix(self.bias_table, self.height, self.width)
            blocks = np.zeros((time_steps, time_steps, self.n_tokens, self.n_tokens))
            for tp in range(time_steps):
                for t in range(time_steps):
                    if self.variant == "zaw":
                        blocks[tp, t] = zero
                    else:
                        blocks[tp, t] = compute_staw(
                            Tensor(q.data[tp, 0]), Tensor(k.data[t, 0]), bias,
                            tp, t, variant=self.variant, channels=self.channels)
        return blocks
