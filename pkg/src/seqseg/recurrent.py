"""Convolutional recurrent heads on the lowest-resolution logit map.

Two cell kinds: a simple convolutional RNN (ReLU of a convolution over the
current input and previous output) and a ConvLSTM with peephole gates:

    f  = sigmoid(Wxf*x + Wof*o + wsf.s + bf)
    i  = sigmoid(Wxi*x + Woi*o + wsi.s + bi)
    g  = tanh(Wxs*x + Wos*o + bs)
    s' = f.s + i.g
    og = sigmoid(Wxo*x + Woo*o + wso.s_peek + bo)      s_peek = s' (or s)
    o' = og.tanh(s')

A step consumes (x_t, state_{t-1}) and emits state_t. Convolutions over x
and o are fused into one bank over their channel concatenation, with gate
order (i, f, s, o) along the output axis. Peephole weights are per-channel
scalars broadcast over space by default (per-element optional).

Training uses truncated backpropagation through time: gradients flow only
inside a window, while the forward state at the window end is carried,
detached, into the next window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigurationError, ContractViolation
from .tensor import KernelBank, check_tensor4, fan_in_normal

CELL_KINDS = ("simple", "convlstm")


@dataclass
class RnnConfig:
    cell_kind: str = "convlstm"
    layers: int = 3
    kernel: int = 3
    hidden_channels: int = 8
    in_channels: int = 4          # class count of the low-resolution logit map
    unroll: int = 5
    peephole_on_new_state: bool = True
    peephole_policy: str = "channel"   # "channel" or "element"
    additive_head: bool = False
    clip_norm: float = 5.0             # applied to simple-RNN training only

    def __post_init__(self):
        if self.cell_kind not in CELL_KINDS:
            raise ConfigurationError(f"cell_kind must be one of {CELL_KINDS}")
        if self.layers < 1:
            raise ConfigurationError("layers must be >= 1")
        if self.unroll < 1:
            raise ConfigurationError("unroll must be >= 1")
        if self.kernel % 2 == 0:
            raise ConfigurationError("kernel size must be odd")
        if self.peephole_policy not in ("channel", "element"):
            raise ConfigurationError("peephole_policy must be 'channel' or 'element'")


def paper_scale_config(**kw):
    """The full-scale head: 3 layers of 5x5 cells, 15 hidden channels."""
    base = dict(layers=3, kernel=5, hidden_channels=15)
    base.update(kw)
    return RnnConfig(**base)


@dataclass
class ConvLSTMState:
    """Hidden/cell state s and output o of one ConvLSTM layer."""

    s: np.ndarray
    o: np.ndarray


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class _SimpleLayer:
    """o_t = relu(U * x + W * o_{t-1} + b), U and W fused over concat(x, o)."""

    def __init__(self, name, rng, in_c, hidden, kernel):
        self.name = name
        self.in_c = in_c
        self.hidden = hidden
        w = fan_in_normal(rng, (hidden, in_c + hidden, kernel, kernel), gain=2.0)
        self.bank = KernelBank(w, np.zeros(hidden))
        self.zero_grads()

    def zero_grads(self):
        self.gw = np.zeros_like(self.bank.weights)
        self.gb = np.zeros_like(self.bank.bias)

    def init_state(self, hw, dtype=np.float64):
        return np.zeros((1, self.hidden, hw[0], hw[1]), dtype=dtype)

    def step(self, x, prev_o, keep=False):
        z = np.concatenate([x, prev_o], axis=1)
        a = ops.conv2d(z, self.bank)
        o = ops.pointwise(a, "relu")
        cache = (z, a) if keep else None
        return o, cache

    def step_backward(self, cache, d_o):
        z, a = cache
        da = ops.pointwise_backward(d_o, a, "relu")
        dz, dw, db = ops.conv2d_backward(da, z, self.bank)
        self.gw += dw
        self.gb += db
        return dz[:, :self.in_c], dz[:, self.in_c:]

    def named_tensors(self):
        yield self.name + "/w", self.bank.weights
        yield self.name + "/b", self.bank.bias

    def named_grads(self):
        yield self.name + "/w", self.gw
        yield self.name + "/b", self.gb


class _ConvLstmLayer:
    def __init__(self, name, rng, in_c, hidden, kernel, cfg: RnnConfig, state_hw=None):
        self.name = name
        self.in_c = in_c
        self.hidden = hidden
        self.cfg = cfg
        w = fan_in_normal(rng, (4 * hidden, in_c + hidden, kernel, kernel), gain=1.0)
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0  # forget gate open at init
        self.bank = KernelBank(w, bias)
        if cfg.peephole_policy == "element":
            if state_hw is None:
                raise ConfigurationError("per-element peepholes need the state spatial dims")
            shape = (hidden, state_hw[0], state_hw[1])
        else:
            shape = (hidden, 1, 1)
        self.peep_i = fan_in_normal(rng, shape, gain=1.0)
        self.peep_f = fan_in_normal(rng, shape, gain=1.0)
        self.peep_o = fan_in_normal(rng, shape, gain=1.0)
        self.zero_grads()

    def zero_grads(self):
        self.gw = np.zeros_like(self.bank.weights)
        self.gb = np.zeros_like(self.bank.bias)
        self.gpi = np.zeros_like(self.peep_i)
        self.gpf = np.zeros_like(self.peep_f)
        self.gpo = np.zeros_like(self.peep_o)

    def init_state(self, hw, dtype=np.float64):
        shape = (1, self.hidden, hw[0], hw[1])
        return ConvLSTMState(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))

    def _gates(self, a):
        h = self.hidden
        return a[:, :h], a[:, h:2 * h], a[:, 2 * h:3 * h], a[:, 3 * h:]

    def step(self, x, state: ConvLSTMState, keep=False):
        s, o = state.s, state.o
        z = np.concatenate([x, o], axis=1)
        a = ops.conv2d(z, self.bank)
        ai, af, as_, ao = self._gates(a)
        i = ops.sigmoid(ai + self.peep_i[None] * s)
        f = ops.sigmoid(af + self.peep_f[None] * s)
        g = np.tanh(as_)
        s_new = f * s + i * g
        s_peek = s_new if self.cfg.peephole_on_new_state else s
        og = ops.sigmoid(ao + self.peep_o[None] * s_peek)
        o_new = og * np.tanh(s_new)
        cache = (z, s, i, f, g, s_new, og) if keep else None
        return ConvLSTMState(s_new, o_new), cache

    def step_backward(self, cache, d_state):
        """d_state holds gradients w.r.t. (s_new, o_new); returns
        (d_x, d_state_prev) and accumulates parameter gradients."""
        z, s, i, f, g, s_new, og = cache
        gs_new, go = d_state.s, d_state.o
        t = np.tanh(s_new)

        d_og = go * t
        d_ao = d_og * og * (1.0 - og)
        s_peek = s_new if self.cfg.peephole_on_new_state else s
        self.gpo += self._peep_grad(d_ao * s_peek)
        d_speek = d_ao * self.peep_o[None]

        ds_new = gs_new + go * og * (1.0 - t * t)
        ds_prev = np.zeros_like(s)
        if self.cfg.peephole_on_new_state:
            ds_new = ds_new + d_speek
        else:
            ds_prev += d_speek

        d_f = ds_new * s
        d_i = ds_new * g
        d_g = ds_new * i
        ds_prev += ds_new * f

        d_af = d_f * f * (1.0 - f)
        self.gpf += self._peep_grad(d_af * s)
        ds_prev += d_af * self.peep_f[None]

        d_ai = d_i * i * (1.0 - i)
        self.gpi += self._peep_grad(d_ai * s)
        ds_prev += d_ai * self.peep_i[None]

        d_as = d_g * (1.0 - g * g)

        d_a = np.concatenate([d_ai, d_af, d_as, d_ao], axis=1)
        dz, dw, db = ops.conv2d_backward(d_a, z, self.bank)
        self.gw += dw
        self.gb += db
        d_x, d_o_prev = dz[:, :self.in_c], dz[:, self.in_c:]
        return d_x, ConvLSTMState(ds_prev, d_o_prev)

    def _peep_grad(self, term):
        if self.cfg.peephole_policy == "channel":
            return term.sum(axis=(0, 2, 3))[:, None, None]
        return term.sum(axis=0)

    def named_tensors(self):
        yield self.name + "/w", self.bank.weights
        yield self.name + "/b", self.bank.bias
        yield self.name + "/peep_i", self.peep_i
        yield self.name + "/peep_f", self.peep_f
        yield self.name + "/peep_o", self.peep_o

    def named_grads(self):
        yield self.name + "/w", self.gw
        yield self.name + "/b", self.gb
        yield self.name + "/peep_i", self.gpi
        yield self.name + "/peep_f", self.gpf
        yield self.name + "/peep_o", self.gpo


# ---------------------------------------------------------------------------
# the stacked head
# ---------------------------------------------------------------------------

class RecurrentHead:
    """Stack of recurrent layers plus a final 1x1 convolution back to class
    logits. Consumes and produces maps shaped like the lowest-resolution
    prediction of the base network."""

    def __init__(self, config: RnnConfig, rng, state_hw=None):
        self.config = config
        cfg = config
        self.layers = []
        in_c = cfg.in_channels
        for li in range(cfg.layers):
            name = f"rnn/layer{li}"
            if cfg.cell_kind == "simple":
                self.layers.append(_SimpleLayer(name, rng, in_c, cfg.hidden_channels, cfg.kernel))
            else:
                self.layers.append(
                    _ConvLstmLayer(name, rng, in_c, cfg.hidden_channels, cfg.kernel, cfg, state_hw)
                )
            in_c = cfg.hidden_channels
        w = fan_in_normal(rng, (cfg.in_channels, cfg.hidden_channels, 1, 1), gain=2.0)
        self.final = KernelBank(w, np.zeros(cfg.in_channels))
        self.zero_grads()

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()
        self.g_final_w = np.zeros_like(self.final.weights)
        self.g_final_b = np.zeros_like(self.final.bias)

    def named_tensors(self):
        for layer in self.layers:
            yield from layer.named_tensors()
        yield "rnn/final/w", self.final.weights
        yield "rnn/final/b", self.final.bias

    trainable_tensors = named_tensors

    def named_grads(self):
        for layer in self.layers:
            yield from layer.named_grads()
        yield "rnn/final/w", self.g_final_w
        yield "rnn/final/b", self.g_final_b

    # -- state ---------------------------------------------------------------

    def init_state(self, hw, policy="zeros", dtype=np.float64):
        if policy != "zeros":
            raise ConfigurationError(f"unknown state init policy {policy!r}")
        return [layer.init_state(hw, dtype) for layer in self.layers]

    def check_state(self, state, hw):
        if len(state) != len(self.layers):
            raise ContractViolation("state does not match head layer count")
        for st in state:
            arr = st.s if isinstance(st, ConvLSTMState) else st
            if arr.shape[1] != self.config.hidden_channels or arr.shape[2:] != tuple(hw):
                raise ContractViolation("state dims do not match head config")

    # -- single frame ---------------------------------------------------------

    def step(self, x, state, keep=False):
        """One frame through the stack; returns (new_low, new_state, cache)."""
        x = check_tensor4(x, channels=self.config.in_channels)
        self.check_state(state, x.shape[2:])
        new_state = []
        caches = []
        h = x
        for layer, st in zip(self.layers, state):
            if self.config.cell_kind == "simple":
                h_new, cache = layer.step(h, st, keep)
                new_state.append(h_new)
                h = h_new
            else:
                st_new, cache = layer.step(h, st, keep)
                new_state.append(st_new)
                h = st_new.o
            caches.append(cache)
        out = ops.conv2d(h, self.final)
        if self.config.additive_head:
            out = out + x
        cache = (x, h, caches) if keep else None
        return out, new_state, cache

    def step_backward(self, cache, d_out, d_state_next):
        """Backward for one frame. d_state_next carries gradients arriving
        from the following time step (zeros at the window end)."""
        x, h, caches = cache
        dh, dwf, dbf = ops.conv2d_backward(d_out, h, self.final)
        self.g_final_w += dwf
        self.g_final_b += dbf
        d_x_extra = d_out if self.config.additive_head else 0.0

        d_state_prev = [None] * len(self.layers)
        for li in reversed(range(len(self.layers))):
            if self.config.cell_kind == "simple":
                d_o = dh + d_state_next[li]
                d_in, d_prev_o = self.layers[li].step_backward(caches[li], d_o)
                d_state_prev[li] = d_prev_o
            else:
                nxt = d_state_next[li]
                d_st = ConvLSTMState(nxt.s, nxt.o + dh)
                d_in, d_prev = self.layers[li].step_backward(caches[li], d_st)
                d_state_prev[li] = d_prev
            dh = d_in
        return dh + d_x_extra, d_state_prev

# ---------------------------------------------------------------------------
# functional surface
# ---------------------------------------------------------------------------

def build_head(config: RnnConfig, seed, state_hw=None) -> RecurrentHead:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return RecurrentHead(config, rng, state_hw)


def init_state(head: RecurrentHead, hw, policy="zeros"):
    return head.init_state(hw, policy)


def simple_rnn_step(head: RecurrentHead, x, prev_state):
    """Single simple-RNN stack step; returns (new_low, new_state)."""
    out, state, _ = head.step(x, prev_state)
    return out, state


def convlstm_step(head: RecurrentHead, x, prev_state):
    """Single ConvLSTM stack step; returns (new_low, new_state)."""
    out, state, _ = head.step(x, prev_state)
    return out, state


def head_forward(head: RecurrentHead, low_logits_sequence, state=None):
    """Run a whole sequence; returns (list of replacement low maps, final state)."""
    if state is None:
        first = check_tensor4(low_logits_sequence[0], channels=head.config.in_channels)
        state = head.init_state(first.shape[2:])
    outs = []
    for x in low_logits_sequence:
        out, state, _ = head.step(x, state)
        outs.append(out)
    return outs, state


def _detach(state):
    out = []
    for st in state:
        if isinstance(st, ConvLSTMState):
            out.append(ConvLSTMState(st.s.copy(), st.o.copy()))
        else:
            out.append(st.copy())
    return out


def bptt_step(head: RecurrentHead, window, carried_state, loss_fn):
    """Backpropagation through one truncation window.

    window: list of low-resolution logit maps (length <= config.unroll).
    loss_fn(t, new_low) -> (loss_t, d_new_low).
    Returns (loss_sum, new_carried_state, d_inputs). Parameter gradients are
    zeroed and then accumulated on the head; the returned state is detached
    so no gradient crosses the window boundary.
    """
    if len(window) == 0:
        raise ContractViolation("bptt window must contain at least one frame")
    if len(window) > head.config.unroll:
        raise ContractViolation(
            f"window length {len(window)} exceeds unroll {head.config.unroll}"
        )
    head.zero_grads()

    state = carried_state
    caches = []
    d_outs = []
    loss_total = 0.0
    for t, x in enumerate(window):
        out, state, cache = head.step(x, state, keep=True)
        caches.append(cache)
        loss_t, d_out = loss_fn(t, out)
        loss_total += float(loss_t)
        d_outs.append(d_out)

    if head.config.cell_kind == "simple":
        d_state = [np.zeros_like(st) for st in state]
    else:
        d_state = [ConvLSTMState(np.zeros_like(st.s), np.zeros_like(st.o)) for st in state]
    d_inputs = [None] * len(window)
    for t in reversed(range(len(window))):
        d_inputs[t], d_state = head.step_backward(caches[t], d_outs[t], d_state)
    return loss_total, _detach(state), d_inputs
