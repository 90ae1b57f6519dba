"""Residual value network with analytic input gradients.

The network maps (s, z, y) -> scalar through an opening layer and M
residual blocks, sigma(x) = log(exp(x) + exp(-x)) activations, and a
linear head.  Because feedback controls need grad_z of the output inside
the training loss, the input gradient is not obtained by a second
differentiation pass: the vector-Jacobian chain

    v_M+1 = w,   v_i = v_i+1 + K_i^T (tanh(pre_i) . v_i+1),
    grad_h0 = K_0^T (tanh(pre_0) . v_1)

is recorded explicitly with ordinary first-order ops (tanh is a primal
op), so a single reverse sweep differentiates losses that contain the
gradient itself.  A vectorized numpy twin of both passes serves
gradient-free evaluation (validation rollouts, finite-difference tests).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from pdepolicy import tape as tp


@dataclass(frozen=True)
class NetInput:
    """Network input triple; concatenation order is fixed as (s, z, y)."""

    s: float
    z: np.ndarray
    y: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate([[self.s], np.asarray(self.z, dtype=np.float64),
                               np.asarray(self.y, dtype=np.float64)])


class ValueNetwork:
    """Weights and evaluation paths for the residual value surrogate.

    ``time_scale`` multiplies the time input before the opening layer (a
    fixed reparameterization, not a trainable weight).  Sharp end-of-horizon
    behavior needs opening weights of size O(1/dt) on a raw-seconds time
    axis, which bounded-step optimizers cannot reach in few iterations;
    feeding time in step-sized units keeps those weights O(1).  Reported
    input gradients are always with respect to the unscaled inputs.
    """

    def __init__(self, weights: dict[str, np.ndarray], d: int, q: int,
                 time_scale: float = 1.0):
        self.weights = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
        self.d = int(d)
        self.q = int(q)
        self.time_scale = float(time_scale)
        self.width = self.weights["w"].shape[0]
        self.depth = max(
            int(k[1:]) for k in self.weights if k.startswith("K")
        )
        in_dim = 1 + self.d + self.q
        if self.weights["K0"].shape != (self.width, in_dim):
            raise ValueError(
                f"opening layer expects {(self.width, in_dim)}, got {self.weights['K0'].shape}"
            )
        self.input_scale = np.ones(in_dim)
        self.input_scale[0] = self.time_scale
        for arr in self.weights.values():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError("non-finite network weight")

    # -- construction ---------------------------------------------------------

    @classmethod
    def init(cls, width: int, depth: int, d: int, q: int, seed: int,
             time_scale: float = 1.0) -> "ValueNetwork":
        """Scaled-normal init (scale 1/sqrt(width)); zero head so phi == 0."""
        if width < 1 or depth < 1:
            raise ValueError("width and depth must be >= 1")
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(width)
        weights = {"K0": scale * rng.standard_normal((width, 1 + d + q))}
        weights["b0"] = np.zeros(width)
        for i in range(1, depth + 1):
            weights[f"K{i}"] = scale * rng.standard_normal((width, width))
            weights[f"b{i}"] = np.zeros(width)
        weights["w"] = np.zeros(width)
        return cls(weights, d, q, time_scale=time_scale)

    def copy(self) -> "ValueNetwork":
        return ValueNetwork({k: v.copy() for k, v in self.weights.items()},
                            self.d, self.q, time_scale=self.time_scale)

    @property
    def param_names(self) -> list[str]:
        names = ["w"]
        for i in range(self.depth + 1):
            names += [f"K{i}", f"b{i}"]
        return sorted(names)

    # -- gradient-free evaluation (vectorized over a batch) -------------------

    def _check_batch(self, h0: np.ndarray) -> None:
        if h0.shape[1] != 1 + self.d + self.q:
            raise ValueError(
                f"input dim {h0.shape[1]} != 1 + d + q = {1 + self.d + self.q}"
            )

    def _forward_layers(self, h0: np.ndarray):
        """Hidden states and tanh(pre) per layer for a (B, in) batch."""
        W = self.weights
        pre = (h0 * self.input_scale) @ W["K0"].T + W["b0"]
        hs = [np.logaddexp(pre, -pre)]
        ts = [np.tanh(pre)]
        for i in range(1, self.depth + 1):
            pre = hs[-1] @ W[f"K{i}"].T + W[f"b{i}"]
            hs.append(hs[-1] + np.logaddexp(pre, -pre))
            ts.append(np.tanh(pre))
        return hs, ts

    def forward_batch(self, h0: np.ndarray) -> np.ndarray:
        h0 = np.atleast_2d(np.asarray(h0, dtype=np.float64))
        self._check_batch(h0)
        hs, _ = self._forward_layers(h0)
        return hs[-1] @ self.weights["w"]

    def grad_batch(self, h0: np.ndarray):
        """(phi, grad_h0) for a batch, via the explicit VJP chain."""
        h0 = np.atleast_2d(np.asarray(h0, dtype=np.float64))
        self._check_batch(h0)
        W = self.weights
        hs, ts = self._forward_layers(h0)
        phi = hs[-1] @ W["w"]
        v = np.broadcast_to(W["w"], ts[0].shape).copy()
        for i in range(self.depth, 0, -1):
            v = v + (ts[i] * v) @ W[f"K{i}"]
        grad = ((ts[0] * v) @ W["K0"]) * self.input_scale
        return phi, grad

    def forward(self, inp: NetInput) -> float:
        return float(self.forward_batch(inp.stacked()[None, :])[0])

    def grad_input(self, inp: NetInput):
        """(dphi/ds, grad_z phi, grad_y phi) at a single input."""
        _, g = self.grad_batch(inp.stacked()[None, :])
        g = g[0]
        return float(g[0]), g[1 : 1 + self.d], g[1 + self.d :]

    # -- tape-recorded evaluation ---------------------------------------------

    def bind(self, tape: tp.Tape) -> "TapeNet":
        return TapeNet(self, tape)

    # -- persistence ------------------------------------------------------------

    def save(self, path, metadata: dict | None = None) -> None:
        """Bit-exact checkpoint: npz of all tensors plus a JSON config entry."""
        meta = dict(metadata or {})
        meta.update({"d": self.d, "q": self.q, "width": self.width,
                     "depth": self.depth, "time_scale": self.time_scale})
        arrays = dict(self.weights)
        arrays["__meta__"] = np.frombuffer(
            json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8
        )
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> tuple["ValueNetwork", dict]:
        data = np.load(path)
        meta = json.loads(bytes(data["__meta__"]).decode())
        weights = {k: data[k] for k in data.files if k != "__meta__"}
        return cls(weights, meta["d"], meta["q"],
                   time_scale=meta.get("time_scale", 1.0)), meta


class TapeNet:
    """Network bound to one tape; weights become trainable leaves."""

    def __init__(self, net: ValueNetwork, tape: tp.Tape):
        self.net = net
        self.tape = tape
        self.nodes = {
            name: tape.leaf(arr, trainable=True, name=name)
            for name, arr in net.weights.items()
        }

    def _input_node(self, s: float, a, alpha, y: np.ndarray) -> tp.Node:
        parts = [np.array([float(s)])]
        parts.append(a)
        parts.append(alpha)
        parts.append(np.asarray(y, dtype=np.float64))
        return tp.concat(parts)

    def _layers(self, h0: tp.Node):
        W = self.nodes
        scaled = tp.mul(h0, self.net.input_scale)
        pre = tp.add(tp.matvec(W["K0"], scaled), W["b0"])
        hs = [tp.softplus_sym(pre)]
        pres = [pre]
        for i in range(1, self.net.depth + 1):
            pre = tp.add(tp.matvec(W[f"K{i}"], hs[-1]), W[f"b{i}"])
            hs.append(tp.add(hs[-1], tp.softplus_sym(pre)))
            pres.append(pre)
        return hs, pres

    def forward(self, s: float, a, alpha, y: np.ndarray) -> tp.Node:
        """Scalar phi as a tape node; a and alpha may be nodes or arrays."""
        a = a if isinstance(a, tp.Node) else self.tape.leaf(a)
        alpha = alpha if isinstance(alpha, tp.Node) else self.tape.leaf(alpha)
        h0 = self._input_node(s, a, alpha, y)
        hs, _ = self._layers(h0)
        return tp.dot(self.nodes["w"], hs[-1])

    def forward_and_grads(self, s: float, a, alpha, y: np.ndarray):
        """phi plus its input-gradient components, all as tape nodes.

        Returns (phi, dphi_ds, grad_a, grad_alpha, grad_y); the gradient
        nodes stay differentiable w.r.t. the weight leaves.
        """
        a = a if isinstance(a, tp.Node) else self.tape.leaf(a)
        alpha = alpha if isinstance(alpha, tp.Node) else self.tape.leaf(alpha)
        h0 = self._input_node(s, a, alpha, y)
        hs, pres = self._layers(h0)
        phi = tp.dot(self.nodes["w"], hs[-1])

        v = self.nodes["w"]
        for i in range(self.net.depth, 0, -1):
            t_i = tp.tanh(pres[i])
            v = tp.add(v, tp.matvec_t(self.nodes[f"K{i}"], tp.mul(t_i, v)))
        g0 = tp.mul(
            tp.matvec_t(self.nodes["K0"], tp.mul(tp.tanh(pres[0]), v)),
            self.net.input_scale,
        )

        d = self.net.d
        dphi_ds = tp.getitem(g0, 0)
        grad_a = tp.getitem(g0, slice(1, d))  # excludes the alpha slot
        grad_alpha = tp.getitem(g0, d)
        grad_y = tp.getitem(g0, slice(1 + d, 1 + d + self.net.q))
        return phi, dphi_ds, grad_a, grad_alpha, grad_y

    def gradients(self, grad_map: dict) -> dict[str, np.ndarray]:
        """Weight gradients by name from a Tape.backward result."""
        return {
            name: grad_map.get(node, np.zeros_like(node.value))
            for name, node in self.nodes.items()
        }
