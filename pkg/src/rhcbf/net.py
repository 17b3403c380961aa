"""Smooth scalar tanh network with state gradients and mixed parameter gradients.

The training objective contains terms in ``h(z)`` and in ``<grad_z h(z), v>``, so
the parameter gradient needs the mixed derivative of ``grad_z h``.  It is
obtained as the directional derivative (along ``v``) of the ordinary backprop
quantities: a forward tangent pass through the reverse sweep.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _dtanh(t):
    return 1.0 - t * t


def spectral_norm_power(W: np.ndarray, iters: int = 50, tol: float = 1e-10, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``W^T W``.

    Converges from below, so it is a diagnostic, not a certificate.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if not np.any(W):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(W.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        w = W.T @ (W @ v)
        n = np.linalg.norm(w)
        if n == 0.0:
            return 0.0
        v = w / n
        new = float(np.sqrt(n))
        if abs(new - sigma) <= tol * max(1.0, new):
            sigma = new
            break
        sigma = new
    return float(np.linalg.norm(W @ v))


class BarrierNet:
    """Fully connected net, tanh hidden layers, identity scalar output.

    Weights are stored as ``(out, in)`` matrices.  Evaluation functions accept a
    single state ``(n,)`` or a batch ``(N, n)``.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray], metadata: Optional[dict] = None):
        self.weights = [np.array(W, dtype=float) for W in weights]
        self.biases = [np.array(b, dtype=float).reshape(-1) for b in biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or W.shape[0] != b.size:
                raise ValueError(f"layer {k}: weight {W.shape} and bias {b.shape} disagree")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k}: input width {W.shape[1]} != {self.weights[k - 1].shape[0]}")
        if self.weights[-1].shape[0] != 1:
            raise ValueError("output layer must have a single unit")
        self.metadata = dict(metadata or {})

    @classmethod
    def init(cls, layer_dims=(4, 32, 16, 1), seed: int = 0) -> "BarrierNet":
        """Uniform ``+-1/sqrt(fan_in)`` initialization."""
        if len(layer_dims) < 2 or layer_dims[-1] != 1:
            raise ValueError("layer_dims must end in 1 and have at least two entries")
        rng = np.random.default_rng(seed)
        Ws, bs = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            r = 1.0 / np.sqrt(fan_in)
            Ws.append(rng.uniform(-r, r, size=(fan_out, fan_in)))
            bs.append(rng.uniform(-r, r, size=fan_out))
        return cls(Ws, bs, {"seed": seed})

    # -- shape helpers ----------------------------------------------------

    @property
    def layer_dims(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(W.shape[0] for W in self.weights)

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)])

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {theta.size}")
        i = 0
        for k, W in enumerate(self.weights):
            n = W.size
            self.weights[k] = theta[i : i + n].reshape(W.shape).copy()
            i += n
            m = self.biases[k].size
            self.biases[k] = theta[i : i + m].copy()
            i += m

    def copy(self) -> "BarrierNet":
        return BarrierNet([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.metadata)

    def _batch(self, z):
        Z = np.asarray(z, dtype=float)
        single = Z.ndim == 1
        Z = np.atleast_2d(Z)
        if Z.shape[1] != self.n_in:
            raise ValueError(f"state dimension {Z.shape[1]} != network input {self.n_in}")
        return Z, single

    # -- evaluation -------------------------------------------------------

    def _forward(self, Z):
        acts = [Z]  # a_0 .. a_{L-1}
        a = Z
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.tanh(a @ W.T + b)
            acts.append(a)
        h = a @ self.weights[-1].T[:, 0] + self.biases[-1][0]
        return h, acts

    def _reverse(self, acts):
        # s_k = dh/dp_k and g_k = dh/da_k for hidden layers k = 1..L-1
        N = acts[0].shape[0]
        s = np.broadcast_to(self.weights[-1][0], (N, self.weights[-1].shape[1]))
        gs, ss = [None] * len(acts), [None] * len(acts)
        for k in range(len(acts) - 1, 0, -1):
            g = s if k == len(acts) - 1 else s @ self.weights[k]
            gs[k] = g
            ss[k] = _dtanh(acts[k]) * g
            s = ss[k]
        grad = s @ self.weights[0] if len(acts) > 1 else np.broadcast_to(self.weights[0][0], (N, self.n_in)).copy()
        return grad, ss, gs

    def forward(self, z):
        Z, single = self._batch(z)
        h, _ = self._forward(Z)
        return float(h[0]) if single else h

    __call__ = forward

    def grad_z(self, z):
        Z, single = self._batch(z)
        _, acts = self._forward(Z)
        g, _, _ = self._reverse(acts)
        return g[0].copy() if single else g

    def value_and_grad(self, z):
        Z, single = self._batch(z)
        h, acts = self._forward(Z)
        g, _, _ = self._reverse(acts)
        if single:
            return float(h[0]), g[0].copy()
        return h, g

    def param_grad(self, z, c_h=None, v=None, c_norm=None) -> np.ndarray:
        """Flat gradient over parameters of

        ``sum_i c_h[i] h(z_i) + <grad h(z_i), v_i> + c_norm[i] |grad h(z_i)|``.

        The norm term uses ``grad h / |grad h|`` as direction and contributes
        zero where the gradient vanishes.
        """
        Z, _ = self._batch(z)
        N, n = Z.shape
        c_h = np.zeros(N) if c_h is None else np.broadcast_to(np.asarray(c_h, dtype=float), (N,))
        V = np.zeros((N, n)) if v is None else np.array(np.broadcast_to(np.asarray(v, dtype=float), (N, n)))
        _, acts = self._forward(Z)
        L = len(self.weights)
        if c_norm is not None:
            c_norm = np.broadcast_to(np.asarray(c_norm, dtype=float), (N,))
            grad, _, _ = self._reverse(acts)
            nrm = np.linalg.norm(grad, axis=1)
            safe = nrm > 0
            V[safe] += (c_norm[safe] / nrm[safe])[:, None] * grad[safe]
        if L == 1:
            gW = c_h @ Z + V.sum(axis=0)
            return np.concatenate([gW, [c_h.sum()]])
        _, ss, gs = self._reverse(acts)

        # tangent pass along v
        adots = [V]
        for k in range(1, L):
            pdot = adots[-1] @ self.weights[k - 1].T
            adots.append(_dtanh(acts[k]) * pdot)
        # reverse tangents: s_L = 1 is constant so its tangent is zero
        sdots = [None] * L
        sdot_next = None
        for k in range(L - 1, 0, -1):
            t = acts[k]
            pdot = adots[k - 1] @ self.weights[k - 1].T
            gdot = 0.0 if sdot_next is None else sdot_next @ self.weights[k]
            sdots[k] = -2.0 * t * _dtanh(t) * pdot * gs[k] + _dtanh(t) * gdot
            sdot_next = sdots[k]

        out = []
        for k in range(L):
            a_prev, adot_prev = acts[k], adots[k]
            if k == L - 1:
                # output layer: s = 1, sdot = 0
                gW = (c_h @ a_prev + adot_prev.sum(axis=0))[None, :]
                gb = np.array([c_h.sum()])
            else:
                s, sd = ss[k + 1], sdots[k + 1]
                coeff = c_h[:, None] * s + sd
                gW = coeff.T @ a_prev + s.T @ adot_prev
                gb = coeff.sum(axis=0)
            out.append(np.concatenate([gW.ravel(), gb]))
        return np.concatenate(out)

    # -- Lipschitz bounds -------------------------------------------------

    def spectral_norms(self, exact: bool = True) -> list:
        if exact:
            return [float(np.linalg.norm(W, 2)) for W in self.weights]
        return [spectral_norm_power(W) for W in self.weights]

    def global_lipschitz_bound(self) -> float:
        """Product of layer spectral norms (tanh is 1-Lipschitz)."""
        return float(np.prod(self.spectral_norms(exact=True)))

    # -- persistence ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "layer_dims": list(self.layer_dims),
            "activation": "tanh",
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BarrierNet":
        if not isinstance(d, dict) or "version" not in d:
            raise CheckpointError("checkpoint has no version field")
        if d["version"] != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {d['version']!r}")
        if d.get("activation", "tanh") != "tanh":
            raise CheckpointError(f"unsupported activation {d['activation']!r}")
        try:
            net = cls([np.array(W) for W in d["weights"]], [np.array(b) for b in d["biases"]], d.get("metadata"))
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"malformed checkpoint: {e}") from e
        if list(net.layer_dims) != list(d["layer_dims"]):
            raise CheckpointError(f"layer_dims {d['layer_dims']} do not match weights {net.layer_dims}")
        return net

    def save(self, path) -> None:
        # repr-exact floats via json keep the round trip bit-identical
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "BarrierNet":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise CheckpointError(f"cannot parse checkpoint {path}: {e}") from e
        return cls.from_dict(d)
