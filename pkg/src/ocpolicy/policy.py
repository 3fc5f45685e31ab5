"""MLP policy with hand-written first and mixed second derivatives.

Layout: ``z_l = h_{l-1} W_l^T + b_l``, ``h_l = act(z_l)`` for hidden layers
and ``u = c + r * tanh(z_L)`` with ``c``/``r`` the centre/half-width of the
control box, so every output lies inside the box. Parameters live in one
flat vector ``theta`` (W_1, b_1, W_2, b_2, ...), weights row-major.

All evaluation methods accept a single state (1-D) or a batch (2-D).
Parameter gradients are summed over the batch.
"""
import hashlib
import json

import numpy as np

from . import instrument

FORMAT = "ocpolicy-policy"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _act(name):
    if name == "relu":
        def f(z):
            return np.maximum(z, 0.0)

        def d1(z):
            return (z > 0.0).astype(z.dtype)

        def d2(z):
            return np.zeros_like(z)
    elif name == "tanh":
        def f(z):
            return np.tanh(z)

        def d1(z):
            return 1.0 - np.tanh(z) ** 2

        def d2(z):
            s = np.tanh(z)
            return -2.0 * s * (1.0 - s * s)
    else:
        raise ValueError(f"unknown activation {name!r}")
    return f, d1, d2


class PolicyNet:
    def __init__(self, sizes, u_min, u_max, activation="relu", theta=None):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.activation = activation
        self._f, self._d1, self._d2 = _act(activation)
        self.u_min = np.asarray(u_min, dtype=float).reshape(self.sizes[-1])
        self.u_max = np.asarray(u_max, dtype=float).reshape(self.sizes[-1])
        if not np.all(np.isfinite(self.u_min) & np.isfinite(self.u_max)):
            raise ValueError("policy output bounds must be finite")
        self.center = 0.5 * (self.u_min + self.u_max)
        self.radius = 0.5 * (self.u_max - self.u_min)
        n = self.n_params
        self.theta = np.zeros(n) if theta is None else np.array(theta, dtype=float)
        if self.theta.shape != (n,):
            raise ValueError(f"theta must have {n} entries")
        self._bind()

    @classmethod
    def init(cls, sizes, u_min, u_max, activation="relu", seed=0, out_gain=1.0):
        """Kaiming-uniform fan-in initialisation, zero biases.

        ``out_gain`` scales the output layer; a small value starts the policy
        near the centre of the control box.
        """
        net = cls(sizes, u_min, u_max, activation)
        rng = np.random.default_rng(seed)
        hidden_gain = np.sqrt(2.0) if activation == "relu" else 5.0 / 3.0
        n_layers = len(net.layers)
        for i, (W, _) in enumerate(net.layers):
            gain = out_gain if i == n_layers - 1 else hidden_gain
            bound = gain * np.sqrt(3.0 / W.shape[1])
            W[...] = rng.uniform(-bound, bound, size=W.shape)
        return net

    @property
    def n_params(self):
        return sum((a + 1) * b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    @property
    def n_x(self):
        return self.sizes[0]

    @property
    def n_u(self):
        return self.sizes[-1]

    def _bind(self):
        self.layers = []
        off = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            W = self.theta[off:off + a * b].reshape(b, a)
            off += a * b
            bias = self.theta[off:off + b]
            off += b
            self.layers.append((W, bias))

    def _split(self, flat):
        out = []
        off = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            out.append((flat[off:off + a * b].reshape(b, a), flat[off + a * b:off + a * b + b]))
            off += a * b + b
        return out

    def set_params(self, theta):
        self.theta[:] = theta

    def copy(self):
        return PolicyNet(self.sizes, self.u_min, self.u_max, self.activation, self.theta.copy())

    def _run(self, X):
        zs, hs = [], [X]
        h = X
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            z = h @ W.T + b
            zs.append(z)
            if i < last:
                h = self._f(z)
                hs.append(h)
        return zs, hs

    def forward(self, x):
        X = np.atleast_2d(x)
        zs, _ = self._run(X)
        u = self.center + self.radius * np.tanh(zs[-1])
        return u[0] if np.ndim(x) == 1 else u

    def _reverse(self, zs, hs, upstream, want_params=True):
        """Reverse sweep seeded by d/du. Returns (flat param grad, d/dx)."""
        s = np.tanh(zs[-1])
        delta = upstream * self.radius * (1.0 - s * s)
        grad = np.zeros(self.n_params) if want_params else None
        blocks = self._split(grad) if want_params else None
        for i in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[i]
            if want_params:
                gW, gb = blocks[i]
                gW += delta.T @ hs[i]
                gb += delta.sum(axis=0)
            back = delta @ W
            if i > 0:
                delta = back * self._d1(zs[i - 1])
        return grad, back

    def backward_params(self, x, upstream):
        """d(upstream . forward(x)) / d theta."""
        X = np.atleast_2d(x)
        G = np.atleast_2d(upstream)
        zs, hs = self._run(X)
        return self._reverse(zs, hs, G)[0]

    def input_jvp(self, x, v):
        """d(v . forward(x)) / dx, one reverse sweep per row."""
        X = np.atleast_2d(x)
        V = np.atleast_2d(v)
        instrument.bump("input_jacobian")
        zs, hs = self._run(X)
        g = self._reverse(zs, hs, V, want_params=False)[1]
        return g[0] if np.ndim(x) == 1 else g

    def input_jacobian(self, x):
        """Full d forward / dx, shape (B, n_u, n_x) (or (n_u, n_x) for one state)."""
        X = np.atleast_2d(x)
        instrument.bump("input_jacobian")
        zs, hs = self._run(X)
        J = np.empty((X.shape[0], self.n_u, self.n_x))
        for j in range(self.n_u):
            V = np.zeros((X.shape[0], self.n_u))
            V[:, j] = 1.0
            J[:, j, :] = self._reverse(zs, hs, V, want_params=False)[1]
        return J[0] if np.ndim(x) == 1 else J

    def forward_and_jacobian(self, x):
        X = np.atleast_2d(x)
        zs, _ = self._run(X)
        u = self.center + self.radius * np.tanh(zs[-1])
        return u, self.input_jacobian(X)

    def sobolev_backward_params(self, x, v, upstream):
        """d(upstream . input_jvp(x, v)) / d theta.

        Tangent-linear pass in the state direction ``upstream`` followed by
        one adjoint sweep through both the primal and tangent chains.
        """
        X = np.atleast_2d(x)
        V = np.atleast_2d(v)
        Wd = np.atleast_2d(upstream)
        instrument.bump("sobolev_sweeps", X.shape[0])
        last = len(self.layers) - 1
        zs, hs, dzs, dhs = [], [X], [], [Wd]
        h, dh = X, Wd
        for i, (W, b) in enumerate(self.layers):
            z = h @ W.T + b
            dz = dh @ W.T
            zs.append(z)
            dzs.append(dz)
            if i < last:
                h = self._f(z)
                dh = self._d1(z) * dz
                hs.append(h)
                dhs.append(dh)
        s = np.tanh(zs[-1])
        t1 = 1.0 - s * s
        t2 = -2.0 * s * t1
        vr = V * self.radius
        zbar = vr * t2 * dzs[-1]
        dzbar = vr * t1
        grad = np.zeros(self.n_params)
        blocks = self._split(grad)
        for i in range(last, -1, -1):
            W, _ = self.layers[i]
            gW, gb = blocks[i]
            gW += zbar.T @ hs[i] + dzbar.T @ dhs[i]
            gb += zbar.sum(axis=0)
            if i > 0:
                hbar = zbar @ W
                dhbar = dzbar @ W
                zp = zs[i - 1]
                d1 = self._d1(zp)
                dzbar = d1 * dhbar
                zbar = d1 * hbar + self._d2(zp) * dzs[i - 1] * dhbar
        return grad

    # checkpoints

    def _header(self):
        return {
            "format": FORMAT,
            "version": VERSION,
            "sizes": list(self.sizes),
            "n_layers": len(self.layers),
            "activation": self.activation,
            "u_min": self.u_min.tolist(),
            "u_max": self.u_max.tolist(),
            "sha256": hashlib.sha256(self.theta.astype("<f8").tobytes()).hexdigest(),
        }

    def save(self, path):
        arrays = {"header": np.array(json.dumps(self._header()))}
        for i, (W, b) in enumerate(self.layers):
            arrays[f"W{i}"] = np.ascontiguousarray(W, dtype="<f8")
            arrays[f"b{i}"] = np.ascontiguousarray(b, dtype="<f8")
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)


def load(path):
    try:
        data = np.load(path, allow_pickle=False)
        header = json.loads(str(data["header"]))
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    if header.get("format") != FORMAT:
        raise CheckpointError("not a policy checkpoint")
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    sizes = header["sizes"]
    n_layers = header["n_layers"]
    stored = sorted(k for k in data.files if k.startswith("W"))
    if n_layers != len(sizes) - 1 or len(stored) != n_layers:
        raise CheckpointError("layer count in header does not match stored blocks")
    net = PolicyNet(sizes, header["u_min"], header["u_max"], header["activation"])
    for i, (W, b) in enumerate(net.layers):
        Wi, bi = data[f"W{i}"], data[f"b{i}"]
        if Wi.shape != W.shape or bi.shape != b.shape:
            raise CheckpointError(f"layer {i} has the wrong shape")
        W[...] = Wi
        b[...] = bi
    digest = hashlib.sha256(net.theta.astype("<f8").tobytes()).hexdigest()
    if digest != header["sha256"]:
        raise CheckpointError("parameter checksum mismatch")
    return net
