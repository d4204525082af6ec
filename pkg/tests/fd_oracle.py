"""Central finite-difference gradients of the GNN training loss.

Independent of the library's forward and backward code. The quotient
``(L(p + h) - L(p - h)) / (2h)`` is evaluated by propagating the change of
every layer output directly instead of subtracting two nearly equal
losses, which would leave about ``eps * L / h`` (~1e-10) of roundoff in
each entry. Differences through tanh use
``tanh(a + d) - tanh(a) = tanh(d) sech(a)^2 / (1 + tanh(a) tanh(d))``,
through softmax ``expm1``, and through the Ncut ratio an exact rational
identity, so each difference keeps full relative precision.
"""

import numpy as np

GAMMA_EPS = 1e-12


def _inorm(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    out[:, 0] = x[:, 0] / x[:, 0].max()
    bx, by = x[:, 1].copy(), x[:, 2].copy()
    if by.max() - by.min() > bx.max() - bx.min():
        bx, by = by, -bx
    for k, c in ((1, bx), (2, by)):
        c = c - c.mean()
        m = np.abs(c).max()
        out[:, k] = c / m if m > 0 else 0.0
    return out


def _tanh_diff(a, d):
    ta, td = np.tanh(a), np.tanh(d)
    return td / np.cosh(a) ** 2 / (1.0 + ta * td)


class _Net:
    def __init__(self, model, g, x):
        self.p = model.params
        self.n_conv = len(model.arch.conv_widths)
        self.n_dense = len(model.arch.dense_widths)
        a = g.adjacency.toarray()
        deg = a.sum(axis=1)
        self.a, self.deg = a, deg
        self.mop = np.divide(a, deg[:, None], out=np.zeros_like(a), where=deg[:, None] > 0)
        h = _inorm(x)
        self.inputs, self.aggs, self.pres = [], [], []
        for l in range(self.n_conv):
            agg = self.mop @ h
            pre = h @ self.p[f"conv{l}.W1"] + agg @ self.p[f"conv{l}.W2"]
            self.inputs.append(h)
            self.aggs.append(agg)
            self.pres.append(pre)
            h = np.tanh(pre)
        for l in range(self.n_dense):
            pre = h @ self.p[f"dense{l}.W"] + self.p[f"dense{l}.b"]
            self.inputs.append(h)
            self.aggs.append(None)
            self.pres.append(pre)
            h = np.tanh(pre) if l < self.n_dense - 1 else pre
        z = h - h.max(axis=1, keepdims=True)
        self.y = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        self.ay = a @ self.y
        self.gamma = self.y.T @ deg + GAMMA_EPS
        self.num = self.y.T @ deg - (self.y * self.ay).sum(axis=0)

    def stage_weights(self, s):
        if s < self.n_conv:
            return self.p[f"conv{s}.W1"], self.p[f"conv{s}.W2"]
        return self.p[f"dense{s - self.n_conv}.W"], None

    def loss_change(self, s, dpre):
        """Change of the loss when stage ``s`` pre-activations change by ``dpre``.

        ``dpre`` has shape (B, N, width); returns shape (B,).
        """
        last = self.n_conv + self.n_dense - 1
        for t in range(s, last + 1):
            if t > s:
                w1, w2 = self.stage_weights(t)
                dpre = dh @ w1
                if w2 is not None:
                    dpre = dpre + np.einsum("ij,bjk->bik", self.mop, dh) @ w2
            dh = dpre if t == last else _tanh_diff(self.pres[t], dpre)
        # softmax difference: y'_i - y_i = y_i * sum_j y_j e^{dz_j} expm1(dz_i - dz_j) / S
        dz = dh
        ey = self.y[None] * np.exp(dz - dz.max(axis=2, keepdims=True))
        rel = np.expm1(dz[..., :, None] - dz[..., None, :])        # (B, N, i, j)
        numer = np.einsum("bnj,bnij->bni", ey, rel)
        dy = self.y[None] * numer / ey.sum(axis=2, keepdims=True)
        # change of sum_k num_k / gamma_k
        d_gamma = np.einsum("bnk,n->bk", dy, self.deg)
        a_dy = np.einsum("ij,bjk->bik", self.a, dy)
        d_num = d_gamma - 2.0 * np.einsum("bnk,nk->bk", dy, self.ay) \
            - np.einsum("bnk,bnk->bk", dy, a_dy)
        g = self.gamma[None]
        d_ratio = (d_num * g - self.num[None] * d_gamma) / (g * (g + d_gamma))
        return d_ratio.sum(axis=1)


def fd_gradient(model, g, x, h=1e-6, chunk=512):
    """Central-difference gradient of the (L2-free) loss for every parameter."""
    net = _Net(model, g, x)
    n = g.n
    out = {}
    for name, value in model.params.items():
        layer, kind = name.split(".")
        if layer.startswith("conv"):
            s = int(layer[4:])
        else:
            s = net.n_conv + int(layer[5:])
        width = net.pres[s].shape[1]
        flat = np.empty(value.size)
        for start in range(0, value.size, chunk):
            idx = np.arange(start, min(start + chunk, value.size))
            b = len(idx)
            dpre = np.zeros((2 * b, n, width))
            if kind == "b":
                rows, cols = None, idx
                col_vals = np.ones((b, n))
            else:
                rows, cols = np.unravel_index(idx, value.shape)
                src = net.aggs[s] if kind == "W2" else net.inputs[s]
                col_vals = src[:, rows].T                      # (b, N)
            dpre[np.arange(b), :, cols] = h * col_vals
            dpre[b + np.arange(b), :, cols] = -h * col_vals
            dl = net.loss_change(s, dpre)
            flat[idx] = (dl[:b] - dl[b:]) / (2 * h)
        out[name] = flat.reshape(value.shape)
    return out


def plain_fd_gradient(loss_fn, params, names, h=1e-6):
    """Textbook central differences on selected ``(name, index)`` entries."""
    out = []
    for name, i in names:
        flat = params[name].reshape(-1)
        old = flat[i]
        flat[i] = old + h
        lp = loss_fn()
        flat[i] = old - h
        lm = loss_fn()
        flat[i] = old
        out.append((lp - lm) / (2 * h))
    return np.array(out)
