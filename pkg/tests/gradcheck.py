"""Central finite-difference checks and layer cases shared by the nn tests."""
import numpy as np

from nucleus3d.nn import Tensor
from nucleus3d.nn import functional as F

H = 1e-5


def gradcheck(fn, arrays, rng, h=H):
    """Max relative error between analytic and numeric gradients of ``sum(fn(*x) * R)``.

    The error of each input is ``max|g_a - g_n| / max(max|g_n|, 1e-8)``.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    R = rng.normal(size=out.shape) if out.data.ndim else np.ones(())
    F.sum(F.mul(out, R)).backward()
    worst = 0.0
    for t, a in zip(tensors, arrays):
        num = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            plus, minus = a.copy(), a.copy()
            plus[idx] += h
            minus[idx] -= h
            args_p = [Tensor(plus if u is t else v.data) for u, v in zip(tensors, tensors)]
            args_m = [Tensor(minus if u is t else v.data) for u, v in zip(tensors, tensors)]
            fp = (fn(*args_p).data * R).sum()
            fm = (fn(*args_m).data * R).sum()
            num[idx] = (fp - fm) / (2 * h)
        scale = max(np.abs(num).max(), 1e-8)
        worst = max(worst, np.abs(t.grad - num).max() / scale)
    return worst


def _spatial(rng, lo=2, hi=4, even=False):
    if even:
        return tuple(int(2 * rng.integers(1, hi // 2 + 1)) for _ in range(3))
    return tuple(int(rng.integers(lo, hi + 1)) for _ in range(3))


def layer_cases(rng):
    """name -> builder(rng) returning (fn, arrays) for one random shape."""

    def conv(rng):
        n, ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        d = int(rng.choice([1, 2]))
        k = int(rng.choice([1, 3]))
        pad = d * (k - 1) // 2
        x = rng.normal(size=(n, ci) + _spatial(rng))
        return (lambda x, w, b: F.conv3d(x, w, b, pad, d)), [x, rng.normal(size=(co, ci, k, k, k)),
                                                             rng.normal(size=co)]

    def tconv(rng):
        ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = rng.normal(size=(1, ci) + _spatial(rng, 1, 3))
        return F.conv_transpose3d, [x, rng.normal(size=(ci, co, 2, 2, 2)), rng.normal(size=co)]

    def pool(rng):
        x = rng.normal(size=(1, int(rng.integers(1, 3))) + _spatial(rng, hi=4, even=True))
        return F.max_pool3d, [x]

    def bn_train(rng):
        c = int(rng.integers(1, 4))
        x = rng.normal(size=(int(rng.integers(1, 3)), c) + _spatial(rng, 2, 3))
        return (lambda x, g, b: F.batch_norm3d(x, g, b, None, None, True)), \
            [x, rng.normal(size=c), rng.normal(size=c)]

    def bn_eval(rng):
        c = int(rng.integers(1, 4))
        x = rng.normal(size=(1, c) + _spatial(rng, 2, 3))
        mean, var = rng.normal(size=c), rng.uniform(0.5, 2, size=c)
        return (lambda x, g, b: F.batch_norm3d(x, g, b, mean, var, False)), \
            [x, rng.normal(size=c), rng.normal(size=c)]

    def relu(rng):
        x = rng.normal(size=(1, 2) + _spatial(rng))
        x[np.abs(x) < 1e-3] = 0.5    # keep clear of the kink
        return F.relu, [x]

    def sigmoid(rng):
        return F.sigmoid, [3 * rng.normal(size=(1, 2) + _spatial(rng))]

    def concat(rng):
        s = _spatial(rng)
        return (lambda a, b: F.cat([a, b], axis=1)), [rng.normal(size=(1, 2) + s),
                                                      rng.normal(size=(1, 3) + s)]

    def bce(rng):
        s = (1, 1) + _spatial(rng)
        gt = (rng.random(s) < 0.5).astype(float)
        return (lambda p: F.bce_loss(p, gt)), [rng.uniform(0.05, 0.95, s)]

    def dual_bce(rng):
        s = (1, 1) + _spatial(rng)
        g1, g2 = (rng.random(s) < 0.5).astype(float), (rng.random(s) < 0.3).astype(float)
        return (lambda a, b: F.add(F.bce_loss(F.sigmoid(a), g1), F.bce_loss(F.sigmoid(b), g2))), \
            [rng.normal(size=s), rng.normal(size=s)]

    return {"conv3d": conv, "transposed_conv3d": tconv, "maxpool3d": pool,
            "batchnorm3d_train": bn_train, "batchnorm3d_eval": bn_eval, "relu": relu,
            "sigmoid": sigmoid, "concat": concat, "bce_loss": bce, "dual_bce_loss": dual_bce}


def naive_conv3d(x, w, b, pad, d):
    """Six nested loops over output voxel and kernel tap, per channel pair."""
    N, ci, D, Hh, W = x.shape
    co, _, k = w.shape[:3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    shape = [n + 2 * pad - d * (k - 1) for n in (D, Hh, W)]
    out = np.zeros((N, co, *shape))
    c = (k - 1) // 2
    for n in range(N):
        for o in range(co):
            for i in range(ci):
                for p in range(shape[0]):
                    for q in range(shape[1]):
                        for r in range(shape[2]):
                            acc = 0.0
                            for a in range(k):
                                for bb in range(k):
                                    for cc in range(k):
                                        # y(v) = sum_u x(v - d u) h(u), u = tap - center;
                                        # output p sits at padded index p + d c
                                        u = (a - c, bb - c, cc - c)
                                        acc += w[o, i, a, bb, cc] * xp[n, i, p + d * (c - u[0]),
                                                                       q + d * (c - u[1]),
                                                                       r + d * (c - u[2])]
                            out[n, o, p, q, r] += acc
            out[n, o] += b[o]
    return out
