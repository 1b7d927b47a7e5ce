"""Independent oracles used across the test suite."""

import itertools

import numpy as np


def central_diff(f, arrays, h=1e-5):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. every array."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (f(*plus) - f(*minus)) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def hsic1_loops(k, l):
    """Unbiased HSIC as the literal U-statistic over distinct index tuples."""
    n = k.shape[0]
    idx = range(n)
    t1 = sum(k[i, j] * l[i, j] for i, j in itertools.permutations(idx, 2))
    t2 = sum(k[i, j] * l[q, r] for i, j, q, r in itertools.permutations(idx, 4))
    t3 = sum(k[i, j] * l[i, q] for i, j, q in itertools.permutations(idx, 3))
    falling = lambda m: np.prod([n - i for i in range(m)])  # noqa: E731
    return t1 / falling(2) + t2 / falling(4) - 2 * t3 / falling(3)


def enumerate_partitions(items):
    """Set partitions by recursive insertion of each element (a second, independent enumerator)."""
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in enumerate_partitions(rest):
        yield [[first]] + part
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1 :]


def grouping_oracle(tasks, s, gamma):
    """Straight transcription of the grouping pseudocode with the same tie rules."""
    index = {t: i for i, t in enumerate(tasks)}
    best = None
    for part in enumerate_partitions(tasks):
        part = sorted((sorted(g, key=index.get) for g in part), key=lambda g: index[g[0]])
        gvals = []
        for group in part:
            if len(group) == 1:
                gvals.append(gamma)
                continue
            tv = [np.mean([s[index[t], index[i]] for i in group if i != t]) for t in group]
            gvals.append(np.mean(tv))
        v = float(np.mean(gvals))
        key = (len(part), [tuple(index[t] for t in g) for g in part])
        if best is None or v > best[0] + 1e-12 or (abs(v - best[0]) <= 1e-12 and key < best[1]):
            best = (v, key, part)
    return best[0], [tuple(g) for g in best[2]]


def autodiff_vs_fd(build, arrays, seed=0, h=1e-5):
    """Max relative error between tape gradients and central differences.

    ``build`` maps Tensors to a Tensor; it is contracted with a fixed random
    cotangent so every output element contributes.
    """
    from mtsl.tensor import Tape, Tensor, backward, mul, no_grad, tsum

    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with no_grad():
        shape = build(*[Tensor(a) for a in arrays]).shape
    r = np.random.default_rng(seed).standard_normal(shape)

    def scalar(*arrs):
        with no_grad():
            return float(np.sum(build(*[Tensor(a) for a in arrs]).data * r))

    with Tape():
        ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        loss = tsum(mul(build(*ts), Tensor(r)))
    grads = backward(loss, wrt=ts)
    fd = central_diff(scalar, arrays, h)
    return max(rel_err(grads[t].data, g) for t, g in zip(ts, fd))


def away_from(x, points, margin=0.1):
    """Push entries of ``x`` at least ``margin`` away from each kink in ``points``."""
    x = np.array(x, dtype=np.float64)
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, margin, -margin)
    return x


def op_cases(rng):
    """(name, build, arrays) for every differentiable primitive, inputs drawn from ``rng``."""
    from mtsl import tensor as T

    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    w = rng.standard_normal((5, 4))
    bias = rng.standard_normal(5)
    return [
        ("add", T.add, [a, b]),
        ("sub", T.sub, [a, b]),
        ("mul", T.mul, [a, b]),
        ("div", T.div, [a, pos]),
        ("scalar-mul", T.mul, [a, rng.standard_normal(())]),
        ("relu", T.relu, [away_from(a, [0.0])]),
        ("sigmoid", T.sigmoid, [3 * a]),
        ("square", T.square, [a]),
        ("sqrt", T.sqrt, [pos]),
        ("exp", T.exp, [a]),
        ("log", T.log, [pos]),
        ("clip", lambda x: T.clip(x, -0.5, 0.5), [away_from(a, [-0.5, 0.5])]),
        ("mean", T.mean, [a]),
        ("mean-0", lambda x: T.mean(x, axis=0), [a]),
        ("mean-1", lambda x: T.mean(x, axis=1), [a]),
        ("sum", T.tsum, [a]),
        ("sum-0", lambda x: T.tsum(x, axis=0), [a]),
        ("sum-1", lambda x: T.tsum(x, axis=1), [a]),
        ("transpose", T.transpose, [a]),
        ("reshape", lambda x: T.reshape(x, (2, 6)), [a]),
        ("matmul", T.matmul, [a, rng.standard_normal((4, 2))]),
        ("affine", T.affine, [a, w, bias]),
        ("log-softmax", T.log_softmax, [a]),
    ]


def alignment_case(rng, lam=0.5, n=8):
    """Task loss plus lam * (1 - CKA) over two task nodes; differentiable in all weights."""
    from mtsl import tensor as T
    from mtsl.losses import cka_alignment_loss, combined_loss, task_loss

    x = T.Tensor(rng.standard_normal((n, 3)))
    ta, tb = rng.standard_normal((n, 1)), rng.standard_normal((n, 1))
    zero = T.Tensor(np.zeros(1))

    def build(wa, ba, wb, bb, ha, hb):
        fa = T.relu(T.affine(x, wa, ba))
        fb = T.relu(T.affine(x, wb, bb))
        mtl = task_loss(T.affine(fa, ha, zero), ta, "mse") + task_loss(T.affine(fb, hb, zero), tb, "mse")
        return combined_loss(mtl, cka_alignment_loss([[fa, fb]]), lam)

    arrays = [
        rng.standard_normal((4, 3)), rng.standard_normal(4),
        rng.standard_normal((4, 3)), rng.standard_normal(4),
        rng.standard_normal((1, 4)), rng.standard_normal((1, 4)),
    ]
    return build, arrays


def amalgamation_case(rng, n=6, c=3):
    """Feature-amalgamation loss, differentiable in the group layer and one attention net."""
    from mtsl import tensor as T
    from mtsl.losses import AttNet, amalgamation_loss

    x = T.Tensor(rng.standard_normal((n, 4)))
    teachers = [rng.standard_normal((n, c)), rng.standard_normal((n, c))]
    fixed = AttNet(*(T.Tensor(a) for a in (rng.standard_normal((c, c)), rng.standard_normal(c),
                                           rng.standard_normal((c, c)), rng.standard_normal(c))))

    def build(wg, bg, w1, b1, w2, b2):
        g = T.relu(T.affine(x, wg, bg))
        return amalgamation_loss(teachers, [AttNet(w1, b1, w2, b2), fixed], g)

    arrays = [
        rng.standard_normal((c, 4)), rng.standard_normal(c),
        rng.standard_normal((c, c)), rng.standard_normal(c),
        rng.standard_normal((c, c)), rng.standard_normal(c),
    ]
    return build, arrays
