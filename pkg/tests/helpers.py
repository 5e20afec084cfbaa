"""Finite-difference oracles shared by the test modules."""

import numpy as np

from atrg import autodiff as ad
from atrg.autodiff import Tensor


def central_difference(f, arrays, index, h=1e-5):
    """d f / d arrays[index] by central differences; ``f`` maps numpy arrays to float."""
    arrays = [np.array(a, dtype=float) for a in arrays]
    x = arrays[index]
    out = np.zeros_like(x)
    for k in range(x.size):
        old = x.flat[k]
        x.flat[k] = old + h
        fp = f(*arrays)
        x.flat[k] = old - h
        fm = f(*arrays)
        x.flat[k] = old
        out.flat[k] = (fp - fm) / (2 * h)
    return out


def rel_error(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def scalar_fn(op, weights):
    """Wrap a tensor op into a scalar function of numpy arrays: sum(w * op(*xs))."""

    def f(*xs):
        with ad.no_grad():
            return float((op(*[ad.Tensor(x) for x in xs]).data * weights).sum())

    return f


def param_fd(loss_fn, param, k, h=1e-5):
    old = param.data.flat[k]
    param.data.flat[k] = old + h
    lp = loss_fn()
    param.data.flat[k] = old - h
    lm = loss_fn()
    param.data.flat[k] = old
    return (lp - lm) / (2 * h)


def norm_rel(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


# smooth ops only, so finite differences are well defined everywhere
_UNARY = [
    ad.tanh,
    ad.gelu,
    lambda x: ad.exp(ad.tanh(x)),
    lambda x: ad.log(ad.add(ad.mul(x, x), 1.0)),
    lambda x: ad.softmax(x, -1),
    lambda x: ad.log_softmax(x, 0),
    lambda x: ad.layer_norm(x),
    lambda x: ad.power(ad.add(ad.mul(x, x), 1.0), 0.5),
    lambda x: ad.mul(x, 0.5),
    lambda x: ad.mean(x, -1, keepdims=True),
]
_BINARY = [
    ad.add,
    ad.sub,
    ad.mul,
    lambda a, b: ad.div(a, ad.add(ad.mul(b, b), 1.0)),
    lambda a, b: ad.matmul(a, ad.transpose(b)) if a.shape[0] == a.shape[1] else ad.matmul(ad.matmul(a, ad.transpose(b)), a),
]


def random_graph(seed):
    """A random composition of smooth ops over three [3, 4] inputs and a [4] bias.

    Returns ``(f, arrays)`` where ``f`` maps Tensors to a scalar Tensor.
    """
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=(3, 4)) for _ in range(3)] + [rng.normal(size=4)]
    plan = []
    for k in range(int(rng.integers(4, 11))):
        if rng.random() < 0.45:
            plan.append(("u", int(rng.integers(len(_UNARY))), int(rng.integers(3 + k))))
        else:
            plan.append(("b", int(rng.integers(len(_BINARY))), int(rng.integers(3 + k)), int(rng.integers(3 + k))))
    # every node feeds the output, so no input ends up with an identically zero gradient
    weights = rng.normal(size=(len(plan) + 3, 3, 4))

    def f(*xs):
        pool = [xs[0], xs[1], ad.add(xs[2], xs[3])]
        for step in plan:
            if step[0] == "u":
                y = _UNARY[step[1]](pool[step[2]])
            else:
                y = _BINARY[step[1]](pool[step[2]], pool[step[3]])
            pool.append(ad.broadcast_to(y, (3, 4)))
        return ad.sum_(ad.mul(ad.concatenate([ad.reshape(y, (1, 3, 4)) for y in pool]), weights))

    return f, arrays


def graph_errors(seed):
    """(first-order, second-order) relative errors of one random graph against finite differences."""
    f, arrays = random_graph(seed)
    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    grads = ad.grad(f(*leaves), leaves)

    def value(*xs):
        with ad.no_grad():
            return f(*[ad.Tensor(x) for x in xs]).item()

    first = max(norm_rel(g.data, central_difference(value, arrays, i, h=1e-6)) for i, g in enumerate(grads))

    # Hessian-vector product along a random direction vs differences of the gradient
    v = [np.random.default_rng(seed + 1).normal(size=a.shape) for a in arrays]
    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    g1 = ad.grad(f(*leaves), leaves, create_graph=True)
    s = ad.sum_(ad.concatenate([ad.reshape(ad.sum_(ad.mul(g, vi)), (1,)) for g, vi in zip(g1, v)]))
    hv = ad.grad(s, leaves)

    def grad_at(t):
        pts = [ad.Tensor(a + t * vi, requires_grad=True) for a, vi in zip(arrays, v)]
        return [g.data for g in ad.grad(f(*pts), pts)]

    h = 1e-5
    plus, minus = grad_at(h), grad_at(-h)
    fd = [(p - m) / (2 * h) for p, m in zip(plus, minus)]
    second = norm_rel(np.concatenate([a.data.ravel() for a in hv]), np.concatenate([d.ravel() for d in fd]))
    return first, second


class LinearSurrogate:
    """Stand-in model whose log-prob outputs are linear in the embeddings."""

    def __init__(self, src_vocab, tgt_vocab, seed=0, d=6):
        rng = np.random.default_rng(seed)
        self.src_vocab, self.tgt_vocab = src_vocab, tgt_vocab
        V = len(self.tgt_vocab)
        self.src_table = Tensor(rng.normal(size=(len(self.src_vocab), d)), requires_grad=True)
        self.tgt_table = Tensor(rng.normal(size=(V, d)), requires_grad=True)
        self.ws = Tensor(rng.normal(size=(d, V)), requires_grad=True)
        self.wt = Tensor(rng.normal(size=(d, V)), requires_grad=True)
        self.training = False

    def parameters(self):
        return [self.src_table, self.tgt_table, self.ws, self.wt]

    def eval(self):
        self.training = False
        return self

    def train(self, mode=True):
        self.training = mode
        return self

    def embed_source(self, ids):
        return ad.take(self.src_table, ids)

    def embed_target(self, ids):
        return ad.take(self.tgt_table, ids)

    def log_probs_from_embeddings(self, src_x, tgt_x, src_mask):
        src = ad.sum_(ad.mul(ad.matmul(src_x, self.ws), src_mask[..., None].astype(float)), 1, keepdims=True)
        return ad.add(ad.matmul(tgt_x, self.wt), src)
