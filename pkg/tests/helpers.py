"""Shared fixtures-as-functions for the test modules."""
import numpy as np

from siftlab import autodiff as ad
from siftlab.autodiff import Tape
from siftlab.dense import AdamWConfig
from siftlab.models import ModelConfig, make_model
from siftlab.sift import SparseAdamW, calibrate_mask, run_sparse_step
from siftlab.tasks import BatchStream, gaussian_blobs

from oracles import TextbookAdamW, central_difference

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def mlp_setup(seed: int = 0, sizes=(6, 16, 3), n: int = 64):
    model = make_model(ModelConfig(kind="mlp", sizes=sizes, seed=seed))
    data = gaussian_blobs(seed, n, sizes[0], sizes[-1])
    return model, model.init_params(), data


def dense_equivalence_deviation(steps: int = 50, seed: int = 0, weight_decay: float = 0.01) -> float:
    """Max relative deviation between SIFT at rate 1.0 and an elementwise AdamW, over all steps."""
    model, theta, data = mlp_setup(seed)
    hp = AdamWConfig(lr=1e-2, weight_decay=weight_decay)
    stream = BatchStream(data, 16, seed, epochs=1000)
    names = sorted(theta)

    sparse_p = theta.copy()
    mask = calibrate_mask(model, sparse_p, names, iter(stream), rate=1.0)
    opt = SparseAdamW(sparse_p, mask, hp)
    tape = Tape(np.float64, trainable=names)
    opt.attach(tape)

    ref_p = {k: v.copy() for k, v in theta.items()}
    ref = TextbookAdamW(ref_p, hp.lr, hp.beta1, hp.beta2, hp.eps, hp.weight_decay)

    worst = 0.0
    it = iter(stream)
    for _ in range(steps):
        batch = next(it)
        run_sparse_step(model, sparse_p, tape, opt, [batch])
        rtape = Tape(np.float64)
        rtape.backward(model.forward(rtape, ref_p, batch))
        ref.step({k: rtape.grad(rtape.named(k)) for k in names})
        for k in names:
            dev = np.abs(sparse_p[k] - ref_p[k]) / np.maximum(np.abs(ref_p[k]), 1e-12)
            worst = max(worst, float(dev.max()))
    return worst


def _project(out: ad.Tensor, rng) -> ad.Tensor:
    """Scalarize through a fixed random projection so every output entry matters."""
    r = rng.standard_normal(out.shape)
    return ad.mean(ad.mul(out, r))


# each case: rng -> (list of input arrays, builder(tensors) -> output tensor)
def _case_matmul(rng):
    b = rng.integers(1, 4)
    return [rng.standard_normal((b, 3, 4)), rng.standard_normal((4, 2))], lambda t: ad.matmul(t[0], t[1])


def _case_add_broadcast(rng):
    return [rng.standard_normal((3, 4)), rng.standard_normal(4)], lambda t: ad.add(t[0], t[1])


def _case_mul(rng):
    return [rng.standard_normal((2, 5)), rng.standard_normal((2, 5))], lambda t: ad.mul(t[0], t[1])


def _case_relu(rng):
    x = rng.standard_normal((4, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    return [x], lambda t: ad.relu(t[0])


def _case_gelu(rng):
    return [rng.standard_normal((3, 6)) * 2], lambda t: ad.gelu(t[0])


def _case_softmax(rng):
    return [rng.standard_normal((2, 3, 5))], lambda t: ad.softmax(t[0])


def _case_softmax_masked(rng):
    mask = np.tril(np.ones((4, 4), dtype=bool))
    return [rng.standard_normal((2, 4, 4))], lambda t: ad.softmax(t[0], mask=mask)


def _case_layer_norm(rng):
    d = int(rng.integers(2, 7))
    return ([rng.standard_normal((3, d)), rng.standard_normal(d), rng.standard_normal(d)],
            lambda t: ad.layer_norm(t[0], t[1], t[2]))


def _case_embedding(rng):
    ids = rng.integers(0, 5, size=(2, 3))
    return [rng.standard_normal((5, 4))], lambda t: ad.embedding(t[0], ids)


def _case_cross_entropy(rng):
    y = rng.integers(0, 4, size=6)
    return [rng.standard_normal((6, 4)) * 2], lambda t: ad.cross_entropy(t[0], y)


def _case_mean(rng):
    return [rng.standard_normal((3, 7))], lambda t: ad.mean(t[0])


PRIMITIVE_CASES = {
    "matmul": _case_matmul, "add": _case_add_broadcast, "mul": _case_mul, "relu": _case_relu,
    "gelu": _case_gelu, "softmax": _case_softmax, "softmax_masked": _case_softmax_masked,
    "layer_norm": _case_layer_norm, "embedding": _case_embedding, "cross_entropy": _case_cross_entropy,
    "mean": _case_mean,
}


def fd_check(case, seed: int) -> float:
    """Worst relative error of autodiff vs central differences for one random configuration."""
    rng = np.random.default_rng(seed)
    arrays, build = case(rng)
    proj_seed = int(rng.integers(1 << 31))
    tape = Tape(np.float64)
    ts = [tape.param(a) for a in arrays]
    loss = _project(build(ts), np.random.default_rng(proj_seed))
    tape.backward(loss)
    worst = 0.0
    for t, a in zip(ts, arrays):
        def f():
            t2 = [ad.Tensor(x) for x in arrays]
            return float(_project(build(t2), np.random.default_rng(proj_seed)).data)
        fd = central_difference(f, a)
        an = tape.grad(t)
        err = np.abs(an - fd) / (np.abs(fd) + 1e-8)
        # entries with a vanishing derivative are judged absolutely
        err = np.where(np.abs(fd) < 1e-7, np.abs(an - fd) * 1e4, err)
        worst = max(worst, float(err.max()))
    return worst
