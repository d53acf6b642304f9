import numpy as np
import pytest

from s2vc.tensor import GradTape, Tensor


def gradcheck(fn, inputs, h=1e-3, rtol=1e-4, atol=1e-6):
    """Compare tape gradients against central finite differences.

    ``fn`` maps a list of Tensors to a scalar Tensor.  The check runs the
    same graph in float64 (the oracle precision); the library default stays
    float32.
    """
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True,
                      dtype=np.float64) for x in inputs]
    with GradTape() as tape:
        loss = fn(tensors)
        tape.backward(loss)
    analytic = [t.grad.copy() for t in tensors]

    def eval_loss(arrays):
        ts = [Tensor(a, dtype=np.float64) for a in arrays]
        return fn(ts).item()

    max_rel = 0.0
    for i, t in enumerate(tensors):
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            arrays = [u.data.copy() for u in tensors]
            arrays[i].reshape(-1)[j] = orig + h
            up = eval_loss(arrays)
            arrays[i].reshape(-1)[j] = orig - h
            down = eval_loss(arrays)
            numeric.reshape(-1)[j] = (up - down) / (2 * h)
        denom = np.maximum(np.abs(numeric), np.abs(analytic[i]))
        err = np.abs(numeric - analytic[i]) / np.maximum(denom, atol / rtol)
        max_rel = max(max_rel, float(err.max()))
    assert max_rel < rtol, f"gradient mismatch: max relative error {max_rel:.3g}"
    return max_rel


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def corpus_manifest(tmp_path_factory):
    """Shared toy corpus: 2 speakers, 6 utterances each, 1 s at 16 kHz."""
    from toycorpus import build_corpus

    root = tmp_path_factory.mktemp("corpus")
    return build_corpus(root, speakers=("spkA", "spkB"), utts_per_speaker=6)
