"""Central finite-difference gradient oracle shared by the test suite."""

import numpy as np

from icreg.tape import Tape, backprop


def fd_gradient(scalar_fn, arrays, index, h=1e-6):
    """d scalar_fn / d arrays[index] by central differences, one entry at a time."""
    work = [a.copy() for a in arrays]
    target = work[index]
    flat = target.reshape(-1)
    grad = np.zeros(target.size)
    for k in range(target.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = scalar_fn(work)
        flat[k] = orig - h
        fm = scalar_fn(work)
        flat[k] = orig
        grad[k] = (fp - fm) / (2.0 * h)
    return grad.reshape(target.shape)


def check_grads(build, arrays, h=1e-6, tol=1e-5, wrt=None):
    """Assert analytic gradients of ``build(*leaves)`` match finite differences.

    ``build`` maps leaf DiffTensors to a scalar DiffTensor.  Relative error
    is measured in the max norm against max(1, |fd|_inf) per input.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    loss = build(*leaves)
    grads = backprop(loss)

    def scalar_fn(vals):
        t = Tape()
        return build(*[t.leaf(v) for v in vals]).item()

    indices = range(len(arrays)) if wrt is None else wrt
    for i in indices:
        fd = fd_gradient(scalar_fn, arrays, i, h=h)
        ad = grads.of(leaves[i])
        err = np.abs(ad - fd).max() / max(1.0, np.abs(fd).max())
        assert err < tol, f"input {i}: FD mismatch, rel err {err:.3e} (tol {tol:g})"
