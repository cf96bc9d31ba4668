"""Shared fixtures-by-function for the test modules."""
import numpy as np

from dilatedrnn.model import backward, build_model, forward, masked_loss, DilationSchedule
from dilatedrnn.numeric import Rng, finite_diff_check


def gradient_case(kind, start_exponent=0, seed=0, T=12, layers=2, batch=2):
    """A small dilated model with random data scored at every timestep."""
    model = build_model(kind, DilationSchedule(layers, 2, start_exponent), 3, 4, 5, Rng(seed))
    x = Rng(seed, 1).normal((batch, T, 3))
    y = Rng(seed, 2).integers(0, 5, (batch, T))
    mask = np.ones((batch, T), dtype=bool)
    return model, x, y, mask


def model_gradient_error(model, x, y, mask, fwd=forward, h=1e-5):
    """Worst relative error of BPTT gradients against central differences."""
    model.zero_grad()
    acts = fwd(model, x)
    _, dlogits = masked_loss(acts.logits, y, mask)
    backward(model, acts, dlogits)

    def loss():
        return masked_loss(fwd(model, x).logits, y, mask)[0]

    return finite_diff_check(loss, model.parameters(), h)


# acceptance results, printed by the terminal-summary hook in conftest.py
ACCEPTANCE: dict = {}


def record(criterion, passed: bool, detail: str):
    line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return passed
