import math

import numpy as np
import pytest

from guidedmodes.forms import assemble_forms
from guidedmodes.geometry import MaterialConfig, build_rect_with_inclusion
from guidedmodes.pencil import jordan_chains, linearize, solve_spectrum
from guidedmodes.spectra import low_spectrum
from guidedmodes.waves import build_transversal

PI = math.pi
SQUARE = (0.0, 0.0, PI, PI)
INCLUSION = (PI / 4, PI / 4, PI / 2, PI / 2)


class Setup:
    """Mesh, materials, forms and (lazily) the low modes of one configuration."""

    def __init__(self, outer, inclusion, h, eps):
        self.mesh = build_rect_with_inclusion(outer, inclusion, h)
        self.materials = MaterialConfig(*eps)
        self.forms = assemble_forms(self.mesh, self.materials)
        self.h = h
        self._low = {}

    @property
    def pair(self):
        return linearize(self.forms)

    def spectrum(self):
        if "all" not in self._low:
            self._low["all"] = solve_spectrum(self.pair, method="dense")
        return self._low["all"]

    def chains(self, count=10):
        key = ("chains", count)
        if key not in self._low:
            low = low_spectrum(self.pair, self.materials, count)
            self._low[key] = jordan_chains(low, self.forms)
        return self._low[key]

    def fields(self, count=10):
        return [build_transversal(c, self.mesh, self.materials, self.forms) for c in self.chains(count)]


@pytest.fixture(scope="session")
def filled8():
    """Partially filled square, eps = (1, 4), coarse mesh."""
    return Setup(SQUARE, INCLUSION, PI / 8, (1.0, 4.0))


@pytest.fixture(scope="session")
def filled16():
    return Setup(SQUARE, INCLUSION, PI / 16, (1.0, 4.0))


@pytest.fixture(scope="session")
def empty8():
    """Homogeneous square, eps = 1."""
    return Setup(SQUARE, INCLUSION, PI / 8, (1.0, 1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_vector(rng, n, complex_=True):
    x = rng.standard_normal(n)
    if complex_:
        x = x + 1j * rng.standard_normal(n)
    return x
