import numpy as np
import pytest

from saekit import fh, sfh, simulate, weights


def random_fh_instance(rng, D=8, p=2, sigma2_u=0.02):
    x = np.column_stack([np.ones(D), rng.normal(size=(D, p - 1))]) if p > 1 \
        else np.ones((D, 1))
    beta = rng.normal(0.3, 0.2, p)
    sigma2_e = rng.uniform(0.005, 0.05, D)
    y = x @ beta + rng.normal(0, np.sqrt(sigma2_u), D) \
        + rng.normal(0, np.sqrt(sigma2_e))
    return fh.FhInput(y, x, sigma2_e)


def random_sfh_instance(rng, D=6, p=2, sigma2_eps=0.02, rho=0.5, k=2):
    geos = simulate.lattice_geos(D, seed=int(rng.integers(1 << 30)))
    w = weights.neighbors_knn(geos, min(k, D - 1))
    wm = w.matrix()
    x = np.column_stack([np.ones(D), rng.normal(size=(D, p - 1))]) if p > 1 \
        else np.ones((D, 1))
    beta = rng.normal(0.3, 0.2, p)
    sigma2_e = rng.uniform(0.005, 0.05, D)
    u = np.linalg.solve(np.eye(D) - rho * wm, rng.normal(0, np.sqrt(sigma2_eps), D))
    y = x @ beta + u + rng.normal(0, np.sqrt(sigma2_e))
    return sfh.SfhInput(fh.FhInput(y, x, sigma2_e), w)


def rook_grid_weights(nrow, ncol):
    """Row-stochastic rook-adjacency weights on a regular grid."""
    ids = [f"c{r}_{c}" for r in range(nrow) for c in range(ncol)]
    nbs = []
    for r in range(nrow):
        for c in range(ncol):
            s = []
            if r > 0:
                s.append((r - 1) * ncol + c)
            if r < nrow - 1:
                s.append((r + 1) * ncol + c)
            if c > 0:
                s.append(r * ncol + c - 1)
            if c < ncol - 1:
                s.append(r * ncol + c + 1)
            nbs.append(tuple(sorted(s)))
    return weights.SpatialWeights(tuple(ids), tuple(nbs))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
