import numpy as np
import pytest
from scipy import integrate

from blipmeta.federation import SiteSummary, SummaryEntry
from blipmeta.model import ModelSpec, SiteDataset


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running simulation checks")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def make_summary(site_id, entries, fingerprint="fp", n_obs=100, dof=90):
    """entries: iterable of (label, estimate, sd, {psi_index: weight})."""
    return SiteSummary(site_id, fingerprint, n_obs, dof,
                       tuple(SummaryEntry(l, e, s, tuple(w.items())) for l, e, s, w in entries))


@pytest.fixture
def binary_spec():
    return ModelSpec("binary", ["1", "x1", "x2"], ["1", "x1"])


@pytest.fixture
def quad_spec():
    return ModelSpec("continuous_quadratic", ["1", "x1", "x2"], ["1", "x1"], ["1", "x1"])


@pytest.fixture
def sparse_spec():
    return ModelSpec("binary", ["1", "x1", "x2[2]", "x2[3]"], ["1", "x1", "x2[2]", "x2[3]"])


def linear_site(spec, site_id, x, cols, a, beta, psi, noise, rng):
    """Dataset with outcome f(x)'beta + a * g(x)'psi (+ quadratic block) + noise."""
    from blipmeta.model import term_matrix
    tf = term_matrix(spec.treatment_free_terms, x, cols)
    g1 = term_matrix(spec.blip_terms_linear, x, cols)
    y = tf @ beta + a * (g1 @ psi[:spec.q])
    if spec.q2:
        y = y + a**2 * (term_matrix(spec.blip_terms_quadratic, x, cols) @ psi[spec.q:])
    y = y + noise * rng.standard_normal(len(a))
    return SiteDataset(site_id, x, cols, a, y)


def identity_sites(xi, sd, label="a"):
    return [make_summary(str(i + 1), [(label, x, s, {0: 1.0})]) for i, (x, s) in enumerate(zip(xi, sd))]


def exact_toy_moments(xi, sd, V=1e4, scale=1.0):
    """Posterior mean/sd of psi with psi and site effects integrated analytically, sigma by quadrature."""
    def parts(s):
        w = 1 / (sd**2 + s**2)
        prec = w.sum() + 1 / V
        m = (w * xi).sum() / prec
        ll = 0.5 * np.log(w).sum() - 0.5 * np.log(prec) - 0.5 * ((w * xi**2).sum() - prec * m**2)
        return m, 1 / prec, ll
    ref = parts(scale)[2]

    def f(s, k):
        m, v, ll = parts(s)
        d = np.exp(ll - ref) / (1 + (s / scale) ** 2)
        return d * (1.0, m, v + m * m)[k]
    I = [integrate.quad(f, 0, np.inf, args=(k,), limit=500, epsabs=0, epsrel=1e-11)[0] for k in range(3)]
    mean = I[1] / I[0]
    return mean, np.sqrt(I[2] / I[0] - mean**2)
