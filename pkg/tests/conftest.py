import numpy as np
import pytest

from cosweight.data import CosDataset

ACCEPTANCE_LINES: list = []


def record_acceptance(name: str, passed: bool, detail: str = "") -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f" :: {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_dataset(rng, m1=6, m0=8, size=(4, 9), d_x=2, d_k=2, y_scale=1.0, confound=0.8):
    """Small clustered dataset with confounded treatment."""
    m = m1 + m0
    k = rng.normal(size=(m, d_k))
    score = k.sum(axis=1) * confound + rng.normal(size=m)
    a = np.zeros(m, dtype=int)
    a[np.argsort(-score)[:m1]] = 1
    sizes = rng.integers(size[0], size[1] + 1, size=m)
    cluster_index = np.repeat(np.arange(m), sizes)
    n = cluster_index.size
    x = rng.normal(size=(n, d_x)) + 0.5 * k[cluster_index, :1]
    y = y_scale * (x.sum(axis=1) + k[cluster_index].sum(axis=1) + a[cluster_index]
                   + rng.normal(size=n))
    return CosDataset(
        unit_ids=[f"u{i}" for i in range(n)], cluster_index=cluster_index, x=x, y=y,
        cluster_ids=[f"c{j}" for j in range(m)], a=a, k=k,
        x_names=tuple(f"x{j}" for j in range(d_x)),
        k_names=tuple(f"k{j}" for j in range(d_k)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def toy():
    return make_dataset(np.random.default_rng(7), m1=8, m0=10, size=(10, 20))
