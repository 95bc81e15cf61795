import numpy as np
import pytest

from fewstep import autodiff as ad


def fd_gradient(fn, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = fn()
        flat[i] = keep - h
        down = fn()
        flat[i] = keep
        g[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_param_grads(loss_fn, params: ad.ParamSet, h: float = 1e-5) -> float:
    """Worst relative error between backward() and central differences over ``params``."""
    loss = loss_fn()
    ad.backward(loss, params)
    worst = 0.0
    for _, p in params.items():
        analytic = p.grad.copy()
        numeric = fd_gradient(lambda: loss_fn().item(), p.data, h)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class FnNet:
    """Velocity net stand-in built from a plain function of (x_t, t, c)."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0
        self.conditions = []

    def __call__(self, x_t, t, c):
        self.calls += 1
        self.conditions.append(np.array(c, copy=True))
        x = x_t.data if isinstance(x_t, ad.Tensor) else np.asarray(x_t, dtype=np.float64)
        return ad.Tensor(self.fn(x, t, c))


def t_column(t, x):
    t = np.asarray(t, dtype=np.float64)
    return t if t.ndim == 0 else t.reshape((-1,) + (1,) * (np.ndim(x) - 1))


# acceptance summary ------------------------------------------------------------

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    marks = getattr(report, "criterion", None)
    if marks is None:
        return
    number, title = marks
    failed = report.failed
    if report.when == "call" or failed or report.skipped:
        prev = _criteria.get(number)
        status = "FAIL" if failed else ("SKIP" if report.skipped else "PASS")
        detail = "; ".join(v for k, v in report.user_properties if k == "measured")
        if prev is None or prev[1] == "PASS":
            _criteria[number] = (title, status, detail)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, detail = _criteria[number]
        line = f"[{status}] criterion {number:>2}: {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
