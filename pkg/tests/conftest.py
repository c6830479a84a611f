import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from d2drelay.allocator import AllocationProblem
from d2drelay.scenario import make_drop, relay_problem
from d2drelay.topology import ScenarioConfig

settings.register_profile(
    "ci", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("ci")


def toy_problem(U=2, N=3, seed=0, **kw):
    """Hand-built problem with gains in a realistic range."""
    rng = np.random.default_rng(seed)
    sigma2 = 10 ** (-121.45 / 10) / 1e3
    args = dict(
        h1=10 ** rng.uniform(-11, -8, (U, N)),
        h2=10 ** rng.uniform(-11, -8, (U, N)),
        g1_ref=10 ** rng.uniform(-13, -10, (U, N)),
        g2_ref=10 ** rng.uniform(-13, -10, N),
        p_ue_max_w=np.full(U, 0.2),
        p_relay_max_w=1.0,
        i_th1_w=np.full(N, 1e-10),
        i_th2_w=np.full(N, 1e-10),
        qos_bps=np.full(U, 128e3),
        sigma2_w=sigma2,
        i_bar_w=np.full((U, N), 2 * sigma2),
        rb_bandwidth_hz=180e3,
    )
    args.update(kw)
    return AllocationProblem(**args)


def seeded_subproblem(master_seed, k, U, N, pick_seed=0):
    """Random UE/RB subset of a relay problem from a seeded drop."""
    rng = np.random.default_rng([pick_seed, k])
    d = make_drop(ScenarioConfig(), master_seed, k)
    pb = relay_problem(d, k % 3)
    ues = sorted(rng.choice(pb.num_ues, U, replace=False))
    rbs = sorted(rng.choice(pb.num_rbs, N, replace=False))
    return pb.subset(ues, rbs)


@pytest.fixture(scope="session")
def default_drop():
    return make_drop(ScenarioConfig(), 0, 0)


@pytest.fixture(scope="session")
def relay0(default_drop):
    return relay_problem(default_drop, 0)


# one line per acceptance criterion, repeated in the terminal summary
CRITERIA_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
