import numpy as np
import pytest

from avslowfast import functional as F
from avslowfast.gradcheck import directional_check, directional_error, gradcheck
from avslowfast.gradsuite import CASES, TOLERANCE, report, run_case, run_suite, select
from avslowfast.model.config import ConfigError
from avslowfast.rng import stream
from avslowfast.tensor import Tensor, make_result


def test_every_case_passes_for_a_few_seeds():
    results = [run_case(c, range(2)) for c in CASES.values() if not c.name.startswith("network")]
    failed = [(r.name, r.max_error) for r in results if not r.passed]
    assert not failed


def test_suites_partition_cases():
    ops, fusion = select("ops"), select("fusion")
    assert {c.name for c in ops} | {c.name for c in fusion} == set(CASES)
    assert not {c.name for c in ops} & {c.name for c in fusion}
    assert {"network_AtoFS", "network_AtoFtoS", "network_AVNonlocal"} <= {c.name for c in fusion}
    with pytest.raises(ConfigError):
        select("everything")


def test_report_lists_each_case():
    results = run_suite("relu", 1)
    text = report(results)
    assert "relu" in text and text.splitlines()[1].endswith("pass")


def test_checker_catches_a_wrong_gradient():
    def broken(x):
        # square with the factor 2 missing from its derivative
        return F.sum(make_result(x.data ** 2, "square", (x,), lambda g: (g * x.data,)))

    x = Tensor(stream(0, "g").standard_normal(5), requires_grad=True)
    assert gradcheck(broken, [x]) > TOLERANCE
    assert directional_error(broken, [x], 3, 1e-6, 0) > TOLERANCE


def test_checker_accepts_a_correct_gradient():
    x = Tensor(stream(1, "g").standard_normal((3, 3)), requires_grad=True)
    assert gradcheck(lambda a: F.sum(F.mul(a, a)), [x]) < 1e-8
    assert np.isfinite(directional_error(lambda a: F.sum(F.sigmoid(a)), [x], 2, 1e-6, 0))


def test_kink_crossings_are_not_scored():
    # |x| has a kink at 0; the first coordinate sits 1e-9 from it, so every
    # step down to 1e-7 crosses it and the one-sided slopes disagree
    x = Tensor(np.array([1e-9, 1.0, 2.0]), requires_grad=True)
    err, skipped = directional_check(lambda a: F.sum(F.mul(a, a)), [x], 3, 1e-5, 0)
    assert skipped == 0 and err < 1e-6
    err, skipped = directional_check(lambda a: F.sum(F.add(F.relu(a), F.relu(F.mul(a, -1.0)))), [x], 3, 1e-5, 0)
    assert err == float("inf") and skipped > 0
    y = Tensor(np.array([0.5, 1.0, 2.0]), requires_grad=True)
    err, skipped = directional_check(lambda a: F.sum(F.add(F.relu(a), F.relu(F.mul(a, -1.0)))), [y], 3, 1e-5, 0)
    assert skipped == 0 and err < 1e-6


def test_non_smooth_everywhere_fails_instead_of_passing():
    x = Tensor(np.zeros(6), requires_grad=True)
    err, skipped = directional_check(lambda a: F.sum(F.relu(a)), [x], 2, 1e-4, 0)
    assert err == float("inf") and skipped > 8
