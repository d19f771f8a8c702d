"""
Tests for the finite-difference gradient suite.
"""

import numpy as np
import pytest

from pipmm.bench.gradsuite import MODULES, TOLERANCE, module_checks, op_checks, run_suite, \
    tolerance_for, toy_model
from pipmm.core.gradcheck import finite_diff_check, finite_diff_report
from pipmm.core.tensor import Tensor
from pipmm.errors import ContractError


class TestFiniteDiff:
    """Test the checker itself."""

    def test_matmul_is_exact(self, rng):
        a = Tensor(rng.normal(size=(3, 3)), requires_grad=True, name='a')
        b = Tensor(rng.normal(size=(3, 3)), name='b')
        assert finite_diff_check(lambda: (a @ b).sum(), [a]) < 1e-6

    def test_wrong_gradient_is_caught(self, rng):
        a = Tensor(rng.normal(size=4), requires_grad=True, name='a')
        wrong = [np.zeros(4)]
        assert finite_diff_check(lambda: (a * a).sum(), [a], analytic=wrong) == pytest.approx(1.0)

    def test_step_range(self, rng):
        a = Tensor(rng.normal(size=2), requires_grad=True)
        with pytest.raises(ContractError):
            finite_diff_check(lambda: a.sum(), [a], h=1e-2)

    def test_report_names_worst_parameter(self, rng):
        a = Tensor(rng.normal(size=3), requires_grad=True, name='a')
        b = Tensor(rng.normal(size=3), requires_grad=True, name='b')
        report = finite_diff_report(lambda: (a * b).sum(), [a, b],
                                    analytic=[b.data.copy(), np.zeros(3)])
        assert report.worst_parameter == 'b'
        assert report.per_parameter['a'] < 1e-6


class TestSuite:
    """Test the op and module checks."""

    @pytest.mark.parametrize('seed', [0, 1, 2])
    def test_ops_pass(self, seed):
        for name, report in op_checks(seed).items():
            assert report.max_relative_error < tolerance_for(name), name

    def test_tolerances(self):
        assert tolerance_for('matmul') == 1e-6
        assert tolerance_for('pipeline[linear_projector]') == TOLERANCE

    def test_toy_model_is_deterministic(self):
        a, b = toy_model(3), toy_model(3)
        for (name, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data, err_msg=name)

    def test_bridge_check(self):
        report = module_checks(0, modules=['pip_bridge'])['pip_bridge']
        assert report.max_relative_error < TOLERANCE

    @pytest.mark.slow
    @pytest.mark.parametrize('adapter_kind', ['linear_projector', 'query_resampler'])
    def test_modules_pass(self, adapter_kind):
        reports = module_checks(0, adapter_kind)
        assert list(reports) == list(MODULES)
        for name, report in reports.items():
            assert report.max_relative_error < TOLERANCE, (name, report.worst_parameter)

    @pytest.mark.slow
    def test_run_suite_keys(self):
        seen = []
        reports = run_suite(0, progress=lambda name, report: seen.append(name))
        assert 'matmul' in reports
        assert 'pipeline[query_resampler]' in reports
        assert seen == [k for k in reports if k not in op_checks(0)]
