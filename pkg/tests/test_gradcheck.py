import numpy as np

from lcmkit import gradcheck


class TestSuite:
    def test_all_cases_pass_at_tolerance(self):
        results = gradcheck.run_suite(tolerance=1e-5, instances=3, seed=1)
        failed = [r.name for r in results if not r.passed]
        assert not failed, f"gradient mismatches: {failed}"

    def test_covers_every_registered_case(self):
        results = gradcheck.run_suite(instances=1)
        assert {r.name for r in results} == set(gradcheck.CASES)

    def test_deterministic(self):
        a = gradcheck.run_suite(instances=2, seed=3)
        b = gradcheck.run_suite(instances=2, seed=3)
        assert [(r.name, r.max_rel_err) for r in a] == \
            [(r.name, r.max_rel_err) for r in b]

    def test_sign_flip_detected(self):
        results = gradcheck.run_suite(instances=1, inject_sign_flip=True)
        assert any(not r.passed for r in results)

    def test_case_subset_filter(self):
        results = gradcheck.run_suite(instances=1, cases={"conv2d"})
        assert [r.name for r in results] == ["conv2d"]


class TestNumericalGrad:
    def test_matches_analytic_on_quadratic(self, f64):
        from lcmkit import tensor as T
        p = T.ParamBlock("p", np.array([1.0, -2.0, 0.5]))

        def loss():
            return float((p.value.data ** 2).sum())

        g = gradcheck.numerical_grad(loss, p)
        np.testing.assert_allclose(g, 2 * p.value.data, rtol=1e-8)

    def test_rel_err_floor_behavior(self):
        a = np.array([1e-13])
        b = np.array([2e-13])
        assert gradcheck.max_rel_err(a, b) < 1e-5
        assert gradcheck.max_rel_err(np.array([1.0]), np.array([2.0])) == 0.5
