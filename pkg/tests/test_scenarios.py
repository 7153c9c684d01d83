"""
Every shipped scenario must pass, under its own seed and under others.
"""

import pytest

from harness import SCENARIO_DIR, ScenarioError, load_scenario, run_scenario, run_suite

SCENARIOS = sorted(SCENARIO_DIR.glob("*.json"))


@pytest.mark.scenario
class TestShippedScenarios:
    @pytest.mark.parametrize("path", SCENARIOS, ids=lambda p: p.stem)
    def test_passes_with_declared_seed(self, path):
        result = run_scenario(load_scenario(path))
        assert result.passed, [(f.name, f.expected, f.actual) for f in result.failures]
        assert result.checks

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(100))
    @pytest.mark.parametrize("path", SCENARIOS, ids=lambda p: p.stem)
    def test_passes_across_a_hundred_seeds(self, path, seed):
        result = run_scenario(load_scenario(path), seed=seed)
        assert result.passed, [(f.name, f.expected, f.actual) for f in result.failures]

    @pytest.mark.parametrize("algorithm", ["sha256", "blake2b_256"])
    def test_golden_path_under_other_hashes(self, algorithm):
        from crypto import CryptoSuite, use_suite

        use_suite(CryptoSuite(hash_algorithm=algorithm))
        assert run_scenario(load_scenario(SCENARIO_DIR / "golden-path.json")).passed

    def test_golden_path_under_ecdsa(self):
        from crypto import CryptoSuite, use_suite

        use_suite(CryptoSuite(signature_scheme="ecdsa_p256"))
        assert run_scenario(load_scenario(SCENARIO_DIR / "golden-path.json")).passed

    def test_suite_runs_every_file(self):
        results = run_suite(SCENARIO_DIR, seeds=(0,))
        assert {r.name for r in results} == {p.stem for p in SCENARIOS}

    def test_empty_directory(self, tmp_path):
        with pytest.raises(ScenarioError):
            run_suite(tmp_path)
