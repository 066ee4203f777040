import math

import pytest

from anyshot import experiment
from anyshot.config import apply_overrides
from anyshot.errors import ConfigError
from anyshot.experiment import MethodRun, SweepResult


def variant(cfg, **overrides):
    return apply_overrides(cfg, overrides)


class TestBundles:
    def test_shots_forced_to_zero_without_few_shot_classes(self, small_cfg):
        bundle = experiment.build_bundle(variant(small_cfg, F=0), 3, shots=5)
        assert bundle.shots == 0 and bundle.setting == "ZSD" and not bundle.d_ft

    def test_shot_override(self, small_cfg):
        assert experiment.build_bundle(small_cfg, 3, shots=1).shots == 1
        assert experiment.build_bundle(small_cfg, 3).shots == small_cfg.shots

    @pytest.mark.parametrize("overrides, novel", [({}, "ASD"), ({"U": 0}, "FSD"), ({"F": 0}, "ZSD")])
    def test_modes(self, small_cfg, overrides, novel):
        bundle = experiment.build_bundle(variant(small_cfg, **overrides), 3)
        assert experiment.novel_mode(bundle) == novel
        assert experiment.generalized_mode(bundle) == "G" + novel

    def test_no_novel_classes(self, small_cfg):
        bundle = experiment.build_bundle(variant(small_cfg, F=0, U=0), 3)
        with pytest.raises(ConfigError):
            experiment.novel_mode(bundle)

    def test_train_config_seed(self, small_cfg):
        tc = experiment.train_config(small_cfg, 11, epochs_ft=7)
        assert tc.seed == 11 and tc.epochs_ft == 7 and tc.epochs_base == 3


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    from conftest import SMALL_SPLIT, SMALL_WORLD
    from anyshot.config import ExperimentConfig
    from anyshot.trainer import TrainConfig

    cfg = ExperimentConfig(world=SMALL_WORLD, split=SMALL_SPLIT, shots=2,
                           train=TrainConfig(epochs_base=3, epochs_ft=2),
                           out_dir=str(tmp_path_factory.mktemp("mc")), seeds=(3,))
    return cfg, experiment.method_comparison(cfg, 3)


class TestMethodComparison:
    def test_keys(self, run):
        _, result = run
        for tag in ("ours", "baseline", "ours_base", "baseline_base", "ours_k1", "ours_lambda1"):
            assert f"{tag}.GASD.hm" in result.metrics
            for key in ("map_seen", "map_unseen", "map_few"):
                assert f"{tag}.GASD.{key}" in result.metrics
            assert f"{tag}.ASD.map_novel" in result.metrics
            assert f"{tag}.ASD.map_seen" not in result.metrics
        assert set(result.reports) == {k.rsplit(".", 1)[0] for k in result.metrics}

    def test_values_are_fractions(self, run):
        _, result = run
        assert all(0.0 <= v <= 1.0 for v in result.metrics.values())

    def test_deterministic(self, run):
        cfg, result = run
        assert experiment.method_comparison(cfg, 3).metrics == result.metrics

    def test_custom_variants(self, small_cfg):
        result = experiment.method_comparison(small_cfg, 3, k_low=2, lambda_high=0.5)
        assert "ours_k2.ASD.map_few" in result.metrics
        assert "ours_lambda0.5.ASD.map_novel" in result.metrics

    def test_requires_few_shot(self, small_cfg):
        with pytest.raises(ConfigError):
            experiment.method_comparison(variant(small_cfg, F=0), 3)


class TestZeroShotComparison:
    def test_keys(self, small_cfg):
        result = experiment.zsd_comparison(variant(small_cfg, F=0, U=2), 3)
        for tag in ("base", "self_tuned"):
            assert f"{tag}.ZSD.recall_at_100" in result.metrics
            assert f"{tag}.GZSD.hm" in result.metrics

    @pytest.mark.parametrize("overrides", [{}, {"F": 0, "U": 0}])
    def test_rejects(self, small_cfg, overrides):
        with pytest.raises(ConfigError):
            experiment.zsd_comparison(variant(small_cfg, **overrides), 3)


def test_median_metrics():
    runs = [MethodRun(0, {"a": 1.0, "b": 2.0}), MethodRun(1, {"a": 3.0}), MethodRun(2, {"a": 5.0, "b": 0.0})]
    assert experiment.median_metrics(runs) == {"a": 3.0}
    assert experiment.median_metrics(runs[:2]) == {"a": 2.0}


def test_sweep_csv_format():
    result = SweepResult((0.0, 5.0), (0.1, 1.0), "map_novel",
                         {(0.0, 0.1): 0.5, (0.0, 1.0): 0.0, (5.0, 0.1): 0.12345, (5.0, 1.0): 1.0})
    assert result.to_csv() == "beta\\lambda,0.1,1\n0,50.00,0.00\n5,12.35,100.00\n"


class TestSweep:
    def test_cells_mean_over_seeds(self, small_cfg):
        two = variant(small_cfg, seeds=(3, 4))
        both = experiment.sweep(two, [5], [0.1])
        single = [experiment.sweep(variant(small_cfg, seeds=(s,)), [5], [0.1]).table[(5.0, 0.1)] for s in (3, 4)]
        assert math.isclose(both.table[(5.0, 0.1)], sum(single) / 2, rel_tol=1e-12)

    def test_grid_cells(self, small_cfg):
        result = experiment.sweep(small_cfg, [0, 5], [0.1, 1])
        assert set(result.table) == {(0.0, 0.1), (0.0, 1.0), (5.0, 0.1), (5.0, 1.0)}
        assert all(0.0 <= v <= 1.0 for v in result.table.values())

    @pytest.mark.parametrize("betas, lambdas", [([], [0.1]), ([1.0], [])])
    def test_empty_axes(self, small_cfg, betas, lambdas):
        with pytest.raises(ConfigError):
            experiment.sweep(small_cfg, betas, lambdas)

    def test_zero_shot_rejected(self, small_cfg):
        with pytest.raises(ConfigError):
            experiment.sweep(variant(small_cfg, F=0), [1.0], [0.1])


def test_single_seed(small_cfg):
    assert experiment.single_seed(small_cfg) == 3
    with pytest.raises(ConfigError):
        experiment.single_seed(variant(small_cfg, seeds=(1, 2)))
