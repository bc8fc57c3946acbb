import numpy as np
import pytest

from stoxnet.crossbar import ConversionCounter
from stoxnet.errors import ConfigError
from stoxnet.layers import ForwardContext
from stoxnet.sensitivity import (
    SamplingSchedule,
    build_schedule,
    layer_conversion_counts,
    layer_scores,
    perturb_and_score,
    sensitivity_scan,
    write_sensitivity_csv,
)


@pytest.fixture
def eval_set(digits):
    return digits.test_x[:60], digits.test_y[:60]


class TestPerturbAndScore:
    def test_zero_magnitude_has_no_drop(self, digits_graph, eval_set):
        result = perturb_and_score(digits_graph, "conv1", 0.0, 3, *eval_set)
        assert result.mean_drop == 0.0 and result.drops == [0.0, 0.0, 0.0]

    def test_weights_restored(self, digits_graph, eval_set):
        before = digits_graph.layer("conv2").weight.copy()
        perturb_and_score(digits_graph, "conv2", 0.5, 2, *eval_set)
        np.testing.assert_array_equal(digits_graph.layer("conv2").weight, before)

    def test_reproducible(self, digits_graph, eval_set):
        a = perturb_and_score(digits_graph, "fc1", 0.3, 4, *eval_set, seed=5)
        b = perturb_and_score(digits_graph, "fc1", 0.3, 4, *eval_set, seed=5)
        assert a.drops == b.drops

    def test_stochastic_layers_repeat_converter_draws(self, digits_graph, eval_set):
        for layer in digits_graph.stox_layers():
            layer.set_spec(layer.spec.replace(mode="stochastic"))
        result = perturb_and_score(digits_graph, "conv3", 0.0, 2, *eval_set, seed=2)
        assert result.drops == [0.0, 0.0]

    @pytest.mark.parametrize("magnitude, trials", [(-0.1, 2), (0.1, 0)])
    def test_invalid_arguments(self, digits_graph, eval_set, magnitude, trials):
        with pytest.raises(ConfigError):
            perturb_and_score(digits_graph, "conv1", magnitude, trials, *eval_set)

    def test_layer_without_weights(self, digits_graph, eval_set):
        with pytest.raises(ConfigError, match="relu1"):
            perturb_and_score(digits_graph, "relu1", 0.1, 1, *eval_set)

    def test_unknown_layer(self, digits_graph, eval_set):
        with pytest.raises(ConfigError, match="conv7"):
            perturb_and_score(digits_graph, "conv7", 0.1, 1, *eval_set)


class TestScan:
    def test_every_stox_layer_and_magnitude(self, digits_graph, eval_set, tmp_path):
        results = sensitivity_scan(digits_graph, [0.1, 0.5], *eval_set, trials=2)
        assert [(r.layer, r.magnitude) for r in results] == [
            (name, m) for name in ("conv1", "conv2", "conv3", "fc1") for m in (0.1, 0.5)
        ]
        scores = layer_scores(results)
        assert list(scores) == ["conv1", "conv2", "conv3", "fc1"]
        assert scores["conv1"] == pytest.approx((results[0].mean_drop + results[1].mean_drop) / 2)

        path = tmp_path / "sens.csv"
        write_sensitivity_csv(path, results)
        lines = path.read_text().splitlines()
        assert lines[0] == "layer,magnitude,mean_drop,std_drop,trials"
        assert lines[1].startswith("conv1,0.1,")

    def test_conversion_counts_match_counter(self, digits_graph, digits):
        counter = ConversionCounter()
        digits_graph.forward(digits.test_x[:1], ForwardContext(counter=counter))
        counts = layer_conversion_counts(digits_graph)
        assert counts == counter.counts()
        assert counts == {"conv1": 4096, "conv2": 4096, "conv3": 3072, "fc1": 40}


class TestBuildSchedule:
    CONVERSIONS = {"a": 100, "b": 1000, "c": 1000}

    def test_greedy_allocation(self):
        schedule = build_schedule({"a": 0.3, "b": 0.1, "c": 0.05}, self.CONVERSIONS, 1.15)
        assert schedule.samples == {"a": 4, "b": 1, "c": 1}
        assert schedule.relative_conversions == pytest.approx(2400 / 2100)

    def test_unit_budget_keeps_one_sample(self):
        schedule = build_schedule({"a": 0.3, "b": 0.1, "c": 0.05}, self.CONVERSIONS, 1.0)
        assert set(schedule.samples.values()) == {1}
        assert schedule.relative_conversions == 1.0

    def test_large_budget_saturates(self):
        schedule = build_schedule({"a": 0.3, "b": 0.1, "c": 0.05}, self.CONVERSIONS, 10.0)
        assert set(schedule.samples.values()) == {8}
        assert schedule.relative_conversions == pytest.approx(8.0)

    def test_ties_follow_layer_order(self):
        schedule = build_schedule({"a": 0.1, "b": 0.1}, {"a": 10, "b": 10}, 1.5)
        assert schedule.samples == {"a": 2, "b": 1}
        schedule = build_schedule({"a": 0.1, "b": 0.1}, {"b": 10, "a": 10}, 1.5)
        assert schedule.samples == {"b": 2, "a": 1}

    def test_stops_at_first_raise_over_budget(self):
        schedule = build_schedule({"a": 0.1, "b": 0.1}, {"a": 10, "b": 10}, 1.25)
        assert schedule.samples == {"a": 1, "b": 1}

    def test_budget_below_one(self):
        with pytest.raises(ConfigError):
            build_schedule({"a": 0.1}, {"a": 10}, 0.9)

    def test_missing_score(self):
        with pytest.raises(ConfigError, match="b"):
            build_schedule({"a": 0.1}, {"a": 10, "b": 5}, 1.2)

    def test_every_layer_present_and_relative_at_least_one(self):
        schedule = build_schedule({"a": 0.0, "b": 0.2, "c": 0.1}, self.CONVERSIONS, 1.3)
        assert set(schedule.samples) == set(self.CONVERSIONS)
        assert schedule.relative_conversions >= 1.0
        assert schedule.conversions(self.CONVERSIONS) == pytest.approx(schedule.relative_conversions * 2100)


class TestSamplingSchedule:
    def test_invalid_level(self):
        with pytest.raises(ConfigError):
            SamplingSchedule({"conv1": 3})

    def test_save_load(self, tmp_path):
        schedule = SamplingSchedule({"conv1": 8, "fc1": 2}, 1.2)
        loaded = SamplingSchedule.load(schedule.save(tmp_path / "schedule.json"))
        assert loaded.samples == schedule.samples and loaded.relative_conversions == 1.2

    def test_load_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            SamplingSchedule.load(tmp_path / "none.json")
        bad = tmp_path / "bad.json"
        bad.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            SamplingSchedule.load(bad)

    def test_apply(self, digits_graph):
        samples = {layer.name: 1 for layer in digits_graph.stox_layers()}
        samples["conv1"] = 8
        SamplingSchedule(samples).apply(digits_graph)
        assert digits_graph.layer("conv1").spec.n_samples == 8

    def test_conversions_need_every_layer(self):
        with pytest.raises(ConfigError):
            SamplingSchedule({"a": 1}).conversions({"a": 10, "b": 10})
