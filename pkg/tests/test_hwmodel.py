import json

import numpy as np
import pytest

from stoxnet.crossbar import ConversionCounter, mvm_forward
from stoxnet.errors import ConfigError, CostModelError
from stoxnet.hwmodel import (
    ArchConfig,
    ComponentCost,
    CostDatabase,
    LayerShape,
    Variant,
    adc_resolution,
    compare_variants,
    improvement,
    layer_cost,
    network_cost,
    select_variants,
    standard_variants,
    write_report_csv,
)
from stoxnet.models import resnet20_shapes
from stoxnet.quantization import QuantSpec
from stoxnet.rng import ConversionKey

SPEC = QuantSpec.from_label("4w4a4b_s", r_arr=256)


@pytest.fixture(scope="module")
def costs():
    return CostDatabase.default()


@pytest.fixture(scope="module")
def resnet20_costs(costs):
    shapes = resnet20_shapes()
    variants = {v.name: v for v in standard_variants(shapes, ArchConfig(r_arr=256), hpf_samples=(1,))}
    return {name: network_cost(shapes, SPEC, v, costs) for name, v in variants.items()}


def within_factor(value, target, factor=2.0):
    return target / factor <= value <= target * factor


class TestComponentDatabase:
    def test_per_conversion_energy_ratio(self, costs):
        ratio = costs.get("adc_fp").energy_per_action / costs.get("mtj_converter").energy_per_action
        assert ratio == pytest.approx(375.6, abs=0.05)

    def test_per_instance_area_ratio(self, costs):
        ratio = costs.get("adc_fp").area_per_instance / costs.get("mtj_converter").area_per_instance
        assert ratio == pytest.approx(4.05e5, rel=1e-3)

    def test_tabulated_adc_returned_as_is(self, costs):
        assert costs.adc(11) is costs.get("adc_fp")
        assert costs.adc(10) is costs.get("adc_sparse")

    def test_adc_scales_exponentially(self, costs):
        fp, sparse = costs.get("adc_fp"), costs.get("adc_sparse")
        assert costs.adc(12).energy_per_action == pytest.approx(fp.energy_per_action ** 2 / sparse.energy_per_action)
        assert costs.adc(9).energy_per_action < sparse.energy_per_action

    def test_missing_component(self):
        db = CostDatabase([ComponentCost("dac", 0.03, 0.1)])
        with pytest.raises(CostModelError, match="mtj_converter") as info:
            db.get("mtj_converter")
        assert info.value.exit_code == 2
        assert isinstance(info.value, KeyError)

    def test_layer_cost_reports_missing_component(self, costs):
        partial = CostDatabase([c for name, c in costs.components.items() if name != "shift_add"])
        with pytest.raises(CostModelError, match="shift_add"):
            layer_cost(LayerShape("l", 64, 8), SPEC, ArchConfig(converter="mtj"), partial)

    def test_negative_cost_rejected(self):
        with pytest.raises(ConfigError):
            ComponentCost("adc", -1.0, 1.0)

    def test_duplicate_component_rejected(self):
        with pytest.raises(ConfigError):
            CostDatabase([ComponentCost("dac", 1.0, 1.0), ComponentCost("dac", 2.0, 1.0)])

    def test_load_custom_database(self, tmp_path, costs):
        entries = [vars(c) for c in costs.components.values()]
        entries = [{**e, "energy_per_action": e["energy_per_action"] * 2} if e["name"] == "dac" else e for e in entries]
        path = tmp_path / "db.json"
        path.write_text(json.dumps({"components": entries}))
        assert CostDatabase.load(path).get("dac").energy_per_action == pytest.approx(0.0598)

    def test_load_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            CostDatabase.load(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text('{"components": [{"name": "dac"}]}')
        with pytest.raises(ConfigError):
            CostDatabase.load(bad)


class TestArchConfig:
    def test_adc_resolution(self):
        assert adc_resolution(256, 1, 4) == 11
        assert adc_resolution(128, 1, 1) == 7
        assert adc_resolution(128, 1, 2) == 8
        assert adc_resolution(2, 1, 1) == 1

    def test_adc_resolution_needs_power_of_two(self):
        with pytest.raises(ConfigError):
            adc_resolution(100, 1, 4)

    def test_sharing_defaults(self):
        assert ArchConfig().sharing == 128
        assert ArchConfig(converter="mtj").sharing == 1

    def test_mtj_cannot_share(self):
        with pytest.raises(ConfigError):
            ArchConfig(converter="mtj", sharing=2)

    def test_sparse_adc_drops_a_bit(self):
        assert ArchConfig(converter="adc_sparse").adc_bits(SPEC) == ArchConfig().adc_bits(SPEC) - 1

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ConfigError, match="tiles"):
            ArchConfig.from_dict({"tiles": 4})


class TestLayerCost:
    def test_conversion_count_matches_crossbar_plan(self, costs):
        report = layer_cost(LayerShape("conv", 576, 64), SPEC, ArchConfig(converter="mtj"), costs)
        assert report.conversions == 768

    @pytest.mark.parametrize(
        "label, fan_in, c_out, pixels, r_arr, n",
        [
            ("4w4a4b_s", 40, 5, 3, 16, 2),
            ("4w4a2b_s", 100, 7, 4, 32, 8),
            ("4w4a4b_s", 27, 16, 2, 128, 4),
            ("1w1a1b_s", 300, 3, 5, 64, 1),
        ],
    )
    def test_conversions_match_instrumented_forward(self, costs, label, fan_in, c_out, pixels, r_arr, n):
        spec = QuantSpec.from_label(label, r_arr=r_arr, n_samples=n)
        rng = np.random.default_rng(fan_in)
        counter = ConversionCounter()
        mvm_forward(rng.uniform(-1, 1, (pixels, fan_in)), rng.normal(size=(fan_in, c_out)), spec,
                    key=ConversionKey(0, 0, 0), counter=counter)
        report = layer_cost(LayerShape("l", fan_in, c_out, pixels), spec, ArchConfig(converter="mtj"), costs)
        assert report.conversions == counter.total

    def test_array_energy_scales_with_input_activity(self, costs):
        shape = LayerShape("conv", 576, 64, pixels=16)
        low = layer_cost(shape, SPEC, ArchConfig(converter="mtj", input_activity=0.2), costs)
        high = layer_cost(shape, SPEC, ArchConfig(converter="mtj", input_activity=0.5), costs)
        assert high.energy["dac"] == pytest.approx(2.5 * low.energy["dac"])
        assert high.energy["xbar"] == pytest.approx(2.5 * low.energy["xbar"])
        assert high.energy["converter"] == low.energy["converter"]

    def test_samples_multiply_mtj_conversions(self, costs):
        shape = LayerShape("conv", 576, 64, pixels=16)
        one = layer_cost(shape, SPEC, ArchConfig(converter="mtj"), costs, n_samples=1)
        four = layer_cost(shape, SPEC, ArchConfig(converter="mtj"), costs, n_samples=4)
        assert four.conversions == 4 * one.conversions
        assert four.energy["converter"] == pytest.approx(4 * one.energy["converter"])
        assert four.stages["converter"] == pytest.approx(4 * 1.8506)

    def test_adc_ignores_samples(self, costs):
        report = layer_cost(LayerShape("conv", 576, 64), SPEC, ArchConfig(), costs, n_samples=8)
        assert report.n_samples == 1 and report.conversions == 768

    def test_stage_reduction(self, costs):
        shape = LayerShape("conv", 576, 64)
        assert layer_cost(shape, SPEC, ArchConfig(), costs).stages["converter"] == pytest.approx(128.0)
        assert layer_cost(shape, SPEC, ArchConfig(converter="mtj"), costs).stages["converter"] == pytest.approx(1.8506)

    def test_latency_includes_pipeline_fill(self, costs):
        report = layer_cost(LayerShape("fc", 64, 10), SPEC, ArchConfig(), costs)
        assert report.latency == pytest.approx((4 + 2) * 128.0)

    def test_invalid_samples(self, costs):
        with pytest.raises(ConfigError, match="n_samples"):
            layer_cost(LayerShape("conv", 64, 8), SPEC, ArchConfig(converter="mtj"), costs, n_samples=9)

    def test_subarray_larger_than_array(self, costs):
        with pytest.raises(ConfigError):
            layer_cost(LayerShape("conv", 64, 8), SPEC.replace(r_arr=512), ArchConfig(r_arr=256), costs)

    def test_cell_area_optional(self, costs):
        shape = LayerShape("conv", 64, 8)
        assert "xbar" not in layer_cost(shape, SPEC, ArchConfig(), costs).area
        assert layer_cost(shape, SPEC, ArchConfig(include_cell_area=True), costs).area["xbar"] > 0


class TestResNet20Comparison:
    def test_array_count(self, resnet20_costs, costs):
        converter_area = sum(r.area["converter"] for r in resnet20_costs["HPFA"].layers)
        assert converter_area == pytest.approx(36 * costs.get("adc_fp").area_per_instance)

    def test_stox1_vs_hpfa(self, resnet20_costs):
        gains = improvement(resnet20_costs["HPFA"], resnet20_costs["StoX-1"])
        assert within_factor(gains["energy_pj"], 22)
        assert within_factor(gains["latency_ns"], 30)
        assert within_factor(gains["area_um2"], 142)
        assert within_factor(gains["edp"], 666)
        assert gains["latency_ns"] == pytest.approx(38.68, rel=1e-3)

    def test_stox1_vs_sfa_edp(self, resnet20_costs):
        assert within_factor(improvement(resnet20_costs["SFA"], resnet20_costs["StoX-1"])["edp"], 111)

    def test_more_samples_cost_more(self, resnet20_costs):
        e = [resnet20_costs[f"StoX-{n}"].energy_total for n in (1, 4, 8)]
        t = [resnet20_costs[f"StoX-{n}"].latency for n in (1, 4, 8)]
        assert e == sorted(e) and t == sorted(t)

    def test_first_layer_uses_eight_samples(self, resnet20_costs):
        layers = resnet20_costs["StoX-1"].layers
        assert layers[0].n_samples == 8 and all(r.n_samples == 1 for r in layers[1:])

    def test_hpf_lies_between_stox_and_hpfa(self, resnet20_costs):
        stox, hpf, hpfa = (resnet20_costs[n].metrics() for n in ("StoX-1", "StoX-1-HPF", "HPFA"))
        for metric in hpf:
            assert stox[metric] < hpf[metric] < hpfa[metric], metric

    def test_hpf_first_layer_is_adc(self, resnet20_costs):
        hpf, hpfa = resnet20_costs["StoX-1-HPF"].layers, resnet20_costs["HPFA"].layers
        assert hpf[0].energy == hpfa[0].energy and hpf[0].stages["converter"] == pytest.approx(128.0)
        assert all(r.n_samples == 1 and r.stages["converter"] == pytest.approx(1.8506) for r in hpf[1:])

    def test_energy_breakdown_sums(self, resnet20_costs):
        net = resnet20_costs["StoX-4"]
        assert sum(net.energy_breakdown().values()) == pytest.approx(net.energy_total)


class TestVariants:
    def test_mix_needs_schedule(self):
        shapes = resnet20_shapes()
        names = [v.name for v in standard_variants(shapes, samples=(1,))]
        assert names == ["HPFA", "SFA", "StoX-1"]
        schedule = {s.name: 2 for s in shapes}
        assert standard_variants(shapes, samples=(), schedule=schedule)[-1].name == "Mix"

    def test_hpf_variants(self):
        shapes = resnet20_shapes()
        names = [v.name for v in standard_variants(shapes, samples=(1,), hpf_samples=(1, 4))]
        assert names == ["HPFA", "SFA", "StoX-1", "StoX-1-HPF", "StoX-4-HPF"]
        hpf = select_variants(standard_variants(shapes, samples=(), hpf_samples=(4,)), ["StoX-4-HPF"])[0]
        assert hpf.arch_for("conv1").converter == "adc_fp"
        assert all(hpf.arch_for(s.name).converter == "mtj" for s in shapes[1:])
        assert set(hpf.samples.values()) == {4}

    def test_missing_layer_in_samples(self, costs):
        variant = Variant("partial", ArchConfig(converter="mtj"), {"conv1": 1})
        with pytest.raises(ConfigError, match="s1b1a"):
            network_cost(resnet20_shapes(), SPEC, variant, costs)

    def test_select_unknown(self):
        with pytest.raises(ConfigError):
            select_variants(standard_variants(resnet20_shapes()), ["HPFA", "Magic"])

    def test_compare_rows(self, costs, tmp_path):
        shapes = resnet20_shapes()
        variants = standard_variants(shapes)
        results, rows = compare_variants(shapes, SPEC, variants, costs)
        assert len(results) == 5
        assert len(rows) == 5 * (len(shapes) + 1) * 4
        totals = [r for r in rows if r["variant"] == "HPFA" and r["layer"] == "total"]
        assert [r["normalized_to_HPFA"] for r in totals] == [1.0] * 4

        path = tmp_path / "hw.csv"
        write_report_csv(path, rows)
        lines = path.read_text().splitlines()
        assert lines[0] == "variant,layer,metric,absolute,normalized_to_HPFA"
        assert len(lines) == len(rows) + 1

    def test_per_layer_specs(self, costs):
        shapes = [LayerShape("a", 64, 8), LayerShape("b", 64, 8)]
        specs = {"a": SPEC, "b": SPEC.replace(w_bits=8, bits_per_slice=4)}
        net = network_cost(shapes, specs, Variant("HPFA", ArchConfig()), costs)
        assert net.layers[1].conversions == 2 * net.layers[0].conversions
