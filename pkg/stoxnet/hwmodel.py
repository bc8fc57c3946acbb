"""Analytic energy / latency / area model of a weight-stationary crossbar tile.

Each mapped layer is charged for DAC row drives, crossbar cell accesses,
partial-sum conversions and shift-and-add. Latency follows a three-stage
pipeline (drive, convert, shift-and-add) whose stage length is the slowest
stage; an ADC shared by a group of columns reads them out one after another,
while MTJ converters sit on every column and convert in parallel.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, CostModelError
from .quantization import MAX_SAMPLES, QuantSpec, subarray_count

logger = logging.getLogger(__name__)

DEFAULT_DATABASE = Path(__file__).parent / "data" / "components.json"
CONVERTERS = ("adc_fp", "adc_sparse", "mtj")
METRICS = ("energy_pj", "latency_ns", "area_um2", "edp")
PIPELINE_FILL = 2  # stages after the drive stage


@dataclass(frozen=True)
class ComponentCost:
    name: str
    energy_per_action: float
    area_per_instance: float
    latency_per_action: float = 0.0
    bits: int | None = None

    def __post_init__(self):
        for attr in ("energy_per_action", "area_per_instance", "latency_per_action"):
            value = getattr(self, attr)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value >= 0):
                raise ConfigError(f"component '{self.name}': {attr} must be a finite number >= 0, got {value!r}")


class CostDatabase:
    """Component costs by name, with an exponential ADC fit between tabulated resolutions."""

    def __init__(self, components: list[ComponentCost]):
        self.components: dict[str, ComponentCost] = {}
        for comp in components:
            if comp.name in self.components:
                raise ConfigError(f"duplicate component '{comp.name}' in cost database")
            self.components[comp.name] = comp

    @classmethod
    def load(cls, path=None) -> "CostDatabase":
        path = Path(path) if path else DEFAULT_DATABASE
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"cost database not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"cost database {path} is not valid JSON: {e}") from None
        try:
            return cls([ComponentCost(**entry) for entry in data["components"]])
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed cost database {path}: {e}") from None

    @classmethod
    def default(cls) -> "CostDatabase":
        return cls.load(DEFAULT_DATABASE)

    def __contains__(self, name: str) -> bool:
        return name in self.components

    def get(self, name: str) -> ComponentCost:
        if name not in self.components:
            raise CostModelError(f"component '{name}' missing from cost database")
        return self.components[name]

    def cell(self, bits_per_cell: int) -> ComponentCost:
        return self.get(f"xbar_cell_{bits_per_cell}b")

    def adc(self, bits: int) -> ComponentCost:
        """ADC cost at ``bits`` resolution.

        Tabulated resolutions are returned as-is; others scale exponentially in
        bits through the full-precision and sparse entries.
        """
        fp, sparse = self.get("adc_fp"), self.get("adc_sparse")
        for comp in (fp, sparse):
            if comp.bits == bits:
                return comp
        if fp.bits is None or sparse.bits is None or fp.bits == sparse.bits:
            raise CostModelError("adc_fp and adc_sparse need distinct 'bits' to scale ADC cost")
        t = (bits - fp.bits) / (fp.bits - sparse.bits)

        def scale(attr):
            hi, lo = getattr(fp, attr), getattr(sparse, attr)
            return hi * (hi / lo) ** t if lo > 0 else hi

        return ComponentCost(
            f"adc_{bits}b", scale("energy_per_action"), scale("area_per_instance"), scale("latency_per_action"), bits
        )


def adc_resolution(n_rows: int, input_bits: int, slice_bits: int) -> int:
    """Bits needed to read a partial sum losslessly: log2(rows) + I + W - 2."""
    if n_rows < 2 or n_rows & (n_rows - 1):
        raise ConfigError(f"n_rows must be a power of two >= 2, got {n_rows}")
    if input_bits < 1 or slice_bits < 1:
        raise ConfigError("input_bits and slice_bits must be >= 1")
    return int(math.log2(n_rows)) + input_bits + slice_bits - 2


@dataclass(frozen=True)
class ArchConfig:
    """Tile organisation for one design variant."""

    converter: str = "adc_fp"
    r_arr: int = 256
    columns: int = 128
    # columns per converter; defaults to every column of the array for ADCs
    sharing: int | None = None
    converter_latency: float | None = None
    input_activity: float = 0.2
    include_cell_area: bool = False
    cells_per_weight: int = 2

    def __post_init__(self):
        if self.converter not in CONVERTERS:
            raise ConfigError(f"converter must be one of {CONVERTERS}, got {self.converter!r}")
        if self.r_arr < 2 or self.r_arr & (self.r_arr - 1):
            raise ConfigError(f"r_arr must be a power of two, got {self.r_arr}")
        if self.columns < 1:
            raise ConfigError(f"columns must be >= 1, got {self.columns}")
        if self.sharing is None:
            object.__setattr__(self, "sharing", 1 if self.converter == "mtj" else self.columns)
        if self.sharing < 1:
            raise ConfigError(f"sharing must be >= 1, got {self.sharing}")
        if self.converter == "mtj" and self.sharing != 1:
            raise ConfigError("MTJ converters sit on every column; sharing must be 1")
        if not 0.0 <= self.input_activity <= 1.0:
            raise ConfigError(f"input_activity must be in [0, 1], got {self.input_activity}")

    @property
    def converters_per_array(self) -> int:
        return -(-self.columns // self.sharing)

    def adc_bits(self, spec: QuantSpec) -> int:
        bits = adc_resolution(self.r_arr, 1, spec.bits_per_slice)
        return bits - 1 if self.converter == "adc_sparse" else bits

    def converter_cost(self, spec: QuantSpec, costs: CostDatabase) -> ComponentCost:
        if self.converter == "mtj":
            return costs.get("mtj_converter")
        return costs.adc(self.adc_bits(spec))

    @classmethod
    def from_dict(cls, data: dict) -> "ArchConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown ArchConfig keys: {', '.join(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class LayerShape:
    """A crossbar-mapped layer: fan-in rows, output channels, output pixels per image."""

    name: str
    fan_in: int
    c_out: int
    pixels: int = 1


@dataclass
class CostReport:
    layer: str
    energy: dict[str, float]
    area: dict[str, float]
    stages: dict[str, float]
    latency: float
    conversions: int
    n_samples: int = 1

    @property
    def energy_total(self) -> float:
        return sum(self.energy.values())

    @property
    def area_total(self) -> float:
        return sum(self.area.values())

    @property
    def edp(self) -> float:
        return self.energy_total * self.latency

    def metrics(self) -> dict[str, float]:
        return {
            "energy_pj": self.energy_total,
            "latency_ns": self.latency,
            "area_um2": self.area_total,
            "edp": self.edp,
        }


@dataclass
class NetworkCost:
    variant: str
    layers: list[CostReport] = field(default_factory=list)

    @property
    def energy_total(self) -> float:
        return sum(r.energy_total for r in self.layers)

    @property
    def latency(self) -> float:
        return sum(r.latency for r in self.layers)

    @property
    def area_total(self) -> float:
        return sum(r.area_total for r in self.layers)

    @property
    def edp(self) -> float:
        return self.energy_total * self.latency

    @property
    def conversions(self) -> int:
        return sum(r.conversions for r in self.layers)

    def energy_breakdown(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r in self.layers:
            for comp, value in r.energy.items():
                out[comp] = out.get(comp, 0.0) + value
        return out

    def metrics(self) -> dict[str, float]:
        return {
            "energy_pj": self.energy_total,
            "latency_ns": self.latency,
            "area_um2": self.area_total,
            "edp": self.edp,
        }


def layer_cost(
    shape: LayerShape,
    spec: QuantSpec,
    arch: ArchConfig,
    costs: CostDatabase,
    n_samples: int | None = None,
) -> CostReport:
    """Cost of one inference of one layer under ``arch``."""
    if spec.r_arr > arch.r_arr:
        raise ConfigError(f"layer '{shape.name}': subarray rows {spec.r_arr} exceed array rows {arch.r_arr}")
    samples = n_samples if n_samples is not None else spec.n_samples
    if not 1 <= samples <= MAX_SAMPLES:
        raise ConfigError(f"layer '{shape.name}': n_samples must be in [1, {MAX_SAMPLES}], got {samples}")
    if arch.converter != "mtj":
        samples = 1

    n_arrs = subarray_count(shape.fan_in, spec.r_arr)
    columns = shape.c_out * spec.w_slices
    arrays = n_arrs * -(-columns // arch.columns)
    steps = shape.pixels * spec.a_streams
    conversions = steps * n_arrs * columns * samples
    act = arch.input_activity
    dup = arch.cells_per_weight

    dac = costs.get("dac")
    cell = costs.cell(spec.bits_per_slice)
    conv = arch.converter_cost(spec, costs)
    sa = costs.get("shift_add")

    energy = {
        "dac": steps * shape.fan_in * dup * act * dac.energy_per_action,
        "xbar": steps * shape.fan_in * columns * dup * act * cell.energy_per_action,
        "converter": conversions * conv.energy_per_action,
        "shift_add": conversions * sa.energy_per_action,
    }

    conv_latency = arch.converter_latency if arch.converter_latency is not None else conv.latency_per_action
    if arch.converter == "mtj":
        convert_stage = conv_latency * samples
    else:
        convert_stage = conv_latency * min(arch.sharing, arch.columns)
    stages = {"dac": dac.latency_per_action, "converter": convert_stage, "shift_add": sa.latency_per_action}
    latency = (steps + PIPELINE_FILL) * max(stages.values())

    area = {
        "dac": arrays * arch.r_arr * dup * dac.area_per_instance,
        "converter": arrays * arch.converters_per_array * conv.area_per_instance,
        "shift_add": arrays * sa.area_per_instance,
    }
    if arch.include_cell_area:
        area["xbar"] = arrays * arch.r_arr * arch.columns * dup * cell.area_per_instance

    return CostReport(shape.name, energy, area, stages, latency, conversions, samples)


@dataclass(frozen=True)
class Variant:
    """A named design point: architecture, optional per-layer sample counts and
    per-layer architecture overrides (an ADC first layer, for instance)."""

    name: str
    arch: ArchConfig
    samples: dict[str, int] | None = None
    layer_arch: dict[str, ArchConfig] = field(default_factory=dict)

    def arch_for(self, layer: str) -> ArchConfig:
        return self.layer_arch.get(layer, self.arch)


def network_cost(
    shapes: list[LayerShape],
    spec: QuantSpec | dict[str, QuantSpec],
    variant: Variant,
    costs: CostDatabase,
) -> NetworkCost:
    """Layers run back to back, so latency adds up; every layer keeps its own arrays."""
    result = NetworkCost(variant.name)
    for shape in shapes:
        layer_spec = spec[shape.name] if isinstance(spec, dict) else spec
        samples = None
        if variant.samples is not None:
            if shape.name not in variant.samples:
                raise ConfigError(f"variant '{variant.name}' has no sample count for layer '{shape.name}'")
            samples = variant.samples[shape.name]
        result.layers.append(layer_cost(shape, layer_spec, variant.arch_for(shape.name), costs, samples))
    logger.debug(
        "%s: %.4g pJ, %.4g ns, %.4g um^2", variant.name, result.energy_total, result.latency, result.area_total
    )
    return result


def first_layer_schedule(shapes: list[LayerShape], n_samples: int, first: int = 8) -> dict[str, int]:
    """Quantized-first-layer convention: the first layer converts with ``first`` samples."""
    return {s.name: (first if i == 0 else n_samples) for i, s in enumerate(shapes)}


def standard_variants(
    shapes: list[LayerShape],
    base: ArchConfig | None = None,
    samples=(1, 4, 8),
    schedule: dict[str, int] | None = None,
    first_layer_samples: int = 8,
    hpf_samples=(),
) -> list[Variant]:
    """HPFA, SFA, StoX-n for each n, StoX-n-HPF for each n in ``hpf_samples``
    (full-precision ADC on the first layer, MTJ converters elsewhere) and Mix
    when a schedule is given."""
    base = base or ArchConfig()
    common = dict(r_arr=base.r_arr, columns=base.columns, input_activity=base.input_activity,
                  include_cell_area=base.include_cell_area, cells_per_weight=base.cells_per_weight)
    adc_sharing = base.sharing if base.converter != "mtj" else None
    hpfa = ArchConfig(converter="adc_fp", sharing=adc_sharing, **common)
    variants = [
        Variant("HPFA", hpfa),
        Variant("SFA", ArchConfig(converter="adc_sparse", sharing=adc_sharing, **common)),
    ]
    mtj = ArchConfig(converter="mtj", **common)
    for n in samples:
        variants.append(Variant(f"StoX-{n}", mtj, first_layer_schedule(shapes, n, first_layer_samples)))
    for n in hpf_samples:
        variants.append(Variant(f"StoX-{n}-HPF", mtj, {s.name: n for s in shapes}, {shapes[0].name: hpfa}))
    if schedule is not None:
        variants.append(Variant("Mix", mtj, dict(schedule)))
    return variants


def select_variants(variants: list[Variant], names) -> list[Variant]:
    by_name = {v.name: v for v in variants}
    unknown = [n for n in names if n not in by_name]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; available: {list(by_name)}")
    return [by_name[n] for n in names]


def compare_variants(
    shapes: list[LayerShape],
    spec: QuantSpec | dict[str, QuantSpec],
    variants: list[Variant],
    costs: CostDatabase | None = None,
    baseline: Variant | None = None,
) -> tuple[list[NetworkCost], list[dict]]:
    """Cost every variant and normalize each metric to the HPFA baseline.

    Returns the network costs and report rows with keys (variant, layer, metric,
    absolute, normalized_to_HPFA); one row block per layer plus a ``total`` block.
    """
    costs = costs or CostDatabase.default()
    if baseline is None:
        baseline = next((v for v in variants if v.name == "HPFA"), None)
        if baseline is None:
            first = variants[0].arch if variants else ArchConfig()
            baseline = standard_variants(shapes, first)[0]
    reference = network_cost(shapes, spec, baseline, costs)
    ref_layers = {r.layer: r.metrics() for r in reference.layers}
    ref_total = reference.metrics()

    results, rows = [], []
    for variant in variants:
        net = network_cost(shapes, spec, variant, costs)
        results.append(net)
        blocks = [(r.layer, r.metrics(), ref_layers[r.layer]) for r in net.layers]
        blocks.append(("total", net.metrics(), ref_total))
        for layer, metrics, ref in blocks:
            for metric in METRICS:
                value = metrics[metric]
                rows.append({
                    "variant": variant.name,
                    "layer": layer,
                    "metric": metric,
                    "absolute": value,
                    "normalized_to_HPFA": value / ref[metric] if ref[metric] else float("nan"),
                })
        logger.info(
            "%-6s energy %.4g pJ  latency %.4g ns  area %.4g um^2  EDP %.4g",
            variant.name, net.energy_total, net.latency, net.area_total, net.edp,
        )
    return results, rows


def improvement(reference: NetworkCost, other: NetworkCost) -> dict[str, float]:
    """Reference metric over ``other`` metric, i.e. how many times better ``other`` is."""
    ref, new = reference.metrics(), other.metrics()
    return {m: ref[m] / new[m] for m in METRICS}


def write_report_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["variant", "layer", "metric", "absolute", "normalized_to_HPFA"])
        for row in rows:
            writer.writerow([
                row["variant"], row["layer"], row["metric"],
                format(row["absolute"], ".10g"), format(row["normalized_to_HPFA"], ".10g"),
            ])
