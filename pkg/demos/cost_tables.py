"""
Cost tables
===========

Builds the whole builtin model family and prints the analytic cost table:
MAC buckets by precision, ACE, CPU64, and model size, followed by the
elementwise ADD/MUL breakdown of the 1.0x variant and the energy-metric
correlations.
"""

from fractions import Fraction

from pokebnn.builders import build_pokebnn, build_resnet50
from pokebnn.cost import (
    analyze_graph,
    energy_correlation,
    render_elementwise,
    render_report,
)
from pokebnn.graphir import DType

reports = []
for mult in ("0.5", "0.75", "1.0", "1.25", "1.4", "1.5", "1.75", "2.0"):
    reports.append(analyze_graph(build_pokebnn(Fraction(mult))))
reports.append(analyze_graph(build_resnet50(DType.BF16)))
reports.append(analyze_graph(build_resnet50(DType.FP32), fp32_as_bf16=True))

print(render_report(reports, fmt="table"))

# The binary bucket grows quadratically with the channel multiplier while
# the 8-bit stem stays constant, which is exactly why the stem was rebuilt
# around a 4x4 stride-4 convolution in the first place.
one_x = analyze_graph(build_pokebnn(1), elementwise=True)
print()
print("Elementwise operations of pokebnn-1.0x (real-valued layers only):")
print(render_elementwise(one_x.elementwise))
print(f"Estimated elementwise ACE with fusion: {one_x.elementwise_ace / 1e9:.2f}e9")

print()
print("Correlation of cost metrics against ADD+MUL energy:")
for metric in ("ace", "cpu64"):
    for node in ("7nm", "45nm"):
        r = energy_correlation(metric=metric, node=node)
        print(f"  {metric:6} vs {node:4} energy: {r:+.3f}")
