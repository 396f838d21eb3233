"""Reference values for the air-traffic example: kernel table, mode vectors, jump rates."""
import sympy

d3, d4, d5, d6 = sympy.symbols("delta3 delta4 delta5 delta6", positive=True)

# Transition measure of the example for jumps away from the boundary:
# (source, target) -> probability.
TABLE_SPONTANEOUS = {
    ("V1", "V2"): d4 / (d4 + d6), ("V1", "V4"): d6 / (d4 + d6),
    ("V2", "V3"): d6 / (d3 + d6), ("V2", "V1"): d3 / (d3 + d6),
    ("V3", "V4"): d3 / (d3 + d5), ("V3", "V2"): d5 / (d3 + d5),
    ("V4", "V3"): d4 / (d4 + d5), ("V4", "V1"): d5 / (d4 + d5),
    ("V5", "V6"): d4 / (d4 + d6), ("V5", "V8"): d6 / (d4 + d6),
    ("V6", "V7"): d6 / (d3 + d6), ("V6", "V5"): d3 / (d3 + d6),
    ("V7", "V8"): d3 / (d3 + d5), ("V7", "V6"): d5 / (d3 + d5),
    ("V8", "V7"): d4 / (d4 + d5), ("V8", "V5"): d5 / (d4 + d5),
}
TABLE_BOUNDARY = {("V1", "V5"): 1, ("V2", "V6"): 1, ("V3", "V7"): 1, ("V4", "V8"): 1}
NAMES = [f"V{i}" for i in range(1, 9)]
DEFAULTS = {d3: 2, d4: 1, d5: sympy.Rational(3, 2), d6: sympy.Rational(1, 2)}
MODE_VECTORS = {
    "V1": (1, 0, 0, 1, 0, 1, 0), "V2": (0, 1, 1, 0, 0, 1, 0), "V3": (0, 1, 1, 0, 1, 0, 0),
    "V4": (0, 1, 0, 1, 1, 0, 0), "V5": (0, 0, 0, 1, 0, 1, 1), "V6": (0, 0, 1, 0, 0, 1, 1),
    "V7": (0, 0, 1, 0, 1, 0, 1), "V8": (0, 0, 0, 1, 1, 0, 1),
}
LAMBDA = {"V1": d4 + d6, "V5": d4 + d6, "V2": d3 + d6, "V6": d3 + d6,
          "V3": d3 + d5, "V7": d3 + d5, "V4": d4 + d5, "V8": d4 + d5}
