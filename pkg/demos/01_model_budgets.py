"""
Parameter and MAC budgets of the presets
=========================================

Build every preset, count its parameters and multiply-accumulates, and
compare them with the published budgets.
"""

from vitae.analysis import model_report
from vitae.model import build, count_flops, count_params

# The report builds each model once and prints one row per preset.
report = model_report()
print(report.text)

# The breakdown groups parameters by cell, which shows where the weight lives.
m = build("vitae-t")
counts = count_params(m)
for name, n in sorted(counts.breakdown.items(), key=lambda kv: -kv[1])[:6]:
    print(f"{name:<24} {n / 1e6:6.2f}M")

# ``macs`` is what the code executes. ``macs_table`` charges the first
# reduction cell as linear attention, the convention of the reference table.
rep = count_flops(m)
print(f"executed {rep.gmacs:.2f} GMACs, table convention {rep.gmacs_table:.2f} GMACs")
print(rep.caveat)
